//! Finite-difference verification of every differentiable operation and
//! loss, plus an end-to-end check through the full network. Used by the
//! integration and acceptance suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{
    contrastive_loss, kl_smooth_loss, recon_loss, spatial_grad_sq, total_loss, ContrastiveAnchor,
    LossConfig, LossToggles, PairOutput,
};
use crate::ndtensor::{
    avg_pool3d, concat_channels, conv3d, global_avg_pool, gradcheck, instance_norm, linear, randn,
    upsample_trilinear, Tensor,
};
use crate::network::{reparam_sample, NetConfig, ProbabilisticField};
use crate::synthdata::{generate_dataset, SyntheticSpec};
use crate::trainer::{image_tensor, init_parameters};
use crate::warp::warp_trilinear;

const COORDS_PER_LEAF: usize = 10;

fn positive_randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = randn(shape, rng).to_vec().iter().map(|v| v.abs() + 0.5).collect();
    Tensor::parameter(shape, data).unwrap()
}

/// Random values bounded away from the leaky-relu kink at zero.
fn kink_free_randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = randn(shape, rng)
        .to_vec()
        .iter()
        .map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { *v })
        .collect();
    Tensor::parameter(shape, data).unwrap()
}

fn param_randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::parameter(shape, randn(shape, rng).to_vec()).unwrap()
}

type Check = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Result<(), String>>);

fn run_check<F>(leaves: Vec<Tensor>, forward: F, rng: &mut ChaCha8Rng) -> Result<(), String>
where
    F: Fn(&[Tensor]) -> crate::Result<Tensor>,
{
    let refs: Vec<&Tensor> = leaves.iter().collect();
    gradcheck::check(
        || forward(&leaves),
        &refs,
        COORDS_PER_LEAF,
        gradcheck::STEP,
        gradcheck::REL_TOL,
        rng,
    )
}

fn op_checks() -> Vec<Check> {
    let checks: Vec<Check> = vec![
        ("add", Box::new(|rng| {
            let a = param_randn(&[3, 4], rng);
            let b = param_randn(&[3, 4], rng);
            run_check(vec![a, b], |l| {
                let s = l[0].add(&l[1])?;
                s.mul(&l[0])?.sum().add(&s.mul(&s)?.sum())
            }, rng)
        })),
        ("sub_mul", Box::new(|rng| {
            let a = param_randn(&[3, 4], rng);
            let b = param_randn(&[3, 4], rng);
            run_check(vec![a, b], |l| {
                let d = l[0].sub(&l[1])?;
                d.mul(&l[0])?.sum().add(&d.mul(&d)?.sum())
            }, rng)
        })),
        ("div", Box::new(|rng| {
            let a = param_randn(&[3, 4], rng);
            let b = positive_randn(&[3, 4], rng);
            run_check(vec![a, b], |l| Ok(l[0].div(&l[1])?.sum()), rng)
        })),
        ("scalar_broadcast", Box::new(|rng| {
            let a = param_randn(&[2, 5], rng);
            let s = positive_randn(&[1], rng);
            run_check(vec![a, s], |l| {
                l[0].add(&l[1])?.mul(&l[1])?.div(&l[1])?.mul(&l[0])?.sum().exp().log()
            }, rng)
        })),
        ("exp_log_sqrt", Box::new(|rng| {
            let a = positive_randn(&[4, 4], rng);
            run_check(vec![a], |l| {
                let e = l[0].exp();
                let lg = l[0].log()?;
                let sq = l[0].sqrt()?;
                e.add(&lg)?.add(&sq)?.sum().mul_scalar(0.5).add_scalar(1.0).log()
            }, rng)
        })),
        ("neg_leaky_relu", Box::new(|rng| {
            let a = kink_free_randn(&[5, 5], rng);
            run_check(vec![a], |l| {
                Ok(l[0].leaky_relu(0.2).add(&l[0].neg().leaky_relu(0.01))?.mul(&l[0])?.sum())
            }, rng)
        })),
        ("reductions", Box::new(|rng| {
            let a = param_randn(&[3, 3, 3], rng);
            run_check(vec![a], |l| {
                l[0].sum().add(&l[0].mean())?.add(&l[0].l2_norm())
            }, rng)
        })),
        ("reshape_concat_gap", Box::new(|rng| {
            let a = param_randn(&[2, 2, 2, 2], rng);
            let b = param_randn(&[1, 2, 2, 2], rng);
            run_check(vec![a, b], |l| {
                let cat = concat_channels(&[l[0].clone(), l[1].clone()])?;
                let pooled = global_avg_pool(&cat)?;
                pooled.reshape(&[1, 3])?.mul(&pooled.reshape(&[1, 3])?)?.sum().add_scalar(1.0).log()
            }, rng)
        })),
        ("linear", Box::new(|rng| {
            let x = param_randn(&[3, 5], rng);
            let w = param_randn(&[4, 5], rng);
            let b = param_randn(&[4], rng);
            run_check(vec![x, w, b], |l| {
                let y = linear(&l[0], &l[1], &l[2])?;
                Ok(y.mul(&y)?.sum())
            }, rng)
        })),
        ("conv3d_s1p1", Box::new(|rng| {
            let x = param_randn(&[2, 4, 4, 4], rng);
            let w = param_randn(&[3, 2, 3, 3, 3], rng);
            let b = param_randn(&[3], rng);
            run_check(vec![x, w, b], |l| {
                let y = conv3d(&l[0], &l[1], &l[2], 1, 1)?;
                Ok(y.mul(&y)?.sum())
            }, rng)
        })),
        ("conv3d_s2p1", Box::new(|rng| {
            let x = param_randn(&[2, 5, 5, 5], rng);
            let w = param_randn(&[3, 2, 3, 3, 3], rng);
            let b = param_randn(&[3], rng);
            run_check(vec![x, w, b], |l| {
                let y = conv3d(&l[0], &l[1], &l[2], 2, 1)?;
                Ok(y.mul(&y)?.sum())
            }, rng)
        })),
        ("upsample_trilinear", Box::new(|rng| {
            let x = param_randn(&[2, 3, 3, 3], rng);
            run_check(vec![x], |l| {
                let y = upsample_trilinear(&l[0], 2)?;
                Ok(y.mul(&y)?.sum())
            }, rng)
        })),
        ("avg_pool3d", Box::new(|rng| {
            let x = param_randn(&[2, 4, 4, 4], rng);
            run_check(vec![x], |l| {
                let y = avg_pool3d(&l[0], 2)?;
                Ok(y.mul(&y)?.sum())
            }, rng)
        })),
        ("instance_norm", Box::new(|rng| {
            let x = param_randn(&[2, 3, 3, 3], rng);
            let scale = param_randn(&[2], rng);
            let shift = param_randn(&[2], rng);
            run_check(vec![x, scale, shift], |l| {
                let y = instance_norm(&l[0], &l[1], &l[2], 1e-5)?;
                Ok(y.mul(&y)?.sum())
            }, rng)
        })),
        ("warp_trilinear", Box::new(|rng| {
            let vol = param_randn(&[1, 5, 5, 5], rng);
            // Field values near 0.25 voxel keep every sample position away
            // from the interpolation-cell kinks at integer coordinates.
            let fdata: Vec<f64> = randn(&[3, 5, 5, 5], rng)
                .to_vec()
                .iter()
                .map(|v| 0.25 + 0.1 * v.tanh())
                .collect();
            let field = Tensor::parameter(&[3, 5, 5, 5], fdata).unwrap();
            run_check(vec![vol, field], |l| {
                let y = warp_trilinear(&l[0], &l[1])?;
                Ok(y.mul(&y)?.sum())
            }, rng)
        })),
        ("spatial_grad_sq", Box::new(|rng| {
            let x = param_randn(&[3, 3, 3, 3], rng);
            run_check(vec![x], |l| spatial_grad_sq(&l[0]), rng)
        })),
        ("reparam_sample", Box::new(|rng| {
            let mu = param_randn(&[3, 2, 2, 2], rng);
            let logvar = param_randn(&[3, 2, 2, 2], rng).mul_scalar(0.3);
            let logvar = Tensor::parameter(&[3, 2, 2, 2], logvar.to_vec()).unwrap();
            let noise = randn(&[3, 2, 2, 2], rng);
            run_check(vec![mu, logvar], move |l| {
                let f = ProbabilisticField {
                    mu: l[0].clone(),
                    logvar: l[1].clone(),
                };
                let z = reparam_sample(&f, &noise)?;
                Ok(z.mul(&z)?.sum())
            }, rng)
        })),
        ("recon_loss", Box::new(|rng| {
            let reference = param_randn(&[1, 3, 3, 3], rng);
            let warped = param_randn(&[1, 3, 3, 3], rng);
            run_check(vec![reference, warped], |l| recon_loss(&l[0], &l[1], 0.7), rng)
        })),
        ("kl_smooth_loss", Box::new(|rng| {
            let mu = param_randn(&[3, 2, 2, 2], rng);
            let logvar = Tensor::parameter(&[3, 2, 2, 2], randn(&[3, 2, 2, 2], rng).mul_scalar(0.4).to_vec()).unwrap();
            run_check(vec![mu, logvar], |l| {
                kl_smooth_loss(&ProbabilisticField {
                    mu: l[0].clone(),
                    logvar: l[1].clone(),
                })
            }, rng)
        })),
        ("contrastive_loss", Box::new(|rng| {
            let projections: Vec<Tensor> = (0..4).map(|_| param_randn(&[6], rng)).collect();
            run_check(projections, |l| {
                contrastive_loss(l, &[(0, 1), (2, 3)], 0.4)
            }, rng)
        })),
        ("total_loss", Box::new(|rng| {
            let reference = param_randn(&[1, 2, 2, 2], rng);
            let warped = param_randn(&[1, 2, 2, 2], rng);
            let mu = param_randn(&[3, 2, 2, 2], rng);
            let logvar = Tensor::parameter(&[3, 2, 2, 2], randn(&[3, 2, 2, 2], rng).mul_scalar(0.3).to_vec()).unwrap();
            let p0 = param_randn(&[5], rng);
            let p1 = param_randn(&[5], rng);
            let p2 = param_randn(&[5], rng);
            run_check(vec![reference, warped, mu, logvar, p0, p1, p2], |l| {
                let pairs = vec![PairOutput {
                    reference: l[0].clone(),
                    warped: l[1].clone(),
                    field: ProbabilisticField {
                        mu: l[2].clone(),
                        logvar: l[3].clone(),
                    },
                }];
                let projections = vec![l[4].clone(), l[5].clone(), l[6].clone()];
                let anchors = vec![ContrastiveAnchor {
                    anchor: 0,
                    positive: 1,
                    candidates: vec![1, 2],
                }];
                let cfg = LossConfig {
                    alpha: 0.8,
                    beta: 0.3,
                    sigma2: 0.5,
                    tau: 0.6,
                    ..LossConfig::default()
                };
                let (t, _) = total_loss(&pairs, &projections, &anchors, LossToggles::default(), &cfg)?;
                Ok(t)
            }, rng)
        })),
    ];
    checks
}

/// Finite-difference check of every differentiable op and loss at
/// rel. tol 1e-4. Returns the list of passed checks.
pub fn op_gradient_suite(seed: u64) -> Result<Vec<&'static str>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = Vec::new();
    for (name, check) in op_checks() {
        check(&mut rng).map_err(|e| format!("{name}: {e}"))?;
        passed.push(name);
    }
    Ok(passed)
}

/// Finite-difference check of the full training loss with respect to
/// randomly chosen network weights on a 16^3 input, rel. tol 1e-3.
pub fn end_to_end_gradient_check(seed: u64, weights_to_probe: usize) -> Result<(), String> {
    let spec = SyntheticSpec {
        shape: [16, 16, 16],
        radius_range: (2.0, 3.5),
        amplitude: 1.5,
        smooth_radius: 3.0,
        seed,
        ..SyntheticSpec::default()
    };
    let data = generate_dataset(&spec, 2).map_err(|e| e.to_string())?;
    let net = init_parameters(NetConfig::default(), seed).map_err(|e| e.to_string())?;
    // Bias the field mean away from the interpolation kinks at integer
    // sample coordinates.
    for (name, t) in net.parameters() {
        if name == "head.mu.bias" {
            t.update_data(|d| d.fill(0.25));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let xs: Vec<Tensor> = data.samples.iter().map(|s| image_tensor(&s.image)).collect();
    let y = image_tensor(&data.atlas_image);
    let noises: Vec<Tensor> = (0..xs.len()).map(|_| randn(&[3, 16, 16, 16], &mut rng)).collect();
    let cfg = LossConfig {
        sigma2: 0.05,
        ..LossConfig::default()
    };

    let forward = || -> crate::Result<Tensor> {
        let mut pairs = Vec::new();
        let mut proj_x = Vec::new();
        let mut proj_y = Vec::new();
        for (x, noise) in xs.iter().zip(&noises) {
            let fwd = net.forward_pair(x, &y)?;
            let z = reparam_sample(&fwd.field, noise)?;
            pairs.push(PairOutput {
                reference: y.clone(),
                warped: warp_trilinear(x, &z)?,
                field: fwd.field,
            });
            proj_x.push(fwd.proj_x.vector);
            proj_y.push(fwd.proj_y.vector);
        }
        let b = xs.len();
        let mut projections = proj_x;
        projections.extend(proj_y);
        let anchors: Vec<ContrastiveAnchor> = (0..b)
            .map(|k| ContrastiveAnchor {
                anchor: k,
                positive: b + k,
                candidates: (0..2 * b).filter(|&i| i != k).collect(),
            })
            .collect();
        let (t, _) = total_loss(&pairs, &projections, &anchors, LossToggles::default(), &cfg)?;
        Ok(t)
    };

    // Autodiff gradients once.
    let params = net.parameters();
    for (_, p) in &params {
        p.zero_grad();
    }
    let loss = forward().map_err(|e| e.to_string())?;
    loss.backward().map_err(|e| e.to_string())?;
    let grads: Vec<Option<Vec<f64>>> = params.iter().map(|(_, p)| p.grad()).collect();

    let h = 1e-4;
    for probe in 0..weights_to_probe {
        let pi = rng.gen_range(0..params.len());
        let (name, p) = &params[pi];
        let ci = rng.gen_range(0..p.numel());
        let x0 = p.data()[ci];
        p.update_data(|d| d[ci] = x0 + h);
        let plus = forward().map_err(|e| e.to_string())?.item();
        p.update_data(|d| d[ci] = x0 - h);
        let minus = forward().map_err(|e| e.to_string())?.item();
        p.update_data(|d| d[ci] = x0);
        let fd = (plus - minus) / (2.0 * h);
        let ad = grads[pi].as_ref().map(|g| g[ci]).unwrap_or(0.0);
        let rel = (ad - fd).abs() / fd.abs().max(1.0);
        if rel > 1e-3 {
            return Err(format!(
                "probe {probe} at {name}[{ci}]: autodiff {ad:e} vs finite-difference {fd:e} \
                 (relative error {rel:e})"
            ));
        }
    }
    for (_, p) in &params {
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_lists_every_op_family() {
        let passed = op_gradient_suite(11).unwrap();
        assert!(passed.len() >= 20, "only {} checks ran", passed.len());
    }
}
