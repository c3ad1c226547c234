//! The three training losses and their weighted total.
//!
//! Conventions: the reconstruction and smoothness terms sum over voxels
//! (the noise variance and the term weights absorb scale); the contrastive
//! term is a mean over anchors. Batch losses average over pairs.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ndtensor::{OpNode, Tensor};
use crate::network::ProbabilisticField;

/// Loss weights and constants.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Weight of the smoothness (KL) term.
    pub alpha: f64,
    /// Weight of the contrastive term.
    pub beta: f64,
    /// Reconstruction noise variance.
    pub sigma2: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Also anchor each pair at the reference side.
    pub symmetrize_contrast: bool,
    /// Optional spatial-gradient penalty on the field mean; 0 disables it.
    pub mu_grad_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 0.01,
            // Image-noise variance for unit-variance normalized volumes;
            // large values let the smoothness prior absorb the posterior
            // and suppress registration entirely.
            sigma2: 0.02,
            tau: 0.1,
            symmetrize_contrast: false,
            mu_grad_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.mu_grad_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.sigma2 <= 0.0 {
            return Err(Error::Config("sigma2 must be positive".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

/// Which terms participate in the total loss.
#[derive(Debug, Clone, Copy)]
pub struct LossToggles {
    pub recon: bool,
    pub smooth: bool,
    pub contrast: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            recon: true,
            smooth: true,
            contrast: true,
        }
    }
}

/// Sum of squared voxel differences scaled by `1/(2 sigma2)`.
pub fn recon_loss(reference: &Tensor, warped: &Tensor, sigma2: f64) -> Result<Tensor> {
    if sigma2 <= 0.0 {
        return Err(Error::Config("sigma2 must be positive".into()));
    }
    let diff = reference.sub(warped)?;
    Ok(diff.mul(&diff)?.sum().mul_scalar(1.0 / (2.0 * sigma2)))
}

/// Closed-form smoothness term: `1/2 * sum(var + mu^2 - logvar)` over all
/// voxel components. Per-component minimum is 1/2 at `mu=0, var=1`; the
/// `-k/2` constant of the textbook divergence is deliberately not
/// subtracted (it does not affect gradients).
pub fn kl_smooth_loss(field: &ProbabilisticField) -> Result<Tensor> {
    if field.logvar.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("kl_smooth_loss: non-finite logvar".into()));
    }
    let mu2 = field.mu.mul(&field.mu)?;
    let term = field.logvar.exp().add(&mu2)?.sub(&field.logvar)?;
    Ok(term.sum().mul_scalar(0.5))
}

/// Monte-Carlo divergence estimate used to cross-check [`kl_smooth_loss`].
#[derive(Debug, Clone, Copy)]
pub struct McKl {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Sample-average of `log q(z) - log p(z)` with `z ~ q` and a standard
/// normal prior. Agrees with `kl_smooth_loss - k/2` up to Monte-Carlo
/// noise (`k` = number of components).
pub fn kl_monte_carlo<R: Rng>(field: &ProbabilisticField, samples: usize, rng: &mut R) -> Result<McKl> {
    if samples == 0 {
        return Err(Error::Config("kl_monte_carlo needs at least one sample".into()));
    }
    let mu = field.mu.data();
    let logvar = field.logvar.data();
    let mut draws = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut g = 0.0;
        for (&m, &lv) in mu.iter().zip(logvar.iter()) {
            let eps: f64 = rng.sample(StandardNormal);
            let z = m + (0.5 * lv).exp() * eps;
            // log q - log p for one component; the 2*pi constants cancel.
            g += -0.5 * lv - 0.5 * eps * eps + 0.5 * z * z;
        }
        draws.push(g);
    }
    let n = samples as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let std_error = if samples > 1 {
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(McKl {
        value: mean,
        std_error,
        samples,
    })
}

/// One anchor of the contrastive loss: the positive must appear among the
/// candidates, the anchor itself must not.
#[derive(Debug, Clone)]
pub struct ContrastiveAnchor {
    pub anchor: usize,
    pub positive: usize,
    pub candidates: Vec<usize>,
}

fn cosine(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dot = u.mul(v)?.sum();
    let norms = u.l2_norm().mul(&v.l2_norm())?;
    dot.div(&norms)
}

/// Temperature-scaled cross-entropy over explicit candidate sets; mean
/// over anchors.
pub fn contrastive_loss_with_anchors(
    projections: &[Tensor],
    anchors: &[ContrastiveAnchor],
    tau: f64,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Config("tau must be positive".into()));
    }
    if projections.len() < 2 {
        return Err(Error::Config(format!(
            "contrastive loss needs at least 2 projections, got {}",
            projections.len()
        )));
    }
    if anchors.is_empty() {
        return Err(Error::Usage("contrastive loss with no anchors".into()));
    }
    let mut total: Option<Tensor> = None;
    for a in anchors {
        if a.anchor == a.positive {
            return Err(Error::Usage("anchor cannot be its own positive".into()));
        }
        if a.candidates.contains(&a.anchor) {
            return Err(Error::Usage("candidate set must exclude the anchor".into()));
        }
        if !a.candidates.contains(&a.positive) {
            return Err(Error::Usage("candidate set must contain the positive".into()));
        }
        let anchor = &projections[a.anchor];
        let scaled: Vec<Tensor> = a
            .candidates
            .iter()
            .map(|&i| Ok(cosine(anchor, &projections[i])?.mul_scalar(1.0 / tau)))
            .collect::<Result<_>>()?;
        // Log-sum-exp with a constant shift for stability; the shift
        // cancels in the gradient.
        let shift = scaled.iter().map(|s| s.item()).fold(f64::NEG_INFINITY, f64::max);
        let mut denom: Option<Tensor> = None;
        for s in &scaled {
            let e = s.add_scalar(-shift).exp();
            denom = Some(match denom {
                Some(d) => d.add(&e)?,
                None => e,
            });
        }
        let log_denom = denom.unwrap().log()?.add_scalar(shift);
        let pos_idx = a.candidates.iter().position(|&i| i == a.positive).unwrap();
        let loss_a = log_denom.sub(&scaled[pos_idx])?;
        total = Some(match total {
            Some(t) => t.add(&loss_a)?,
            None => loss_a,
        });
    }
    Ok(total.unwrap().mul_scalar(1.0 / anchors.len() as f64))
}

/// Contrastive loss where each anchor's denominator ranges over every
/// other projection (the positive included).
pub fn contrastive_loss(
    projections: &[Tensor],
    positive_pairs: &[(usize, usize)],
    tau: f64,
) -> Result<Tensor> {
    let anchors: Vec<ContrastiveAnchor> = positive_pairs
        .iter()
        .map(|&(anchor, positive)| ContrastiveAnchor {
            anchor,
            positive,
            candidates: (0..projections.len()).filter(|&i| i != anchor).collect(),
        })
        .collect();
    contrastive_loss_with_anchors(projections, &anchors, tau)
}

/// Sum of squared forward differences of a `[C,D,H,W]` tensor over the
/// three spatial axes (the optional penalty on the field mean).
pub fn spatial_grad_sq(field: &Tensor) -> Result<Tensor> {
    let sh = field.shape();
    if sh.len() != 4 {
        return Err(Error::Dimension(format!(
            "spatial_grad_sq expects [C,D,H,W], got {sh:?}"
        )));
    }
    let (c, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let x = field.data();
    let idx = |ch: usize, z: usize, y: usize, xx: usize| ((ch * d + z) * h + y) * w + xx;
    let mut acc = 0.0;
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[idx(ch, z, y, xx)];
                    if z + 1 < d {
                        let dv = x[idx(ch, z + 1, y, xx)] - v;
                        acc += dv * dv;
                    }
                    if y + 1 < h {
                        let dv = x[idx(ch, z, y + 1, xx)] - v;
                        acc += dv * dv;
                    }
                    if xx + 1 < w {
                        let dv = x[idx(ch, z, y, xx + 1)] - v;
                        acc += dv * dv;
                    }
                }
            }
        }
    }
    drop(x);
    Ok(Tensor::from_op(
        vec![1],
        vec![acc],
        Box::new(SpatialGradSqOp { field: field.clone() }),
    ))
}

struct SpatialGradSqOp {
    field: Tensor,
}

impl OpNode for SpatialGradSqOp {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.field.clone()]
    }

    fn backward(&self, _out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = out_grad[0];
        let sh = self.field.shape();
        let (c, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let x = self.field.data();
        let idx = |ch: usize, z: usize, y: usize, xx: usize| ((ch * d + z) * h + y) * w + xx;
        let mut grad = vec![0.0; x.len()];
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let i = idx(ch, z, y, xx);
                        let v = x[i];
                        if z + 1 < d {
                            let j = idx(ch, z + 1, y, xx);
                            let dv = 2.0 * g * (x[j] - v);
                            grad[j] += dv;
                            grad[i] -= dv;
                        }
                        if y + 1 < h {
                            let j = idx(ch, z, y + 1, xx);
                            let dv = 2.0 * g * (x[j] - v);
                            grad[j] += dv;
                            grad[i] -= dv;
                        }
                        if xx + 1 < w {
                            let j = idx(ch, z, y, xx + 1);
                            let dv = 2.0 * g * (x[j] - v);
                            grad[j] += dv;
                            grad[i] -= dv;
                        }
                    }
                }
            }
        }
        vec![Some(grad)]
    }

    fn name(&self) -> &'static str {
        "spatial_grad_sq"
    }
}

/// Forward results of one training pair.
pub struct PairOutput {
    pub reference: Tensor,
    pub warped: Tensor,
    pub field: ProbabilisticField,
}

/// Per-term values of one total-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub smooth: f64,
    pub contrast: f64,
    pub mu_grad: f64,
}

/// Weighted total `recon + alpha*smooth + beta*contrast` with per-term
/// breakdown. Reconstruction and smoothness average over the batch pairs;
/// disabled terms contribute exactly 0 and build no graph.
pub fn total_loss(
    pairs: &[PairOutput],
    projections: &[Tensor],
    anchors: &[ContrastiveAnchor],
    toggles: LossToggles,
    cfg: &LossConfig,
) -> Result<(Tensor, LossBreakdown)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Usage("total_loss over an empty batch".into()));
    }
    let inv_n = 1.0 / pairs.len() as f64;
    let mut total = Tensor::scalar(0.0);
    let mut breakdown = LossBreakdown {
        total: 0.0,
        recon: 0.0,
        smooth: 0.0,
        contrast: 0.0,
        mu_grad: 0.0,
    };

    if toggles.recon {
        let mut acc: Option<Tensor> = None;
        for p in pairs {
            let r = recon_loss(&p.reference, &p.warped, cfg.sigma2)?;
            acc = Some(match acc {
                Some(a) => a.add(&r)?,
                None => r,
            });
        }
        let recon = acc.unwrap().mul_scalar(inv_n);
        breakdown.recon = recon.item();
        total = total.add(&recon)?;
    }
    if toggles.smooth {
        let mut acc: Option<Tensor> = None;
        for p in pairs {
            let s = kl_smooth_loss(&p.field)?;
            acc = Some(match acc {
                Some(a) => a.add(&s)?,
                None => s,
            });
        }
        let smooth = acc.unwrap().mul_scalar(inv_n);
        breakdown.smooth = smooth.item();
        total = total.add(&smooth.mul_scalar(cfg.alpha))?;
    }
    if toggles.contrast {
        let contrast = contrastive_loss_with_anchors(projections, anchors, cfg.tau)?;
        breakdown.contrast = contrast.item();
        total = total.add(&contrast.mul_scalar(cfg.beta))?;
    }
    if cfg.mu_grad_weight > 0.0 {
        let mut acc: Option<Tensor> = None;
        for p in pairs {
            let gpen = spatial_grad_sq(&p.field.mu)?;
            acc = Some(match acc {
                Some(a) => a.add(&gpen)?,
                None => gpen,
            });
        }
        let gpen = acc.unwrap().mul_scalar(inv_n);
        breakdown.mu_grad = gpen.item();
        total = total.add(&gpen.mul_scalar(cfg.mu_grad_weight))?;
    }
    breakdown.total = total.item();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(mu: Tensor, logvar: Tensor) -> ProbabilisticField {
        ProbabilisticField { mu, logvar }
    }

    fn unit(v: &[f64]) -> Tensor {
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::from_vec(&[v.len()], v.iter().map(|x| x / norm).collect()).unwrap()
    }

    #[test]
    fn recon_base_cases() {
        let a = Tensor::from_vec(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(recon_loss(&a, &a, 1.0).unwrap().item(), 0.0);

        let mut b = a.to_vec();
        b[2] += 2.0;
        let b = Tensor::from_vec(&[1, 1, 1, 4], b).unwrap();
        assert_eq!(recon_loss(&a, &b, 1.0).unwrap().item(), 2.0);

        let mut c = a.to_vec();
        c[0] += 1.0;
        c[3] -= 1.0;
        let c = Tensor::from_vec(&[1, 1, 1, 4], c).unwrap();
        assert_eq!(recon_loss(&a, &c, 0.5).unwrap().item(), 2.0);
    }

    #[test]
    fn recon_nonnegative_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let a = randn(&[1, 2, 2, 2], &mut rng);
            let b = randn(&[1, 2, 2, 2], &mut rng);
            let l = recon_loss(&a, &b, 1.0).unwrap().item();
            assert!(l > 0.0);
        }
    }

    #[test]
    fn kl_smooth_closed_form_cases() {
        // 8 voxels x 3 components at the per-component minimum of 1/2.
        let f = field(Tensor::zeros(&[3, 2, 2, 2]), Tensor::zeros(&[3, 2, 2, 2]));
        assert_eq!(kl_smooth_loss(&f).unwrap().item(), 12.0);

        let f = field(Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1, 1, 1, 1]));
        assert_eq!(kl_smooth_loss(&f).unwrap().item(), 1.0);

        // mu = 0, var = e: (e - 1)/2.
        let f = field(Tensor::zeros(&[1, 1, 1, 1]), Tensor::full(&[1, 1, 1, 1], 1.0));
        let got = kl_smooth_loss(&f).unwrap().item();
        assert!((got - 0.8591409142295226).abs() < 1e-15, "{got}");
    }

    #[test]
    fn kl_smooth_floor_is_half_per_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let mu = randn(&[3, 2, 2, 2], &mut rng);
            let lv = randn(&[3, 2, 2, 2], &mut rng);
            let k = mu.numel() as f64;
            let v = kl_smooth_loss(&field(mu, lv)).unwrap().item();
            assert!(v >= k / 2.0 - 1e-12, "{v} below floor {}", k / 2.0);
        }
    }

    #[test]
    fn kl_smooth_rejects_non_finite_logvar() {
        let f = field(
            Tensor::zeros(&[1, 1, 1, 1]),
            Tensor::full(&[1, 1, 1, 1], f64::NAN),
        );
        assert!(matches!(kl_smooth_loss(&f), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_monte_carlo_matches_textbook_value() {
        // Identical distributions: divergence 0.
        let f = field(Tensor::zeros(&[1, 1, 1, 1]), Tensor::zeros(&[1, 1, 1, 1]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mc = kl_monte_carlo(&f, 20_000, &mut rng).unwrap();
        assert!(mc.value.abs() < 3.0 * mc.std_error + 1e-9, "{mc:?}");

        // Single component mu=3, var=1: textbook value 4.5.
        let f = field(Tensor::full(&[1, 1, 1, 1], 3.0), Tensor::zeros(&[1, 1, 1, 1]));
        let mc = kl_monte_carlo(&f, 100_000, &mut rng).unwrap();
        assert!((mc.value - 4.5).abs() < 0.05, "{mc:?}");
        let closed = kl_smooth_loss(&f).unwrap().item() - 0.5;
        assert!((closed - 4.5).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_form_agrees_with_monte_carlo_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..5 {
            let mu = randn(&[3, 2, 2, 2], &mut rng);
            let lv = randn(&[3, 2, 2, 2], &mut rng).mul_scalar(0.5);
            let f = field(mu, lv);
            let k = f.mu.numel() as f64;
            let closed = kl_smooth_loss(&f).unwrap().item() - k / 2.0;
            let mc = kl_monte_carlo(&f, 20_000, &mut rng).unwrap();
            assert!(
                (closed - mc.value).abs() < 3.0 * mc.std_error,
                "case {case}: closed {closed} vs mc {:?}",
                mc
            );
        }
    }

    #[test]
    fn contrastive_identical_pair_alone_is_zero() {
        let p = unit(&[1.0, 0.0, 0.0]);
        let loss = contrastive_loss(&[p.clone(), p], &[(0, 1)], 0.5).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn contrastive_orthogonal_negative_closed_form() {
        let e1 = unit(&[1.0, 0.0, 0.0]);
        let e2 = unit(&[0.0, 1.0, 0.0]);
        let loss = contrastive_loss(&[e1.clone(), e1.clone(), e2], &[(0, 1)], 1.0).unwrap();
        // -log(e / (e + 1)) = log(1 + e^-1).
        assert!((loss.item() - 0.3132616875182228).abs() < 1e-12, "{}", loss.item());
    }

    #[test]
    fn contrastive_three_vector_low_temperature_case() {
        // Frozen from an independent scalar evaluation of the loss formula
        // with a=(1,0,0), p=(0.8,0.6,0), n=(0.6,0,0.8), tau=0.1.
        let a = unit(&[1.0, 0.0, 0.0]);
        let p = unit(&[0.8, 0.6, 0.0]);
        let n = unit(&[0.6, 0.0, 0.8]);
        let loss = contrastive_loss(&[a, p, n], &[(0, 1)], 0.1).unwrap();
        assert!((loss.item() - 0.12692801104297250).abs() < 1e-12, "{}", loss.item());
    }

    #[test]
    fn contrastive_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let dim = 5;
            let projs: Vec<Tensor> = (0..4).map(|_| {
                let v = randn(&[dim], &mut rng);
                let n = v.l2_norm().item();
                v.mul_scalar(1.0 / n)
            }).collect();
            let pairs = [(0usize, 1usize), (2, 3)];
            let base = contrastive_loss(&projs, &pairs, 0.3).unwrap().item();

            // Random rotation via Gram-Schmidt on a random matrix.
            let mut basis: Vec<Vec<f64>> = Vec::new();
            while basis.len() < dim {
                let mut v: Vec<f64> = randn(&[dim], &mut rng).to_vec();
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                    for (vi, bi) in v.iter_mut().zip(b) {
                        *vi -= dot * bi;
                    }
                }
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    basis.push(v.into_iter().map(|x| x / norm).collect());
                }
            }
            let rotated: Vec<Tensor> = projs
                .iter()
                .map(|p| {
                    let pd = p.to_vec();
                    let rd: Vec<f64> = basis
                        .iter()
                        .map(|row| row.iter().zip(&pd).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::from_vec(&[dim], rd).unwrap()
                })
                .collect();
            let rot = contrastive_loss(&rotated, &pairs, 0.3).unwrap().item();
            assert!((base - rot).abs() < 1e-9, "{base} vs {rot}");
        }
    }

    #[test]
    fn contrastive_decreases_when_negative_moves_away() {
        let a = unit(&[1.0, 0.0, 0.0]);
        let p = unit(&[0.9, 0.435889894354067, 0.0]);
        let near = unit(&[0.8, 0.6, 0.0]);
        let far = unit(&[0.1, 0.99498743710662, 0.0]);
        let with_near = contrastive_loss(&[a.clone(), p.clone(), near], &[(0, 1)], 0.2).unwrap();
        let with_far = contrastive_loss(&[a, p, far], &[(0, 1)], 0.2).unwrap();
        assert!(with_far.item() < with_near.item());
    }

    #[test]
    fn contrastive_batch_of_one_is_config_error() {
        let p = unit(&[1.0, 0.0]);
        assert!(matches!(
            contrastive_loss(&[p], &[(0, 0)], 0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn spatial_grad_sq_of_constant_is_zero() {
        let t = Tensor::full(&[3, 3, 3, 3], 2.5);
        assert_eq!(spatial_grad_sq(&t).unwrap().item(), 0.0);
    }

    fn total_case_inputs() -> (Vec<PairOutput>, Vec<Tensor>, Vec<ContrastiveAnchor>) {
        // recon = 2.0: one voxel differs by 2 under sigma2 = 1.
        let reference = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let warped = Tensor::from_vec(&[1, 1, 2, 2], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        // smooth = 12.0: 8 voxels x 3 components at the 1/2 floor... that
        // needs 24 components; use [3,2,2,2].
        let f = ProbabilisticField {
            mu: Tensor::zeros(&[3, 2, 2, 2]),
            logvar: Tensor::zeros(&[3, 2, 2, 2]),
        };
        let pairs = vec![PairOutput {
            reference,
            warped,
            field: f,
        }];
        // contrast = log(1 + e^-1) with tau = 1.
        let e1 = unit(&[1.0, 0.0, 0.0]);
        let e2 = unit(&[0.0, 1.0, 0.0]);
        let projections = vec![e1.clone(), e1, e2];
        let anchors = vec![ContrastiveAnchor {
            anchor: 0,
            positive: 1,
            candidates: vec![1, 2],
        }];
        (pairs, projections, anchors)
    }

    #[test]
    fn total_loss_weighted_sum_matches_hand_arithmetic() {
        let (pairs, projections, anchors) = total_case_inputs();
        let cfg = LossConfig {
            tau: 1.0,
            sigma2: 1.0,
            ..LossConfig::default()
        };
        let (total, bd) = total_loss(&pairs, &projections, &anchors, LossToggles::default(), &cfg).unwrap();
        assert!((bd.recon - 2.0).abs() < 1e-15);
        assert!((bd.smooth - 12.0).abs() < 1e-15);
        assert!((bd.contrast - 0.3132616875182228).abs() < 1e-12);
        // 2 + 1*12 + 0.01*log(1+e^-1).
        assert!((total.item() - 14.003132616875182).abs() < 1e-12, "{}", total.item());
    }

    #[test]
    fn disabled_terms_contribute_exactly_zero() {
        let (pairs, projections, anchors) = total_case_inputs();
        let cfg = LossConfig::default();
        let toggles = LossToggles {
            recon: true,
            smooth: false,
            contrast: false,
        };
        let (total, bd) = total_loss(&pairs, &projections, &anchors, toggles, &cfg).unwrap();
        assert_eq!(total.item(), bd.recon);
        assert_eq!(bd.smooth, 0.0);
        assert_eq!(bd.contrast, 0.0);
    }

    #[test]
    fn smooth_term_floor_shows_in_breakdown() {
        // Zero-valued mu and logvar: smooth sits at its k/2 floor, so the
        // total cannot be zero even with zero recon.
        let reference = Tensor::zeros(&[1, 1, 2, 2]);
        let pairs = vec![PairOutput {
            reference: reference.clone(),
            warped: reference,
            field: ProbabilisticField {
                mu: Tensor::zeros(&[3, 2, 2, 2]),
                logvar: Tensor::zeros(&[3, 2, 2, 2]),
            },
        }];
        let (_, projections, anchors) = total_case_inputs();
        let (total, bd) =
            total_loss(&pairs, &projections, &anchors, LossToggles { contrast: false, ..LossToggles::default() }, &LossConfig::default())
                .unwrap();
        assert_eq!(bd.recon, 0.0);
        assert_eq!(bd.smooth, 12.0);
        assert_eq!(total.item(), 12.0);
    }
}
