//! Trilinear upsampling by an integer factor (align-corners-false).
//!
//! Output coordinate `o` samples the input at `(o + 0.5)/factor - 0.5`;
//! out-of-range taps clamp to the border, so constants are reproduced
//! exactly and factor 1 is the identity.

use super::{OpNode, Tensor};
use crate::error::{Error, Result};

/// Per-axis interpolation taps: low index, high index, high-tap weight.
fn axis_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let n_out = n_in * factor;
    (0..n_out)
        .map(|o| {
            let s = (o as f64 + 0.5) / factor as f64 - 0.5;
            let lo = s.floor();
            let t = s - lo;
            let i0 = (lo as i64).clamp(0, n_in as i64 - 1) as usize;
            let i1 = (lo as i64 + 1).clamp(0, n_in as i64 - 1) as usize;
            (i0, i1, t)
        })
        .collect()
}

pub fn upsample_trilinear(input: &Tensor, factor: usize) -> Result<Tensor> {
    let sh = input.shape();
    if sh.len() != 4 {
        return Err(Error::Dimension(format!(
            "upsample_trilinear expects [C,D,H,W], got {sh:?}"
        )));
    }
    if factor < 1 {
        return Err(Error::Config("upsample factor must be >= 1".into()));
    }
    let (c, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let tz = axis_taps(d, factor);
    let ty = axis_taps(h, factor);
    let tx = axis_taps(w, factor);

    let x = input.data();
    let mut out = vec![0.0; c * od * oh * ow];
    for ch in 0..c {
        let src = &x[ch * d * h * w..(ch + 1) * d * h * w];
        let dst = &mut out[ch * od * oh * ow..(ch + 1) * od * oh * ow];
        for (oz, &(z0, z1, wz)) in tz.iter().enumerate() {
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                let row = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy) * ow + ow];
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let c00 = src[(z0 * h + y0) * w + x0] * (1.0 - wx) + src[(z0 * h + y0) * w + x1] * wx;
                    let c01 = src[(z0 * h + y1) * w + x0] * (1.0 - wx) + src[(z0 * h + y1) * w + x1] * wx;
                    let c10 = src[(z1 * h + y0) * w + x0] * (1.0 - wx) + src[(z1 * h + y0) * w + x1] * wx;
                    let c11 = src[(z1 * h + y1) * w + x0] * (1.0 - wx) + src[(z1 * h + y1) * w + x1] * wx;
                    let c0 = c00 * (1.0 - wy) + c01 * wy;
                    let c1 = c10 * (1.0 - wy) + c11 * wy;
                    row[ox] = c0 * (1.0 - wz) + c1 * wz;
                }
            }
        }
    }
    drop(x);
    Ok(Tensor::from_op(
        vec![c, od, oh, ow],
        out,
        Box::new(UpsampleOp {
            input: input.clone(),
            factor,
        }),
    ))
}

struct UpsampleOp {
    input: Tensor,
    factor: usize,
}

impl OpNode for UpsampleOp {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let sh = self.input.shape();
        let (c, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let f = self.factor;
        let (od, oh, ow) = (d * f, h * f, w * f);
        let tz = axis_taps(d, f);
        let ty = axis_taps(h, f);
        let tx = axis_taps(w, f);
        let mut gi = vec![0.0; c * d * h * w];
        for ch in 0..c {
            let src = &out_grad[ch * od * oh * ow..(ch + 1) * od * oh * ow];
            let dst = &mut gi[ch * d * h * w..(ch + 1) * d * h * w];
            for (oz, &(z0, z1, wz)) in tz.iter().enumerate() {
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    let row = &src[(oz * oh + oy) * ow..(oz * oh + oy) * ow + ow];
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let g = row[ox];
                        dst[(z0 * h + y0) * w + x0] += g * (1.0 - wz) * (1.0 - wy) * (1.0 - wx);
                        dst[(z0 * h + y0) * w + x1] += g * (1.0 - wz) * (1.0 - wy) * wx;
                        dst[(z0 * h + y1) * w + x0] += g * (1.0 - wz) * wy * (1.0 - wx);
                        dst[(z0 * h + y1) * w + x1] += g * (1.0 - wz) * wy * wx;
                        dst[(z1 * h + y0) * w + x0] += g * wz * (1.0 - wy) * (1.0 - wx);
                        dst[(z1 * h + y0) * w + x1] += g * wz * (1.0 - wy) * wx;
                        dst[(z1 * h + y1) * w + x0] += g * wz * wy * (1.0 - wx);
                        dst[(z1 * h + y1) * w + x1] += g * wz * wy * wx;
                    }
                }
            }
        }
        vec![Some(gi)]
    }

    fn name(&self) -> &'static str {
        "upsample_trilinear"
    }
}

/// Block-average downsampling by an integer factor; spatial extents must
/// divide exactly.
pub fn avg_pool3d(input: &Tensor, factor: usize) -> Result<Tensor> {
    let sh = input.shape();
    if sh.len() != 4 {
        return Err(Error::Dimension(format!("avg_pool3d expects [C,D,H,W], got {sh:?}")));
    }
    if factor < 1 {
        return Err(Error::Config("pool factor must be >= 1".into()));
    }
    let (c, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if d % factor != 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!(
            "avg_pool3d: extents {:?} not divisible by {factor}",
            &sh[1..]
        )));
    }
    let (od, oh, ow) = (d / factor, h / factor, w / factor);
    let inv = 1.0 / (factor * factor * factor) as f64;
    let x = input.data();
    let mut out = vec![0.0; c * od * oh * ow];
    for ch in 0..c {
        let src = &x[ch * d * h * w..(ch + 1) * d * h * w];
        let dst = &mut out[ch * od * oh * ow..(ch + 1) * od * oh * ow];
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dz in 0..factor {
                        for dy in 0..factor {
                            let base = ((oz * factor + dz) * h + oy * factor + dy) * w + ox * factor;
                            for dx in 0..factor {
                                acc += src[base + dx];
                            }
                        }
                    }
                    dst[(oz * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
    }
    drop(x);
    Ok(Tensor::from_op(
        vec![c, od, oh, ow],
        out,
        Box::new(AvgPoolOp {
            input: input.clone(),
            factor,
        }),
    ))
}

struct AvgPoolOp {
    input: Tensor,
    factor: usize,
}

impl OpNode for AvgPoolOp {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let sh = self.input.shape();
        let (c, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let f = self.factor;
        let (od, oh, ow) = (d / f, h / f, w / f);
        let inv = 1.0 / (f * f * f) as f64;
        let mut gi = vec![0.0; c * d * h * w];
        for ch in 0..c {
            let src = &out_grad[ch * od * oh * ow..(ch + 1) * od * oh * ow];
            let dst = &mut gi[ch * d * h * w..(ch + 1) * d * h * w];
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = src[(oz * oh + oy) * ow + ox] * inv;
                        for dz in 0..f {
                            for dy in 0..f {
                                let base = ((oz * f + dz) * h + oy * f + dy) * w + ox * f;
                                for dx in 0..f {
                                    dst[base + dx] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gi)]
    }

    fn name(&self) -> &'static str {
        "avg_pool3d"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::randn;
    use rand::SeedableRng;

    #[test]
    fn factor_one_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = randn(&[2, 3, 4, 5], &mut rng);
        let y = upsample_trilinear(&x, 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn constants_stay_constant() {
        let x = Tensor::full(&[1, 2, 2, 2], 0.75);
        for factor in [2, 3] {
            let y = upsample_trilinear(&x, factor).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
        }
    }

    #[test]
    fn two_voxel_ramp_matches_formula() {
        // One axis holds [0,1]; doubling gives source coords
        // -0.25, 0.25, 0.75, 1.25 -> clamped interpolation 0, 0.25, 0.75, 1.
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = upsample_trilinear(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 4]);
        for row in 0..4 {
            let base = row * 4;
            let got = &y.data()[base..base + 4];
            for (g, want) in got.iter().zip([0.0, 0.25, 0.75, 1.0]) {
                assert!((g - want).abs() < 1e-15, "got {got:?}");
            }
        }
    }

    #[test]
    fn factor_zero_rejected() {
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(upsample_trilinear(&x, 0), Err(Error::Config(_))));
    }

    #[test]
    fn avg_pool_averages_blocks_and_inverts_shape_of_upsample() {
        let x = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = avg_pool3d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 4.5);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let t = randn(&[3, 4, 4, 4], &mut rng);
        let down = avg_pool3d(&t, 2).unwrap();
        let up = upsample_trilinear(&down, 2).unwrap();
        assert_eq!(up.shape(), t.shape());
    }

    #[test]
    fn avg_pool_rejects_indivisible_extents() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(matches!(avg_pool3d(&x, 2), Err(Error::Config(_))));
    }
}
