//! 3-D convolution (cross-correlation) over `[C,D,H,W]` tensors.
//!
//! The kernels decompose the stencil into per-row shifted accumulations so
//! the innermost loops run over contiguous memory.

use super::{OpNode, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct ConvDims {
    c_in: usize,
    d: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

/// Inclusive output-coordinate range for which `o*stride + k_off - pad`
/// falls inside `[0, extent_in)`.
fn valid_range(extent_in: usize, extent_out: usize, k_off: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    let s = stride as i64;
    let shift = pad as i64 - k_off as i64; // i = o*s - shift
    let lo = (shift + s - 1).div_euclid(s).max(0);
    let hi = (extent_in as i64 - 1 + shift)
        .div_euclid(s)
        .min(extent_out as i64 - 1);
    if hi < lo {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

fn conv_forward(input: &[f64], weight: &[f64], bias: &[f64], dm: ConvDims, out: &mut [f64]) {
    let ConvDims { c_in, d, h, w, c_out, k, stride, pad, od, oh, ow } = dm;
    let in_ch = d * h * w;
    let out_ch = od * oh * ow;
    for f in 0..c_out {
        let out_f = &mut out[f * out_ch..(f + 1) * out_ch];
        out_f.fill(bias[f]);
        for c in 0..c_in {
            let in_c = &input[c * in_ch..(c + 1) * in_ch];
            let w_base = ((f * c_in + c) * k) * k * k;
            for kz in 0..k {
                let Some((oz_lo, oz_hi)) = valid_range(d, od, kz, stride, pad) else { continue };
                for ky in 0..k {
                    let Some((oy_lo, oy_hi)) = valid_range(h, oh, ky, stride, pad) else { continue };
                    for kx in 0..k {
                        let Some((ox_lo, ox_hi)) = valid_range(w, ow, kx, stride, pad) else { continue };
                        let wv = weight[w_base + (kz * k + ky) * k + kx];
                        for oz in oz_lo..=oz_hi {
                            let iz = oz * stride + kz - pad;
                            for oy in oy_lo..=oy_hi {
                                let iy = oy * stride + ky - pad;
                                let in_row = &in_c[(iz * h + iy) * w..(iz * h + iy) * w + w];
                                let out_row = &mut out_f[(oz * oh + oy) * ow..(oz * oh + oy) * ow + ow];
                                if stride == 1 {
                                    let ix0 = ox_lo + kx - pad;
                                    let len = ox_hi - ox_lo + 1;
                                    let src = &in_row[ix0..ix0 + len];
                                    let dst = &mut out_row[ox_lo..ox_lo + len];
                                    for (o, i) in dst.iter_mut().zip(src) {
                                        *o += wv * i;
                                    }
                                } else {
                                    for ox in ox_lo..=ox_hi {
                                        out_row[ox] += wv * in_row[ox * stride + kx - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input(out_grad: &[f64], weight: &[f64], dm: ConvDims, in_grad: &mut [f64]) {
    let ConvDims { c_in, d, h, w, c_out, k, stride, pad, od, oh, ow } = dm;
    let in_ch = d * h * w;
    let out_ch = od * oh * ow;
    for f in 0..c_out {
        let g_f = &out_grad[f * out_ch..(f + 1) * out_ch];
        for c in 0..c_in {
            let gi_c = &mut in_grad[c * in_ch..(c + 1) * in_ch];
            let w_base = ((f * c_in + c) * k) * k * k;
            for kz in 0..k {
                let Some((oz_lo, oz_hi)) = valid_range(d, od, kz, stride, pad) else { continue };
                for ky in 0..k {
                    let Some((oy_lo, oy_hi)) = valid_range(h, oh, ky, stride, pad) else { continue };
                    for kx in 0..k {
                        let Some((ox_lo, ox_hi)) = valid_range(w, ow, kx, stride, pad) else { continue };
                        let wv = weight[w_base + (kz * k + ky) * k + kx];
                        for oz in oz_lo..=oz_hi {
                            let iz = oz * stride + kz - pad;
                            for oy in oy_lo..=oy_hi {
                                let iy = oy * stride + ky - pad;
                                let g_row = &g_f[(oz * oh + oy) * ow..(oz * oh + oy) * ow + ow];
                                let gi_row = &mut gi_c[(iz * h + iy) * w..(iz * h + iy) * w + w];
                                if stride == 1 {
                                    let ix0 = ox_lo + kx - pad;
                                    let len = ox_hi - ox_lo + 1;
                                    let src = &g_row[ox_lo..ox_lo + len];
                                    let dst = &mut gi_row[ix0..ix0 + len];
                                    for (gi, g) in dst.iter_mut().zip(src) {
                                        *gi += wv * g;
                                    }
                                } else {
                                    for ox in ox_lo..=ox_hi {
                                        gi_row[ox * stride + kx - pad] += wv * g_row[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight(input: &[f64], out_grad: &[f64], dm: ConvDims, w_grad: &mut [f64]) {
    let ConvDims { c_in, d, h, w, c_out, k, stride, pad, od, oh, ow } = dm;
    let in_ch = d * h * w;
    let out_ch = od * oh * ow;
    for f in 0..c_out {
        let g_f = &out_grad[f * out_ch..(f + 1) * out_ch];
        for c in 0..c_in {
            let in_c = &input[c * in_ch..(c + 1) * in_ch];
            let w_base = ((f * c_in + c) * k) * k * k;
            for kz in 0..k {
                let Some((oz_lo, oz_hi)) = valid_range(d, od, kz, stride, pad) else { continue };
                for ky in 0..k {
                    let Some((oy_lo, oy_hi)) = valid_range(h, oh, ky, stride, pad) else { continue };
                    for kx in 0..k {
                        let Some((ox_lo, ox_hi)) = valid_range(w, ow, kx, stride, pad) else { continue };
                        let mut acc = 0.0;
                        for oz in oz_lo..=oz_hi {
                            let iz = oz * stride + kz - pad;
                            for oy in oy_lo..=oy_hi {
                                let iy = oy * stride + ky - pad;
                                let g_row = &g_f[(oz * oh + oy) * ow..(oz * oh + oy) * ow + ow];
                                let in_row = &in_c[(iz * h + iy) * w..(iz * h + iy) * w + w];
                                if stride == 1 {
                                    let ix0 = ox_lo + kx - pad;
                                    let len = ox_hi - ox_lo + 1;
                                    let a = &g_row[ox_lo..ox_lo + len];
                                    let b = &in_row[ix0..ix0 + len];
                                    for (g, i) in a.iter().zip(b) {
                                        acc += g * i;
                                    }
                                } else {
                                    for ox in ox_lo..=ox_hi {
                                        acc += g_row[ox] * in_row[ox * stride + kx - pad];
                                    }
                                }
                            }
                        }
                        w_grad[w_base + (kz * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}

/// 3-D cross-correlation of `input [C,D,H,W]` with `weight [F,C,k,k,k]`
/// plus `bias [F]`, producing `[F,D',H',W']` where
/// `D' = (D + 2*pad - k)/stride + 1` (and likewise for H', W').
pub fn conv3d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let ish = input.shape();
    let wsh = weight.shape();
    let bsh = bias.shape();
    if ish.len() != 4 || wsh.len() != 5 || bsh.len() != 1 {
        return Err(Error::Dimension(format!(
            "conv3d expects input [C,D,H,W], weight [F,C,k,k,k], bias [F]; got {ish:?}, {wsh:?}, {bsh:?}"
        )));
    }
    let (c_in, d, h, w) = (ish[0], ish[1], ish[2], ish[3]);
    let (c_out, wc, k) = (wsh[0], wsh[1], wsh[2]);
    if wsh[3] != k || wsh[4] != k {
        return Err(Error::Dimension(format!("conv3d kernel must be cubic, got {wsh:?}")));
    }
    if wc != c_in {
        return Err(Error::Dimension(format!(
            "conv3d channel mismatch: input has {c_in}, weight expects {wc}"
        )));
    }
    if bsh[0] != c_out {
        return Err(Error::Dimension(format!(
            "conv3d bias length {} does not match {c_out} output channels",
            bsh[0]
        )));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!("conv3d kernel extent must be odd, got {k}")));
    }
    if stride < 1 {
        return Err(Error::Config("conv3d stride must be >= 1".into()));
    }
    let out_extent = |n: usize| -> Result<usize> {
        let padded = n + 2 * pad;
        if padded < k {
            return Err(Error::Config(format!(
                "conv3d: extent {n} with pad {pad} is smaller than kernel {k}"
            )));
        }
        if (padded - k) % stride != 0 {
            return Err(Error::Config(format!(
                "conv3d: extent {n} with pad {pad}, kernel {k}, stride {stride} \
                 does not divide exactly"
            )));
        }
        Ok((padded - k) / stride + 1)
    };
    let (od, oh, ow) = (out_extent(d)?, out_extent(h)?, out_extent(w)?);
    let dm = ConvDims { c_in, d, h, w, c_out, k, stride, pad, od, oh, ow };

    let mut out = vec![0.0; c_out * od * oh * ow];
    conv_forward(&input.data(), &weight.data(), &bias.data(), dm, &mut out);
    Ok(Tensor::from_op(
        vec![c_out, od, oh, ow],
        out,
        Box::new(Conv3dOp {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            dm,
        }),
    ))
}

struct Conv3dOp {
    input: Tensor,
    weight: Tensor,
    bias: Tensor,
    dm: ConvDims,
}

impl OpNode for Conv3dOp {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone(), self.weight.clone(), self.bias.clone()]
    }

    fn backward(&self, _out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let dm = self.dm;
        let gi = self.input.requires_grad().then(|| {
            let mut g = vec![0.0; self.input.numel()];
            conv_backward_input(out_grad, &self.weight.data(), dm, &mut g);
            g
        });
        let gw = self.weight.requires_grad().then(|| {
            let mut g = vec![0.0; self.weight.numel()];
            conv_backward_weight(&self.input.data(), out_grad, dm, &mut g);
            g
        });
        let gb = self.bias.requires_grad().then(|| {
            let out_ch = dm.od * dm.oh * dm.ow;
            (0..dm.c_out)
                .map(|f| out_grad[f * out_ch..(f + 1) * out_ch].iter().sum())
                .collect()
        });
        vec![gi, gw, gb]
    }

    fn name(&self) -> &'static str {
        "conv3d"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::randn;
    use rand::SeedableRng;

    /// Naive seven-loop reference, kept deliberately close to the defining
    /// formula and independent of the row-decomposed implementation.
    fn conv_oracle(
        input: &[f64],
        (c_in, d, h, w): (usize, usize, usize, usize),
        weight: &[f64],
        (c_out, k): (usize, usize),
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let od = (d + 2 * pad - k) / stride + 1;
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; c_out * od * oh * ow];
        for f in 0..c_out {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[f];
                        for c in 0..c_in {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * stride + kz) as i64 - pad as i64;
                                        let iy = (oy * stride + ky) as i64 - pad as i64;
                                        let ix = (ox * stride + kx) as i64 - pad as i64;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= w {
                                            continue;
                                        }
                                        acc += weight[(((f * c_in + c) * k + kz) * k + ky) * k + kx]
                                            * input[((c * d + iz) * h + iy) * w + ix];
                                    }
                                }
                            }
                        }
                        out[((f * od + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = randn(&[1, 3, 4, 5], &mut rng);
        let w = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv3d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn all_ones_kernel_sums_27_ones() {
        let x = Tensor::full(&[1, 5, 5, 5], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv3d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 27.0));
    }

    #[test]
    fn strided_padded_conv_matches_naive_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = randn(&[2, 5, 5, 5], &mut rng);
        let w = randn(&[3, 2, 3, 3, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        let y = conv3d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3, 3]);
        let expect = conv_oracle(&x.to_vec(), (2, 5, 5, 5), &w.to_vec(), (3, 3), &b.to_vec(), 2, 1);
        for (i, (got, want)) in y.data().iter().zip(&expect).enumerate() {
            assert!((got - want).abs() < 1e-12, "voxel {i}: {got} vs oracle {want}");
        }
    }

    #[test]
    fn stride1_padded_conv_matches_naive_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let x = randn(&[3, 4, 6, 5], &mut rng);
        let w = randn(&[2, 3, 3, 3, 3], &mut rng);
        let b = randn(&[2], &mut rng);
        let y = conv3d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 6, 5]);
        let expect = conv_oracle(&x.to_vec(), (3, 4, 6, 5), &w.to_vec(), (2, 3), &b.to_vec(), 1, 1);
        for (got, want) in y.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_exact_output_extent_is_config_error() {
        let x = Tensor::zeros(&[1, 6, 6, 6]);
        let w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        // (6 + 0 - 3) = 3 does not divide by stride 2.
        assert!(matches!(
            conv3d(&x, &w, &b, 2, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros(&[2, 5, 5, 5]);
        let w = Tensor::zeros(&[1, 3, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(conv3d(&x, &w, &b, 1, 1), Err(Error::Dimension(_))));
    }
}
