//! Instance normalization over `[C,D,H,W]`: per-channel spatial
//! standardization followed by a learnable affine scale and shift.

use super::{OpNode, Tensor};
use crate::error::{Error, Result};

pub fn instance_norm(input: &Tensor, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let sh = input.shape();
    if sh.len() != 4 {
        return Err(Error::Dimension(format!(
            "instance_norm expects [C,D,H,W], got {sh:?}"
        )));
    }
    let c = sh[0];
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::Dimension(format!(
            "instance_norm affine parameters must be [{c}], got {:?} and {:?}",
            scale.shape(),
            shift.shape()
        )));
    }
    let vox = sh[1] * sh[2] * sh[3];
    let x = input.data();
    let gamma = scale.data();
    let beta = shift.data();
    let mut out = vec![0.0; c * vox];
    for ch in 0..c {
        let src = &x[ch * vox..(ch + 1) * vox];
        let mean = src.iter().sum::<f64>() / vox as f64;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / vox as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        let dst = &mut out[ch * vox..(ch + 1) * vox];
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = gamma[ch] * (v - mean) * inv_std + beta[ch];
        }
    }
    drop(x);
    drop(gamma);
    drop(beta);
    Ok(Tensor::from_op(
        sh.to_vec(),
        out,
        Box::new(InstanceNormOp {
            input: input.clone(),
            scale: scale.clone(),
            shift: shift.clone(),
            eps,
        }),
    ))
}

struct InstanceNormOp {
    input: Tensor,
    scale: Tensor,
    shift: Tensor,
    eps: f64,
}

impl OpNode for InstanceNormOp {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone(), self.scale.clone(), self.shift.clone()]
    }

    fn backward(&self, _out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let sh = self.input.shape();
        let (c, vox) = (sh[0], sh[1] * sh[2] * sh[3]);
        let x = self.input.data();
        let gamma = self.scale.data();
        let n = vox as f64;

        let mut gx = self.input.requires_grad().then(|| vec![0.0; c * vox]);
        let mut gscale = self.scale.requires_grad().then(|| vec![0.0; c]);
        let mut gshift = self.shift.requires_grad().then(|| vec![0.0; c]);

        for ch in 0..c {
            let src = &x[ch * vox..(ch + 1) * vox];
            let g = &out_grad[ch * vox..(ch + 1) * vox];
            let mean = src.iter().sum::<f64>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + self.eps).sqrt();

            if let Some(gs) = gshift.as_mut() {
                gs[ch] = g.iter().sum();
            }
            let needs_xhat_stats = gscale.is_some() || gx.is_some();
            if !needs_xhat_stats {
                continue;
            }
            let mut sum_g = 0.0;
            let mut sum_g_xhat = 0.0;
            for (&gv, &v) in g.iter().zip(src) {
                let xhat = (v - mean) * inv_std;
                sum_g += gv;
                sum_g_xhat += gv * xhat;
            }
            if let Some(gs) = gscale.as_mut() {
                gs[ch] = sum_g_xhat;
            }
            if let Some(gxv) = gx.as_mut() {
                let dst = &mut gxv[ch * vox..(ch + 1) * vox];
                let k = gamma[ch] * inv_std;
                let mg = sum_g / n;
                let mgx = sum_g_xhat / n;
                for ((o, &gv), &v) in dst.iter_mut().zip(g).zip(src) {
                    let xhat = (v - mean) * inv_std;
                    *o = k * (gv - mg - xhat * mgx);
                }
            }
        }
        vec![gx, gscale, gshift]
    }

    fn name(&self) -> &'static str {
        "instance_norm"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_to_zero_mean_unit_variance() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let scale = Tensor::full(&[1], 1.0);
        let shift = Tensor::zeros(&[1]);
        let y = instance_norm(&x, &scale, &shift, 1e-12).unwrap();
        let d = y.to_vec();
        let mean: f64 = d.iter().sum::<f64>() / d.len() as f64;
        let var: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn affine_parameters_apply_per_channel() {
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![0.0, 2.0, 0.0, 4.0]).unwrap();
        let scale = Tensor::from_vec(&[2], vec![3.0, 0.0]).unwrap();
        let shift = Tensor::from_vec(&[2], vec![0.0, 7.0]).unwrap();
        let y = instance_norm(&x, &scale, &shift, 1e-12).unwrap();
        let d = y.to_vec();
        // Channel 0: standardized [-1, 1] times 3; channel 1: scale 0 leaves shift.
        assert!((d[0] + 3.0).abs() < 1e-9 && (d[1] - 3.0).abs() < 1e-9);
        assert_eq!(&d[2..], &[7.0, 7.0]);
    }
}
