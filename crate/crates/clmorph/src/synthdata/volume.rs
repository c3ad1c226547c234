//! Dense 3-D volumes: f64 images and u8 label maps with spacing metadata.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Scalar image volume, row-major `[D,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    pub shape: [usize; 3],
    /// Millimetres per voxel; metadata only, distances are in voxel units.
    pub spacing: [f32; 3],
    pub data: Vec<f64>,
}

/// Integer label volume, row-major `[D,H,W]`; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<u8>,
}

pub(crate) fn check_len(shape: [usize; 3], len: usize) -> Result<()> {
    let n = shape[0] * shape[1] * shape[2];
    if n != len {
        return Err(Error::Dimension(format!(
            "shape {shape:?} implies {n} voxels, data has {len}"
        )));
    }
    Ok(())
}

impl ImageVolume {
    pub fn new(shape: [usize; 3], spacing: [f32; 3], data: Vec<f64>) -> Result<ImageVolume> {
        check_len(shape, data.len())?;
        Ok(ImageVolume { shape, spacing, data })
    }

    pub fn zeros(shape: [usize; 3]) -> ImageVolume {
        ImageVolume {
            shape,
            spacing: [1.0; 3],
            data: vec![0.0; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, d: usize, h: usize, w: usize) -> f64 {
        self.data[(d * self.shape[1] + h) * self.shape[2] + w]
    }

    /// Standardize to zero mean and unit variance (no-op scale on a
    /// constant volume).
    pub fn normalized(&self) -> ImageVolume {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        ImageVolume {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().map(|v| (v - mean) * inv_std).collect(),
        }
    }

    pub fn mse(&self, other: &ImageVolume) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "mse: shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }
}

impl LabelVolume {
    pub fn new(shape: [usize; 3], spacing: [f32; 3], data: Vec<u8>) -> Result<LabelVolume> {
        check_len(shape, data.len())?;
        Ok(LabelVolume { shape, spacing, data })
    }

    pub fn zeros(shape: [usize; 3]) -> LabelVolume {
        LabelVolume {
            shape,
            spacing: [1.0; 3],
            data: vec![0; shape[0] * shape[1] * shape[2]],
        }
    }

    #[inline]
    pub fn at(&self, d: usize, h: usize, w: usize) -> u8 {
        self.data[(d * self.shape[1] + h) * self.shape[2] + w]
    }

    /// Distinct labels present, including background.
    pub fn label_set(&self) -> BTreeSet<u8> {
        self.data.iter().copied().collect()
    }

    /// Distinct non-background labels.
    pub fn foreground_labels(&self) -> Vec<u8> {
        self.label_set().into_iter().filter(|&l| l != 0).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_is_zero_mean_unit_variance() {
        let v = ImageVolume::new([1, 2, 2], [1.0; 3], vec![0.0, 1.0, 2.0, 5.0]).unwrap();
        let n = v.normalized();
        let mean: f64 = n.data.iter().sum::<f64>() / 4.0;
        let var: f64 = n.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_volume_normalizes_without_nan() {
        let v = ImageVolume::new([1, 1, 3], [1.0; 3], vec![2.0; 3]).unwrap();
        let n = v.normalized();
        assert!(n.data.iter().all(|x| x.is_finite() && *x == 0.0));
    }

    #[test]
    fn label_sets() {
        let v = LabelVolume::new([1, 1, 4], [1.0; 3], vec![0, 2, 2, 5]).unwrap();
        assert_eq!(v.foreground_labels(), vec![2, 5]);
    }
}
