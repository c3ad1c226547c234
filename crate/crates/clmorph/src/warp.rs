//! Spatial transformer: pull-warping of volumes by a dense displacement
//! field, plus the Jacobian-determinant diagnostic.
//!
//! A field `z` maps output voxel `p` to the sample position `p + z(p)`
//! (components in `(d,h,w)` order, voxel units). Images are interpolated
//! trilinearly, label maps by nearest neighbour; sample positions outside
//! the volume clamp to the border.

use crate::error::{Error, Result};
use crate::ndtensor::{OpNode, Tensor};
use crate::synthdata::{ImageVolume, LabelVolume};

/// Dense per-voxel displacement, layout `[3,D,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<DisplacementField> {
        let n = 3 * shape[0] * shape[1] * shape[2];
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "field of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(DisplacementField { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> DisplacementField {
        DisplacementField {
            shape,
            data: vec![0.0; 3 * shape[0] * shape[1] * shape[2]],
        }
    }

    /// Constant translation field.
    pub fn translation(shape: [usize; 3], offset: [f64; 3]) -> DisplacementField {
        let vox = shape[0] * shape[1] * shape[2];
        let mut data = vec![0.0; 3 * vox];
        for (axis, &o) in offset.iter().enumerate() {
            data[axis * vox..(axis + 1) * vox].fill(o);
        }
        DisplacementField { shape, data }
    }

    #[inline]
    pub fn component(&self, axis: usize) -> &[f64] {
        let vox = self.shape[0] * self.shape[1] * self.shape[2];
        &self.data[axis * vox..(axis + 1) * vox]
    }

    /// Largest displacement magnitude over all voxels.
    pub fn max_norm(&self) -> f64 {
        let vox = self.shape[0] * self.shape[1] * self.shape[2];
        let (zd, zh, zw) = (self.component(0), self.component(1), self.component(2));
        (0..vox)
            .map(|i| (zd[i] * zd[i] + zh[i] * zh[i] + zw[i] * zw[i]).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.shape;
        Tensor::from_vec(&[3, d, h, w], self.data.clone()).expect("consistent by construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<DisplacementField> {
        let sh = t.shape();
        if sh.len() != 4 || sh[0] != 3 {
            return Err(Error::Dimension(format!(
                "displacement tensor must be [3,D,H,W], got {sh:?}"
            )));
        }
        DisplacementField::new([sh[1], sh[2], sh[3]], t.to_vec())
    }
}

#[inline]
fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Trilinear sample of one channel at `(sz, sy, sx)` with border clamping.
/// Also returns the derivative of the sample w.r.t. each coordinate.
#[inline]
fn sample_trilinear(
    src: &[f64],
    (d, h, w): (usize, usize, usize),
    sz: f64,
    sy: f64,
    sx: f64,
) -> (f64, [f64; 3]) {
    let fz = sz.floor();
    let fy = sy.floor();
    let fx = sx.floor();
    let (tz, ty, tx) = (sz - fz, sy - fy, sx - fx);
    let z0 = clamp_idx(fz as i64, d);
    let z1 = clamp_idx(fz as i64 + 1, d);
    let y0 = clamp_idx(fy as i64, h);
    let y1 = clamp_idx(fy as i64 + 1, h);
    let x0 = clamp_idx(fx as i64, w);
    let x1 = clamp_idx(fx as i64 + 1, w);

    let v = |z: usize, y: usize, x: usize| src[(z * h + y) * w + x];
    let v000 = v(z0, y0, x0);
    let v001 = v(z0, y0, x1);
    let v010 = v(z0, y1, x0);
    let v011 = v(z0, y1, x1);
    let v100 = v(z1, y0, x0);
    let v101 = v(z1, y0, x1);
    let v110 = v(z1, y1, x0);
    let v111 = v(z1, y1, x1);

    let c00 = v000 * (1.0 - tx) + v001 * tx;
    let c01 = v010 * (1.0 - tx) + v011 * tx;
    let c10 = v100 * (1.0 - tx) + v101 * tx;
    let c11 = v110 * (1.0 - tx) + v111 * tx;
    let c0 = c00 * (1.0 - ty) + c01 * ty;
    let c1 = c10 * (1.0 - ty) + c11 * ty;
    let value = c0 * (1.0 - tz) + c1 * tz;

    // Derivatives w.r.t. the sample coordinates; identically zero where
    // both taps clamp to the same border voxel.
    let dz = c1 - c0;
    let dy = (c01 - c00) * (1.0 - tz) + (c11 - c10) * tz;
    let dx00 = v001 - v000;
    let dx01 = v011 - v010;
    let dx10 = v101 - v100;
    let dx11 = v111 - v110;
    let dx = (dx00 * (1.0 - ty) + dx01 * ty) * (1.0 - tz) + (dx10 * (1.0 - ty) + dx11 * ty) * tz;
    (value, [dz, dy, dx])
}

fn check_field_shape(vol_spatial: &[usize], field: &Tensor) -> Result<(usize, usize, usize)> {
    let fs = field.shape();
    if fs.len() != 4 || fs[0] != 3 {
        return Err(Error::Dimension(format!(
            "displacement field must be [3,D,H,W], got {fs:?}"
        )));
    }
    if vol_spatial != &fs[1..] {
        return Err(Error::Dimension(format!(
            "field spatial shape {:?} does not match volume {:?}",
            &fs[1..],
            vol_spatial
        )));
    }
    Ok((fs[1], fs[2], fs[3]))
}

/// Differentiable pull-warp of `vol [C,D,H,W]` by `field [3,D,H,W]`:
/// `out(p) = vol(p + z(p))` with trilinear interpolation.
pub fn warp_trilinear(vol: &Tensor, field: &Tensor) -> Result<Tensor> {
    let vs = vol.shape();
    if vs.len() != 4 {
        return Err(Error::Dimension(format!(
            "warp_trilinear expects volume [C,D,H,W], got {vs:?}"
        )));
    }
    let (d, h, w) = check_field_shape(&vs[1..], field)?;
    let c = vs[0];
    let vox = d * h * w;

    let vdata = vol.data();
    let fdata = field.data();
    let (zd, zh, zw) = (&fdata[0..vox], &fdata[vox..2 * vox], &fdata[2 * vox..3 * vox]);
    let mut out = vec![0.0; c * vox];
    for ch in 0..c {
        let src = &vdata[ch * vox..(ch + 1) * vox];
        let dst = &mut out[ch * vox..(ch + 1) * vox];
        let mut i = 0;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let sz = z as f64 + zd[i];
                    let sy = y as f64 + zh[i];
                    let sx = x as f64 + zw[i];
                    dst[i] = sample_trilinear(src, (d, h, w), sz, sy, sx).0;
                    i += 1;
                }
            }
        }
    }
    drop(vdata);
    drop(fdata);
    Ok(Tensor::from_op(
        vs.to_vec(),
        out,
        Box::new(WarpOp {
            vol: vol.clone(),
            field: field.clone(),
        }),
    ))
}

struct WarpOp {
    vol: Tensor,
    field: Tensor,
}

impl OpNode for WarpOp {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.vol.clone(), self.field.clone()]
    }

    fn backward(&self, _out: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let vs = self.vol.shape();
        let (c, d, h, w) = (vs[0], vs[1], vs[2], vs[3]);
        let vox = d * h * w;
        let vdata = self.vol.data();
        let fdata = self.field.data();
        let (zd, zh, zw) = (&fdata[0..vox], &fdata[vox..2 * vox], &fdata[2 * vox..3 * vox]);

        let mut gvol = self.vol.requires_grad().then(|| vec![0.0; c * vox]);
        let mut gfield = self.field.requires_grad().then(|| vec![0.0; 3 * vox]);

        for ch in 0..c {
            let src = &vdata[ch * vox..(ch + 1) * vox];
            let g = &out_grad[ch * vox..(ch + 1) * vox];
            let mut i = 0;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let gv = g[i];
                        if gv != 0.0 {
                            let sz = z as f64 + zd[i];
                            let sy = y as f64 + zh[i];
                            let sx = x as f64 + zw[i];
                            if let Some(gf) = gfield.as_mut() {
                                let (_, dcoord) = sample_trilinear(src, (d, h, w), sz, sy, sx);
                                gf[i] += gv * dcoord[0];
                                gf[vox + i] += gv * dcoord[1];
                                gf[2 * vox + i] += gv * dcoord[2];
                            }
                            if let Some(gvl) = gvol.as_mut() {
                                scatter_trilinear(
                                    &mut gvl[ch * vox..(ch + 1) * vox],
                                    (d, h, w),
                                    sz,
                                    sy,
                                    sx,
                                    gv,
                                );
                            }
                        }
                        i += 1;
                    }
                }
            }
        }
        vec![gvol, gfield]
    }

    fn name(&self) -> &'static str {
        "warp_trilinear"
    }
}

/// Adjoint of trilinear sampling: distribute `g` onto the 8 taps.
#[inline]
fn scatter_trilinear(dst: &mut [f64], (d, h, w): (usize, usize, usize), sz: f64, sy: f64, sx: f64, g: f64) {
    let fz = sz.floor();
    let fy = sy.floor();
    let fx = sx.floor();
    let (tz, ty, tx) = (sz - fz, sy - fy, sx - fx);
    let z0 = clamp_idx(fz as i64, d);
    let z1 = clamp_idx(fz as i64 + 1, d);
    let y0 = clamp_idx(fy as i64, h);
    let y1 = clamp_idx(fy as i64 + 1, h);
    let x0 = clamp_idx(fx as i64, w);
    let x1 = clamp_idx(fx as i64 + 1, w);
    dst[(z0 * h + y0) * w + x0] += g * (1.0 - tz) * (1.0 - ty) * (1.0 - tx);
    dst[(z0 * h + y0) * w + x1] += g * (1.0 - tz) * (1.0 - ty) * tx;
    dst[(z0 * h + y1) * w + x0] += g * (1.0 - tz) * ty * (1.0 - tx);
    dst[(z0 * h + y1) * w + x1] += g * (1.0 - tz) * ty * tx;
    dst[(z1 * h + y0) * w + x0] += g * tz * (1.0 - ty) * (1.0 - tx);
    dst[(z1 * h + y0) * w + x1] += g * tz * (1.0 - ty) * tx;
    dst[(z1 * h + y1) * w + x0] += g * tz * ty * (1.0 - tx);
    dst[(z1 * h + y1) * w + x1] += g * tz * ty * tx;
}

/// Pull-warp of an image volume (non-differentiating convenience).
pub fn warp_image(vol: &ImageVolume, field: &DisplacementField) -> Result<ImageVolume> {
    if vol.shape != field.shape {
        return Err(Error::Dimension(format!(
            "warp_image: volume {:?} vs field {:?}",
            vol.shape, field.shape
        )));
    }
    let [d, h, w] = vol.shape;
    let t = Tensor::from_vec(&[1, d, h, w], vol.data.clone())?;
    let out = warp_trilinear(&t, &field.to_tensor())?;
    Ok(ImageVolume {
        shape: vol.shape,
        spacing: vol.spacing,
        data: out.to_vec(),
    })
}

/// Nearest-neighbour pull-warp of a label map: `out(p) = labels(round(p + z(p)))`
/// with border clamping. Never invents labels.
pub fn warp_nearest(labels: &LabelVolume, field: &DisplacementField) -> Result<LabelVolume> {
    if labels.shape != field.shape {
        return Err(Error::Dimension(format!(
            "warp_nearest: labels {:?} vs field {:?}",
            labels.shape, field.shape
        )));
    }
    let [d, h, w] = labels.shape;
    let vox = d * h * w;
    let (zd, zh, zw) = (field.component(0), field.component(1), field.component(2));
    let mut out = vec![0u8; vox];
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let sz = clamp_idx((z as f64 + zd[i]).round() as i64, d);
                let sy = clamp_idx((y as f64 + zh[i]).round() as i64, h);
                let sx = clamp_idx((x as f64 + zw[i]).round() as i64, w);
                out[i] = labels.data[(sz * h + sy) * w + sx];
                i += 1;
            }
        }
    }
    Ok(LabelVolume {
        shape: labels.shape,
        spacing: labels.spacing,
        data: out,
    })
}

/// Determinant of `I + grad(z)` per voxel. Central differences in the
/// interior, one-sided differences on the boundary.
pub fn jacobian_determinant(field: &DisplacementField) -> Result<ImageVolume> {
    let [d, h, w] = field.shape;
    if d < 3 || h < 3 || w < 3 {
        return Err(Error::Config(format!(
            "jacobian_determinant needs extents >= 3 per axis, got {:?}",
            field.shape
        )));
    }
    let vox = d * h * w;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    // d/daxis of component `comp` at voxel (z,y,x).
    let deriv = |comp: &[f64], z: usize, y: usize, x: usize, axis: usize| -> f64 {
        let (pos, n) = match axis {
            0 => (z, d),
            1 => (y, h),
            _ => (x, w),
        };
        let at = |p: usize| match axis {
            0 => comp[idx(p, y, x)],
            1 => comp[idx(z, p, x)],
            _ => comp[idx(z, y, p)],
        };
        if pos == 0 {
            at(1) - at(0)
        } else if pos == n - 1 {
            at(n - 1) - at(n - 2)
        } else {
            (at(pos + 1) - at(pos - 1)) / 2.0
        }
    };

    let comps = [field.component(0), field.component(1), field.component(2)];
    let mut out = vec![0.0; vox];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut j = [[0.0f64; 3]; 3];
                for (r, comp) in comps.iter().enumerate() {
                    for (c, jr) in j[r].iter_mut().enumerate() {
                        *jr = deriv(comp, z, y, x, c) + if r == c { 1.0 } else { 0.0 };
                    }
                }
                out[idx(z, y, x)] = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
            }
        }
    }
    ImageVolume::new([d, h, w], [1.0; 3], out)
}
