//! Procedural atlas/label/deformed-volume triplets with known ground-truth
//! fields, augmentation, and CLMV volume file I/O.
//!
//! The "anatomy" is a set of non-overlapping ellipsoids with distinct
//! labels and intensities. Samples are made by warping the atlas with a
//! smooth random displacement field, so every sample carries exact labels
//! and the exact field that produced it.

mod io;
mod volume;

pub use io::{
    read_field, read_image, read_labels, read_volume, write_field, write_image, write_labels,
    AnyVolume, DTYPE_FIELD, DTYPE_IMAGE, DTYPE_LABELS, MAGIC, VERSION,
};
pub use volume::{ImageVolume, LabelVolume};

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::warp::{jacobian_determinant, warp_image, warp_nearest, DisplacementField};

/// Parameters of the synthetic world; generation is a pure function of
/// this struct (the seed included).
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub shape: [usize; 3],
    /// Number of non-background structures (labels 1..=K).
    pub num_structures: usize,
    /// Ellipsoid semi-axis range in voxels.
    pub radius_range: (f64, f64),
    pub background_intensity: f64,
    /// Structure intensities are evenly spaced across this range.
    pub intensity_range: (f64, f64),
    /// Std-dev of additive Gaussian image noise (clamped back to [0,1]).
    pub noise_std: f64,
    /// Maximum displacement magnitude of generated fields, in voxels.
    pub amplitude: f64,
    /// Gaussian smoothing radius of generated fields, in voxels.
    pub smooth_radius: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            shape: [32, 32, 32],
            num_structures: 4,
            radius_range: (3.0, 5.0),
            background_intensity: 0.08,
            intensity_range: (0.35, 0.95),
            noise_std: 0.02,
            amplitude: 3.0,
            smooth_radius: 4.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.shape;
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Config("volume shape must be positive".into()));
        }
        let (rmin, rmax) = self.radius_range;
        if !(rmin > 0.0 && rmax >= rmin) {
            return Err(Error::Config(format!(
                "invalid radius range {:?}",
                self.radius_range
            )));
        }
        let min_extent = d.min(h).min(w) as f64;
        if 2.0 * (rmax + 1.0) >= min_extent {
            return Err(Error::Config(format!(
                "radius {rmax} does not fit into shape {:?}",
                self.shape
            )));
        }
        let (ilo, ihi) = self.intensity_range;
        if !(0.0..=1.0).contains(&ilo) || !(0.0..=1.0).contains(&ihi) || ihi < ilo {
            return Err(Error::Config(format!(
                "intensity range {:?} must lie inside [0,1]",
                self.intensity_range
            )));
        }
        if !(0.0..=1.0).contains(&self.background_intensity) {
            return Err(Error::Config("background intensity must lie inside [0,1]".into()));
        }
        if self.noise_std < 0.0 || self.amplitude < 0.0 || self.smooth_radius < 0.0 {
            return Err(Error::Config(
                "noise, amplitude and smoothing radius must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Deterministic per-purpose seed derivation.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    splitmix64(base ^ salt.wrapping_mul(0xA076_1D64_78BD_642F))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub(crate) fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let dz = (z as f64 - self.center[0]) / self.radii[0];
        let dy = (y as f64 - self.center[1]) / self.radii[1];
        let dx = (x as f64 - self.center[2]) / self.radii[2];
        dz * dz + dy * dy + dx * dx <= 1.0
    }

    fn max_radius(&self) -> f64 {
        self.radii[0].max(self.radii[1]).max(self.radii[2])
    }
}

pub(crate) fn place_structures(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Ellipsoid>> {
    const MAX_RETRIES: usize = 200;
    let (rmin, rmax) = spec.radius_range;
    let mut placed: Vec<Ellipsoid> = Vec::with_capacity(spec.num_structures);
    for k in 0..spec.num_structures {
        let mut ok = false;
        for _ in 0..MAX_RETRIES {
            let radii = [
                rng.gen_range(rmin..=rmax),
                rng.gen_range(rmin..=rmax),
                rng.gen_range(rmin..=rmax),
            ];
            let mut center = [0.0; 3];
            let mut fits = true;
            for axis in 0..3 {
                let lo = radii[axis] + 1.0;
                let hi = spec.shape[axis] as f64 - 2.0 - radii[axis];
                if hi <= lo {
                    fits = false;
                    break;
                }
                center[axis] = rng.gen_range(lo..=hi);
            }
            if !fits {
                continue;
            }
            let cand = Ellipsoid { center, radii };
            let separated = placed.iter().all(|e| {
                let dist = (0..3)
                    .map(|a| (e.center[a] - cand.center[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                dist >= 0.75 * (e.max_radius() + cand.max_radius())
            });
            if separated {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Generation(format!(
                "could not place structure {} of {} after {MAX_RETRIES} retries",
                k + 1,
                spec.num_structures
            )));
        }
    }
    Ok(placed)
}

/// Generate the reference volume: labelled ellipsoids on a dim background,
/// with optional Gaussian image noise. Deterministic per seed.
pub fn make_atlas(spec: &SyntheticSpec) -> Result<(ImageVolume, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let structures = place_structures(spec, &mut rng)?;

    let [d, h, w] = spec.shape;
    let mut image = vec![spec.background_intensity; d * h * w];
    let mut labels = vec![0u8; d * h * w];
    let (ilo, ihi) = spec.intensity_range;
    let k_span = (spec.num_structures.max(2) - 1) as f64;
    for (k, e) in structures.iter().enumerate() {
        let intensity = ilo + (ihi - ilo) * k as f64 / k_span;
        let mut i = 0;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if e.contains(z, y, x) {
                        image[i] = intensity;
                        labels[i] = (k + 1) as u8;
                    }
                    i += 1;
                }
            }
        }
    }
    for k in 1..=spec.num_structures {
        if !labels.iter().any(|&l| l as usize == k) {
            return Err(Error::Generation(format!("structure {k} rasterized to zero voxels")));
        }
    }
    if spec.noise_std > 0.0 {
        for v in image.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v + spec.noise_std * n).clamp(0.0, 1.0);
        }
    }
    Ok((
        ImageVolume::new(spec.shape, [1.0; 3], image)?,
        LabelVolume::new(spec.shape, [1.0; 3], labels)?,
    ))
}

/// Separable Gaussian blur, sigma in voxels. Periodic boundaries keep the
/// smoothed noise statistically stationary, so the max-amplitude rescale
/// is not dominated by border artefacts.
fn gaussian_smooth(data: &mut Vec<f64>, shape: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let half = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-half..=half)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let [d, h, w] = shape;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut tmp = vec![0.0; data.len()];
    for axis in 0..3 {
        let n = shape[axis] as i64;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let pos = [z as i64, y as i64, x as i64];
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let off = ki as i64 - half;
                        let mut p = pos;
                        p[axis] = (p[axis] + off).rem_euclid(n);
                        acc += kv * data[idx(p[0] as usize, p[1] as usize, p[2] as usize)];
                    }
                    tmp[idx(z, y, x)] = acc;
                }
            }
        }
        std::mem::swap(data, &mut tmp);
    }
}

/// Smooth random displacement field: i.i.d. Gaussian noise blurred by a
/// separable Gaussian of radius `r`, rescaled so the largest displacement
/// magnitude equals the amplitude. Regenerates until the minimum Jacobian
/// determinant exceeds 0.1.
pub fn make_smooth_field(spec: &SyntheticSpec) -> Result<DisplacementField> {
    const MAX_ATTEMPTS: usize = 20;
    spec.validate()?;
    let [d, h, w] = spec.shape;
    let vox = d * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);

    for _ in 0..MAX_ATTEMPTS {
        let mut data: Vec<f64> = (0..3 * vox).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for comp in 0..3 {
            let mut slice = data[comp * vox..(comp + 1) * vox].to_vec();
            gaussian_smooth(&mut slice, spec.shape, spec.smooth_radius);
            data[comp * vox..(comp + 1) * vox].copy_from_slice(&slice);
        }
        let max_norm = (0..vox)
            .map(|i| {
                (data[i] * data[i] + data[vox + i] * data[vox + i] + data[2 * vox + i] * data[2 * vox + i])
                    .sqrt()
            })
            .fold(0.0, f64::max);
        let scale = if max_norm > 0.0 { spec.amplitude / max_norm } else { 0.0 };
        for v in data.iter_mut() {
            *v *= scale;
        }
        let field = DisplacementField::new(spec.shape, data)?;
        if spec.amplitude == 0.0 {
            return Ok(field);
        }
        if d >= 3 && h >= 3 && w >= 3 {
            let jd = jacobian_determinant(&field)?;
            let min_det = jd.data.iter().cloned().fold(f64::INFINITY, f64::min);
            if min_det <= 0.1 {
                continue;
            }
        }
        return Ok(field);
    }
    Err(Error::Generation(format!(
        "no field with min Jacobian determinant > 0.1 after {MAX_ATTEMPTS} attempts \
         (amplitude {}, smoothing radius {})",
        spec.amplitude, spec.smooth_radius
    )))
}

/// Warp the atlas and its labels by the same field, producing one sample
/// with exact ground truth.
pub fn deform_sample(
    atlas_image: &ImageVolume,
    atlas_labels: &LabelVolume,
    field: &DisplacementField,
) -> Result<(ImageVolume, LabelVolume)> {
    Ok((warp_image(atlas_image, field)?, warp_nearest(atlas_labels, field)?))
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Allow the random flip along the H axis.
    pub flip: bool,
    /// Rotation about the D axis is drawn from U(-max, max) degrees.
    pub max_angle_deg: f64,
    /// Target crop extents.
    pub crop_shape: [usize; 3],
}

impl AugmentConfig {
    pub fn for_shape(shape: [usize; 3]) -> AugmentConfig {
        AugmentConfig {
            flip: true,
            max_angle_deg: 10.0,
            crop_shape: shape,
        }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone)]
pub struct Augmentation {
    pub flip_y: bool,
    pub angle_deg: f64,
    pub crop_origin: [usize; 3],
    pub crop_shape: [usize; 3],
}

impl Augmentation {
    pub fn identity(shape: [usize; 3]) -> Augmentation {
        Augmentation {
            flip_y: false,
            angle_deg: 0.0,
            crop_origin: [0; 3],
            crop_shape: shape,
        }
    }

    /// Draw flip, angle and crop origin for a volume of `shape`.
    pub fn sample(cfg: &AugmentConfig, shape: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Augmentation> {
        for axis in 0..3 {
            if cfg.crop_shape[axis] > shape[axis] {
                return Err(Error::Config(format!(
                    "crop shape {:?} exceeds volume shape {:?}",
                    cfg.crop_shape, shape
                )));
            }
        }
        let flip_y = cfg.flip && rng.gen_bool(0.5);
        let angle_deg = if cfg.max_angle_deg > 0.0 {
            rng.gen_range(-cfg.max_angle_deg..cfg.max_angle_deg)
        } else {
            0.0
        };
        let mut crop_origin = [0; 3];
        for axis in 0..3 {
            let slack = shape[axis] - cfg.crop_shape[axis];
            crop_origin[axis] = if slack > 0 { rng.gen_range(0..=slack) } else { 0 };
        }
        Ok(Augmentation {
            flip_y,
            angle_deg,
            crop_origin,
            crop_shape: cfg.crop_shape,
        })
    }

    fn rotate_coords(&self, shape: [usize; 3], h: usize, w: usize) -> (f64, f64) {
        let ch = (shape[1] as f64 - 1.0) / 2.0;
        let cw = (shape[2] as f64 - 1.0) / 2.0;
        let theta = self.angle_deg.to_radians();
        let (dh, dw) = (h as f64 - ch, w as f64 - cw);
        (
            ch + theta.cos() * dh + theta.sin() * dw,
            cw - theta.sin() * dh + theta.cos() * dw,
        )
    }

    pub fn apply_image(&self, vol: &ImageVolume) -> ImageVolume {
        let [d, h, w] = vol.shape;
        // Flip along H.
        let mut flipped = vol.data.clone();
        if self.flip_y {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        flipped[(z * h + y) * w + x] = vol.data[(z * h + (h - 1 - y)) * w + x];
                    }
                }
            }
        }
        // In-plane rotation about the D axis, bilinear with border clamp.
        let mut rotated = flipped.clone();
        if self.angle_deg != 0.0 {
            for z in 0..d {
                let slice = &flipped[z * h * w..(z + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = self.rotate_coords(vol.shape, y, x);
                        let y0 = sy.floor();
                        let x0 = sx.floor();
                        let (ty, tx) = (sy - y0, sx - x0);
                        let yi0 = (y0 as i64).clamp(0, h as i64 - 1) as usize;
                        let yi1 = (y0 as i64 + 1).clamp(0, h as i64 - 1) as usize;
                        let xi0 = (x0 as i64).clamp(0, w as i64 - 1) as usize;
                        let xi1 = (x0 as i64 + 1).clamp(0, w as i64 - 1) as usize;
                        let v = slice[yi0 * w + xi0] * (1.0 - ty) * (1.0 - tx)
                            + slice[yi0 * w + xi1] * (1.0 - ty) * tx
                            + slice[yi1 * w + xi0] * ty * (1.0 - tx)
                            + slice[yi1 * w + xi1] * ty * tx;
                        rotated[(z * h + y) * w + x] = v;
                    }
                }
            }
        }
        let data = crop(&rotated, vol.shape, self.crop_origin, self.crop_shape);
        ImageVolume {
            shape: self.crop_shape,
            spacing: vol.spacing,
            data,
        }
    }

    pub fn apply_labels(&self, vol: &LabelVolume) -> LabelVolume {
        let [d, h, w] = vol.shape;
        let mut flipped = vol.data.clone();
        if self.flip_y {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        flipped[(z * h + y) * w + x] = vol.data[(z * h + (h - 1 - y)) * w + x];
                    }
                }
            }
        }
        let mut rotated = flipped.clone();
        if self.angle_deg != 0.0 {
            for z in 0..d {
                let slice = &flipped[z * h * w..(z + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = self.rotate_coords(vol.shape, y, x);
                        let yi = (sy.round() as i64).clamp(0, h as i64 - 1) as usize;
                        let xi = (sx.round() as i64).clamp(0, w as i64 - 1) as usize;
                        rotated[(z * h + y) * w + x] = slice[yi * w + xi];
                    }
                }
            }
        }
        let data = crop(&rotated, vol.shape, self.crop_origin, self.crop_shape);
        LabelVolume {
            shape: self.crop_shape,
            spacing: vol.spacing,
            data,
        }
    }
}

fn crop<T: Copy>(data: &[T], shape: [usize; 3], origin: [usize; 3], target: [usize; 3]) -> Vec<T> {
    let [_, h, w] = shape;
    let mut out = Vec::with_capacity(target[0] * target[1] * target[2]);
    for z in 0..target[0] {
        for y in 0..target[1] {
            let base = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
            out.extend_from_slice(&data[base..base + target[2]]);
        }
    }
    out
}

/// Apply one seeded augmentation draw to an image and its labels.
pub fn augment(
    image: &ImageVolume,
    labels: &LabelVolume,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(ImageVolume, LabelVolume)> {
    if image.shape != labels.shape {
        return Err(Error::Dimension(format!(
            "augment: image {:?} vs labels {:?}",
            image.shape, labels.shape
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug = Augmentation::sample(cfg, image.shape, &mut rng)?;
    Ok((aug.apply_image(image), aug.apply_labels(labels)))
}

// ---------------------------------------------------------------------------
// Dataset generation and directory layout

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub image: ImageVolume,
    pub labels: LabelVolume,
    pub field: DisplacementField,
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub atlas_image: ImageVolume,
    pub atlas_labels: LabelVolume,
    pub samples: Vec<GeneratedSample>,
}

/// Generate the atlas plus `n` deformed samples. Sample `i` uses a field
/// seeded by `derive_seed(spec.seed, i+1)`.
pub fn generate_dataset(spec: &SyntheticSpec, n: usize) -> Result<GeneratedDataset> {
    let (atlas_image, atlas_labels) = make_atlas(spec)?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let sample_spec = SyntheticSpec {
            seed: derive_seed(spec.seed, i as u64 + 1),
            ..spec.clone()
        };
        let field = make_smooth_field(&sample_spec)?;
        let (image, labels) = deform_sample(&atlas_image, &atlas_labels, &field)?;
        samples.push(GeneratedSample { image, labels, field });
    }
    Ok(GeneratedDataset {
        atlas_image,
        atlas_labels,
        samples,
    })
}

pub fn atlas_image_path(dir: &Path) -> PathBuf {
    dir.join("atlas.clmv")
}

pub fn atlas_labels_path(dir: &Path) -> PathBuf {
    dir.join("atlas_labels.clmv")
}

pub fn sample_image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("sample_{i:04}.clmv"))
}

pub fn sample_labels_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("sample_{i:04}_labels.clmv"))
}

pub fn sample_field_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("sample_{i:04}_field.clmv"))
}

pub fn write_dataset(dir: &Path, ds: &GeneratedDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_image(&atlas_image_path(dir), &ds.atlas_image)?;
    write_labels(&atlas_labels_path(dir), &ds.atlas_labels)?;
    for (i, s) in ds.samples.iter().enumerate() {
        write_image(&sample_image_path(dir, i), &s.image)?;
        write_labels(&sample_labels_path(dir, i), &s.labels)?;
        write_field(&sample_field_path(dir, i), &s.field)?;
    }
    Ok(())
}

/// In-memory dataset as the trainer and evaluator consume it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub atlas_image: ImageVolume,
    pub atlas_labels: LabelVolume,
    pub samples: Vec<ImageVolume>,
    pub sample_labels: Vec<LabelVolume>,
}

/// Load a dataset directory (`atlas.clmv`, `atlas_labels.clmv`,
/// `sample_NNNN{,_labels}.clmv` counted from 0 until the first gap).
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let atlas_image = read_image(&atlas_image_path(dir))?;
    let atlas_labels = read_labels(&atlas_labels_path(dir))?;
    let mut samples = Vec::new();
    let mut sample_labels = Vec::new();
    let mut i = 0;
    while sample_image_path(dir, i).exists() {
        samples.push(read_image(&sample_image_path(dir, i))?);
        sample_labels.push(read_labels(&sample_labels_path(dir, i))?);
        i += 1;
    }
    Ok(Dataset {
        atlas_image,
        atlas_labels,
        samples,
        sample_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            shape: [16, 16, 16],
            num_structures: 2,
            radius_range: (2.0, 4.0),
            noise_std: 0.0,
            amplitude: 1.5,
            smooth_radius: 2.0,
            seed: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn atlas_labels_match_analytic_ellipsoid_membership() {
        let spec = SyntheticSpec {
            num_structures: 1,
            noise_std: 0.0,
            radius_range: (5.0, 5.0),
            ..SyntheticSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(0);
        let structures = place_structures(&spec, &mut rng).unwrap();
        let (_, labels) = make_atlas(&spec).unwrap();
        let e = structures[0];
        let [d, h, w] = spec.shape;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let expect = if e.contains(z, y, x) { 1 } else { 0 };
                    assert_eq!(labels.at(z, y, x), expect, "voxel ({z},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SyntheticSpec::default();
        let (img1, lab1) = make_atlas(&spec).unwrap();
        let (img2, lab2) = make_atlas(&spec).unwrap();
        assert_eq!(img1, img2);
        assert_eq!(lab1, lab2);
        let f1 = make_smooth_field(&spec).unwrap();
        let f2 = make_smooth_field(&spec).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn voxel_counts_stay_within_volume_bounds() {
        // Rasterized ellipsoid volume is close to 4/3 pi rz*ry*rx; allow
        // generous slack for discretization and partial overlap.
        let base = SyntheticSpec::default();
        let (rmin, rmax) = base.radius_range;
        let vmin = 0.25 * 4.0 / 3.0 * std::f64::consts::PI * rmin.powi(3);
        let vmax = 1.5 * 4.0 / 3.0 * std::f64::consts::PI * rmax.powi(3);
        for seed in 0..50 {
            let spec = SyntheticSpec { seed, ..base.clone() };
            let (_, labels) = make_atlas(&spec).unwrap();
            for k in 1..=spec.num_structures {
                let count = labels.data.iter().filter(|&&l| l as usize == k).count() as f64;
                assert!(
                    count >= vmin && count <= vmax,
                    "seed {seed} label {k}: {count} voxels outside [{vmin:.0}, {vmax:.0}]"
                );
            }
        }
    }

    #[test]
    fn zero_amplitude_gives_zero_field() {
        let spec = SyntheticSpec {
            amplitude: 0.0,
            ..small_spec()
        };
        let f = make_smooth_field(&spec).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn field_amplitude_is_bounded_by_construction() {
        for seed in 0..10 {
            let spec = SyntheticSpec { seed, ..small_spec() };
            let f = make_smooth_field(&spec).unwrap();
            assert!(f.max_norm() <= spec.amplitude + 1e-9);
        }
    }

    #[test]
    fn generated_fields_keep_positive_jacobian() {
        for seed in 0..20 {
            let spec = SyntheticSpec { seed, ..SyntheticSpec::default() };
            let f = make_smooth_field(&spec).unwrap();
            let jd = jacobian_determinant(&f).unwrap();
            let min_det = jd.data.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min_det > 0.1, "seed {seed}: min det {min_det}");
        }
    }

    #[test]
    fn deform_by_zero_field_copies_both() {
        let spec = small_spec();
        let (img, lab) = make_atlas(&spec).unwrap();
        let zero = DisplacementField::zeros(spec.shape);
        let (dimg, dlab) = deform_sample(&img, &lab, &zero).unwrap();
        assert_eq!(dimg.data, img.data);
        assert_eq!(dlab.data, lab.data);
    }

    #[test]
    fn identity_augmentation_with_corner_crop_is_a_sub_block_copy() {
        let spec = small_spec();
        let (img, lab) = make_atlas(&spec).unwrap();
        let aug = Augmentation {
            flip_y: false,
            angle_deg: 0.0,
            crop_origin: [0, 0, 0],
            crop_shape: [8, 8, 8],
        };
        let out = aug.apply_image(&img);
        let lout = aug.apply_labels(&lab);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(out.at(z, y, x), img.at(z, y, x));
                    assert_eq!(lout.at(z, y, x), lab.at(z, y, x));
                }
            }
        }
    }

    #[test]
    fn double_y_flip_is_identity() {
        let spec = small_spec();
        let (img, lab) = make_atlas(&spec).unwrap();
        let aug = Augmentation {
            flip_y: true,
            angle_deg: 0.0,
            crop_origin: [0, 0, 0],
            crop_shape: img.shape,
        };
        let once = aug.apply_image(&img);
        let twice = aug.apply_image(&once);
        assert_eq!(twice.data, img.data);
        let lonce = aug.apply_labels(&lab);
        let ltwice = aug.apply_labels(&lonce);
        assert_eq!(ltwice.data, lab.data);
    }

    #[test]
    fn augmentation_never_invents_labels() {
        let spec = small_spec();
        let (img, lab) = make_atlas(&spec).unwrap();
        let cfg = AugmentConfig {
            flip: true,
            max_angle_deg: 10.0,
            crop_shape: [12, 12, 12],
        };
        let input_set = lab.label_set();
        for seed in 0..100 {
            let (_, alab) = augment(&img, &lab, &cfg, seed).unwrap();
            for l in alab.label_set() {
                assert!(input_set.contains(&l), "seed {seed} invented label {l}");
            }
        }
    }

    #[test]
    fn oversized_crop_is_config_error() {
        let spec = small_spec();
        let (img, lab) = make_atlas(&spec).unwrap();
        let cfg = AugmentConfig {
            flip: false,
            max_angle_deg: 0.0,
            crop_shape: [64, 64, 64],
        };
        assert!(matches!(
            augment(&img, &lab, &cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dataset_roundtrips_through_directory() {
        let spec = small_spec();
        let ds = generate_dataset(&spec, 2).unwrap();
        let dir = std::env::temp_dir().join(format!("clm_ds_{}", std::process::id()));
        write_dataset(&dir, &ds).unwrap();
        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.samples.len(), 2);
        assert_eq!(loaded.atlas_image, ds.atlas_image);
        assert_eq!(loaded.samples[1], ds.samples[1].image);
        assert_eq!(loaded.sample_labels[0], ds.samples[0].labels);
        std::fs::remove_dir_all(&dir).ok();
    }
}
