//! Segmentation quality metrics: Dice overlap, Hausdorff distance and
//! average symmetric surface distance, plus per-run report assembly.
//!
//! Distances are Euclidean in voxel units over surface voxels (mask voxels
//! with at least one of their six face-neighbours outside the mask; the
//! volume boundary counts as outside). Desk-scale masks are small, so the
//! distance computation is exact brute force.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::synthdata::LabelVolume;

fn check_shapes(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.shape != gt.shape {
        return Err(Error::Dimension(format!(
            "metric shapes differ: {:?} vs {:?}",
            pred.shape, gt.shape
        )));
    }
    Ok(())
}

fn mask_of(vol: &LabelVolume, label: u8) -> Vec<bool> {
    vol.data.iter().map(|&l| l == label).collect()
}

/// Dice overlap `2|P n G| / (|P| + |G|)`; 1.0 when both masks are empty,
/// 0.0 when exactly one is.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, label: u8) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut p = 0usize;
    let mut g = 0usize;
    let mut both = 0usize;
    for (a, b) in pred.data.iter().zip(&gt.data) {
        let ap = *a == label;
        let bg = *b == label;
        p += ap as usize;
        g += bg as usize;
        both += (ap && bg) as usize;
    }
    Ok(match (p, g) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (p + g) as f64,
    })
}

/// Voxels of the mask with at least one 6-neighbour outside it.
pub fn surface_voxels(mask: &[bool], shape: [usize; 3]) -> Vec<[usize; 3]> {
    let [d, h, w] = shape;
    debug_assert_eq!(mask.len(), d * h * w);
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[idx(z, y, x)] {
                    continue;
                }
                let boundary = z == 0
                    || z == d - 1
                    || y == 0
                    || y == h - 1
                    || x == 0
                    || x == w - 1
                    || !mask[idx(z - 1, y, x)]
                    || !mask[idx(z + 1, y, x)]
                    || !mask[idx(z, y - 1, x)]
                    || !mask[idx(z, y + 1, x)]
                    || !mask[idx(z, y, x - 1)]
                    || !mask[idx(z, y, x + 1)];
                if boundary {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn sq_dist(a: [usize; 3], b: [usize; 3]) -> f64 {
    (0..3)
        .map(|i| {
            let d = a[i] as f64 - b[i] as f64;
            d * d
        })
        .sum()
}

fn min_dist(p: [usize; 3], surface: &[[usize; 3]]) -> f64 {
    surface
        .iter()
        .map(|&s| sq_dist(p, s))
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

fn surfaces_for(pred: &LabelVolume, gt: &LabelVolume, label: u8) -> Result<(Vec<[usize; 3]>, Vec<[usize; 3]>)> {
    check_shapes(pred, gt)?;
    let sp = surface_voxels(&mask_of(pred, label), pred.shape);
    let sg = surface_voxels(&mask_of(gt, label), gt.shape);
    if sp.is_empty() || sg.is_empty() {
        return Err(Error::Domain(format!(
            "surface distance undefined for label {label}: empty mask \
             (pred {} voxels, gt {} voxels)",
            sp.len(),
            sg.len()
        )));
    }
    Ok((sp, sg))
}

/// Symmetric Hausdorff distance between mask surfaces, voxel units.
/// Both masks must be non-empty.
pub fn hausdorff(pred: &LabelVolume, gt: &LabelVolume, label: u8) -> Result<f64> {
    let (sp, sg) = surfaces_for(pred, gt, label)?;
    let fwd = sp.iter().map(|&p| min_dist(p, &sg)).fold(0.0, f64::max);
    let bwd = sg.iter().map(|&g| min_dist(g, &sp)).fold(0.0, f64::max);
    Ok(fwd.max(bwd))
}

/// Average symmetric surface distance: mean of the two directed average
/// surface distances, voxel units. Both masks must be non-empty.
pub fn assd(pred: &LabelVolume, gt: &LabelVolume, label: u8) -> Result<f64> {
    let (sp, sg) = surfaces_for(pred, gt, label)?;
    let fwd: f64 = sp.iter().map(|&p| min_dist(p, &sg)).sum::<f64>() / sp.len() as f64;
    let bwd: f64 = sg.iter().map(|&g| min_dist(g, &sp)).sum::<f64>() / sg.len() as f64;
    Ok(0.5 * (fwd + bwd))
}

/// Per-label metric values for one sample; distances are `None` when the
/// metric is undefined (empty mask).
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub label: u8,
    pub dice: f64,
    pub hd: Option<f64>,
    pub assd: Option<f64>,
}

/// Evaluate one prediction against ground truth over `labels`.
pub fn evaluate_pair(pred: &LabelVolume, gt: &LabelVolume, labels: &[u8]) -> Result<Vec<MetricRow>> {
    labels
        .iter()
        .map(|&label| {
            let d = dice(pred, gt, label)?;
            let hd = match hausdorff(pred, gt, label) {
                Ok(v) => Some(v),
                Err(Error::Domain(_)) => None,
                Err(e) => return Err(e),
            };
            let asd = match assd(pred, gt, label) {
                Ok(v) => Some(v),
                Err(Error::Domain(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(MetricRow {
                label,
                dice: d,
                hd,
                assd: asd,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SampleReport {
    pub name: String,
    pub rows: Vec<MetricRow>,
}

/// Mean and population standard deviation of defined values; `None` when
/// no value is defined.
fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Metrics for a set of samples with macro aggregates.
#[derive(Debug, Clone)]
pub struct RegionReport {
    pub samples: Vec<SampleReport>,
}

impl RegionReport {
    /// Macro aggregate of one metric over every (sample, label) pair.
    pub fn aggregate(&self, metric: impl Fn(&MetricRow) -> Option<f64>) -> Option<(f64, f64)> {
        let values: Vec<f64> = self
            .samples
            .iter()
            .flat_map(|s| s.rows.iter())
            .filter_map(&metric)
            .collect();
        mean_std(&values)
    }

    pub fn mean_dice(&self) -> f64 {
        self.aggregate(|r| Some(r.dice)).map(|(m, _)| m).unwrap_or(0.0)
    }

    /// Line-oriented human-readable report.
    pub fn to_text(&self) -> String {
        let fmt_opt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "missing".to_string(),
        };
        let mut out = String::new();
        for s in &self.samples {
            for r in &s.rows {
                let _ = writeln!(
                    out,
                    "sample={} label={} dice={:.4} hd={} assd={}",
                    s.name,
                    r.label,
                    r.dice,
                    fmt_opt(r.hd),
                    fmt_opt(r.assd)
                );
            }
        }
        let agg = |name: &str, f: &dyn Fn(&MetricRow) -> Option<f64>| match self.aggregate(f) {
            Some((m, s)) => format!("{name} mean={m:.4} std={s:.4}"),
            None => format!("{name} missing"),
        };
        let _ = writeln!(out, "{}", agg("dice", &|r| Some(r.dice)));
        let _ = writeln!(out, "{}", agg("hd", &|r| r.hd));
        let _ = writeln!(out, "{}", agg("assd", &|r| r.assd));
        out
    }

    /// Comma-separated table. Header `sample,label,dice,hd,assd`; undefined
    /// distances are empty cells; two trailing aggregate rows use `mean`
    /// and `std` in the sample column with an empty label.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        let mut out = String::from("sample,label,dice,hd,assd\n");
        for s in &self.samples {
            for r in &s.rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    s.name,
                    r.label,
                    r.dice,
                    cell(r.hd),
                    cell(r.assd)
                );
            }
        }
        let dice_ms = self.aggregate(|r| Some(r.dice));
        let hd_ms = self.aggregate(|r| r.hd);
        let assd_ms = self.aggregate(|r| r.assd);
        let _ = writeln!(
            out,
            "mean,,{},{},{}",
            cell(dice_ms.map(|v| v.0)),
            cell(hd_ms.map(|v| v.0)),
            cell(assd_ms.map(|v| v.0))
        );
        let _ = writeln!(
            out,
            "std,,{},{},{}",
            cell(dice_ms.map(|v| v.1)),
            cell(hd_ms.map(|v| v.1)),
            cell(assd_ms.map(|v| v.1))
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol(shape: [usize; 3], positions: &[[usize; 3]], label: u8) -> LabelVolume {
        let mut v = LabelVolume::zeros(shape);
        for &[z, y, x] in positions {
            v.data[(z * shape[1] + y) * shape[2] + x] = label;
        }
        v
    }

    #[test]
    fn dice_identical_disjoint_and_half() {
        let a = vol([4, 4, 4], &[[1, 1, 1], [1, 1, 2]], 1);
        let b = vol([4, 4, 4], &[[2, 2, 2], [2, 2, 3]], 1);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        // |P|=2, |G|=2, overlap 1 -> 0.5.
        let c = vol([4, 4, 4], &[[1, 1, 2], [1, 1, 3]], 1);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.5);
    }

    #[test]
    fn dice_empty_mask_conventions() {
        let empty = LabelVolume::zeros([3, 3, 3]);
        let full = vol([3, 3, 3], &[[1, 1, 1]], 1);
        assert_eq!(dice(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(dice(&empty, &full, 1).unwrap(), 0.0);
        assert_eq!(dice(&full, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mut a = LabelVolume::zeros([5, 5, 5]);
            let mut b = LabelVolume::zeros([5, 5, 5]);
            for v in a.data.iter_mut() {
                *v = rng.gen_range(0..2);
            }
            for v in b.data.iter_mut() {
                *v = rng.gen_range(0..2);
            }
            assert_eq!(dice(&a, &b, 1).unwrap(), dice(&b, &a, 1).unwrap());
        }
    }

    #[test]
    fn surface_of_single_voxel_is_itself() {
        let m = vol([3, 3, 3], &[[1, 1, 1]], 1);
        let s = surface_voxels(&m.data.iter().map(|&l| l == 1).collect::<Vec<_>>(), m.shape);
        assert_eq!(s, vec![[1, 1, 1]]);
    }

    #[test]
    fn surface_of_solid_cube_is_its_shell() {
        // 3x3x3 solid block inside a 5x5x5 volume: all but the centre voxel.
        let mut positions = Vec::new();
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    positions.push([z, y, x]);
                }
            }
        }
        let m = vol([5, 5, 5], &positions, 1);
        let mask: Vec<bool> = m.data.iter().map(|&l| l == 1).collect();
        let s = surface_voxels(&mask, m.shape);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[2, 2, 2]));
    }

    #[test]
    fn surface_matches_neighbourhood_oracle_on_random_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let shape = [6, 6, 6];
            let mask: Vec<bool> = (0..216).map(|_| rng.gen_bool(0.4)).collect();
            let got = surface_voxels(&mask, shape);
            // Oracle: enumerate offsets and count neighbours inside the mask.
            let mut expect = Vec::new();
            for z in 0..6usize {
                for y in 0..6usize {
                    for x in 0..6usize {
                        if !mask[(z * 6 + y) * 6 + x] {
                            continue;
                        }
                        let offsets: [[i64; 3]; 6] =
                            [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
                        let mut inside_neighbours = 0;
                        for off in offsets {
                            let nz = z as i64 + off[0];
                            let ny = y as i64 + off[1];
                            let nx = x as i64 + off[2];
                            if (0..6).contains(&nz) && (0..6).contains(&ny) && (0..6).contains(&nx) {
                                if mask[((nz * 6 + ny) * 6 + nx) as usize] {
                                    inside_neighbours += 1;
                                }
                            }
                        }
                        if inside_neighbours < 6 {
                            expect.push([z, y, x]);
                        }
                    }
                }
            }
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn hausdorff_and_assd_base_cases() {
        let a = vol([8, 8, 8], &[[2, 2, 2]], 1);
        assert_eq!(hausdorff(&a, &a, 1).unwrap(), 0.0);
        assert_eq!(assd(&a, &a, 1).unwrap(), 0.0);
        // Two single voxels 3 apart along one axis.
        let b = vol([8, 8, 8], &[[5, 2, 2]], 1);
        assert_eq!(hausdorff(&a, &b, 1).unwrap(), 3.0);
        assert_eq!(assd(&a, &b, 1).unwrap(), 3.0);
    }

    #[test]
    fn empty_mask_distances_are_domain_errors() {
        let a = vol([4, 4, 4], &[[1, 1, 1]], 1);
        let empty = LabelVolume::zeros([4, 4, 4]);
        assert!(matches!(hausdorff(&a, &empty, 1), Err(Error::Domain(_))));
        assert!(matches!(assd(&empty, &a, 1), Err(Error::Domain(_))));
    }

    /// Independent all-pairs oracle: full distance matrix between the two
    /// surfaces, then max/min/mean reductions over the matrix.
    fn matrix_oracle(sp: &[[usize; 3]], sg: &[[usize; 3]]) -> (f64, f64) {
        let dist = |a: [usize; 3], b: [usize; 3]| -> f64 {
            let dz = a[0] as f64 - b[0] as f64;
            let dy = a[1] as f64 - b[1] as f64;
            let dx = a[2] as f64 - b[2] as f64;
            (dz * dz + dy * dy + dx * dx).sqrt()
        };
        let matrix: Vec<Vec<f64>> = sp
            .iter()
            .map(|&p| sg.iter().map(|&g| dist(p, g)).collect())
            .collect();
        let row_mins: Vec<f64> = matrix
            .iter()
            .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
            .collect();
        let col_mins: Vec<f64> = (0..sg.len())
            .map(|j| matrix.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
            .collect();
        let hd = row_mins
            .iter()
            .cloned()
            .fold(0.0, f64::max)
            .max(col_mins.iter().cloned().fold(0.0, f64::max));
        let assd = 0.5
            * (row_mins.iter().sum::<f64>() / row_mins.len() as f64
                + col_mins.iter().sum::<f64>() / col_mins.len() as f64);
        (hd, assd)
    }

    #[test]
    fn distances_match_all_pairs_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..100 {
            let shape = [
                rng.gen_range(4..=16usize),
                rng.gen_range(4..=16usize),
                rng.gen_range(4..=16usize),
            ];
            let vox = shape[0] * shape[1] * shape[2];
            let mut a = LabelVolume::zeros(shape);
            let mut b = LabelVolume::zeros(shape);
            for v in a.data.iter_mut() {
                *v = rng.gen_bool(0.2) as u8;
            }
            for v in b.data.iter_mut() {
                *v = rng.gen_bool(0.2) as u8;
            }
            // Guarantee non-empty masks.
            let i = rng.gen_range(0..vox);
            a.data[i] = 1;
            b.data[rng.gen_range(0..vox)] = 1;

            let sp = surface_voxels(&a.data.iter().map(|&l| l == 1).collect::<Vec<_>>(), shape);
            let sg = surface_voxels(&b.data.iter().map(|&l| l == 1).collect::<Vec<_>>(), shape);
            let (hd_expect, assd_expect) = matrix_oracle(&sp, &sg);
            let hd_got = hausdorff(&a, &b, 1).unwrap();
            let assd_got = assd(&a, &b, 1).unwrap();
            assert_eq!(hd_got, hd_expect, "case {case}: hd");
            assert!((assd_got - assd_expect).abs() < 1e-12, "case {case}: assd");
        }
    }

    #[test]
    fn metrics_are_translation_invariant() {
        let base = [[3, 3, 3], [3, 3, 4], [3, 4, 3], [4, 3, 3]];
        let a = vol([12, 12, 12], &base, 1);
        let b = vol([12, 12, 12], &[[4, 4, 4], [4, 4, 5]], 1);
        let shift = |ps: &[[usize; 3]], o: usize| -> Vec<[usize; 3]> {
            ps.iter().map(|p| [p[0] + o, p[1] + o, p[2] + o]).collect()
        };
        let a2 = vol([12, 12, 12], &shift(&base, 3), 1);
        let b2 = vol([12, 12, 12], &shift(&[[4, 4, 4], [4, 4, 5]], 3), 1);
        assert_eq!(dice(&a, &b, 1).unwrap(), dice(&a2, &b2, 1).unwrap());
        assert_eq!(hausdorff(&a, &b, 1).unwrap(), hausdorff(&a2, &b2, 1).unwrap());
        assert_eq!(assd(&a, &b, 1).unwrap(), assd(&a2, &b2, 1).unwrap());
    }

    #[test]
    fn zero_field_warp_has_perfect_dice() {
        use crate::synthdata::{make_atlas, SyntheticSpec};
        use crate::warp::{warp_nearest, DisplacementField};
        let spec = SyntheticSpec {
            shape: [16, 16, 16],
            num_structures: 2,
            radius_range: (2.0, 4.0),
            ..SyntheticSpec::default()
        };
        let (_, labels) = make_atlas(&spec).unwrap();
        let warped = warp_nearest(&labels, &DisplacementField::zeros(labels.shape)).unwrap();
        for l in labels.foreground_labels() {
            assert_eq!(dice(&warped, &labels, l).unwrap(), 1.0);
        }
    }

    #[test]
    fn deformed_labels_have_imperfect_dice() {
        use crate::synthdata::{make_atlas, make_smooth_field, SyntheticSpec};
        use crate::warp::warp_nearest;
        let spec = SyntheticSpec::default();
        let (_, labels) = make_atlas(&spec).unwrap();
        let field = make_smooth_field(&spec).unwrap();
        let warped = warp_nearest(&labels, &field).unwrap();
        let mean: f64 = labels
            .foreground_labels()
            .iter()
            .map(|&l| dice(&warped, &labels, l).unwrap())
            .sum::<f64>()
            / labels.foreground_labels().len() as f64;
        assert!(mean < 1.0, "amplitude {} left labels unmoved", spec.amplitude);
    }

    #[test]
    fn report_aggregates_match_hand_computation() {
        let rows = |d: f64, h: f64| SampleReport {
            name: format!("s{d}"),
            rows: vec![MetricRow {
                label: 1,
                dice: d,
                hd: Some(h),
                assd: None,
            }],
        };
        let report = RegionReport {
            samples: vec![rows(0.5, 1.0), rows(0.7, 2.0), rows(0.9, 6.0)],
        };
        let (mean, std) = report.aggregate(|r| Some(r.dice)).unwrap();
        assert!((mean - 0.7).abs() < 1e-12);
        let expect_std = (((0.2f64).powi(2) * 2.0) / 3.0).sqrt();
        assert!((std - expect_std).abs() < 1e-12);
        let (hm, _) = report.aggregate(|r| r.hd).unwrap();
        assert!((hm - 3.0).abs() < 1e-12);
        assert!(report.aggregate(|r| r.assd).is_none());
        // CSV has header + 3 rows + mean + std.
        assert_eq!(report.to_csv().lines().count(), 6);
    }
}
