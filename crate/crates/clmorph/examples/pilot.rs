use std::time::Instant;

use clmorph::metrics::dice;
use clmorph::synthdata::{generate_dataset, Dataset, SyntheticSpec};
use clmorph::trainer::{image_tensor, train, TrainConfig};
use clmorph::warp::{warp_nearest, DisplacementField};

fn main() {
    let spec = SyntheticSpec::default(); // seed 7, 32^3, amplitude 3, radius 4
    let all = generate_dataset(&spec, 25).unwrap();
    let train_ds = Dataset {
        atlas_image: all.atlas_image.clone(),
        atlas_labels: all.atlas_labels.clone(),
        samples: all.samples[..20].iter().map(|s| s.image.clone()).collect(),
        sample_labels: all.samples[..20].iter().map(|s| s.labels.clone()).collect(),
    };
    let test: Vec<_> = all.samples[20..].to_vec();
    let labels = all.atlas_labels.foreground_labels();

    // Baseline: atlas labels vs deformed gt labels.
    let mut base = 0.0;
    for s in &test {
        for &l in &labels {
            base += dice(&all.atlas_labels, &s.labels, l).unwrap();
        }
    }
    base /= (test.len() * labels.len()) as f64;
    println!("baseline dice (no registration): {base:.4}");

    let cfg = TrainConfig::default();
    let t0 = Instant::now();
    let run = train(&train_ds, &cfg).unwrap();
    println!(
        "trained 60 epochs in {:.1} min ({} steps, clip events {})",
        t0.elapsed().as_secs_f64() / 60.0,
        run.records.len(),
        run.state.clip_events
    );
    for e in [0, 9, 19, 29, 39, 49, 59] {
        let h = &run.state.loss_history[e];
        println!(
            "epoch {e:2}: total {:10.2} recon {:10.2} smooth {:10.2} contrast {:.4}",
            h.total, h.recon, h.smooth, h.contrast
        );
    }

    // Segmentation: field from (moving=atlas, fixed=sample), test-time mu.
    let atlas_t = image_tensor(&all.atlas_image);
    let mut seg_fwd = 0.0;
    let mut seg_rev = 0.0;
    let mut mse_reg = 0.0;
    let mut mse_base = 0.0;
    for s in &test {
        let sample_t = image_tensor(&s.image);
        let out = run.network.forward_pair(&atlas_t, &sample_t).unwrap();
        let field = DisplacementField::from_tensor(&out.field.mu).unwrap();
        let pred = warp_nearest(&all.atlas_labels, &field).unwrap();
        for &l in &labels {
            seg_fwd += dice(&pred, &s.labels, l).unwrap();
        }
        // Reverse feeding for comparison.
        let out_r = run.network.forward_pair(&sample_t, &atlas_t).unwrap();
        let field_r = DisplacementField::from_tensor(&out_r.field.mu).unwrap();
        let pred_r = warp_nearest(&all.atlas_labels, &field_r).unwrap();
        for &l in &labels {
            seg_rev += dice(&pred_r, &s.labels, l).unwrap();
        }
        // Registration by-product: warp sample toward atlas.
        let warped = clmorph::warp::warp_trilinear(&sample_t, &out_r.field.mu).unwrap();
        let a = atlas_t.to_vec();
        let w = warped.to_vec();
        let s_raw = sample_t.to_vec();
        mse_reg += a.iter().zip(&w).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        mse_base += a.iter().zip(&s_raw).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    }
    let n = (test.len() * labels.len()) as f64;
    println!("segmentation dice, z = net(atlas, sample): {:.4}", seg_fwd / n);
    println!("segmentation dice, z = net(sample, atlas): {:.4}", seg_rev / n);
    println!(
        "registration MSE: {:.5} vs unregistered {:.5} (ratio {:.3})",
        mse_reg / test.len() as f64,
        mse_base / test.len() as f64,
        mse_reg / mse_base
    );
}
