//! Optimization loop: Adam with bias correction, step-decayed learning
//! rate, seeded batching with in-batch negatives, gradient clipping,
//! resumable checkpoints and per-step loss logging.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{total_loss, ContrastiveAnchor, LossConfig, LossToggles, PairOutput};
use crate::ndtensor::{randn, Tensor};
use crate::network::{
    decode_named_tensors, encode_named_tensors, reparam_sample, ByteReader, NetConfig, Network,
};
use crate::synthdata::{Augmentation, AugmentConfig, Dataset, ImageVolume};
use crate::warp::warp_trilinear;

pub const TRAIN_CHECKPOINT_MAGIC: [u8; 4] = *b"CLMT";
pub const TRAIN_CHECKPOINT_VERSION: u16 = 1;

// RNG stream ids, all derived from the one training seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_NOISE: u64 = 3;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Global-norm gradient clip threshold.
    pub grad_clip: f64,
    pub toggles: LossToggles,
    pub loss: LossConfig,
    pub net: NetConfig,
    /// Apply the flip/rotation augmentation to each training pair.
    pub augment: bool,
    /// Pair two random volumes instead of sample-vs-atlas.
    pub random_pairs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 3e-3,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            epochs: 60,
            batch_size: 4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 7,
            grad_clip: 10.0,
            toggles: LossToggles::default(),
            loss: LossConfig::default(),
            net: NetConfig::default(),
            augment: true,
            random_pairs: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.toggles.contrast && self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be >= 2 when the contrastive loss is enabled".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.lr0 <= 0.0 || self.lr_decay_factor <= 0.0 || self.lr_decay_factor > 1.0 {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be >= 1".into()));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.loss.validate()?;
        self.net.validate()
    }
}

/// Learning rate at an epoch: `lr0 * factor^(epoch / every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Initialize network weights from a seed (fan-in-scaled convolutions,
/// near-identity normalization affines, near-zero field heads).
pub fn init_parameters(config: NetConfig, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_INIT);
    Network::init(config, &mut rng)
}

/// Mean per-term losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub total: f64,
    pub recon: f64,
    pub smooth: f64,
    pub contrast: f64,
}

/// One optimizer step as it is logged.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub recon: f64,
    pub smooth: f64,
    pub contrast: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    /// `epoch step lr L_total L_recon L_smooth L_contrast grad_norm`
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {} {} {}",
            self.epoch, self.step, self.lr, self.total, self.recon, self.smooth, self.contrast, self.grad_norm
        )
    }

    pub fn csv_header() -> &'static str {
        "epoch,step,lr,total,recon,smooth,contrast,grad_norm"
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.total, self.recon, self.smooth, self.contrast, self.grad_norm
        )
    }
}

/// Optimizer and loop state; serializable so training can resume with
/// bit-identical subsequent steps.
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    adam_m: Vec<Vec<f64>>,
    adam_v: Vec<Vec<f64>>,
    rng_shuffle: ChaCha8Rng,
    rng_augment: ChaCha8Rng,
    rng_noise: ChaCha8Rng,
    pub loss_history: Vec<EpochLosses>,
    /// Number of steps on which the gradient clip fired.
    pub clip_events: u64,
}

impl TrainState {
    pub fn new(network: &Network, cfg: &TrainConfig) -> TrainState {
        let params = network.parameters();
        let mut stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s);
            rng
        };
        TrainState {
            epoch: 0,
            step: 0,
            adam_m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            adam_v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            rng_shuffle: stream(STREAM_SHUFFLE),
            rng_augment: stream(STREAM_AUGMENT),
            rng_noise: stream(STREAM_NOISE),
            loss_history: Vec::new(),
            clip_events: 0,
        }
    }
}

/// One Adam update with bias correction over `(param, gradient)` pairs;
/// `None` gradients count as zero (moments still decay).
pub fn adam_step(
    params: &[(String, Tensor)],
    grads: &[Option<Vec<f64>>],
    state: &mut TrainState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != state.adam_m.len() || params.len() != grads.len() {
        return Err(Error::Usage(format!(
            "adam_step: {} params, {} moments, {} grads",
            params.len(),
            state.adam_m.len(),
            grads.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    for (i, (_, p)) in params.iter().enumerate() {
        let m = &mut state.adam_m[i];
        let v = &mut state.adam_v[i];
        let g = grads[i].as_deref();
        p.update_data(|data| {
            for j in 0..data.len() {
                let gj = g.map(|g| g[j]).unwrap_or(0.0);
                m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * gj;
                v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        });
    }
    Ok(())
}

/// Standardized `[1,D,H,W]` tensor view of an image volume.
pub fn image_tensor(vol: &ImageVolume) -> Tensor {
    let n = vol.normalized();
    let [d, h, w] = n.shape;
    Tensor::from_vec(&[1, d, h, w], n.data).expect("volume is self-consistent")
}

/// Forward one prepared batch of `(unaligned, reference)` tensors, take
/// one optimizer step, and return the log record.
pub fn train_step(
    network: &Network,
    batch: &[(Tensor, Tensor)],
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    let b = batch.len();
    let mut pairs = Vec::with_capacity(b);
    let mut proj_x = Vec::with_capacity(b);
    let mut proj_y = Vec::with_capacity(b);
    for (x, y) in batch {
        let fwd = network.forward_pair(x, y)?;
        let noise = randn(fwd.field.mu.shape(), &mut state.rng_noise);
        let z = reparam_sample(&fwd.field, &noise)?;
        let warped = warp_trilinear(x, &z)?;
        pairs.push(PairOutput {
            reference: y.clone(),
            warped,
            field: fwd.field,
        });
        proj_x.push(fwd.proj_x.vector);
        proj_y.push(fwd.proj_y.vector);
    }
    // Projection layout: [x_0..x_{b-1}, y_0..y_{b-1}]. Each anchor's
    // candidates are its own reference (the positive) plus the other
    // unaligned samples (the in-batch negatives).
    let mut projections = proj_x.clone();
    projections.extend(proj_y.iter().cloned());
    let mut anchors = Vec::new();
    if cfg.toggles.contrast {
        for k in 0..b {
            let mut candidates = vec![b + k];
            candidates.extend((0..b).filter(|&j| j != k));
            anchors.push(ContrastiveAnchor {
                anchor: k,
                positive: b + k,
                candidates,
            });
        }
        if cfg.loss.symmetrize_contrast {
            for k in 0..b {
                let mut candidates = vec![k];
                candidates.extend((0..b).filter(|&j| j != k).map(|j| b + j));
                anchors.push(ContrastiveAnchor {
                    anchor: b + k,
                    positive: k,
                    candidates,
                });
            }
        }
    }

    let (loss, bd) = total_loss(&pairs, &projections, &anchors, cfg.toggles, &cfg.loss)?;
    if !bd.total.is_finite() {
        return Err(Error::NonFinite {
            context: format!("epoch {} step {}", state.epoch, state.step + 1),
            total: bd.total,
            recon: bd.recon,
            smooth: bd.smooth,
            contrast: bd.contrast,
        });
    }
    loss.backward()?;

    let params = network.parameters();
    let mut grads: Vec<Option<Vec<f64>>> = params.iter().map(|(_, p)| p.grad()).collect();
    let grad_norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if grad_norm > cfg.grad_clip {
        let scale = cfg.grad_clip / grad_norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        state.clip_events += 1;
    }
    let lr = lr_at(state.epoch, cfg);
    adam_step(&params, &grads, state, lr, cfg)?;
    network.zero_grad();

    Ok(StepRecord {
        epoch: state.epoch,
        step: state.step,
        lr,
        total: bd.total,
        recon: bd.recon,
        smooth: bd.smooth,
        contrast: bd.contrast,
        grad_norm,
    })
}

fn prepare_pair(
    dataset: &Dataset,
    sample_idx: usize,
    reference_idx: Option<usize>,
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<(Tensor, Tensor)> {
    let x_vol = &dataset.samples[sample_idx];
    let y_vol = match reference_idx {
        Some(i) => &dataset.samples[i],
        None => &dataset.atlas_image,
    };
    if cfg.augment {
        // The same draw transforms both volumes of the pair, so the
        // correspondence the network must recover stays smooth.
        let aug_cfg = AugmentConfig::for_shape(x_vol.shape);
        let aug = Augmentation::sample(&aug_cfg, x_vol.shape, &mut state.rng_augment)?;
        Ok((
            image_tensor(&aug.apply_image(x_vol)),
            image_tensor(&aug.apply_image(y_vol)),
        ))
    } else {
        Ok((image_tensor(x_vol), image_tensor(y_vol)))
    }
}

/// One pass over the shuffled dataset; incomplete trailing batches are
/// dropped. Returns the epoch's mean per-term losses.
pub fn train_epoch(
    dataset: &Dataset,
    network: &Network,
    state: &mut TrainState,
    cfg: &TrainConfig,
    records: &mut Vec<StepRecord>,
) -> Result<EpochLosses> {
    let n = dataset.samples.len();
    if n == 0 {
        return Err(Error::Config("dataset has no samples".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut state.rng_shuffle);

    let mut sums = EpochLosses {
        total: 0.0,
        recon: 0.0,
        smooth: 0.0,
        contrast: 0.0,
    };
    let mut steps = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < cfg.batch_size {
            continue;
        }
        let mut batch = Vec::with_capacity(chunk.len());
        for &idx in chunk {
            let reference = if cfg.random_pairs {
                // Uniform over the other samples and the atlas (index n).
                let mut r = state.rng_shuffle.gen_range(0..n);
                if r == idx {
                    r = n;
                }
                if r == n {
                    None
                } else {
                    Some(r)
                }
            } else {
                None
            };
            batch.push(prepare_pair(dataset, idx, reference, state, cfg)?);
        }
        let rec = train_step(network, &batch, state, cfg)?;
        sums.total += rec.total;
        sums.recon += rec.recon;
        sums.smooth += rec.smooth;
        sums.contrast += rec.contrast;
        steps += 1;
        records.push(rec);
    }
    if steps == 0 {
        return Err(Error::Config(format!(
            "no full batch of {} fits {} samples",
            cfg.batch_size, n
        )));
    }
    let inv = 1.0 / steps as f64;
    let epoch_losses = EpochLosses {
        total: sums.total * inv,
        recon: sums.recon * inv,
        smooth: sums.smooth * inv,
        contrast: sums.contrast * inv,
    };
    state.loss_history.push(epoch_losses);
    state.epoch += 1;
    Ok(epoch_losses)
}

/// Completed training run.
pub struct TrainRun {
    pub network: Network,
    pub state: TrainState,
    pub records: Vec<StepRecord>,
}

/// Full training: init, `epochs` passes, per-step records.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let network = init_parameters(cfg.net.clone(), cfg.seed)?;
    let mut state = TrainState::new(&network, cfg);
    let mut records = Vec::new();
    for _ in 0..cfg.epochs {
        train_epoch(dataset, &network, &mut state, cfg, &mut records)?;
    }
    Ok(TrainRun {
        network,
        state,
        records,
    })
}

/// Repeatedly step on one fixed `(unaligned, reference)` pair. The batch
/// holds the single pair, so the contrastive term is forced off;
/// augmentation is skipped to keep the pair fixed.
pub fn overfit_single_pair(
    unaligned: &ImageVolume,
    reference: &ImageVolume,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<TrainRun> {
    let mut cfg = cfg.clone();
    cfg.toggles.contrast = false;
    cfg.augment = false;
    cfg.batch_size = 1;
    cfg.validate()?;
    let network = init_parameters(cfg.net.clone(), cfg.seed)?;
    let mut state = TrainState::new(&network, &cfg);
    let batch = vec![(image_tensor(unaligned), image_tensor(reference))];
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        records.push(train_step(&network, &batch, &mut state, &cfg)?);
    }
    Ok(TrainRun {
        network,
        state,
        records,
    })
}

// ---------------------------------------------------------------------------
// Resumable checkpoints ("CLMT")

fn push_rng(entries: &mut Vec<(String, Vec<usize>, Vec<f64>)>, name: &str, rng: &ChaCha8Rng) {
    // Stored as raw numbers: 32 seed bytes, the 128-bit word position split
    // into two u64 halves, and the stream id.
    let seed = rng.get_seed();
    let mut data: Vec<f64> = seed.iter().map(|&b| b as f64).collect();
    let pos = rng.get_word_pos();
    data.push((pos >> 64) as u64 as f64);
    data.push(pos as u64 as f64);
    data.push(rng.get_stream() as f64);
    entries.push((format!("rng.{name}"), vec![data.len()], data));
}

fn pop_rng(map: &mut std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>, name: &str) -> Result<ChaCha8Rng> {
    let (_, data) = map.remove(&format!("rng.{name}")).ok_or_else(|| Error::Format {
        offset: 0,
        message: format!("train checkpoint is missing rng.{name}"),
    })?;
    if data.len() != 35 {
        return Err(Error::Format {
            offset: 0,
            message: format!("rng.{name} has {} values, expected 35", data.len()),
        });
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = data[i] as u8;
    }
    let pos = ((data[32] as u64 as u128) << 64) | data[33] as u64 as u128;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(data[34] as u64);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Serialize network weights, optimizer moments, counters, RNG positions
/// and loss history; loading reproduces identical subsequent steps.
pub fn save_train_checkpoint(path: &Path, network: &Network, state: &TrainState) -> Result<()> {
    let params = network.parameters();
    let mut entries = Vec::new();
    entries.push((
        "trainer.counters".into(),
        vec![3],
        vec![state.epoch as f64, state.step as f64, state.clip_events as f64],
    ));
    let mut history = Vec::with_capacity(4 * state.loss_history.len());
    for e in &state.loss_history {
        history.extend_from_slice(&[e.total, e.recon, e.smooth, e.contrast]);
    }
    entries.push(("trainer.loss_history".into(), vec![history.len()], history));
    push_rng(&mut entries, "shuffle", &state.rng_shuffle);
    push_rng(&mut entries, "augment", &state.rng_augment);
    push_rng(&mut entries, "noise", &state.rng_noise);
    for (i, (name, t)) in params.iter().enumerate() {
        entries.push((format!("param.{name}"), t.shape().to_vec(), t.to_vec()));
        entries.push((format!("adam.m.{name}"), t.shape().to_vec(), state.adam_m[i].clone()));
        entries.push((format!("adam.v.{name}"), t.shape().to_vec(), state.adam_v[i].clone()));
    }
    entries.push((
        "meta.enc_channels".into(),
        vec![network.config.enc_channels.len()],
        network.config.enc_channels.iter().map(|&c| c as f64).collect(),
    ));
    entries.push((
        "meta.dec_channels".into(),
        vec![network.config.dec_channels.len()],
        network.config.dec_channels.iter().map(|&c| c as f64).collect(),
    ));
    entries.push(("meta.proj_dim".into(), vec![1], vec![network.config.proj_dim as f64]));
    entries.push(("meta.leaky_slope".into(), vec![1], vec![network.config.leaky_slope]));
    entries.push(("meta.norm_eps".into(), vec![1], vec![network.config.norm_eps]));

    let mut out = Vec::new();
    out.extend_from_slice(&TRAIN_CHECKPOINT_MAGIC);
    out.extend_from_slice(&TRAIN_CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&encode_named_tensors(&entries));
    fs::write(path, out)?;
    Ok(())
}

/// Restore a [`save_train_checkpoint`] file.
pub fn load_train_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<(Network, TrainState)> {
    let buf = fs::read(path)?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != TRAIN_CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad train checkpoint magic {magic:02x?}, expected \"CLMT\""),
        });
    }
    let version = r.u16("version")?;
    if version != TRAIN_CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported train checkpoint version {version}"),
        });
    }
    let entries = decode_named_tensors(&mut r)?;
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    let mut map: std::collections::HashMap<_, _> = entries.into_iter().map(|(n, s, d)| (n, (s, d))).collect();

    let take_meta = |map: &mut std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>, key: &str| -> Result<Vec<f64>> {
        map.remove(key)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("train checkpoint is missing {key}"),
            })
    };
    let net_config = NetConfig {
        enc_channels: take_meta(&mut map, "meta.enc_channels")?.iter().map(|&v| v as usize).collect(),
        dec_channels: take_meta(&mut map, "meta.dec_channels")?.iter().map(|&v| v as usize).collect(),
        proj_dim: take_meta(&mut map, "meta.proj_dim")?[0] as usize,
        leaky_slope: take_meta(&mut map, "meta.leaky_slope")?[0],
        norm_eps: take_meta(&mut map, "meta.norm_eps")?[0],
    };
    net_config.validate()?;
    let network = init_parameters(net_config, cfg.seed)?;

    let counters = take_meta(&mut map, "trainer.counters")?;
    if counters.len() != 3 {
        return Err(Error::Format {
            offset: 0,
            message: "trainer.counters must hold 3 values".into(),
        });
    }
    let history_raw = take_meta(&mut map, "trainer.loss_history")?;
    if history_raw.len() % 4 != 0 {
        return Err(Error::Format {
            offset: 0,
            message: "trainer.loss_history length must be a multiple of 4".into(),
        });
    }
    let loss_history = history_raw
        .chunks_exact(4)
        .map(|c| EpochLosses {
            total: c[0],
            recon: c[1],
            smooth: c[2],
            contrast: c[3],
        })
        .collect();

    let rng_shuffle = pop_rng(&mut map, "shuffle")?;
    let rng_augment = pop_rng(&mut map, "augment")?;
    let rng_noise = pop_rng(&mut map, "noise")?;

    let params = network.parameters();
    let mut adam_m = Vec::with_capacity(params.len());
    let mut adam_v = Vec::with_capacity(params.len());
    for (name, t) in &params {
        let (shape, data) = map.remove(&format!("param.{name}")).ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("train checkpoint is missing param.{name}"),
        })?;
        if shape != t.shape() {
            return Err(Error::Format {
                offset: 0,
                message: format!("param.{name}: shape {shape:?} does not match model {:?}", t.shape()),
            });
        }
        t.set_data(data)?;
        let (_, m) = map.remove(&format!("adam.m.{name}")).ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("train checkpoint is missing adam.m.{name}"),
        })?;
        let (_, v) = map.remove(&format!("adam.v.{name}")).ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("train checkpoint is missing adam.v.{name}"),
        })?;
        adam_m.push(m);
        adam_v.push(v);
    }
    if let Some(name) = map.keys().next() {
        return Err(Error::Format {
            offset: 0,
            message: format!("train checkpoint has unknown entry {name}"),
        });
    }
    let state = TrainState {
        epoch: counters[0] as usize,
        step: counters[1] as u64,
        adam_m,
        adam_v,
        rng_shuffle,
        rng_augment,
        rng_noise,
        loss_history,
        clip_events: counters[2] as u64,
    };
    Ok((network, state))
}
