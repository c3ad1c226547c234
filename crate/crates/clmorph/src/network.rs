//! Siamese registration network: one weight-shared convolutional encoder
//! applied to both volumes, a projection head for the contrastive loss,
//! and a single coarse-to-fine decoder that emits the probabilistic
//! displacement field (per-voxel mean and log-variance, 3 channels each).
//!
//! Downsampling uses 2x average pooling between stride-1 convolutions so
//! every feature map extent divides exactly; the decoder mirrors this with
//! trilinear upsampling and skip concatenation of both branches.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ndtensor::{
    avg_pool3d, concat_channels, conv3d, global_avg_pool, instance_norm, linear,
    upsample_trilinear, Tensor,
};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CLMP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Encoder channels per level, shallow to deep.
    pub enc_channels: Vec<usize>,
    /// Decoder channels per level, coarse to fine; same length as the encoder.
    pub dec_channels: Vec<usize>,
    /// Projection head output dimension.
    pub proj_dim: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            enc_channels: vec![8, 16, 32],
            dec_channels: vec![32, 16, 8],
            proj_dim: 64,
            leaky_slope: 0.2,
            norm_eps: 1e-5,
        }
    }
}

impl NetConfig {
    pub fn levels(&self) -> usize {
        self.enc_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.is_empty() {
            return Err(Error::Config("encoder needs at least one level".into()));
        }
        if self.dec_channels.len() != self.enc_channels.len() {
            return Err(Error::Config(format!(
                "decoder must have one level per encoder level: {} vs {}",
                self.dec_channels.len(),
                self.enc_channels.len()
            )));
        }
        if self.enc_channels.iter().chain(&self.dec_channels).any(|&c| c == 0) || self.proj_dim == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.leaky_slope < 0.0 || self.norm_eps <= 0.0 {
            return Err(Error::Config("invalid activation/normalization constants".into()));
        }
        Ok(())
    }
}

struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
}

impl ConvLayer {
    fn init(c_out: usize, c_in: usize, rng: &mut ChaCha8Rng) -> ConvLayer {
        // Fan-in-scaled Gaussian for 3x3x3 kernels.
        let fan_in = 27 * c_in;
        let std = (2.0 / fan_in as f64).sqrt();
        let n = c_out * c_in * 27;
        let data: Vec<f64> = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        ConvLayer {
            weight: Tensor::parameter(&[c_out, c_in, 3, 3, 3], data).unwrap(),
            bias: Tensor::parameter(&[c_out], vec![0.0; c_out]).unwrap(),
        }
    }

    /// Head with small weights and a fixed bias; keeps the initial field
    /// close to zero (mu) or its variance tiny (logvar).
    fn init_head(c_in: usize, bias_value: f64, rng: &mut ChaCha8Rng) -> ConvLayer {
        let n = 3 * c_in * 27;
        let data: Vec<f64> = (0..n).map(|_| 1e-5 * rng.sample::<f64, _>(StandardNormal)).collect();
        ConvLayer {
            weight: Tensor::parameter(&[3, c_in, 3, 3, 3], data).unwrap(),
            bias: Tensor::parameter(&[3], vec![bias_value; 3]).unwrap(),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        conv3d(x, &self.weight, &self.bias, 1, 1)
    }
}

struct NormLayer {
    scale: Tensor,
    shift: Tensor,
}

impl NormLayer {
    fn init(c: usize, rng: &mut ChaCha8Rng) -> NormLayer {
        // Affine parameters drawn around identity: scale 1 + N(0, 0.1),
        // shift N(0, 0.1).
        let scale: Vec<f64> = (0..c).map(|_| 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let shift: Vec<f64> = (0..c).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        NormLayer {
            scale: Tensor::parameter(&[c], scale).unwrap(),
            shift: Tensor::parameter(&[c], shift).unwrap(),
        }
    }
}

struct Block {
    conv: ConvLayer,
    norm: NormLayer,
}

impl Block {
    fn init(c_out: usize, c_in: usize, rng: &mut ChaCha8Rng) -> Block {
        Block {
            conv: ConvLayer::init(c_out, c_in, rng),
            norm: NormLayer::init(c_out, rng),
        }
    }
}

/// Per-voxel mean and log-variance of the displacement distribution,
/// both `[3,D,H,W]`.
#[derive(Clone)]
pub struct ProbabilisticField {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl ProbabilisticField {
    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.mu.shape();
        [s[1], s[2], s[3]]
    }

    /// Per-component variance, strictly positive by construction.
    pub fn variance(&self) -> Tensor {
        self.logvar.exp()
    }
}

/// Reparameterized draw `z = mu + exp(logvar/2) * noise`; differentiable
/// through `mu` and `logvar`.
pub fn reparam_sample(field: &ProbabilisticField, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != field.mu.shape() {
        return Err(Error::Dimension(format!(
            "noise shape {:?} does not match field {:?}",
            noise.shape(),
            field.mu.shape()
        )));
    }
    let sigma = field.logvar.mul_scalar(0.5).exp();
    field.mu.add(&sigma.mul(noise)?)
}

/// Unit-normalized projection vector of one branch.
#[derive(Clone)]
pub struct Projection {
    pub vector: Tensor,
}

/// The full set of learnable weights plus the architecture hyperparameters.
pub struct Network {
    pub config: NetConfig,
    encoder: Vec<Block>,
    proj_weight: Tensor,
    proj_bias: Tensor,
    decoder: Vec<Block>,
    mu_head: ConvLayer,
    logvar_head: ConvLayer,
}

impl Network {
    /// Initialize all weights from the seeded generator.
    pub fn init(config: NetConfig, rng: &mut ChaCha8Rng) -> Result<Network> {
        config.validate()?;
        let l = config.levels();
        let mut encoder = Vec::with_capacity(l);
        for i in 0..l {
            let c_in = if i == 0 { 1 } else { config.enc_channels[i - 1] };
            encoder.push(Block::init(config.enc_channels[i], c_in, rng));
        }
        let deepest = config.enc_channels[l - 1];
        let proj_std = (2.0 / deepest as f64).sqrt();
        let proj_weight: Vec<f64> = (0..config.proj_dim * deepest)
            .map(|_| proj_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let proj_weight = Tensor::parameter(&[config.proj_dim, deepest], proj_weight).unwrap();
        let proj_bias = Tensor::parameter(&[config.proj_dim], vec![0.0; config.proj_dim]).unwrap();

        let mut decoder = Vec::with_capacity(l);
        for i in 0..l {
            let c_in = if i == 0 {
                2 * config.enc_channels[l - 1]
            } else {
                config.dec_channels[i - 1] + 2 * config.enc_channels[l - 1 - i]
            };
            decoder.push(Block::init(config.dec_channels[i], c_in, rng));
        }
        let c_fine = *config.dec_channels.last().unwrap();
        let mu_head = ConvLayer::init_head(c_fine, 0.0, rng);
        let logvar_head = ConvLayer::init_head(c_fine, -10.0, rng);
        Ok(Network {
            config,
            encoder,
            proj_weight,
            proj_bias,
            decoder,
            mu_head,
            logvar_head,
        })
    }

    /// All parameters in a fixed order with stable names.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            out.push((format!("enc{i}.conv.weight"), b.conv.weight.clone()));
            out.push((format!("enc{i}.conv.bias"), b.conv.bias.clone()));
            out.push((format!("enc{i}.norm.scale"), b.norm.scale.clone()));
            out.push((format!("enc{i}.norm.shift"), b.norm.shift.clone()));
        }
        out.push(("proj.weight".into(), self.proj_weight.clone()));
        out.push(("proj.bias".into(), self.proj_bias.clone()));
        for (i, b) in self.decoder.iter().enumerate() {
            out.push((format!("dec{i}.conv.weight"), b.conv.weight.clone()));
            out.push((format!("dec{i}.conv.bias"), b.conv.bias.clone()));
            out.push((format!("dec{i}.norm.scale"), b.norm.scale.clone()));
            out.push((format!("dec{i}.norm.shift"), b.norm.shift.clone()));
        }
        out.push(("head.mu.weight".into(), self.mu_head.weight.clone()));
        out.push(("head.mu.bias".into(), self.mu_head.bias.clone()));
        out.push(("head.logvar.weight".into(), self.logvar_head.weight.clone()));
        out.push(("head.logvar.bias".into(), self.logvar_head.bias.clone()));
        out
    }

    /// Zero every parameter gradient.
    pub fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    fn block_forward(&self, block: &Block, x: &Tensor) -> Result<Tensor> {
        let h = block.conv.apply(x)?;
        let h = instance_norm(&h, &block.norm.scale, &block.norm.shift, self.config.norm_eps)?;
        Ok(h.leaky_relu(self.config.leaky_slope))
    }

    /// Shared-encoder forward for one volume `[1,D,H,W]`: returns the
    /// feature pyramid (shallow to deep) and the unit projection.
    pub fn encode(&self, image: &Tensor) -> Result<(Vec<Tensor>, Projection)> {
        let sh = image.shape();
        if sh.len() != 4 || sh[0] != 1 {
            return Err(Error::Dimension(format!(
                "encode expects a [1,D,H,W] volume, got {sh:?}"
            )));
        }
        let down = 1usize << (self.config.levels() - 1);
        for &e in &sh[1..] {
            if e % down != 0 {
                return Err(Error::Config(format!(
                    "spatial extents {:?} must be divisible by {down} for {} levels",
                    &sh[1..],
                    self.config.levels()
                )));
            }
        }
        let mut pyramid = Vec::with_capacity(self.config.levels());
        let mut x = image.clone();
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                x = avg_pool3d(&x, 2)?;
            }
            x = self.block_forward(block, &x)?;
            pyramid.push(x.clone());
        }
        let pooled = global_avg_pool(pyramid.last().unwrap())?;
        let deep = pooled.reshape(&[1, pooled.numel()])?;
        let v = linear(&deep, &self.proj_weight, &self.proj_bias)?.reshape(&[self.config.proj_dim])?;
        let norm = v.l2_norm().add_scalar(1e-12);
        let vector = v.div(&norm)?;
        Ok((pyramid, Projection { vector }))
    }

    /// Fuse the two branch pyramids coarse-to-fine and emit the field.
    /// The argument order is (unaligned, reference); the roles are not
    /// interchangeable.
    pub fn decode(&self, pyramid_x: &[Tensor], pyramid_y: &[Tensor]) -> Result<ProbabilisticField> {
        let l = self.config.levels();
        if pyramid_x.len() != l || pyramid_y.len() != l {
            return Err(Error::Dimension(format!(
                "decode expects {l}-level pyramids, got {} and {}",
                pyramid_x.len(),
                pyramid_y.len()
            )));
        }
        for i in 0..l {
            if pyramid_x[i].shape() != pyramid_y[i].shape() {
                return Err(Error::Dimension(format!(
                    "pyramid level {i} shapes differ: {:?} vs {:?}",
                    pyramid_x[i].shape(),
                    pyramid_y[i].shape()
                )));
            }
        }
        let mut h = concat_channels(&[pyramid_x[l - 1].clone(), pyramid_y[l - 1].clone()])?;
        h = self.block_forward(&self.decoder[0], &h)?;
        for i in 1..l {
            let level = l - 1 - i;
            h = upsample_trilinear(&h, 2)?;
            h = concat_channels(&[h, pyramid_x[level].clone(), pyramid_y[level].clone()])?;
            h = self.block_forward(&self.decoder[i], &h)?;
        }
        let mu = self.mu_head.apply(&h)?;
        let logvar = self.logvar_head.apply(&h)?;
        Ok(ProbabilisticField { mu, logvar })
    }

    /// Encode both volumes through the shared weights and decode the field
    /// registering `x` onto `y`.
    pub fn forward_pair(&self, x: &Tensor, y: &Tensor) -> Result<PairForward> {
        let (px, proj_x) = self.encode(x)?;
        let (py, proj_y) = self.encode(y)?;
        let field = self.decode(&px, &py)?;
        Ok(PairForward { field, proj_x, proj_y })
    }
}

pub struct PairForward {
    pub field: ProbabilisticField,
    pub proj_x: Projection,
    pub proj_y: Projection,
}

// ---------------------------------------------------------------------------
// Checkpoint I/O ("CLMP": named parameter list, f64 little-endian)

fn meta_entries(config: &NetConfig) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    vec![
        (
            "meta.enc_channels".into(),
            vec![config.enc_channels.len()],
            config.enc_channels.iter().map(|&c| c as f64).collect(),
        ),
        (
            "meta.dec_channels".into(),
            vec![config.dec_channels.len()],
            config.dec_channels.iter().map(|&c| c as f64).collect(),
        ),
        ("meta.proj_dim".into(), vec![1], vec![config.proj_dim as f64]),
        ("meta.leaky_slope".into(), vec![1], vec![config.leaky_slope]),
        ("meta.norm_eps".into(), vec![1], vec![config.norm_eps]),
    ]
}

pub(crate) fn encode_named_tensors(entries: &[(String, Vec<usize>, Vec<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) struct ByteReader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.buf.len() as u64,
                message: format!("truncated: needed {n} bytes for {what} at offset {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub(crate) fn decode_named_tensors(r: &mut ByteReader) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|e| Error::Format {
            offset: r.pos as u64,
            message: format!("parameter name is not utf-8: {e}"),
        })?;
        let ndim = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 8, "tensor payload")?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, shape, data));
    }
    Ok(entries)
}

/// Write all network parameters (plus architecture metadata) to a CLMP file.
pub fn save_parameters(path: &Path, network: &Network) -> Result<()> {
    let mut entries = meta_entries(&network.config);
    for (name, t) in network.parameters() {
        entries.push((name, t.shape().to_vec(), t.to_vec()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&encode_named_tensors(&entries));
    fs::write(path, out)?;
    Ok(())
}

/// Load a CLMP checkpoint, reconstructing the architecture from its
/// metadata entries. Shape mismatches, unknown names and missing
/// parameters are rejected.
pub fn load_parameters(path: &Path) -> Result<Network> {
    let buf = fs::read(path)?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad checkpoint magic {magic:02x?}, expected \"CLMP\""),
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let entries = decode_named_tensors(&mut r)?;
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    let mut map: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> = entries
        .into_iter()
        .map(|(n, s, d)| (n, (s, d)))
        .collect();

    let meta_usize_list = |map: &mut std::collections::HashMap<String, (Vec<usize>, Vec<f64>)>,
                           key: &str|
     -> Result<Vec<usize>> {
        let (_, data) = map.remove(key).ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("checkpoint is missing {key}"),
        })?;
        Ok(data.iter().map(|&v| v as usize).collect())
    };
    let enc_channels = meta_usize_list(&mut map, "meta.enc_channels")?;
    let dec_channels = meta_usize_list(&mut map, "meta.dec_channels")?;
    let proj_dim = meta_usize_list(&mut map, "meta.proj_dim")?[0];
    let leaky_slope = map
        .remove("meta.leaky_slope")
        .ok_or_else(|| Error::Format {
            offset: 0,
            message: "checkpoint is missing meta.leaky_slope".into(),
        })?
        .1[0];
    let norm_eps = map
        .remove("meta.norm_eps")
        .ok_or_else(|| Error::Format {
            offset: 0,
            message: "checkpoint is missing meta.norm_eps".into(),
        })?
        .1[0];
    let config = NetConfig {
        enc_channels,
        dec_channels,
        proj_dim,
        leaky_slope,
        norm_eps,
    };
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let network = Network::init(config, &mut rng)?;
    for (name, t) in network.parameters() {
        let (shape, data) = map.remove(&name).ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("checkpoint is missing parameter {name}"),
        })?;
        if shape != t.shape() {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "parameter {name}: checkpoint shape {shape:?} does not match model {:?}",
                    t.shape()
                ),
            });
        }
        t.set_data(data)?;
    }
    if let Some(name) = map.keys().next() {
        return Err(Error::Format {
            offset: 0,
            message: format!("checkpoint has unknown parameter {name}"),
        });
    }
    Ok(network)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::randn;

    fn tiny_config() -> NetConfig {
        NetConfig {
            enc_channels: vec![2, 3],
            dec_channels: vec![3, 2],
            proj_dim: 4,
            ..NetConfig::default()
        }
    }

    fn tiny_net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::init(tiny_config(), &mut rng).unwrap()
    }

    #[test]
    fn identical_images_give_identical_pyramids_and_projections() {
        let net = tiny_net(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = randn(&[1, 8, 8, 8], &mut rng);
        let (p1, proj1) = net.encode(&img).unwrap();
        let (p2, proj2) = net.encode(&img).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
        assert_eq!(proj1.vector.to_vec(), proj2.vector.to_vec());
    }

    #[test]
    fn projection_is_unit_norm_for_any_input() {
        let net = tiny_net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let img = randn(&[1, 8, 8, 8], &mut rng).mul_scalar(rng.gen_range(0.1..10.0));
            let (_, proj) = net.encode(&img).unwrap();
            let norm: f64 = proj.vector.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "norm {norm}");
        }
    }

    #[test]
    fn perturbing_one_encoder_weight_changes_both_branches() {
        let net = tiny_net(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&[1, 8, 8, 8], &mut rng);
        let y = randn(&[1, 8, 8, 8], &mut rng);
        let (px0, _) = net.encode(&x).unwrap();
        let (py0, _) = net.encode(&y).unwrap();
        // Nudge a single shared encoder weight.
        net.encoder[0].conv.weight.update_data(|d| d[0] += 0.5);
        let (px1, _) = net.encode(&x).unwrap();
        let (py1, _) = net.encode(&y).unwrap();
        assert_ne!(px0[0].to_vec(), px1[0].to_vec(), "branch x unaffected");
        assert_ne!(py0[0].to_vec(), py1[0].to_vec(), "branch y unaffected");
    }

    #[test]
    fn decode_contract_shapes_and_asymmetry() {
        let net = tiny_net(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&[1, 8, 8, 8], &mut rng);
        let y = randn(&[1, 8, 8, 8], &mut rng);
        let (px, _) = net.encode(&x).unwrap();
        let (py, _) = net.encode(&y).unwrap();
        let fwd = net.decode(&px, &py).unwrap();
        assert_eq!(fwd.mu.shape(), &[3, 8, 8, 8]);
        assert_eq!(fwd.logvar.shape(), &[3, 8, 8, 8]);
        // Swapped roles produce a different field.
        let rev = net.decode(&py, &px).unwrap();
        assert_ne!(fwd.mu.to_vec(), rev.mu.to_vec());
    }

    #[test]
    fn zeroed_mu_head_gives_identically_zero_mu() {
        let net = tiny_net(9);
        net.mu_head.weight.update_data(|d| d.fill(0.0));
        net.mu_head.bias.update_data(|d| d.fill(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&[1, 8, 8, 8], &mut rng);
        let y = randn(&[1, 8, 8, 8], &mut rng);
        let out = net.forward_pair(&x, &y).unwrap();
        assert!(out.field.mu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reparam_noise_zero_returns_mu_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mu = randn(&[3, 2, 2, 2], &mut rng);
        let field = ProbabilisticField {
            mu: mu.clone(),
            logvar: randn(&[3, 2, 2, 2], &mut rng),
        };
        let z = reparam_sample(&field, &Tensor::zeros(&[3, 2, 2, 2])).unwrap();
        assert_eq!(z.to_vec(), mu.to_vec());
    }

    #[test]
    fn reparam_standard_field_returns_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let eps = randn(&[3, 2, 2, 2], &mut rng);
        let field = ProbabilisticField {
            mu: Tensor::zeros(&[3, 2, 2, 2]),
            logvar: Tensor::zeros(&[3, 2, 2, 2]),
        };
        let z = reparam_sample(&field, &eps).unwrap();
        for (a, b) in z.data().iter().zip(eps.data().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn reparam_sampling_statistics() {
        // ~1e5 components with mu = 1, var = 4.
        let shape = [3, 32, 32, 32];
        let n: usize = shape.iter().product();
        let field = ProbabilisticField {
            mu: Tensor::full(&shape, 1.0),
            logvar: Tensor::full(&shape, 4.0f64.ln()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = reparam_sample(&field, &randn(&shape, &mut rng)).unwrap();
        let mean: f64 = z.data().iter().sum::<f64>() / n as f64;
        let var: f64 = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var - 4.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn test_time_mean_equals_sampling_under_logvar_floor() {
        // logvar = -40 is the deterministic surrogate: sampled z and mu agree.
        let net = tiny_net(14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn(&[1, 8, 8, 8], &mut rng);
        let y = randn(&[1, 8, 8, 8], &mut rng);
        let out = net.forward_pair(&x, &y).unwrap();
        let floored = ProbabilisticField {
            mu: out.field.mu.clone(),
            logvar: Tensor::full(&[3, 8, 8, 8], -40.0),
        };
        let noise = randn(&[3, 8, 8, 8], &mut rng);
        let z = reparam_sample(&floored, &noise).unwrap();
        for (a, b) in z.data().iter().zip(out.field.mu.data().iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn shared_encoder_receives_gradients_from_one_branch() {
        let net = tiny_net(16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y = randn(&[1, 8, 8, 8], &mut rng);
        let (_, proj_y) = net.encode(&y).unwrap();
        proj_y.vector.sum().backward().unwrap();
        let g = net.encoder[0].conv.weight.grad().expect("no gradient on shared encoder");
        assert!(g.iter().any(|&v| v != 0.0));
        net.zero_grad();
    }

    #[test]
    fn checkpoint_roundtrip_preserves_values_and_config() {
        let net = tiny_net(18);
        let dir = std::env::temp_dir().join(format!("clmp_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.clmp");
        save_parameters(&path, &net).unwrap();
        let loaded = load_parameters(&path).unwrap();
        assert_eq!(loaded.config, net.config);
        for ((n1, t1), (n2, t2)) in net.parameters().iter().zip(loaded.parameters().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.to_vec(), t2.to_vec(), "{n1} changed across roundtrip");
        }
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let net = tiny_net(19);
        let dir = std::env::temp_dir().join(format!("clmp_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.clmp");
        save_parameters(&path, &net).unwrap();
        // Tamper: change meta.proj_dim so parameter shapes no longer match.
        let mut bytes = std::fs::read(&path).unwrap();
        // meta.proj_dim payload is a single f64; find and bump it.
        let needle = b"meta.proj_dim";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let payload = at + needle.len() + 1 + 4; // rank byte + one u32 extent
        bytes[payload..payload + 8].copy_from_slice(&8.0f64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_parameters(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn checkpoint_bad_magic_and_version_rejected() {
        let net = tiny_net(20);
        let dir = std::env::temp_dir().join(format!("clmp_ver_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.clmp");
        save_parameters(&path, &net).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'Z';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_parameters(&path), Err(Error::Format { offset: 0, .. })));

        let mut bad_version = good;
        bad_version[4] = 99;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(load_parameters(&path), Err(Error::Format { offset: 4, .. })));
    }
}
