//! Run configuration: flat `key = value` files merged with command-line
//! overrides, echoed into the run directory before execution.

use std::fmt::Write as _;
use std::path::Path;

use clmorph::error::{Error, Result};
use clmorph::losses::LossToggles;
use clmorph::synthdata::SyntheticSpec;
use clmorph::trainer::TrainConfig;

/// Everything a run needs, resolvable from defaults, a config file and
/// command-line overrides (in that order).
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub synth: SyntheticSpec,
    pub train: TrainConfig,
    /// Number of samples `gen` emits.
    pub n_samples: usize,
    /// Leading samples used for training; the rest are the test split.
    /// 0 means "use every sample for training".
    pub train_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SyntheticSpec::default(),
            train: TrainConfig::default(),
            n_samples: 20,
            train_count: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        Error::Config(format!(
            "key `{key}`: cannot parse `{value}` as {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("key `{key}`: `{other}` is not a boolean"))),
    }
}

fn parse_shape(value: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = value.trim().split('x').collect();
    match parts.len() {
        1 => {
            let n: usize = parse("shape", parts[0])?;
            Ok([n, n, n])
        }
        3 => Ok([
            parse("shape", parts[0])?,
            parse("shape", parts[1])?,
            parse("shape", parts[2])?,
        ]),
        _ => Err(Error::Config(format!(
            "key `shape`: expected N or DxHxW, got `{value}`"
        ))),
    }
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| parse(key, p))
        .collect::<Result<Vec<usize>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::Config(format!("key `{key}`: empty list")))
            } else {
                Ok(v)
            }
        })
}

impl RunConfig {
    /// Apply one `key = value` assignment; unknown keys are rejected by
    /// name.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            // Shared
            "seed" => {
                let s: u64 = parse(key, value)?;
                self.synth.seed = s;
                self.train.seed = s;
            }
            // Synthetic data
            "shape" => self.synth.shape = parse_shape(value)?,
            "structures" => self.synth.num_structures = parse(key, value)?,
            "radius_min" => self.synth.radius_range.0 = parse(key, value)?,
            "radius_max" => self.synth.radius_range.1 = parse(key, value)?,
            "background" => self.synth.background_intensity = parse(key, value)?,
            "intensity_min" => self.synth.intensity_range.0 = parse(key, value)?,
            "intensity_max" => self.synth.intensity_range.1 = parse(key, value)?,
            "noise_std" => self.synth.noise_std = parse(key, value)?,
            "amplitude" => self.synth.amplitude = parse(key, value)?,
            "smooth_radius" => self.synth.smooth_radius = parse(key, value)?,
            "n" => self.n_samples = parse(key, value)?,
            // Trainer
            "lr0" => self.train.lr0 = parse(key, value)?,
            "lr_decay_factor" => self.train.lr_decay_factor = parse(key, value)?,
            "lr_decay_every" => self.train.lr_decay_every = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "adam_beta1" => self.train.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.train.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.train.adam_eps = parse(key, value)?,
            "grad_clip" => self.train.grad_clip = parse(key, value)?,
            "augment" => self.train.augment = parse_bool(key, value)?,
            "random_pairs" => self.train.random_pairs = parse_bool(key, value)?,
            "train_count" => self.train_count = parse(key, value)?,
            // Loss toggles and weights
            "recon" => self.train.toggles.recon = parse_bool(key, value)?,
            "smooth" => self.train.toggles.smooth = parse_bool(key, value)?,
            "contrast" => self.train.toggles.contrast = parse_bool(key, value)?,
            "alpha" => self.train.loss.alpha = parse(key, value)?,
            "beta" => self.train.loss.beta = parse(key, value)?,
            "sigma2" => self.train.loss.sigma2 = parse(key, value)?,
            "tau" => self.train.loss.tau = parse(key, value)?,
            "symmetrize_contrast" => self.train.loss.symmetrize_contrast = parse_bool(key, value)?,
            "mu_grad_weight" => self.train.loss.mu_grad_weight = parse(key, value)?,
            // Network
            "enc_channels" => self.train.net.enc_channels = parse_usize_list(key, value)?,
            "dec_channels" => self.train.net.dec_channels = parse_usize_list(key, value)?,
            "proj_dim" => self.train.net.proj_dim = parse(key, value)?,
            "leaky_slope" => self.train.net.leaky_slope = parse(key, value)?,
            "norm_eps" => self.train.net.norm_eps = parse(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown configuration key `{other}`")))
            }
        }
        Ok(())
    }

    /// Apply every `key = value` line of a config file (# comments and
    /// blank lines ignored).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    path.display(),
                    lineno + 1
                )));
            };
            self.apply(key, value)?;
        }
        Ok(())
    }

    /// Apply `key=value` override strings from the command line.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let Some((key, value)) = s.split_once('=') else {
                return Err(Error::Config(format!("--set expects key=value, got `{s}`")));
            };
            self.apply(key, value)?;
        }
        Ok(())
    }

    /// Fully resolved configuration in config-file syntax.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "# resolved run configuration");
        let _ = writeln!(out, "seed = {}", self.train.seed);
        let _ = writeln!(
            out,
            "shape = {}x{}x{}",
            self.synth.shape[0], self.synth.shape[1], self.synth.shape[2]
        );
        let _ = writeln!(out, "structures = {}", self.synth.num_structures);
        let _ = writeln!(out, "radius_min = {}", self.synth.radius_range.0);
        let _ = writeln!(out, "radius_max = {}", self.synth.radius_range.1);
        let _ = writeln!(out, "background = {}", self.synth.background_intensity);
        let _ = writeln!(out, "intensity_min = {}", self.synth.intensity_range.0);
        let _ = writeln!(out, "intensity_max = {}", self.synth.intensity_range.1);
        let _ = writeln!(out, "noise_std = {}", self.synth.noise_std);
        let _ = writeln!(out, "amplitude = {}", self.synth.amplitude);
        let _ = writeln!(out, "smooth_radius = {}", self.synth.smooth_radius);
        let _ = writeln!(out, "n = {}", self.n_samples);
        let _ = writeln!(out, "train_count = {}", self.train_count);
        let _ = writeln!(out, "lr0 = {}", self.train.lr0);
        let _ = writeln!(out, "lr_decay_factor = {}", self.train.lr_decay_factor);
        let _ = writeln!(out, "lr_decay_every = {}", self.train.lr_decay_every);
        let _ = writeln!(out, "epochs = {}", self.train.epochs);
        let _ = writeln!(out, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(out, "adam_beta1 = {}", self.train.adam_beta1);
        let _ = writeln!(out, "adam_beta2 = {}", self.train.adam_beta2);
        let _ = writeln!(out, "adam_eps = {}", self.train.adam_eps);
        let _ = writeln!(out, "grad_clip = {}", self.train.grad_clip);
        let _ = writeln!(out, "augment = {}", self.train.augment);
        let _ = writeln!(out, "random_pairs = {}", self.train.random_pairs);
        let _ = writeln!(out, "recon = {}", self.train.toggles.recon);
        let _ = writeln!(out, "smooth = {}", self.train.toggles.smooth);
        let _ = writeln!(out, "contrast = {}", self.train.toggles.contrast);
        let _ = writeln!(out, "alpha = {}", self.train.loss.alpha);
        let _ = writeln!(out, "beta = {}", self.train.loss.beta);
        let _ = writeln!(out, "sigma2 = {}", self.train.loss.sigma2);
        let _ = writeln!(out, "tau = {}", self.train.loss.tau);
        let _ = writeln!(out, "symmetrize_contrast = {}", self.train.loss.symmetrize_contrast);
        let _ = writeln!(out, "mu_grad_weight = {}", self.train.loss.mu_grad_weight);
        let _ = writeln!(out, "enc_channels = {}", join(&self.train.net.enc_channels));
        let _ = writeln!(out, "dec_channels = {}", join(&self.train.net.dec_channels));
        let _ = writeln!(out, "proj_dim = {}", self.train.net.proj_dim);
        let _ = writeln!(out, "leaky_slope = {}", self.train.net.leaky_slope);
        let _ = writeln!(out, "norm_eps = {}", self.train.net.norm_eps);
        out
    }

    /// Toggle set for an ablation row name.
    pub fn toggles_for_row(row: &str) -> Option<LossToggles> {
        match row {
            "recon" => Some(LossToggles {
                recon: true,
                smooth: false,
                contrast: false,
            }),
            "recon+smooth" => Some(LossToggles {
                recon: true,
                smooth: true,
                contrast: false,
            }),
            "recon+contrast" => Some(LossToggles {
                recon: true,
                smooth: false,
                contrast: true,
            }),
            "full" => Some(LossToggles {
                recon: true,
                smooth: true,
                contrast: true,
            }),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply("warp_speed", "9").unwrap_err();
        assert!(err.to_string().contains("warp_speed"), "{err}");
    }

    #[test]
    fn echo_text_reparses_to_the_same_config() {
        let mut cfg = RunConfig::default();
        cfg.apply("epochs", "12").unwrap();
        cfg.apply("alpha", "0.5").unwrap();
        cfg.apply("shape", "16x32x16").unwrap();
        cfg.apply("enc_channels", "4,8").unwrap();
        cfg.apply("dec_channels", "8,4").unwrap();

        let text = cfg.to_text();
        let dir = std::env::temp_dir().join(format!("clm_cfg_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("echo.cfg");
        std::fs::write(&path, &text).unwrap();

        let mut back = RunConfig::default();
        back.apply_file(&path).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.train.epochs, 12);
        assert_eq!(back.synth.shape, [16, 32, 16]);
        assert_eq!(back.train.net.enc_channels, vec![4, 8]);
    }

    #[test]
    fn seed_key_sets_data_and_training_seeds() {
        let mut cfg = RunConfig::default();
        cfg.apply("seed", "99").unwrap();
        assert_eq!(cfg.synth.seed, 99);
        assert_eq!(cfg.train.seed, 99);
    }

    #[test]
    fn bad_boolean_and_bad_shape_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply("augment", "maybe").is_err());
        assert!(cfg.apply("shape", "4x5").is_err());
    }
}
