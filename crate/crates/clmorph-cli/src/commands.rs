//! The `clmorph` subcommands: dataset generation, training, segmentation,
//! registration, evaluation, loss ablation and hyperparameter sweep.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use clmorph::error::{Error, Result};
use clmorph::metrics::{evaluate_pair, MetricRow, RegionReport, SampleReport};
use clmorph::network::{load_parameters, save_parameters, Network};
use clmorph::synthdata::{
    generate_dataset, load_dataset, read_image, read_labels, write_field, write_image,
    write_labels, Dataset, ImageVolume, LabelVolume, SyntheticSpec,
};
use clmorph::trainer::{
    image_tensor, init_parameters, save_train_checkpoint, train_epoch, StepRecord, TrainConfig,
    TrainState,
};
use clmorph::warp::{jacobian_determinant, warp_image, warp_nearest, DisplacementField};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "clmorph", version, about = "Contrastive registration for unsupervised segmentation of 3-D volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic atlas plus deformed samples
    Gen(GenArgs),
    /// Train the registration network on a dataset directory
    Train(TrainArgs),
    /// Segment an unaligned volume by warping the atlas labels
    Segment(SegmentArgs),
    /// Register an unaligned volume onto the atlas
    Register(RegisterArgs),
    /// Evaluate predicted label volumes against ground truth
    Eval(EvalArgs),
    /// Train the four loss combinations and tabulate their metrics
    Ablate(AblateArgs),
    /// Grid-search the smoothness/contrastive weights
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
pub struct CommonCfg {
    /// `key = value` configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for data generation and training
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CommonCfg {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_overrides(&self.set)?;
        if let Some(seed) = self.seed {
            cfg.apply("seed", &seed.to_string())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub cfg: CommonCfg,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// Cubic volume extent (or DxHxW)
    #[arg(long)]
    pub shape: Option<String>,
    /// Number of deformed samples
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: CommonCfg,
    /// Dataset directory from `gen`
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for logs and checkpoints
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train on the first N samples only
    #[arg(long)]
    pub train_count: Option<usize>,
    /// Disable the reconstruction loss
    #[arg(long)]
    pub no_recon: bool,
    /// Disable the smoothness loss
    #[arg(long)]
    pub no_smooth: bool,
    /// Disable the contrastive loss
    #[arg(long)]
    pub no_contrast: bool,
}

#[derive(Args)]
pub struct SegmentArgs {
    /// CLMP network checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Unaligned image volume
    #[arg(long)]
    pub input: PathBuf,
    /// Atlas image volume
    #[arg(long)]
    pub atlas: PathBuf,
    /// Atlas label volume
    #[arg(long)]
    pub atlas_labels: PathBuf,
    /// Output label volume path
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the network and warp with the zero field
    #[arg(long)]
    pub zero_field: bool,
    /// Also write mid-slice PNGs next to the output
    #[arg(long)]
    pub png_slices: bool,
}

#[derive(Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub atlas: PathBuf,
    /// Output directory (warped.clmv, field.clmv, jacobian.txt)
    #[arg(long)]
    pub out: PathBuf,
    /// Also write mid-slice PNGs into the output directory
    #[arg(long)]
    pub png_slices: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of predicted `*_labels.clmv`
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth `*_labels.clmv`
    #[arg(long)]
    pub gt: PathBuf,
    /// Report directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: CommonCfg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training seeds, comma-separated
    #[arg(long, default_value = "7,8,9")]
    pub seeds: String,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Cells trained concurrently
    #[arg(long, default_value_t = 2)]
    pub parallel: usize,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: CommonCfg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Smoothness weights, comma-separated
    #[arg(long)]
    pub alphas: String,
    /// Contrastive weights, comma-separated
    #[arg(long)]
    pub betas: String,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub parallel: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Segment(args) => cmd_segment(args),
        Command::Register(args) => cmd_register(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

/// Exit code classification: 2 configuration, 3 data/format, 4 numerical.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Dimension(_) | Error::Usage(_) | Error::Domain(_) => 2,
        Error::Format { .. } | Error::Io(_) | Error::Generation(_) => 3,
        Error::NonFinite { .. } => 4,
    }
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut cfg = args.cfg.resolve()?;
    if let Some(shape) = &args.shape {
        cfg.apply("shape", shape)?;
    }
    if let Some(n) = args.n {
        cfg.apply("n", &n.to_string())?;
    }
    cfg.synth.validate()?;
    echo_config(&args.out, &cfg)?;
    let ds = generate_dataset(&cfg.synth, cfg.n_samples)?;
    clmorph::synthdata::write_dataset(&args.out, &ds)?;
    println!(
        "wrote atlas + {} samples ({}x{}x{}) to {}",
        ds.samples.len(),
        cfg.synth.shape[0],
        cfg.synth.shape[1],
        cfg.synth.shape[2],
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn training_slice(ds: &Dataset, train_count: usize) -> Result<Dataset> {
    let n = if train_count == 0 { ds.samples.len() } else { train_count };
    if n > ds.samples.len() {
        return Err(Error::Config(format!(
            "train_count {n} exceeds the {} samples in the dataset",
            ds.samples.len()
        )));
    }
    Ok(Dataset {
        atlas_image: ds.atlas_image.clone(),
        atlas_labels: ds.atlas_labels.clone(),
        samples: ds.samples[..n].to_vec(),
        sample_labels: ds.sample_labels[..n].to_vec(),
    })
}

struct CompletedTraining {
    network: Network,
    records: Vec<StepRecord>,
}

/// Shared training driver: writes `config.txt`, `train_log.{txt,csv}`,
/// `model.clmp` and `state.clmt` into the run directory.
fn train_into_dir(run_dir: &Path, data: &Dataset, cfg: &RunConfig, verbose: bool) -> Result<CompletedTraining> {
    cfg.train.validate()?;
    echo_config(run_dir, cfg)?;
    let train_ds = training_slice(data, cfg.train_count)?;
    let network = init_parameters(cfg.train.net.clone(), cfg.train.seed)?;
    let mut state = TrainState::new(&network, &cfg.train);
    let mut records = Vec::new();
    for epoch in 0..cfg.train.epochs {
        let losses = train_epoch(&train_ds, &network, &mut state, &cfg.train, &mut records)?;
        if verbose {
            println!(
                "epoch {epoch:3}  total {:12.3}  recon {:12.3}  smooth {:12.3}  contrast {:.5}",
                losses.total, losses.recon, losses.smooth, losses.contrast
            );
        }
    }
    let mut log_txt = String::new();
    let mut log_csv = String::from(StepRecord::csv_header());
    log_csv.push('\n');
    for r in &records {
        log_txt.push_str(&r.to_line());
        log_txt.push('\n');
        log_csv.push_str(&r.to_csv_line());
        log_csv.push('\n');
    }
    fs::write(run_dir.join("train_log.txt"), log_txt)?;
    fs::write(run_dir.join("train_log.csv"), log_csv)?;
    save_parameters(&run_dir.join("model.clmp"), &network)?;
    save_train_checkpoint(&run_dir.join("state.clmt"), &network, &state)?;
    if state.clip_events > 0 && verbose {
        println!("gradient clip fired on {} steps", state.clip_events);
    }
    Ok(CompletedTraining { network, records })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.cfg.resolve()?;
    if let Some(v) = args.epochs {
        cfg.apply("epochs", &v.to_string())?;
    }
    if let Some(v) = args.batch_size {
        cfg.apply("batch_size", &v.to_string())?;
    }
    if let Some(v) = args.train_count {
        cfg.apply("train_count", &v.to_string())?;
    }
    if args.no_recon {
        cfg.apply("recon", "false")?;
    }
    if args.no_smooth {
        cfg.apply("smooth", "false")?;
    }
    if args.no_contrast {
        cfg.apply("contrast", "false")?;
    }
    let data = load_dataset(&args.data)?;
    let done = train_into_dir(&args.out, &data, &cfg, true)?;
    println!(
        "trained {} steps; checkpoint at {}",
        done.records.len(),
        args.out.join("model.clmp").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// segment / register

/// Test-time field registering the atlas onto the unaligned volume
/// (mean of the predicted distribution, no sampling).
fn segmentation_field(network: &Network, atlas: &ImageVolume, unaligned: &ImageVolume) -> Result<DisplacementField> {
    let out = network.forward_pair(&image_tensor(atlas), &image_tensor(unaligned))?;
    DisplacementField::from_tensor(&out.field.mu)
}

/// Warp the atlas labels onto an unaligned volume.
pub fn segment_volume(
    network: &Network,
    atlas: &ImageVolume,
    atlas_labels: &LabelVolume,
    unaligned: &ImageVolume,
) -> Result<LabelVolume> {
    let field = segmentation_field(network, atlas, unaligned)?;
    warp_nearest(atlas_labels, &field)
}

fn cmd_segment(args: SegmentArgs) -> Result<()> {
    let atlas = read_image(&args.atlas)?;
    let atlas_labels = read_labels(&args.atlas_labels)?;
    let input = read_image(&args.input)?;
    if atlas.shape != input.shape {
        return Err(Error::Dimension(format!(
            "input shape {:?} does not match atlas {:?}",
            input.shape, atlas.shape
        )));
    }
    let pred = if args.zero_field {
        warp_nearest(&atlas_labels, &DisplacementField::zeros(atlas_labels.shape))?
    } else {
        let network = load_parameters(&args.checkpoint)?;
        segment_volume(&network, &atlas, &atlas_labels, &input)?
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_labels(&args.out, &pred)?;
    if args.png_slices {
        let base = args.out.with_extension("");
        let base_name = base.to_string_lossy().to_string();
        png_slice_image(&PathBuf::from(format!("{base_name}_input.png")), &input)?;
        png_slice_labels(&PathBuf::from(format!("{base_name}_pred.png")), &pred)?;
    }
    println!("segmented {} -> {}", args.input.display(), args.out.display());
    Ok(())
}

fn cmd_register(args: RegisterArgs) -> Result<()> {
    let atlas = read_image(&args.atlas)?;
    let input = read_image(&args.input)?;
    if atlas.shape != input.shape {
        return Err(Error::Dimension(format!(
            "input shape {:?} does not match atlas {:?}",
            input.shape, atlas.shape
        )));
    }
    let network = load_parameters(&args.checkpoint)?;
    // Trained direction: warp the unaligned volume onto the atlas.
    let out = network.forward_pair(&image_tensor(&input), &image_tensor(&atlas))?;
    let field = DisplacementField::from_tensor(&out.field.mu)?;
    let warped = warp_image(&input, &field)?;

    fs::create_dir_all(&args.out)?;
    write_image(&args.out.join("warped.clmv"), &warped)?;
    write_field(&args.out.join("field.clmv"), &field)?;

    let jd = jacobian_determinant(&field)?;
    let min = jd.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = jd.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let negative = jd.data.iter().filter(|&&v| v <= 0.0).count() as f64 / jd.data.len() as f64;
    let mse_before = atlas.normalized().mse(&input.normalized())?;
    let mse_after = atlas.normalized().mse(&warped.normalized())?;
    let report = format!(
        "min_jacobian = {min}\nmax_jacobian = {max}\nnegative_fraction = {negative}\n\
         mse_before = {mse_before}\nmse_after = {mse_after}\n"
    );
    fs::write(args.out.join("jacobian.txt"), &report)?;
    if args.png_slices {
        png_slice_image(&args.out.join("input.png"), &input)?;
        png_slice_image(&args.out.join("warped.png"), &warped)?;
        png_slice_image(&args.out.join("atlas.png"), &atlas)?;
    }
    print!("{report}");
    Ok(())
}

fn png_slice_image(path: &Path, vol: &ImageVolume) -> Result<()> {
    let [d, h, w] = vol.shape;
    let slice = &vol.data[(d / 2) * h * w..(d / 2 + 1) * h * w];
    let lo = slice.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([((slice[y as usize * w + x as usize] - lo) * scale) as u8])
    });
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

fn png_slice_labels(path: &Path, vol: &LabelVolume) -> Result<()> {
    let [d, h, w] = vol.shape;
    let slice = &vol.data[(d / 2) * h * w..(d / 2 + 1) * h * w];
    let max = slice.iter().cloned().max().unwrap_or(1).max(1);
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(slice[y as usize * w + x as usize] as u16 * 255 / max as u16) as u8])
    });
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn label_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().to_string();
        if name.ends_with("_labels.clmv") && !name.starts_with("atlas") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let names = label_files(&args.gt)?;
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no *_labels.clmv ground-truth files in {}",
            args.gt.display()
        )));
    }
    let mut samples = Vec::new();
    for name in &names {
        let gt = read_labels(&args.gt.join(name))?;
        let pred = read_labels(&args.pred.join(name))?;
        let labels = gt.foreground_labels();
        let rows = evaluate_pair(&pred, &gt, &labels)?;
        samples.push(SampleReport {
            name: name.clone(),
            rows,
        });
    }
    let report = RegionReport { samples };
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("report.txt"), report.to_text())?;
    fs::write(args.out.join("report.csv"), report.to_csv())?;
    print!("{}", report.to_text());
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate / sweep

/// Mean segmentation metrics of one trained network over the test split.
fn test_metrics(network: &Network, data: &Dataset, train_count: usize) -> Result<Vec<MetricRow>> {
    if train_count == 0 || train_count >= data.samples.len() {
        return Err(Error::Config(format!(
            "need a test split: train_count {} of {} samples",
            train_count,
            data.samples.len()
        )));
    }
    let labels = data.atlas_labels.foreground_labels();
    let mut rows = Vec::new();
    for i in train_count..data.samples.len() {
        let pred = segment_volume(network, &data.atlas_image, &data.atlas_labels, &data.samples[i])?;
        rows.extend(evaluate_pair(&pred, &data.sample_labels[i], &labels)?);
    }
    Ok(rows)
}

fn mean_of(rows: &[MetricRow], f: impl Fn(&MetricRow) -> Option<f64>) -> (f64, f64) {
    let vals: Vec<f64> = rows.iter().filter_map(&f).collect();
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    (mean, std)
}

fn parse_list<T: std::str::FromStr>(what: &str, text: &str) -> Result<Vec<T>> {
    let list: std::result::Result<Vec<T>, _> = text.split(',').map(|p| p.trim().parse()).collect();
    match list {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::Config(format!("cannot parse {what} list `{text}`"))),
    }
}

/// Run independent training cells on a bounded thread pool. Each cell is
/// internally serial, so results do not depend on scheduling.
fn run_cells<T: Send>(
    parallel: usize,
    cells: Vec<Box<dyn FnOnce() -> Result<T> + Send>>,
) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| {
        use rayon::prelude::*;
        cells.into_par_iter().map(|cell| cell()).collect()
    });
    results.into_iter().collect()
}

pub const ABLATION_ROWS: [&str; 4] = ["recon", "recon+smooth", "recon+contrast", "full"];

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let mut cfg = args.cfg.resolve()?;
    if let Some(v) = args.train_count {
        cfg.apply("train_count", &v.to_string())?;
    }
    if let Some(v) = args.epochs {
        cfg.apply("epochs", &v.to_string())?;
    }
    if cfg.train_count == 0 {
        return Err(Error::Config("ablate needs --train-count to hold out a test split".into()));
    }
    let seeds: Vec<u64> = parse_list("seed", &args.seeds)?;
    let data = load_dataset(&args.data)?;
    fs::create_dir_all(&args.out)?;
    echo_config(&args.out, &cfg)?;

    let mut cells: Vec<Box<dyn FnOnce() -> Result<(usize, Vec<MetricRow>)> + Send>> = Vec::new();
    for (ri, row) in ABLATION_ROWS.iter().enumerate() {
        for &seed in &seeds {
            let mut cell_cfg = cfg.clone();
            cell_cfg.train.toggles = RunConfig::toggles_for_row(row).expect("known row");
            cell_cfg.train.seed = seed;
            let run_dir = args.out.join(format!("{}_seed{}", row.replace('+', "_"), seed));
            let data = data.clone();
            cells.push(Box::new(move || {
                let done = train_into_dir(&run_dir, &data, &cell_cfg, false)?;
                let rows = test_metrics(&done.network, &data, cell_cfg.train_count)?;
                Ok((ri, rows))
            }));
        }
    }
    let results = run_cells(args.parallel, cells)?;

    let mut per_row: Vec<Vec<MetricRow>> = vec![Vec::new(); ABLATION_ROWS.len()];
    for (ri, rows) in results {
        per_row[ri].extend(rows);
    }
    let mut table_txt = String::new();
    let mut table_csv = String::from("config,dice_mean,dice_std,hd_mean,hd_std,assd_mean,assd_std\n");
    for (row, rows) in ABLATION_ROWS.iter().zip(&per_row) {
        let (dm, ds) = mean_of(rows, |r| Some(r.dice));
        let (hm, hs) = mean_of(rows, |r| r.hd);
        let (am, asd) = mean_of(rows, |r| r.assd);
        table_txt.push_str(&format!(
            "{row:<16} dice {dm:.4} +/- {ds:.4}   hd {hm:.3} +/- {hs:.3}   assd {am:.3} +/- {asd:.3}\n"
        ));
        table_csv.push_str(&format!("{row},{dm},{ds},{hm},{hs},{am},{asd}\n"));
    }
    fs::write(args.out.join("table.txt"), &table_txt)?;
    fs::write(args.out.join("table.csv"), &table_csv)?;
    print!("{table_txt}");
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = args.cfg.resolve()?;
    if let Some(v) = args.train_count {
        cfg.apply("train_count", &v.to_string())?;
    }
    if let Some(v) = args.epochs {
        cfg.apply("epochs", &v.to_string())?;
    }
    if cfg.train_count == 0 {
        return Err(Error::Config("sweep needs --train-count to hold out a test split".into()));
    }
    let alphas: Vec<f64> = parse_list("alpha", &args.alphas)?;
    let betas: Vec<f64> = parse_list("beta", &args.betas)?;
    let data = load_dataset(&args.data)?;
    fs::create_dir_all(&args.out)?;
    echo_config(&args.out, &cfg)?;

    let mut cells: Vec<Box<dyn FnOnce() -> Result<(usize, Vec<MetricRow>)> + Send>> = Vec::new();
    for (ci, (&alpha, &beta)) in alphas
        .iter()
        .flat_map(|a| betas.iter().map(move |b| (a, b)))
        .enumerate()
    {
        let mut cell_cfg = cfg.clone();
        cell_cfg.train.loss.alpha = alpha;
        cell_cfg.train.loss.beta = beta;
        let run_dir = args.out.join(format!("alpha{alpha}_beta{beta}"));
        let data = data.clone();
        cells.push(Box::new(move || {
            let done = train_into_dir(&run_dir, &data, &cell_cfg, false)?;
            let rows = test_metrics(&done.network, &data, cell_cfg.train_count)?;
            Ok((ci, rows))
        }));
    }
    let results = run_cells(args.parallel, cells)?;

    let grid: Vec<(f64, f64)> = alphas
        .iter()
        .flat_map(|&a| betas.iter().map(move |&b| (a, b)))
        .collect();
    let mut by_cell: Vec<Vec<MetricRow>> = vec![Vec::new(); grid.len()];
    for (ci, rows) in results {
        by_cell[ci] = rows;
    }
    let mut csv = String::from("alpha,beta,dice_mean,dice_std,hd_mean,assd_mean\n");
    let mut best: Option<(f64, f64, f64)> = None;
    for ((alpha, beta), rows) in grid.iter().zip(&by_cell) {
        let (dm, ds) = mean_of(rows, |r| Some(r.dice));
        let (hm, _) = mean_of(rows, |r| r.hd);
        let (am, _) = mean_of(rows, |r| r.assd);
        csv.push_str(&format!("{alpha},{beta},{dm},{ds},{hm},{am}\n"));
        if best.map(|(_, _, b)| dm > b).unwrap_or(true) {
            best = Some((*alpha, *beta, dm));
        }
    }
    fs::write(args.out.join("grid.csv"), &csv)?;
    let (ba, bb, bd) = best.expect("at least one cell");
    let best_line = format!("best alpha = {ba}, beta = {bb}, dice = {bd:.4}\n");
    fs::write(args.out.join("best.txt"), &best_line)?;
    print!("{csv}{best_line}");
    Ok(())
}
