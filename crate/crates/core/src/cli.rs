//! `sat-refine` command-line interface.
//!
//! Exit codes: 0 success, 1 usage, 2 input error, 3 numeric failure.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use crate::autodiff::{OptimizerConfig, OptimizerKind};
use crate::features::{self, FeatError};
use crate::imageops::{self, ImagePatch, PlacementSpec, Sprite};
use crate::metrics::{self, EstimatorKind, MmdEstimate, SampleMatrix};
use crate::nets::{self, Model};
use crate::rng::seeded;
use crate::toy::{self, ToySpec};
use crate::trainer::{self, Role, SampleSet, TrainConfig, TrainError, Trainer};
use crate::tsne::{self, TsneConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const THREADS_ENV: &str = "SAT_REFINE_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::NonFiniteLoss => CliError::Numeric(e.to_string()),
            TrainError::Config(m) => CliError::Usage(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<FeatError> for CliError {
    fn from(e: FeatError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<nets::CheckpointError> for CliError {
    fn from(e: nets::CheckpointError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<nets::NetError> for CliError {
    fn from(e: nets::NetError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<imageops::ImageError> for CliError {
    fn from(e: imageops::ImageError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<metrics::MetricsError> for CliError {
    fn from(e: metrics::MetricsError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<tsne::TsneError> for CliError {
    fn from(e: tsne::TsneError) -> Self {
        match e {
            tsne::TsneError::NonFinite => CliError::Numeric(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "sat-refine", version, about = "Synthetic patch composition, adversarial refinement and domain-gap metrics")]
pub struct Cli {
    /// Flat key=value file of default flag values; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Overlay sprites onto backgrounds at random valid placements.
    Compose(ComposeArgs),
    /// Train a refiner against a discriminator.
    Train(TrainArgs),
    /// Run a trained refiner over a directory of images.
    Refine(RefineArgs),
    /// Extract fallback features from an image directory into an SRFT file.
    Extract(ExtractArgs),
    /// MMD report for the pairs (X, X̂), (X, Ỹ), (X̂, Ỹ).
    EvalMmd(EvalMmdArgs),
    /// Joint t-SNE embedding of X, X̂ and Ỹ.
    EvalTsne(EvalTsneArgs),
    /// Write the two toy domains.
    GenToy(GenToyArgs),
}

#[derive(Args, Debug)]
pub struct ComposeArgs {
    #[arg(long, value_name = "DIR")]
    pub bg: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub sprites: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Key colour `R,G,B` (0-255) made transparent in RGB sprites.
    #[arg(long, value_name = "R,G,B")]
    pub key: Option<String>,
    /// Keying tolerance as Euclidean RGB distance in [0,1] units.
    #[arg(long, default_value_t = 0.1)]
    pub key_tolerance: f32,
    /// Restrict rotations to multiples of this many degrees (0 = any angle).
    #[arg(long, default_value_t = 0.0)]
    pub angle_step: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Synthetic images X.
    #[arg(long, value_name = "DIR")]
    pub source: PathBuf,
    /// Real images Y.
    #[arg(long, value_name = "DIR")]
    pub target: PathBuf,
    /// Output directory for `model.srck` and `loss_log.ndjson`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 0)]
    pub history_buffer: usize,
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    #[arg(long, default_value_t = 1)]
    pub refiner_updates: usize,
    #[arg(long, default_value_t = 1)]
    pub discriminator_updates: usize,
    /// Use the raw L1 sum in the identity term.
    #[arg(long)]
    pub l1_sum: bool,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 16)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 3)]
    pub disc_layers: usize,
    #[arg(long, default_value_t = 16)]
    pub disc_channels: usize,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long, value_name = "DIR")]
    pub images: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EstimatorArg {
    Linear,
    Quadratic,
}

/// Inputs shared by the evaluation commands. Each set is an SRFT file or
/// an image directory (fallback features).
#[derive(Args, Debug)]
pub struct EvalInputs {
    #[arg(long, value_name = "PATH")]
    pub x: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub x_hat: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub y: PathBuf,
    /// Draw Ỹ as K rows of Y without replacement.
    #[arg(long, value_name = "K")]
    pub subsample_y: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalMmdArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Linear)]
    pub estimator: EstimatorArg,
    /// Seeded shuffle of every set before linear pairing.
    #[arg(long)]
    pub shuffle: bool,
    /// Report path; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalTsneArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 200.0)]
    pub learning_rate: f64,
    /// Reduce to this many principal components first.
    #[arg(long, value_name = "K")]
    pub pca: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenToyArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub gradient_amplitude: Option<f64>,
    /// Mean gradient direction in degrees.
    #[arg(long)]
    pub gradient_angle: Option<f64>,
    /// Width of the uniform spread of gradient directions in degrees.
    #[arg(long)]
    pub gradient_spread: Option<f64>,
    #[arg(long)]
    pub texture_std: Option<f64>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match merge_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.code();
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Splices `--key value` pairs from a `--config` file in after the
/// subcommand for every key not already given on the command line.
pub fn merge_config(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let Some(pos) = args.iter().position(|a| a == "--config") else {
        return Ok(args);
    };
    let path = args
        .get(pos + 1)
        .ok_or_else(|| CliError::Usage("--config needs a file".into()))?;
    let path = PathBuf::from(path);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let present: HashSet<String> = args
        .iter()
        .filter_map(|a| a.to_str())
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected key=value", path.display(), n + 1))
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if present.contains(&key) {
            continue;
        }
        match value {
            "true" => extra.push(OsString::from(format!("--{key}"))),
            "false" => {}
            v => {
                extra.push(OsString::from(format!("--{key}")));
                extra.push(OsString::from(v));
            }
        }
    }
    // insert right after the subcommand name: the first positional argument
    let mut out = Vec::with_capacity(args.len() + extra.len());
    let mut skip_next = false;
    let mut inserted = false;
    for (i, a) in args.into_iter().enumerate() {
        let is_sub = !inserted && i > 0 && !skip_next && !a.to_string_lossy().starts_with('-');
        skip_next = a == "--config";
        out.push(a);
        if is_sub {
            out.append(&mut extra);
            inserted = true;
        }
    }
    Ok(out)
}

pub fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Compose(a) => cmd_compose(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Refine(a) => cmd_refine(&a),
        Command::Extract(a) => cmd_extract(&a),
        Command::EvalMmd(a) => cmd_eval_mmd(&a),
        Command::EvalTsne(a) => cmd_eval_tsne(&a),
        Command::GenToy(a) => cmd_gen_toy(&a),
    }
}

fn png_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

fn parse_key(s: &str) -> CliResult<[f32; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || CliError::Usage(format!("--key expects R,G,B with values 0-255, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse::<u8>().map_err(|_| bad())? as f32 / 255.0;
    }
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    background: String,
    sprite: String,
    placement: PlacementSpec,
}

pub fn cmd_compose(a: &ComposeArgs) -> CliResult {
    let key = a.key.as_deref().map(parse_key).transpose()?;
    let bg_files = png_files(&a.bg)?;
    let sprite_files = png_files(&a.sprites)?;
    if a.count > 0 && (bg_files.is_empty() || sprite_files.is_empty()) {
        return Err(CliError::Input("need at least one background and one sprite PNG".into()));
    }
    let backgrounds: Vec<ImagePatch> = bg_files.iter().map(|p| ImagePatch::load_png(p)).collect::<Result<_, _>>()?;
    let sprites: Vec<Sprite> = sprite_files
        .iter()
        .map(|p| -> CliResult<Sprite> {
            match key {
                Some(k) => {
                    let img = ImagePatch::load_png(p)?;
                    if img.channels() == 3 {
                        return Ok(imageops::key_alpha(&img, k, a.key_tolerance)?);
                    }
                    Ok(Sprite::load_png(p)?)
                }
                None => Ok(Sprite::load_png(p)?),
            }
        })
        .collect::<Result<_, _>>()?;

    // pairs where some quarter turn fits, so a retry always succeeds
    let fits = |b: &ImagePatch, s: &Sprite, angle: f64| {
        let (w, h) = imageops::rotated_extent(s.width(), s.height(), angle);
        w <= b.width() && h <= b.height()
    };
    let mut pairs = Vec::new();
    for (bi, b) in backgrounds.iter().enumerate() {
        for (si, s) in sprites.iter().enumerate() {
            if fits(b, s, 0.0) || fits(b, s, 90.0) {
                pairs.push((bi, si));
            }
        }
    }
    if a.count > 0 && pairs.is_empty() {
        return Err(CliError::Input("no sprite fits inside any background".into()));
    }

    create_dir(&a.out)?;
    let mut rng = seeded(a.seed);
    let mut manifest = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let (bi, si) = pairs[rng.random_range(0..pairs.len())];
        let (b, s) = (&backgrounds[bi], &sprites[si]);
        let draw_angle = |rng: &mut crate::rng::SeededRng| {
            if a.angle_step > 0.0 {
                let steps = (360.0 / a.angle_step).floor().max(1.0) as u32;
                rng.random_range(0..steps) as f64 * a.angle_step
            } else {
                rng.random_range(0.0..360.0)
            }
        };
        let mut angle = draw_angle(&mut rng);
        let mut tries = 0;
        while !fits(b, s, angle) && tries < 16 {
            angle = draw_angle(&mut rng);
            tries += 1;
        }
        if !fits(b, s, angle) {
            angle = if fits(b, s, 0.0) { 0.0 } else { 90.0 };
        }
        let rotated = imageops::rotate_sprite(s, angle);
        let grid = imageops::enumerate_placements(b, &rotated);
        let mut placement = grid[rng.random_range(0..grid.len())];
        placement.angle = angle;
        let out = imageops::composite(b, s, &placement)?;
        let name = format!("{i:05}.png");
        out.save_png(&a.out.join(&name))?;
        manifest.push(ManifestEntry {
            file: name,
            background: file_name(&bg_files[bi]),
            sprite: file_name(&sprite_files[si]),
            placement,
        });
    }
    write_json(
        &a.out.join("manifest.json"),
        &json!({ "seed": a.seed, "count": a.count, "entries": manifest }),
    )
}

pub fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut cfg = TrainConfig {
        lambda: a.lambda,
        batch_size: a.batch_size,
        max_steps: a.steps,
        optimizer: OptimizerConfig {
            kind: match a.optimizer {
                OptimizerArg::Adam => OptimizerKind::Adam,
                OptimizerArg::Sgd => OptimizerKind::Sgd,
            },
            learning_rate: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            ..OptimizerConfig::default()
        },
        seed: a.seed,
        history_buffer_size: a.history_buffer,
        log_every: a.log_every,
        refiner_updates: a.refiner_updates,
        discriminator_updates: a.discriminator_updates,
        l1_sum: a.l1_sum,
        ..TrainConfig::default()
    };
    cfg.refiner.blocks = a.blocks;
    cfg.refiner.base_channels = a.base_channels;
    cfg.discriminator.layers = a.disc_layers;
    cfg.discriminator.base_channels = a.disc_channels;
    cfg
}

pub fn cmd_train(a: &TrainArgs) -> CliResult {
    let x = SampleSet::load_dir(&a.source, Role::Synthetic)?;
    let y = SampleSet::load_dir(&a.target, Role::Real)?;
    if x.shape() != y.shape() {
        return Err(CliError::Input(format!(
            "source patches are {:?} but target patches are {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let cfg = train_config(a);
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = nets::load_checkpoint(path)?;
            Trainer::resume(cfg.clone(), Model::from_checkpoint(&ckpt, cfg.optimizer)?)?
        }
        None => Trainer::new(cfg, x.channels())?,
    };
    create_dir(&a.out)?;
    let log_path = a.out.join("loss_log.ndjson");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let result = trainer.run(&x, &y, |rec| {
        let line = serde_json::to_string(rec).expect("serializable record");
        writeln!(log, "{line}").map_err(|source| TrainError::Io {
            path: log_path.clone(),
            source,
        })
    });
    log.flush().map_err(|e| io_err(&log_path, e))?;
    result?;
    let ckpt_path = a.out.join("model.srck");
    nets::save_checkpoint(&ckpt_path, &trainer.into_model().to_checkpoint())?;
    Ok(())
}

pub fn cmd_refine(a: &RefineArgs) -> CliResult {
    let ckpt = nets::load_checkpoint(&a.checkpoint)?;
    let net = nets::RefinerNet::from_checkpoint(&ckpt)?;
    let x = SampleSet::load_dir(&a.input, Role::Synthetic)?;
    if x.channels() != net.config().channels {
        return Err(CliError::Input(format!(
            "images have {} channels but the refiner expects {}",
            x.channels(),
            net.config().channels
        )));
    }
    trainer::refine_dataset(&net, &x)?.save_dir(&a.out)?;
    Ok(())
}

pub fn cmd_extract(a: &ExtractArgs) -> CliResult {
    let set = SampleSet::load_dir(&a.images, Role::Synthetic)?;
    let feats = features::fallback_extract(set.patches(), set.role());
    features::write_feat(&a.out, &feats.matrix)?;
    Ok(())
}

/// Loads an SRFT file, or fallback features of an image directory.
pub fn load_features(path: &Path, role: Role) -> CliResult<SampleMatrix> {
    if path.is_dir() {
        let set = SampleSet::load_dir(path, role)?;
        Ok(features::fallback_extract(set.patches(), role).matrix)
    } else if path.exists() {
        Ok(features::read_feat(path)?)
    } else {
        Err(CliError::Input(format!("{}: no such file or directory", path.display())))
    }
}

struct EvalSets {
    x: SampleMatrix,
    x_hat: SampleMatrix,
    y_tilde: SampleMatrix,
}

fn load_eval_sets(inputs: &EvalInputs) -> CliResult<EvalSets> {
    let x = load_features(&inputs.x, Role::Synthetic)?;
    let x_hat = load_features(&inputs.x_hat, Role::Refined)?;
    let y = load_features(&inputs.y, Role::Real)?;
    for (name, m) in [("X", &x), ("X_hat", &x_hat), ("Y", &y)] {
        if m.d() != x.d() {
            return Err(CliError::Input(format!("{name} has d={} but X has d={}", m.d(), x.d())));
        }
        if !m.is_finite() {
            return Err(CliError::Numeric(format!("{name} contains non-finite features")));
        }
    }
    let y_tilde = match inputs.subsample_y {
        Some(k) => {
            let idx = trainer::subsample_indices(y.n(), k, inputs.seed)?;
            y.select(&idx)
        }
        None => y,
    };
    Ok(EvalSets { x, x_hat, y_tilde })
}

#[derive(Serialize)]
pub struct PairReport {
    pub pair: &'static str,
    pub estimator: EstimatorKind,
    pub mmd2: f64,
    pub mmd: f64,
    pub stderr: f64,
    pub pairs_used: usize,
    pub sigmas: Vec<f64>,
}

pub fn cmd_eval_mmd(a: &EvalMmdArgs) -> CliResult {
    let mut sets = load_eval_sets(&a.inputs)?;
    if a.shuffle {
        let mut rng = seeded(a.inputs.seed ^ 0x5eed);
        for m in [&mut sets.x, &mut sets.x_hat, &mut sets.y_tilde] {
            let mut order: Vec<usize> = (0..m.n()).collect();
            order.shuffle(&mut rng);
            *m = m.select(&order);
        }
    }
    let spec = metrics::default_kernel_spec();
    let estimate = |p: &SampleMatrix, q: &SampleMatrix| -> CliResult<MmdEstimate> {
        Ok(match a.estimator {
            EstimatorArg::Linear => metrics::mmd2_linear(p, q, &spec)?,
            EstimatorArg::Quadratic => metrics::mmd2_quadratic_unbiased(p, q, &spec)?,
        })
    };
    let mut pairs = Vec::new();
    for (name, p, q) in [
        ("X_vs_X_hat", &sets.x, &sets.x_hat),
        ("X_vs_Y_tilde", &sets.x, &sets.y_tilde),
        ("X_hat_vs_Y_tilde", &sets.x_hat, &sets.y_tilde),
    ] {
        let e = estimate(p, q)?;
        if !e.mmd2.is_finite() {
            return Err(CliError::Numeric(format!("{name}: MMD² is not finite")));
        }
        pairs.push(PairReport {
            pair: name,
            estimator: e.kind,
            mmd2: e.mmd2,
            mmd: e.mmd,
            stderr: e.stderr,
            pairs_used: e.pairs_used,
            sigmas: spec.sigmas().to_vec(),
        });
    }
    let smallest = pairs
        .iter()
        .min_by(|p, q| p.mmd2.total_cmp(&q.mmd2))
        .map(|p| p.pair)
        .expect("three pairs");
    let report = json!({
        "n_x": sets.x.n(),
        "n_x_hat": sets.x_hat.n(),
        "n_y_tilde": sets.y_tilde.n(),
        "d": sets.x.d(),
        "pairs": pairs,
        "smallest": smallest,
    });
    match &a.out {
        Some(path) => write_json(path, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));
            Ok(())
        }
    }
}

pub fn role_label(role: Role) -> &'static str {
    match role {
        Role::Synthetic => "X",
        Role::Refined => "X_hat",
        Role::Real => "Y",
        Role::RealSubsample => "Y_tilde",
    }
}

pub fn cmd_eval_tsne(a: &EvalTsneArgs) -> CliResult {
    let sets = load_eval_sets(&a.inputs)?;
    let y_role = if a.inputs.subsample_y.is_some() { Role::RealSubsample } else { Role::Real };
    let joint = SampleMatrix::concat(&[&sets.x, &sets.x_hat, &sets.y_tilde])?;
    let labels: Vec<Role> = std::iter::repeat_n(Role::Synthetic, sets.x.n())
        .chain(std::iter::repeat_n(Role::Refined, sets.x_hat.n()))
        .chain(std::iter::repeat_n(y_role, sets.y_tilde.n()))
        .collect();
    let cfg = TsneConfig {
        perplexity: a.perplexity,
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        pca: a.pca,
        seed: a.inputs.seed,
        ..TsneConfig::default()
    };
    let emb = tsne::tsne_run(&joint, &labels, &cfg)?;
    create_dir(&a.out)?;
    let mut csv = String::from("index,label,y1,y2\n");
    for i in 0..emb.n() {
        let p = emb.point(i);
        csv.push_str(&format!("{i},{},{},{}\n", role_label(emb.labels[i]), p[0], p[1]));
    }
    let csv_path = a.out.join("embedding.csv");
    fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;
    let means = tsne::set_means(&emb, &[Role::Synthetic, Role::Refined, y_role])?;
    let means: serde_json::Map<String, serde_json::Value> =
        means.into_iter().map(|(r, m)| (role_label(r).to_string(), json!(m))).collect();
    write_json(
        &a.out.join("summary.json"),
        &json!({
            "kl_final": emb.kl_history.last().copied().unwrap_or(f64::NAN),
            "iterations": emb.kl_history.len(),
            "set_means": means,
        }),
    )
}

pub fn toy_spec(a: &GenToyArgs) -> ToySpec {
    let d = ToySpec::default();
    ToySpec {
        count: a.count,
        size: a.size,
        seed: a.seed,
        gradient_amplitude: a.gradient_amplitude.unwrap_or(d.gradient_amplitude),
        gradient_angle: a.gradient_angle.map_or(d.gradient_angle, f64::to_radians),
        gradient_spread: a.gradient_spread.map_or(d.gradient_spread, f64::to_radians),
        texture_std: a.texture_std.unwrap_or(d.texture_std),
    }
}

pub fn cmd_gen_toy(a: &GenToyArgs) -> CliResult {
    if a.count == 0 || a.size < 8 {
        return Err(CliError::Usage("gen-toy needs --count >= 1 and --size >= 8".into()));
    }
    toy::write(&toy_spec(a), &a.out)?;
    Ok(())
}
