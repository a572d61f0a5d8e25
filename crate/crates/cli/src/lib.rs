//! Commands behind the `lantnet` binary.
//!
//! Each command validates every flag before touching the file system, writes
//! its outputs only after all computation has succeeded, prints progress on
//! the diagnostic stream and results on standard output.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lantnet::diff::log_ratio;
use lantnet::metrics::{evaluate, round2, EvalReport};
use lantnet::model::{
    encode_checkpoint, predict_map, train, Checkpoint, LossWeights, ModelParams, TrainConfig,
    DEFAULT_EPOCHS,
};
use lantnet::patches::{build_training_set, PatchConfig};
use lantnet::preclassify::{hierarchical_fcm_with, PreclassifyConfig, PseudoLabel, PseudoLabelMap};
use lantnet::raster::{encode_pgm, read_pgm, ChangeMap, RasterImage};
use lantnet::synth::{generate, Scene, SceneSpec};
use lantnet::{Error, Result};

/// Environment variable that replaces the default seed. An explicit
/// `--seed` always wins.
pub const SEED_ENV: &str = "LANTNET_SEED";

/// Patch sizes swept when `--r-list` is not given.
pub const DEFAULT_R_LIST: [usize; 6] = [5, 7, 9, 11, 13, 15];

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "lantnet",
    version,
    about = "Unsupervised SAR change detection with layer attention"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect changes between two coregistered images and write a change map.
    Detect(DetectArgs),
    /// Run detection for several patch sizes and print a PCC table.
    Sweep(SweepArgs),
    /// Generate a synthetic image pair and its ground truth.
    Synth(SynthArgs),
    /// Write the pseudo-label map (0 unchanged, 128 intermediate, 255 changed).
    Preclassify(PreclassifyArgs),
    /// Score a change map against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// Patch size (odd, 3 to 31).
    #[arg(long, default_value_t = 7)]
    pub r: usize,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Weight of the cross-entropy term.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Weight of the absolute-error term.
    #[arg(long, default_value_t = 0.9)]
    pub beta: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Training patches kept per class.
    #[arg(long, default_value_t = 20000)]
    pub max_per_class: usize,
    /// Fraction of training labels flipped before training.
    #[arg(long, default_value_t = 0.0)]
    pub flip_rate: f64,
    /// Bypass the layer attention block.
    #[arg(long)]
    pub no_attention: bool,
    /// Train with cross-entropy only (alpha = 1, beta = 0).
    #[arg(long)]
    pub ce_only: bool,
}

impl Default for TrainFlags {
    fn default() -> Self {
        Self {
            r: 7,
            epochs: DEFAULT_EPOCHS,
            batch: 128,
            lr: 1e-3,
            alpha: 0.1,
            beta: 0.9,
            seed: 0,
            max_per_class: 20000,
            flip_rate: 0.0,
            no_attention: false,
            ce_only: false,
        }
    }
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    pub i1: PathBuf,
    pub i2: PathBuf,
    /// Output change map (PGM, 0 unchanged / 255 changed).
    pub out: PathBuf,
    /// Ground-truth change map; when given the evaluation report is printed.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Also save the trained model here.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub i1: PathBuf,
    pub i2: PathBuf,
    pub truth: PathBuf,
    /// Comma-separated patch sizes, each odd in 5..=15.
    #[arg(long, value_delimiter = ',')]
    pub r_list: Option<Vec<usize>>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub i1: PathBuf,
    pub i2: PathBuf,
    pub truth: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 4)]
    pub shapes: usize,
    #[arg(long, default_value_t = 60.0)]
    pub background: f64,
    #[arg(long, default_value_t = 180.0)]
    pub change: f64,
    /// Speckle looks (gamma shape).
    #[arg(long, default_value_t = 4)]
    pub looks: u32,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PreclassifyArgs {
    pub i1: PathBuf,
    pub i2: PathBuf,
    pub out: PathBuf,
    /// Also write the difference image.
    #[arg(long)]
    pub di: Option<PathBuf>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub pred: PathBuf,
    pub truth: PathBuf,
}

/// Everything one detection run needs, validated.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub patch: PatchConfig,
    pub train: TrainConfig,
    pub preclassify: PreclassifyConfig,
}

impl DetectConfig {
    /// Check every flag and derive the per-stage seeds from the run seed.
    pub fn from_flags(flags: &TrainFlags) -> Result<Self> {
        let loss_weights = if flags.ce_only {
            LossWeights::ce_only()
        } else {
            LossWeights::new(flags.alpha, flags.beta)?
        };
        if !(flags.lr > 0.0 && flags.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                flags.lr
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(flags.seed);
        let preclassify = PreclassifyConfig {
            seed: rng.gen(),
            ..PreclassifyConfig::default()
        };
        let patch = PatchConfig::new(flags.r, flags.max_per_class, rng.gen())?;
        let train = TrainConfig {
            epochs: flags.epochs,
            batch_size: flags.batch,
            lr: flags.lr,
            seed: rng.gen(),
            loss_weights,
            flip_rate: flags.flip_rate,
            use_attention: !flags.no_attention,
        };
        train.validate()?;
        Ok(Self {
            patch,
            train,
            preclassify,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DetectOutcome {
    pub map: ChangeMap,
    pub pseudo_labels: PseudoLabelMap,
    pub params: ModelParams,
    pub epoch_losses: Vec<f64>,
    pub training_samples: usize,
    pub report: Option<EvalReport>,
}

impl DetectOutcome {
    pub fn checkpoint(&self, cfg: &DetectConfig) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            config: cfg.train,
        }
    }
}

/// The full pipeline on in-memory images.
pub fn detect(
    i1: &RasterImage,
    i2: &RasterImage,
    truth: Option<&ChangeMap>,
    cfg: &DetectConfig,
    log: &mut dyn Write,
) -> Result<DetectOutcome> {
    if let Some(t) = truth {
        if t.dims() != i1.dims() {
            return Err(Error::Shape(format!(
                "ground truth size mismatch: {}x{} vs {}x{}",
                t.width(),
                t.height(),
                i1.width(),
                i1.height()
            )));
        }
    }
    let di = log_ratio(i1, i2)?;
    let pseudo_labels = hierarchical_fcm_with(&di, &cfg.preclassify)?;
    let _ = writeln!(
        log,
        "preclassified: {} changed, {} unchanged, {} intermediate",
        pseudo_labels.count(PseudoLabel::Changed),
        pseudo_labels.count(PseudoLabel::Unchanged),
        pseudo_labels.count(PseudoLabel::Intermediate)
    );
    let samples = build_training_set(i1, i2, &di, &pseudo_labels, &cfg.patch)?;
    let _ = writeln!(
        log,
        "training on {} patches of size {}",
        samples.len(),
        cfg.patch.r
    );
    let outcome = train(&samples, &cfg.train)?;
    if let Some(last) = outcome.epoch_losses.last() {
        let _ = writeln!(log, "final epoch loss {last:.6}");
    }
    let map = predict_map(&outcome.params, i1, i2, &di)?;
    let report = truth.map(|t| evaluate(&map, t)).transpose()?;
    Ok(DetectOutcome {
        map,
        pseudo_labels,
        params: outcome.params,
        epoch_losses: outcome.epoch_losses,
        training_samples: samples.len(),
        report,
    })
}

/// Detection for each patch size with a shared seed; returns `(R, PCC)` rows.
pub fn sweep(
    i1: &RasterImage,
    i2: &RasterImage,
    truth: &ChangeMap,
    r_list: &[usize],
    flags: &TrainFlags,
    log: &mut dyn Write,
) -> Result<Vec<(usize, f64)>> {
    let configs = sweep_configs(r_list, flags)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (r, cfg) in r_list.iter().zip(configs) {
        let _ = writeln!(log, "R = {r}");
        let out = detect(i1, i2, Some(truth), &cfg, log)?;
        rows.push((*r, out.report.expect("truth supplied").pcc));
    }
    Ok(rows)
}

fn sweep_configs(r_list: &[usize], flags: &TrainFlags) -> Result<Vec<DetectConfig>> {
    if r_list.is_empty() {
        return Err(Error::Usage("the patch size list is empty".into()));
    }
    r_list
        .iter()
        .map(|&r| {
            if !(5..=15).contains(&r) || r % 2 == 0 {
                return Err(Error::Usage(format!(
                    "sweep patch sizes must be odd and in 5..=15, got {r}"
                )));
            }
            DetectConfig::from_flags(&TrainFlags { r, ..flags.clone() })
        })
        .collect()
}

pub fn format_sweep(rows: &[(usize, f64)]) -> String {
    let mut out = String::from("R\tPCC\n");
    for (r, pcc) in rows {
        out.push_str(&format!("{r}\t{:.2}\n", round2(*pcc)));
    }
    out
}

fn read_pair(a: &Path, b: &Path) -> Result<(RasterImage, RasterImage)> {
    let i1 = read_pgm(a)?;
    let i2 = read_pgm(b)?;
    if i1.dims() != i2.dims() {
        return Err(Error::Shape(format!(
            "input size mismatch: {}x{} vs {}x{}",
            i1.width(),
            i1.height(),
            i2.width(),
            i2.height()
        )));
    }
    Ok((i1, i2))
}

fn read_map(path: &Path) -> Result<ChangeMap> {
    Ok(ChangeMap::from_raster(&read_pgm(path)?))
}

/// Write every `(path, bytes)` pair, or none if a target directory is
/// missing.
fn write_all(files: &[(&Path, Vec<u8>)]) -> Result<()> {
    for (path, _) in files {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            if !dir.is_dir() {
                return Err(Error::Usage(format!(
                    "output directory {} does not exist",
                    dir.display()
                )));
            }
        }
    }
    for (path, bytes) in files {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}

fn cmd_detect(args: &DetectArgs, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let cfg = DetectConfig::from_flags(&args.train)?;
    let (i1, i2) = read_pair(&args.i1, &args.i2)?;
    let truth = args.truth.as_deref().map(read_map).transpose()?;
    let outcome = detect(&i1, &i2, truth.as_ref(), &cfg, log)?;

    let mut files = vec![(args.out.as_path(), encode_pgm(&outcome.map.to_raster()))];
    if let Some(path) = &args.checkpoint {
        files.push((path.as_path(), encode_checkpoint(&outcome.checkpoint(&cfg))));
    }
    write_all(&files)?;
    if let Some(report) = outcome.report {
        write!(out, "{}", report.key_values())?;
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let r_list = args
        .r_list
        .clone()
        .unwrap_or_else(|| DEFAULT_R_LIST.to_vec());
    sweep_configs(&r_list, &args.train)?;
    let (i1, i2) = read_pair(&args.i1, &args.i2)?;
    let truth = read_map(&args.truth)?;
    let rows = sweep(&i1, &i2, &truth, &r_list, &args.train, log)?;
    write!(out, "{}", format_sweep(&rows))?;
    Ok(())
}

pub fn synth_spec(args: &SynthArgs) -> SceneSpec {
    SceneSpec {
        width: args.width,
        height: args.height,
        n_shapes: args.shapes,
        background_level: args.background,
        change_level: args.change,
        speckle_looks: args.looks,
        seed: args.seed,
    }
}

fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let Scene { i1, i2, truth, .. } = generate(&synth_spec(args))?;
    write_all(&[
        (args.i1.as_path(), encode_pgm(&i1)),
        (args.i2.as_path(), encode_pgm(&i2)),
        (args.truth.as_path(), encode_pgm(&truth.to_raster())),
    ])?;
    writeln!(out, "changed_pixels: {}", truth.changed_count())?;
    Ok(())
}

fn cmd_preclassify(args: &PreclassifyArgs, out: &mut dyn Write) -> Result<()> {
    let (i1, i2) = read_pair(&args.i1, &args.i2)?;
    let di = log_ratio(&i1, &i2)?;
    let labels = hierarchical_fcm_with(
        &di,
        &PreclassifyConfig {
            seed: args.seed,
            ..Default::default()
        },
    )?;
    let mut files = vec![(args.out.as_path(), encode_pgm(&labels.to_raster()))];
    if let Some(path) = &args.di {
        files.push((path.as_path(), encode_pgm(&di.to_raster())));
    }
    write_all(&files)?;
    writeln!(out, "changed: {}", labels.count(PseudoLabel::Changed))?;
    writeln!(out, "unchanged: {}", labels.count(PseudoLabel::Unchanged))?;
    writeln!(
        out,
        "intermediate: {}",
        labels.count(PseudoLabel::Intermediate)
    )?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let report = evaluate(&read_map(&args.pred)?, &read_map(&args.truth)?)?;
    write!(out, "{}", report.key_values())?;
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        EXIT_USAGE
    } else {
        EXIT_FAILURE
    }
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, log: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(log, "{e}")
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Detect(a) => cmd_detect(a, out, log),
        Command::Sweep(a) => cmd_sweep(a, out, log),
        Command::Synth(a) => cmd_synth(a, out),
        Command::Preclassify(a) => cmd_preclassify(a, out),
        Command::Eval(a) => cmd_eval(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(log, "error: {e}");
            exit_code(&e)
        }
    }
}
