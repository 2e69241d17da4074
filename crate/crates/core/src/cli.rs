//! Command-line front end: argument definitions and the subcommand drivers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{generate_synthetic, load_image, load_manifest, save_image, DatasetManifest, SyntheticSpec};
use crate::domain::{Direction, ExperimentConfig, TissueClass};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_report, ReportFormat, DEFAULT_PER_CLASS};
use crate::gradcheck::{run_gradcheck, Fault, GradcheckOptions};
use crate::inference::{translate_tiled, ClassMap, Tiling};
use crate::networks::load_checkpoint;
use crate::training::{run_training, TrainOptions};

/// Environment variable naming a persistent matting-Laplacian cache directory.
pub const CACHE_DIR_ENV: &str = "VSTAIN_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "vstain", version, about = "Class-conditioned stain translation for histology patches")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic two-domain dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Translate an image with a trained checkpoint.
    Translate(TranslateArgs),
    /// Evaluate a checkpoint per class and write a report table.
    Evaluate(EvaluateArgs),
    /// Check every loss gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of tissue classes (first N of H F N TF HF HB TN BG).
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Patch side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Patches per class and domain.
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    /// Random seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (TOML). Default: built-in defaults with patch size
    /// and class count taken from the manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (TSV).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Override optimizer.total_iterations. Default: from config.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Override seed. Default: from config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override networks.gen_filters. Default: from config.
    #[arg(long)]
    pub gen_filters: Option<usize>,
    /// Override networks.disc_filters. Default: from config.
    #[arg(long)]
    pub disc_filters: Option<usize>,
    /// Override networks.resnet_blocks. Default: from config.
    #[arg(long)]
    pub resnet_blocks: Option<usize>,
    /// Override optimizer.checkpoint_every. Default: from config.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Print a progress line every N steps. Default: silent.
    #[arg(long)]
    pub progress_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (PNG or TIFF, 8-bit RGB).
    #[arg(long)]
    pub input: PathBuf,
    /// Output image; format follows the extension.
    #[arg(long)]
    pub output: PathBuf,
    /// x_to_y or y_to_x. Default: the checkpoint config's default direction.
    #[arg(long)]
    pub direction: Option<Direction>,
    /// Condition on this class (H F N TF HF HB TN BG). Default: each tile's
    /// class predicted by the source-domain classifier.
    #[arg(long = "class")]
    pub class: Option<TissueClass>,
    /// Tile side in pixels, a multiple of 4. Default: the checkpoint's patch size.
    #[arg(long)]
    pub tile: Option<usize>,
    /// Tile overlap in pixels, below tile/2. Default: tile/4.
    #[arg(long)]
    pub overlap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest (TSV).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Patches sampled per class.
    #[arg(long, default_value_t = DEFAULT_PER_CLASS)]
    pub n_per_class: usize,
    /// x_to_y or y_to_x. Default: the checkpoint config's default direction.
    #[arg(long)]
    pub direction: Option<Direction>,
    /// Report format: tsv or markdown.
    #[arg(long, default_value = "tsv")]
    pub format: ReportFormat,
    /// Report file. Default: report.tsv or report.md next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random seed for the test batches.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Side length of the square test images.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    /// Corrupt a gradient on purpose (ssim-sign) to exercise the checker.
    /// Default: none.
    #[arg(long)]
    pub inject_fault: Option<Fault>,
}

/// Exit status for an error: 2 for bad arguments or configuration, 1 for
/// failures while running.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownClass { .. } => 2,
        _ => 1,
    }
}

/// Runs a parsed command, writing results to `out`. Returns the process
/// exit status.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Translate(a) => cmd_translate(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        patch_size: a.size,
        per_class_count: a.per_class,
        seed: a.seed,
    };
    generate_synthetic(&spec, &a.out)?;
    writeln!(out, "{}", a.out.join("manifest.tsv").display())?;
    Ok(0)
}

/// Default config sized to a manifest: its patch size and enough classes
/// to cover every class it lists.
pub fn config_for_manifest(manifest: &DatasetManifest) -> ExperimentConfig {
    let classes = manifest.entries.iter().map(|e| e.class.index() + 1).max().unwrap_or(1);
    ExperimentConfig {
        patch_size: manifest.patch_size,
        num_classes: classes,
        ..ExperimentConfig::default()
    }
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let manifest = load_manifest(&a.manifest)?;
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => config_for_manifest(&manifest),
    };
    if let Some(v) = a.iterations {
        cfg.optimizer.total_iterations = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.gen_filters {
        cfg.networks.gen_filters = v;
    }
    if let Some(v) = a.disc_filters {
        cfg.networks.disc_filters = v;
    }
    if let Some(v) = a.resnet_blocks {
        cfg.networks.resnet_blocks = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.optimizer.checkpoint_every = v;
    }
    cfg.validate()?;
    let opts = TrainOptions {
        resume: a.resume,
        cache_dir: std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from),
        progress_every: a.progress_every,
        ..TrainOptions::default()
    };
    let outcome = run_training(&cfg, &manifest, &a.out, &opts)?;
    writeln!(out, "{}", outcome.checkpoint.display())?;
    writeln!(out, "{}", outcome.metrics_log.display())?;
    Ok(0)
}

fn cmd_translate(a: TranslateArgs, out: &mut dyn Write) -> Result<i32> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let image = load_image(&a.input)?;
    let tile = a.tile.unwrap_or(ck.config.patch_size);
    let tiling = Tiling {
        tile,
        overlap: a.overlap.unwrap_or(tile / 4),
    };
    let direction = a.direction.unwrap_or(ck.config.default_direction);
    let class_map = match a.class {
        Some(c) if c.index() >= ck.config.num_classes => {
            return Err(Error::invalid(format!(
                "class {c} is outside the model's {} classes",
                ck.config.num_classes
            )))
        }
        Some(c) => ClassMap::Single(c),
        None => ClassMap::PerTilePredicted,
    };
    let result = translate_tiled(&ck.bundle, &image, direction, tiling, class_map)?;
    save_image(&a.output, &result)?;
    writeln!(out, "{}", a.output.display())?;
    Ok(0)
}

fn default_report_path(checkpoint: &Path, format: ReportFormat) -> PathBuf {
    let name = match format {
        ReportFormat::Tsv => "report.tsv",
        ReportFormat::Markdown => "report.md",
    };
    checkpoint.parent().unwrap_or(Path::new(".")).join(name)
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<i32> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let direction = a.direction.unwrap_or(ck.config.default_direction);
    let report = evaluate(&ck.bundle, &manifest, direction, a.n_per_class, a.seed)?;
    let text = render_report(&report, a.format);
    let path = a.out.unwrap_or_else(|| default_report_path(&a.checkpoint, a.format));
    fs::write(&path, &text)?;
    write!(out, "{text}")?;
    writeln!(out, "{}", path.display())?;
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let report = run_gradcheck(&GradcheckOptions {
        seed: a.seed,
        size: a.size,
        fault: a.inject_fault,
        ..GradcheckOptions::default()
    })?;
    write!(out, "{}", report.render())?;
    Ok(if report.passed() { 0 } else { 1 })
}
