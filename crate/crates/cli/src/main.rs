use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use coherent_concepts::ablation::{ablate_losses, ablate_segmentation, LossVariant};
use coherent_concepts::config::RunConfig;
use coherent_concepts::dataset::imageio::{load_mask, load_rgb};
use coherent_concepts::dataset::{generate_synthetic, load_manifest, DatasetManifest, Split, SyntheticSpec};
use coherent_concepts::explain::{explain, export_overlays};
use coherent_concepts::model::{BackboneRegistry, ConceptModel};
use coherent_concepts::pipeline::{build_model, prepare_splits, run_evaluation, run_training};
use coherent_concepts::preprocess::{apply_hard_attention, ExternalSegmenter, PreprocessMode};

#[derive(Parser)]
#[command(name = "coherent-concepts", version, about = "Concept-bottleneck lesion classifier toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lesion dataset with planted concept motifs.
    Synth(SynthArgs),
    /// Check that a manifest loads under a configuration.
    ValidateManifest(ValidateArgs),
    /// Run the three-stage training schedule.
    Train(TrainArgs),
    /// Evaluate one or more checkpoints on a manifest split.
    Eval(EvalArgs),
    /// Explain the prediction for a single image.
    Explain(ExplainArgs),
    /// Train the loss-term ablation grid.
    AblateLosses(AblateLossesArgs),
    /// Compare raw against masked input on one seed.
    AblateSegmentation(AblateSegmentationArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration in key = value format; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::read(path).with_context(|| format!("reading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn resolve_manifest(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    match flag.as_ref().or(cfg.manifest.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => bail!("no manifest given (use --manifest or set manifest in the config)"),
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for images, masks, manifest.csv and config.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    image_size: usize,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    path: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate; repeat to compare models (adds DSC tables).
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// JSON report path; an aligned text rendering is printed to stdout.
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Lesion mask for hard attention; masked checkpoints otherwise look for
    /// `<stem>.mask.png` next to the image.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AblateLossesArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated seeds; defaults to the configured seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Comma-separated variants; defaults to all seven.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Train variants concurrently; results match the sequential run.
    #[arg(long, default_value_t = false)]
    parallel: bool,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AblateSegmentationArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = false)]
    parallel: bool,
    #[arg(long)]
    report: PathBuf,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        image_size: args.image_size,
        ..SyntheticSpec::default()
    };
    let manifest = generate_synthetic(args.n, args.seed, &spec, &args.out)?;
    let cfg = RunConfig {
        manifest: Some(PathBuf::from("manifest.csv")),
        image_size: args.image_size,
        seed: args.seed,
        ..RunConfig::default()
    };
    std::fs::write(args.out.join("config.txt"), cfg.render())?;
    for (split, count) in manifest.split_counts() {
        println!("{split}: {count}");
    }
    Ok(())
}

fn validate(args: ValidateArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let manifest = DatasetManifest::read(&args.path)?;
    let samples = load_manifest(&args.path, &cfg.vocabulary()?, &cfg.load_options())?;
    for (split, count) in manifest.split_counts() {
        println!("{split}: {count}");
    }
    println!("{} samples OK", samples.len());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let manifest = resolve_manifest(&args.manifest, &cfg)?;
    let run = run_training(&cfg, &manifest, Some(&args.out_dir))?;
    let last = run.outcome.epochs.last();
    println!(
        "trained {} epochs ({} steps); best val accuracy {}; final val accuracy {}",
        run.outcome.epochs.len(),
        run.outcome.steps,
        run.outcome.best_val_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
        last.map_or("-".into(), |r| format!("{:.4}", r.val_accuracy)),
    );
    println!("checkpoints in {}", args.out_dir.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let manifest = resolve_manifest(&args.manifest, &cfg)?;
    let paths: Vec<&Path> = args.checkpoint.iter().map(PathBuf::as_path).collect();
    let report = run_evaluation(&cfg, &manifest, &paths, args.split)?;
    write_json(&args.report, &report)?;
    print!("{}", report.render_text());
    Ok(())
}

fn explain_cmd(args: ExplainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let (model, meta) = ConceptModel::load(&args.checkpoint, &BackboneRegistry::with_defaults())?;
    let size = model.config().input_size;
    let image = load_rgb(&args.image, size)?;
    let mode: PreprocessMode = meta.preprocess_mode.parse().unwrap_or(PreprocessMode::Raw);
    let input = if mode.is_masked() {
        let mask_path = match &args.mask {
            Some(p) => p.clone(),
            None => ExternalSegmenter {
                mask_dir: cfg.external_mask_dir.clone(),
            }
            .mask_path_for(&args.image),
        };
        let mask = load_mask(&mask_path, size)
            .with_context(|| format!("checkpoint expects masked input; no mask at {}", mask_path.display()))?;
        apply_hard_attention(image.view(), mask.view())?
    } else {
        image
    };
    let class_names = if meta.class_names.is_empty() {
        cfg.class_names.clone()
    } else {
        meta.class_names.clone()
    };
    let (mut report, maps) = explain(&model, input.view(), &class_names, cfg.contribution_threshold)?;
    report.overlay_paths = export_overlays(input.view(), maps.view(), model.vocab().names(), &args.out_dir)?;
    write_json(&args.out_dir.join("report.json"), &report)?;
    std::fs::write(args.out_dir.join("explanation.txt"), format!("{}\n", report.text))?;
    println!("{}", report.text);
    Ok(())
}

fn ablate_losses_cmd(args: AblateLossesArgs) -> Result<()> {
    let cfg = args.config.load()?;
    cfg.validate()?;
    let manifest = resolve_manifest(&args.manifest, &cfg)?;
    let variants = if args.variants.is_empty() {
        LossVariant::ALL.to_vec()
    } else {
        args.variants
            .iter()
            .map(|v| v.parse())
            .collect::<coherent_concepts::Result<_>>()?
    };
    let seeds = if args.seeds.is_empty() { vec![cfg.seed] } else { args.seeds };
    let map_dims = build_model(&cfg, &BackboneRegistry::with_defaults())?.map_dims();
    let splits = prepare_splits(&cfg, &manifest, map_dims)?;
    info!("training {} runs", variants.len() * seeds.len());
    let table = ablate_losses(&cfg, &splits, &variants, &seeds, args.parallel)?;
    write_json(&args.report, &table)?;
    print!("{}", table.render_text());
    Ok(())
}

fn ablate_segmentation_cmd(args: AblateSegmentationArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let manifest = resolve_manifest(&args.manifest, &cfg)?;
    let result = ablate_segmentation(&cfg, &manifest, args.parallel)?;
    write_json(&args.report, &result)?;
    print!("{}", result.render_text());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::ValidateManifest(a) => validate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => explain_cmd(a),
        Command::AblateLosses(a) => ablate_losses_cmd(a),
        Command::AblateSegmentation(a) => ablate_segmentation_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
