//! Command-line surface for the voxelform library.
//!
//! Exit codes: 0 success, 1 check failure, 2 parse/data errors, 3
//! semantic/mask errors, 64 usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxelform::attention::gradcheck::{run_gradcheck, GradCheckOptions};
use voxelform::augment::project_signals;
use voxelform::encoder::checkpoint::{load_model, save_model};
use voxelform::encoder::{
    build_model, count_parameters, forward, modulation_entries_per_block, Model, ModelConfig,
};
use voxelform::encoding::TableMode;
use voxelform::error::{Error, Result};
use voxelform::scene::ply::{load_pointcloud, save_pointcloud, PlyFormat};
use voxelform::scene::{PointCloud, SignalKind, SignalMask};
use voxelform::stats::{
    baseline_domain_classifier, h_divergence, random_crop, signal_variance_stats,
    window_occupancy_stats, CropStatsConfig, DivergenceReport, HistogramRecord,
    NormalizedCumulativeHistogram,
};
use voxelform_cli::dump;

const EXIT_CHECK_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "voxelform", version, about = "Sparse-voxel encoder tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Window sparsity or signal-variance histograms over a directory of clouds.
    Analyze(AnalyzeArgs),
    /// Run the encoder over a cloud and dump per-level features.
    Forward(ForwardArgs),
    /// Finite-difference verification of the attention gradients.
    Gradcheck(GradcheckArgs),
    /// Parameter accounting for a model configuration.
    Params(ParamsArgs),
    /// Write signal-subset variants of a cloud.
    Augment(AugmentArgs),
    /// Divergence between two sources, from direct errors or a trained classifier.
    Divergence(DivergenceArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AnalyzeKind {
    Sparsity,
    Variance,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    kind: AnalyzeKind,
    /// Directory of .ply clouds.
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    voxel_size: f64,
    /// Window size in voxels per axis.
    #[arg(long)]
    window: usize,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// Signal for variance histograms: position, color, or normal.
    #[arg(long)]
    signal: Option<String>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ForwardArgs {
    /// Model configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Input cloud (.ply).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    domain: usize,
    /// Seed for parameter initialization when no checkpoint is loaded.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Load parameters from this checkpoint instead of initializing.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write the (possibly freshly initialized) parameters here.
    #[arg(long)]
    save_checkpoint: Option<PathBuf>,
    /// Output feature dump.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Windows per table mode.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Comma-separated table modes, or `all`.
    #[arg(long, default_value = "all")]
    modes: String,
    /// Test hook: corrupt one analytic gradient to exercise the failure path.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Args)]
struct ParamsArgs {
    /// Model configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    /// Input cloud (.ply).
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated signal subsets, e.g. `p,pc,pn,pcn`.
    #[arg(long)]
    subsets: String,
    #[arg(long)]
    output_dir: PathBuf,
    /// Output encoding: ascii or binary.
    #[arg(long, default_value = "binary")]
    format: String,
}

#[derive(Args)]
struct DivergenceArgs {
    /// Source-dataset classification error in [0, 1].
    #[arg(long)]
    err_s: Option<f64>,
    /// Target-dataset classification error in [0, 1].
    #[arg(long)]
    err_t: Option<f64>,
    /// Directory of source clouds (classifier mode).
    #[arg(long)]
    source_dir: Option<PathBuf>,
    /// Directory of target clouds (classifier mode).
    #[arg(long)]
    target_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    voxel_size: f64,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Cubic crop edge length in meters.
    #[arg(long, default_value_t = 5.0)]
    crop_size: f64,
    #[arg(long, default_value_t = 4)]
    crops_per_scene: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report (JSON) here as well.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Parse { .. }
        | Error::Data(_)
        | Error::Io(_)
        | Error::Numerics(_)
        | Error::Internal(_)
        | Error::EmptyInput
        | Error::EmptyWindow => 2,
        Error::Mode { .. }
        | Error::Domain { .. }
        | Error::Shape(_)
        | Error::SignalMask(_)
        | Error::Mask(_)
        | Error::Subset(_)
        | Error::Range(_)
        | Error::Config(_) => 3,
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("usage error: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Forward(args) => cmd_forward(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Params(args) => cmd_params(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Divergence(args) => cmd_divergence(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn ply_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "ply").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .ply files in {}", dir.display())));
    }
    Ok(files)
}

fn parse_signal(name: &str) -> Result<SignalKind> {
    match name {
        "position" | "p" => Ok(SignalKind::Position),
        "color" | "c" => Ok(SignalKind::Color),
        "normal" | "n" => Ok(SignalKind::Normal),
        other => Err(Error::Range(format!("unknown signal '{other}'"))),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<ExitCode> {
    let signal = match args.kind {
        AnalyzeKind::Variance => match &args.signal {
            Some(name) => Some(parse_signal(name)?),
            None => {
                return Ok(usage_error("analyze variance requires --signal"));
            }
        },
        AnalyzeKind::Sparsity => None,
    };
    let files = ply_files(&args.input_dir)?;
    let mut histograms = Vec::with_capacity(files.len());
    for path in &files {
        let pc = load_pointcloud(path)?;
        let nch = match signal {
            None => window_occupancy_stats(&pc, args.voxel_size, args.window, args.bins)?,
            Some(kind) => {
                signal_variance_stats(&pc, args.voxel_size, args.window, kind, args.bins)?
            }
        };
        histograms.push(nch);
    }
    let merged = NormalizedCumulativeHistogram::merge(&histograms)?;
    let label = signal.map(|s| s.label().to_string()).unwrap_or_else(|| "occupancy".into());
    let record = HistogramRecord::new(&label, args.voxel_size, args.window, &merged);
    let text = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::Internal(format!("serialization failed: {e}")))?;
    std::fs::write(&args.output, text)?;
    println!(
        "wrote {} ({} scenes, signal {label})",
        args.output.display(),
        files.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)?;
    let config: ModelConfig =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("invalid config: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn obtain_model(config: &ModelConfig, checkpoint: Option<&Path>, seed: u64) -> Result<Model> {
    if let Some(path) = checkpoint {
        let model = load_model(path)?;
        if &model.config != config {
            return Err(Error::Config(format!(
                "checkpoint {} was built from a different configuration",
                path.display()
            )));
        }
        return Ok(model);
    }
    build_model(config, seed)
}

fn cmd_forward(args: ForwardArgs) -> Result<ExitCode> {
    let config = read_config(&args.config)?;
    let model = obtain_model(&config, args.checkpoint.as_deref(), args.seed)?;
    if let Some(path) = &args.save_checkpoint {
        save_model(&model, path)?;
    }
    let pc = load_pointcloud(&args.input)?;
    let levels = forward(&model, &pc, args.domain)?;
    let bytes = dump::write_dump(&levels);
    std::fs::write(&args.output, bytes)?;
    let counts: Vec<usize> = levels.iter().map(|l| l.coords.len()).collect();
    println!(
        "wrote {} (levels {:?}, domain {})",
        args.output.display(),
        counts,
        args.domain
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_modes(spec: &str) -> Result<Vec<TableMode>> {
    if spec == "all" {
        return Ok(TableMode::ALL.to_vec());
    }
    spec.split(',').map(|m| m.trim().parse()).collect()
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let opts = GradCheckOptions {
        seed: args.seed,
        trials: args.trials,
        tolerance: args.tolerance,
        modes: parse_modes(&args.modes)?,
        corrupt: args.corrupt_gradient,
    };
    let report = run_gradcheck(&opts)?;
    println!("{report}");
    if report.passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_CHECK_FAILURE))
    }
}

fn cmd_params(args: ParamsArgs) -> Result<ExitCode> {
    let config = read_config(&args.config)?;
    let model = build_model(&config, 0)?;
    let breakdown = count_parameters(&model);
    let report = serde_json::json!({
        "format_version": 1,
        "table_mode": config.table_mode,
        "domains": config.domains(),
        "embedding": breakdown.embedding,
        "blocks_shared": breakdown.blocks_shared,
        "blocks_domain_specific": breakdown.blocks_domain_specific,
        "other": breakdown.other,
        "total": breakdown.total(),
        "modulation_entries_per_block": modulation_entries_per_block(&model),
    });
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Internal(format!("serialization failed: {e}")))?;
    match &args.output {
        Some(path) => {
            std::fs::write(path, &text)?;
            println!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_augment(args: AugmentArgs) -> Result<ExitCode> {
    let format = match args.format.as_str() {
        "ascii" => PlyFormat::Ascii,
        "binary" => PlyFormat::BinaryLittleEndian,
        other => return Err(Error::Range(format!("unknown format '{other}'"))),
    };
    let pc = load_pointcloud(&args.input)?;
    let subsets: Vec<SignalMask> = args
        .subsets
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_>>()?;
    if subsets.is_empty() {
        return Ok(usage_error("--subsets must name at least one subset"));
    }
    std::fs::create_dir_all(&args.output_dir)?;
    let stem = args
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "cloud".into());
    for subset in &subsets {
        let variant = project_signals(&pc, *subset)?;
        let name = format!("{stem}_{}.ply", subset.label());
        let path = args.output_dir.join(&name);
        save_pointcloud(&variant, &path, format)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn print_divergence(report: &DivergenceReport) {
    println!(
        "d_H = {:.3} (err_source={:.3}, err_target={:.3})",
        report.d_h, report.err_source, report.err_target
    );
    if report.worse_than_chance {
        println!("warning: combined error exceeds 1; classifier is worse than chance");
    }
}

fn write_divergence(report: &DivergenceReport, path: &Path) -> Result<()> {
    let value = serde_json::json!({
        "format_version": 1,
        "err_source": report.err_source,
        "err_target": report.err_target,
        "d_h": report.d_h,
        "worse_than_chance": report.worse_than_chance,
    });
    let text = serde_json::to_string_pretty(&value)
        .map_err(|e| Error::Internal(format!("serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn load_crops(dir: &Path, args: &DivergenceArgs, rng: &mut ChaCha8Rng) -> Result<Vec<PointCloud>> {
    let mut crops = Vec::new();
    for path in ply_files(dir)? {
        let pc = load_pointcloud(&path)?;
        for _ in 0..args.crops_per_scene {
            crops.push(random_crop(&pc, args.crop_size, rng)?);
        }
    }
    Ok(crops)
}

fn cmd_divergence(args: DivergenceArgs) -> Result<ExitCode> {
    let report = match (args.err_s, args.err_t, &args.source_dir, &args.target_dir) {
        (Some(err_s), Some(err_t), None, None) => h_divergence(err_s, err_t)?,
        (None, None, Some(source_dir), Some(target_dir)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let source = load_crops(source_dir, &args, &mut rng)?;
            let target = load_crops(target_dir, &args, &mut rng)?;
            let config = CropStatsConfig {
                voxel_size: args.voxel_size,
                window_size: args.window,
                bins: args.bins,
                occupancy: true,
                variance_signals: Vec::new(),
            };
            let (_, report) = baseline_domain_classifier(&source, &target, &config, args.seed)?;
            report
        }
        _ => {
            return Ok(usage_error(
                "pass either --err-s with --err-t, or --source-dir with --target-dir",
            ));
        }
    };
    print_divergence(&report);
    if let Some(path) = &args.output {
        write_divergence(&report, path)?;
    }
    Ok(ExitCode::SUCCESS)
}
