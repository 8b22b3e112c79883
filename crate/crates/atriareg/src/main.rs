//! Command-line driver for the tracking pipeline: generate a synthetic
//! dataset, preprocess a series, track the wall across phases, evaluate the
//! recovered motion, or export a Jacobian map.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use atriareg::error::{Error, Result};
use atriareg::io::dataset::{
    read_fields_dir, read_series_dir, write_fields_dir, write_series_dir,
};
use atriareg::io::{read_field, write_metrics_csv, write_volume};
use atriareg::metrics::{evaluate_tracking, hausdorff_percentile_mm};
use atriareg::phantom::{generate_phantom, scale_curve, PhantomConfig};
use atriareg::pipeline::preprocess_series;
use atriareg::registration::{track_cycle, RegistrationConfig, RegistrationResult};
use atriareg::transform::{jacobian_det_map, warp_mask, DEFAULT_MASK_THRESHOLD};

#[derive(Parser)]
#[command(
    name = "atriareg",
    version,
    about = "Tracks a segmented structure across a cine volume series with deformable registration"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known motion.
    Phantom(PhantomArgs),
    /// Crop, stabilize, normalize, and contour-band-mask a series.
    Preprocess(PreprocessArgs),
    /// Register every phase against the reference phase.
    Track(TrackArgs),
    /// Score tracked fields against ground-truth masks.
    Evaluate(EvaluateArgs),
    /// Compute the Jacobian determinant map of a field.
    Jacobian(JacobianArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Output directory for volumes, masks, truth fields, and metadata.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Full generator config as JSON; flags below override its entries.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    phases: Option<usize>,
    #[arg(long, value_name = "SIGMA")]
    noise_sigma: Option<f64>,
    /// Grid size as X,Y,Z.
    #[arg(long, value_parser = parse_triple::<usize>)]
    dims: Option<[usize; 3]>,
    /// Write .nii.gz instead of .nii.
    #[arg(long)]
    gzip: bool,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory holding phase_NN.nii volumes and phase_NN_mask.nii masks.
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Crop window as X,Y,Z voxels.
    #[arg(long, value_parser = parse_triple::<usize>, default_value = "96,96,36")]
    crop: [usize; 3],
    #[arg(long)]
    gzip: bool,
}

#[derive(Args)]
struct TrackArgs {
    /// Preprocessed series directory (volumes + masks).
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    /// Output directory for field_NN.nii and the loss log.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Full registration config as JSON; flags below override its entries.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Bending-energy weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Pyramid downsample factors, e.g. 4,2,1.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    /// Start each phase from scratch instead of the previous solution.
    #[arg(long)]
    no_warm_start: bool,
    /// Recorded in the run metadata; the optimizer itself is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gzip: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Series directory providing ground-truth masks.
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    /// Directory holding field_NN.nii, one per phase.
    #[arg(long, value_name = "DIR")]
    fields: PathBuf,
    /// Output CSV path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Report this percentile of boundary distances instead of the maximum.
    #[arg(long, value_name = "P")]
    hd_percentile: Option<f64>,
}

#[derive(Args)]
struct JacobianArgs {
    /// Displacement field file.
    #[arg(long, value_name = "FILE")]
    field: PathBuf,
    /// Output volume path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected X,Y,Z, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.trim().parse::<T>().map_err(|_| format!("bad component {p:?}"))?);
    }
    Ok([out.remove(0), out.remove(0), out.remove(0)])
}

fn read_json_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::IoFailure(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", p.display())))
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::IoFailure(format!("{}: {e}", path.display())))?;
    text.push('\n');
    atriareg::io::write_text(path, &text)
}

fn run_phantom(args: &PhantomArgs) -> Result<()> {
    let mut cfg: PhantomConfig = read_json_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(phases) = args.phases {
        cfg.phases = phases;
    }
    if let Some(sigma) = args.noise_sigma {
        cfg.noise_sigma = sigma;
    }
    if let Some(dims) = args.dims {
        cfg.dims = dims;
    }
    let (series, truth) = generate_phantom(&cfg)?;
    write_series_dir(&series, &args.out, args.gzip)?;
    write_fields_dir(&truth, &args.out, args.gzip)?;
    write_json(
        &args.out.join("phantom_meta.json"),
        &serde_json::json!({ "config": cfg, "scale_curve": scale_curve(&cfg) }),
    )?;
    eprintln!("wrote {} phases to {}", series.phase_count(), args.out.display());
    Ok(())
}

fn run_preprocess(args: &PreprocessArgs) -> Result<()> {
    let series = read_series_dir(&args.input)?;
    let out = preprocess_series(&series, args.crop)?;
    write_series_dir(&out.series, &args.out, args.gzip)?;
    write_json(
        &args.out.join("preprocess_meta.json"),
        &serde_json::to_value(&out.record)
            .map_err(|e| Error::IoFailure(format!("preprocess record: {e}")))?,
    )?;
    eprintln!(
        "preprocessed {} phases into {}",
        out.series.phase_count(),
        args.out.display()
    );
    Ok(())
}

fn loss_log(results: &[RegistrationResult], cfg: &RegistrationConfig) -> String {
    let mut text = String::new();
    for (t, r) in results.iter().enumerate() {
        let mut trace = r.loss_trace.iter();
        for (level_idx, &count) in r.iterations_used.iter().enumerate() {
            let factor = cfg.levels.get(level_idx).copied().unwrap_or(1);
            for iter in 0..count {
                let b = trace.next().expect("trace covers iterations_used");
                writeln!(
                    text,
                    "phase={t} level={factor} iter={iter} similarity={} bending={} total={}",
                    b.similarity, b.bending, b.total
                )
                .expect("string writes are infallible");
            }
        }
    }
    text
}

fn run_track(args: &TrackArgs) -> Result<()> {
    let mut cfg: RegistrationConfig = read_json_config(args.config.as_deref())?;
    if let Some(lambda) = args.lambda {
        cfg.lambda = lambda;
    }
    if let Some(levels) = &args.levels {
        cfg.levels = levels.clone();
    }
    if args.no_warm_start {
        cfg.warm_start = false;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let series = read_series_dir(&args.input)?;
    let results = track_cycle(&series, &cfg)?;
    let fields: Vec<_> = results.iter().map(|r| r.field.clone()).collect();
    write_fields_dir(&fields, &args.out, args.gzip)?;
    atriareg::io::write_text(&args.out.join("loss_trace.txt"), &loss_log(&results, &cfg))?;
    write_json(
        &args.out.join("track_meta.json"),
        &serde_json::json!({
            "config": cfg,
            "converged": results.iter().map(|r| r.converged).collect::<Vec<_>>(),
            "iterations_used": results.iter().map(|r| r.iterations_used.clone()).collect::<Vec<_>>(),
        }),
    )?;
    let converged = results.iter().filter(|r| r.converged).count();
    eprintln!(
        "tracked {} phases ({converged} converged) into {}",
        results.len(),
        args.out.display()
    );
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let series = read_series_dir(&args.input)?;
    let fields = read_fields_dir(&args.fields)?;
    let results: Vec<RegistrationResult> = fields
        .into_iter()
        .map(|field| RegistrationResult {
            field,
            loss_trace: Vec::new(),
            iterations_used: Vec::new(),
            converged: true,
        })
        .collect();
    let mut rows = evaluate_tracking(&series, &results)?;
    if let Some(p) = args.hd_percentile {
        let masks = series.masks.as_ref().ok_or(Error::MissingMasks)?;
        let reference = &masks[series.reference_phase];
        for (row, result) in rows.iter_mut().zip(&results) {
            let warped = warp_mask(reference, &result.field, DEFAULT_MASK_THRESHOLD)?;
            row.hausdorff_mm = hausdorff_percentile_mm(&warped, &masks[row.phase], p)?;
        }
    }
    write_metrics_csv(&rows, &args.out)?;
    eprintln!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn run_jacobian(args: &JacobianArgs) -> Result<()> {
    let field = read_field(&args.field)?;
    let map = jacobian_det_map(&field)?;
    write_volume(&map, &args.out)?;
    eprintln!("wrote Jacobian map to {}", args.out.display());
    Ok(())
}

fn configure_threads() {
    if let Ok(value) = std::env::var("ATRIAREG_THREADS") {
        if let Ok(n) = value.parse::<usize>() {
            if n > 0 {
                // Results do not depend on the pool size; this only bounds
                // CPU use. A failure here means a pool already exists.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Command::Phantom(args) => run_phantom(args),
        Command::Preprocess(args) => run_preprocess(args),
        Command::Track(args) => run_track(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Jacobian(args) => run_jacobian(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}] {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
