//! Command-line front end: preprocessing, registration, landmark evaluation,
//! lesion tracking, and synthetic case generation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lungreg_core::cascade::{register, CascadeConfig};
use lungreg_core::field::{load_field, save_field, DisplacementField};
use lungreg_core::lesion::{track, TrackConfig};
use lungreg_core::metrics::{evaluate_landmarks, load_landmarks, population_sd, save_landmarks};
use lungreg_core::preprocess::{preprocess_volume, PreprocessConfig};
use lungreg_core::synth::make_case;
use lungreg_core::vol::{load_volume, save_volume};

#[derive(Parser)]
#[command(name = "lungreg", version, about = "Deformable lung CT registration")]
struct Cli {
    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment lungs, enhance vessels, and normalize a CT volume.
    Preprocess(PreprocessArgs),
    /// Register a moving volume onto a fixed volume.
    Register(RegisterArgs),
    /// Landmark-based error evaluation of a displacement field.
    Evaluate(EvaluateArgs),
    /// Lesion-change tracking between two scans of the same subject.
    Track(TrackArgs),
    /// Generate a synthetic registration case with known ground truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON preprocessing configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON cascade configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation preset overriding the config flags: v1, v2, v3, or v4.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Landmark text file on the fixed grid, one "x y z" triple per line.
    #[arg(long)]
    fixed_landmarks: PathBuf,
    /// Corresponding landmark file on the moving grid.
    #[arg(long)]
    moving_landmarks: PathBuf,
    /// Voxel spacing in mm as "sx,sy,sz".
    #[arg(long, default_value = "1,1,1")]
    spacing: String,
    /// Displacement field; the zero field is used when omitted.
    #[arg(long)]
    field: Option<PathBuf>,
    /// Grid dims as "nx,ny,nz"; required when no field is given.
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    /// Earlier raw scan (moving side).
    #[arg(long)]
    earlier: PathBuf,
    /// Later raw scan (fixed side).
    #[arg(long)]
    later: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON tracking configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Skip preprocessing and register the raw scans directly.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Volume dims as "nx,ny,nz".
    #[arg(long, default_value = "64,64,64")]
    dims: String,
    /// Target maximum ground-truth displacement in voxels.
    #[arg(long, default_value_t = 6.0)]
    amplitude: f32,
    #[arg(long, default_value_t = 30)]
    landmarks: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    seed: Option<u64>,
    wall_clock_seconds: f64,
    engine_version: String,
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&Path],
    seed: Option<u64>,
    started: Instant,
) -> anyhow::Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        argv: std::env::args().collect(),
        config,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        seed,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn load_config<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn parse_triple<T: std::str::FromStr>(s: &str, what: &str) -> anyhow::Result<[T; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        anyhow::bail!("{what} must be three comma-separated values, got {s:?}");
    }
    let mut out: Vec<T> = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| anyhow::anyhow!("cannot parse {p:?} in {what}"))?,
        );
    }
    Ok([
        out.remove(0),
        out.remove(0),
        out.remove(0),
    ])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Preprocess(a) => run_preprocess(a),
        Command::Register(a) => run_register(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Track(a) => run_track(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run_preprocess(a: PreprocessArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let cfg: PreprocessConfig = load_config(&a.config)?;
    let input = load_volume(&a.input)?;
    let pre = preprocess_volume(&input, &cfg)?;
    fs::create_dir_all(&a.out)?;
    let outputs = [
        ("mask.nii.gz", &pre.lung_mask),
        ("vesselness.nii.gz", &pre.vesselness),
        ("enhanced.nii.gz", &pre.enhanced),
        ("normalized.nii.gz", &pre.normalized),
        ("unenhanced.nii.gz", &pre.unenhanced_masked),
    ];
    let mut written = Vec::new();
    for (name, vol) in outputs {
        let p = a.out.join(name);
        save_volume(vol, &p)?;
        written.push(p);
    }
    let refs: Vec<&Path> = written.iter().map(|p| p.as_path()).collect();
    write_manifest(
        &a.out,
        "preprocess",
        serde_json::to_value(&cfg)?,
        &[&a.input],
        &refs,
        None,
        started,
    )?;
    println!("preprocess: wrote {} volumes to {}", written.len(), a.out.display());
    Ok(())
}

fn run_register(a: RegisterArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut cfg: CascadeConfig = load_config(&a.config)?;
    if let Some(v) = &a.variant {
        let n: u8 = v
            .strip_prefix('v')
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| anyhow::anyhow!("variant must be v1..v4, got {v:?}"))?;
        cfg = cfg.variant(n)?;
    }
    let fixed = load_volume(&a.fixed)?;
    let moving = load_volume(&a.moving)?;
    let res = register(&fixed, &moving, &cfg, None)?;
    fs::create_dir_all(&a.out)?;
    let df_path = a.out.join("df.field");
    save_field(&res.df, &df_path)?;
    let warped_path = a.out.join("warped.nii.gz");
    save_volume(&res.warped, &warped_path)?;
    let trace_path = a.out.join("loss_trace.json");
    fs::write(
        &trace_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "per_level_traces": res.loss_traces,
            "final_loss": res.final_loss,
        }))?,
    )?;
    write_manifest(
        &a.out,
        "register",
        serde_json::to_value(&cfg)?,
        &[&a.fixed, &a.moving],
        &[&df_path, &warped_path, &trace_path],
        None,
        started,
    )?;
    println!(
        "register: final loss {:.6}, max displacement {:.3} voxels",
        res.final_loss,
        res.df.max_magnitude()
    );
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let spacing: [f32; 3] = parse_triple(&a.spacing, "spacing")?;
    let lm = load_landmarks(&a.fixed_landmarks, &a.moving_landmarks, spacing)?;
    let df = match &a.field {
        Some(p) => load_field(p)?,
        None => {
            let dims_str = a
                .dims
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("--dims is required when no field is given"))?;
            let dims: [usize; 3] = parse_triple(dims_str, "dims")?;
            DisplacementField::zeros(dims)
        }
    };
    let tre = evaluate_landmarks(&lm, &df)?;
    let mean = tre.iter().sum::<f64>() / tre.len() as f64;
    let sd = population_sd(&tre);
    fs::create_dir_all(&a.out)?;
    let report_path = a.out.join("tre_report.json");
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "landmarks": tre.len(),
            "mean_mm": mean,
            "sd_mm": sd,
            "per_landmark_mm": tre,
        }))?,
    )?;
    write_manifest(
        &a.out,
        "evaluate",
        serde_json::json!({"spacing": spacing}),
        &[&a.fixed_landmarks, &a.moving_landmarks],
        &[&report_path],
        None,
        started,
    )?;
    println!("evaluate: TRE {mean:.2} +/- {sd:.2} mm over {} landmarks", tre.len());
    Ok(())
}

fn run_track(a: TrackArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let cfg: TrackConfig = load_config(&a.config)?;
    let earlier = load_volume(&a.earlier)?;
    let later = load_volume(&a.later)?;
    let (earlier_reg, later_reg) = if a.raw {
        (earlier.clone(), later.clone())
    } else {
        let pre_cfg = PreprocessConfig::default();
        (
            preprocess_volume(&earlier, &pre_cfg)?.enhanced,
            preprocess_volume(&later, &pre_cfg)?.enhanced,
        )
    };
    let map = track(&earlier, &later, &earlier_reg, &later_reg, &cfg)?;
    fs::create_dir_all(&a.out)?;
    let score_path = a.out.join("score.nii.gz");
    save_volume(&map.score, &score_path)?;
    let regions_path = a.out.join("regions.json");
    fs::write(&regions_path, serde_json::to_string_pretty(&map.regions)?)?;
    write_manifest(
        &a.out,
        "track",
        serde_json::to_value(&cfg)?,
        &[&a.earlier, &a.later],
        &[&score_path, &regions_path],
        None,
        started,
    )?;
    println!("track: {} regions reported", map.regions.len());
    Ok(())
}

fn run_synth(a: SynthArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let dims: [usize; 3] = parse_triple(&a.dims, "dims")?;
    let case = make_case(a.seed, dims, a.amplitude, a.landmarks)?;
    fs::create_dir_all(&a.out)?;
    let fixed_path = a.out.join("fixed.nii.gz");
    save_volume(&case.fixed, &fixed_path)?;
    let moving_path = a.out.join("moving.nii.gz");
    save_volume(&case.moving, &moving_path)?;
    let field_path = a.out.join("truth.field");
    save_field(&case.forward, &field_path)?;
    let lm_fixed = a.out.join("landmarks_fixed.txt");
    let lm_moving = a.out.join("landmarks_moving.txt");
    save_landmarks(&case.landmarks, &lm_fixed, &lm_moving)?;
    write_manifest(
        &a.out,
        "synth",
        serde_json::json!({"dims": dims, "amplitude": a.amplitude, "landmarks": a.landmarks}),
        &[],
        &[&fixed_path, &moving_path, &field_path, &lm_fixed, &lm_moving],
        Some(a.seed),
        started,
    )?;
    println!("synth: case written to {}", a.out.display());
    Ok(())
}
