use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mbdres_unet::complexity::model_complexity;
use mbdres_unet::data::{generate_phantom, load_case, nifti, save_case, CaseFormat, TumorParams};
use mbdres_unet::error::{Error, Result};
use mbdres_unet::harness::{
    ablate, evaluate, overlay, plot_trajectories, train, AblationGrid, TrainConfig, TrajectoryLog,
};
use mbdres_unet::network::NetworkConfig;

#[derive(Parser)]
#[command(name = "mbdres", version, about = "Lightweight 3D brain tumour segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON TrainConfig.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset; writes scores.csv and summary.json.
    Evaluate(EvaluateArgs),
    /// Analytic parameter and FLOP report.
    Analyze(AnalyzeArgs),
    /// Train and score an ablation grid; writes ablation.csv.
    Ablate(AblateArgs),
    /// Axial, coronal and sagittal overlay PNGs of a label volume on FLAIR.
    Overlay(OverlayArgs),
    /// Branch-weight trajectory plot from a trajectory.csv.
    Plot(PlotArgs),
    /// Synthetic cases.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Prepare data inline so the run is reproducible bit for bit.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write <case_id>_pred.nii.gz per case.
    #[arg(long)]
    save_predictions: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// NetworkConfig or TrainConfig JSON; the default network otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_shape, default_value = "128,128,128")]
    input_shape: [usize; 3],
    /// Where to write the JSON report; `-` for stdout.
    #[arg(long, default_value = "complexity.json")]
    json: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Overrides the grid's base output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OverlayArgs {
    /// Raw sidecar or BraTS case directory.
    #[arg(long)]
    case: PathBuf,
    /// Label volume: .nii/.nii.gz, or raw .u8 in the case's shape.
    #[arg(long)]
    pred: PathBuf,
    /// Output prefix; `_axial.png` etc. are appended.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Raw,
    Brats,
}

#[derive(Subcommand)]
enum PhantomCommand {
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_shape, default_value = "64,64,64")]
        shape: [usize; 3],
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "raw")]
        format: Format,
        #[arg(long, default_value_t = 0.015)]
        tumor_fraction: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split([',', 'x', ' '])
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|e| format!("{p}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [h, w, d] => Ok([h, w, d]),
        _ => Err(format!("expected H,W,D, got {s}")),
    }
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.out.is_some() {
        cfg.output_dir = a.out;
    }
    cfg.deterministic |= a.deterministic;
    let outcome = train(&cfg)?;
    println!("best epoch {}", outcome.best_epoch);
    if let Some(s) = outcome.validation_summary {
        println!(
            "validation Dice ET {:.4} WT {:.4} TC {:.4}",
            s.mean_dice[0], s.mean_dice[1], s.mean_dice[2]
        );
    }
    if let Some(dir) = &cfg.output_dir {
        println!("outputs in {}", dir.display());
    }
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let report = evaluate(&a.checkpoint, &a.data, &a.out, a.save_predictions)?;
    let s = &report.summary;
    println!(
        "{} cases: Dice ET {:.4} WT {:.4} TC {:.4}, mean {:.4}",
        s.cases, s.mean_dice[0], s.mean_dice[1], s.mean_dice[2], s.overall_mean_dice
    );
    println!("scores in {}", a.out.join("scores.csv").display());
    Ok(())
}

fn run_analyze(a: AnalyzeArgs) -> Result<()> {
    let cfg: NetworkConfig = match &a.config {
        None => NetworkConfig::default(),
        Some(p) => {
            let v = read_json(p)?;
            match v.get("network") {
                Some(net) => serde_json::from_value(net.clone())?,
                None => serde_json::from_value(v)?,
            }
        }
    };
    let report = model_complexity(&cfg, a.input_shape)?;
    let json = serde_json::to_string_pretty(&report)?;
    if a.json.as_os_str() == "-" {
        println!("{json}");
    } else {
        print!("{}", report.to_table());
        std::fs::write(&a.json, json).map_err(|e| Error::Io {
            path: a.json.clone(),
            source: e,
        })?;
        println!("JSON report in {}", a.json.display());
    }
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let mut grid = AblationGrid::from_json_file(&a.grid)?;
    if a.out.is_some() {
        grid.base.output_dir = a.out;
    }
    let rows = ablate(&grid)?;
    let pct = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.2}"));
    println!(
        "{:<10} {:<18} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>10} {:>14}",
        "group", "setting", "ET%", "WT%", "TC%", "HD_ET", "HD_WT", "HD_TC", "params", "flops"
    );
    for r in &rows {
        println!(
            "{:<10} {:<18} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>10} {:>14}{}",
            r.group,
            r.setting,
            pct(r.dice_et),
            pct(r.dice_wt),
            pct(r.dice_tc),
            pct(r.hd95_et),
            pct(r.hd95_wt),
            pct(r.hd95_tc),
            r.params.map_or("-".into(), |v| v.to_string()),
            r.flops.map_or("-".into(), |v| v.to_string()),
            r.error.as_ref().map_or(String::new(), |e| format!("  error: {e}")),
        );
    }
    Ok(())
}

fn run_overlay(a: OverlayArgs) -> Result<()> {
    let case = load_case(&a.case)?;
    let is_nifti = a.pred.to_string_lossy().ends_with(".nii") || a.pred.to_string_lossy().ends_with(".nii.gz");
    let labels: Vec<u8> = if is_nifti {
        let v = nifti::read(&a.pred)?;
        if v.shape != case.shape {
            return Err(Error::Input(format!(
                "prediction shape {:?}, case {:?}",
                v.shape, case.shape
            )));
        }
        v.data.iter().map(|&x| x.round() as u8).collect()
    } else {
        std::fs::read(&a.pred).map_err(|e| Error::Io {
            path: a.pred.clone(),
            source: e,
        })?
    };
    for p in overlay(&case, &labels, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run_phantom(c: PhantomCommand) -> Result<()> {
    let PhantomCommand::Generate {
        seed,
        shape,
        count,
        out,
        format,
        tumor_fraction,
        noise,
    } = c;
    let params = TumorParams {
        tumor_fraction,
        noise,
        ..TumorParams::default()
    };
    let format = match format {
        Format::Raw => CaseFormat::Raw,
        Format::Brats => CaseFormat::Brats,
    };
    for i in 0..count {
        let case = generate_phantom(seed.wrapping_add(i as u64), shape, &params)?;
        println!("{}", save_case(&case, &out, format)?.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Analyze(a) => run_analyze(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Overlay(a) => run_overlay(a),
        Command::Plot(a) => TrajectoryLog::read_csv(&a.trajectory).and_then(|log| plot_trajectories(&log, &a.out)),
        Command::Phantom { command } => run_phantom(command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
