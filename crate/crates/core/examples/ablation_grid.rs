//! A short ablation: every weighting mode and attention variant trained for
//! a few epochs on the same phantoms, with complexity at 128³.
//!
//!     RUST_LOG=info cargo run --release --example ablation_grid -- [OUT_DIR] [EPOCHS]

use std::path::PathBuf;

use mbdres_unet::harness::{ablate, AblationGrid, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/ablation".into()));
    let epochs = args.next().map(|e| e.parse()).transpose()?.unwrap_or(5);
    let grid = AblationGrid {
        base: TrainConfig {
            epochs,
            output_dir: Some(out.clone()),
            ..TrainConfig::default()
        },
        ..AblationGrid::default()
    };
    let rows = ablate(&grid)?;

    println!(
        "{:<10} {:<18} {:>7} {:>7} {:>7} {:>10} {:>8}",
        "group", "setting", "ET%", "WT%", "TC%", "params", "GFLOPs"
    );
    let pct = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.2}"));
    for r in &rows {
        println!(
            "{:<10} {:<18} {:>7} {:>7} {:>7} {:>10} {:>8}",
            r.group,
            r.setting,
            pct(r.dice_et),
            pct(r.dice_wt),
            pct(r.dice_tc),
            r.params.map_or("-".into(), |p| p.to_string()),
            r.flops.map_or("-".into(), |f| format!("{:.2}", f as f64 / 1e9)),
        );
    }
    println!("table in {}", out.join("ablation.csv").display());
    Ok(())
}
