//! Desk-scale training on synthetic phantoms: 16 training and 4 validation
//! cases at 64³, learnable branch weights, SACA attention.
//!
//!     RUST_LOG=info cargo run --release --example train_phantoms -- [OUT_DIR] [EPOCHS]

use std::path::PathBuf;

use mbdres_unet::harness::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/phantoms".into()));
    let cfg = TrainConfig {
        epochs: args.next().map(|e| e.parse()).transpose()?.unwrap_or(50),
        output_dir: Some(out.clone()),
        ..TrainConfig::default()
    };
    let outcome = train(&cfg)?;

    println!("best epoch {}", outcome.best_epoch);
    if let Some(s) = &outcome.validation_summary {
        println!(
            "validation Dice ET {:.3} WT {:.3} TC {:.3}",
            s.mean_dice[0], s.mean_dice[1], s.mean_dice[2]
        );
    }
    for block in outcome.trajectory.blocks() {
        if let Some(r) = outcome.trajectory.block(block).last() {
            println!(
                "block {block}: w = ({:.3}, {:.3}, {:.3}), sum {:.3}",
                r.w1, r.w2, r.w3, r.sum
            );
        }
    }
    println!(
        "checkpoints, loss.csv, trajectory.csv and trajectories.png in {}",
        out.display()
    );
    Ok(())
}
