//! Evaluates a checkpoint on held-out phantoms and renders overlays of the
//! first prediction. Without a checkpoint a desk-scale model is trained for a
//! few epochs first.
//!
//!     cargo run --release --example evaluate_overlay -- [CHECKPOINT] [OUT_DIR]

use std::path::PathBuf;

use mbdres_unet::data::{generate_phantom, save_case, CaseFormat, TumorParams};
use mbdres_unet::harness::{evaluate, load_checkpoint, overlay, predict_labels, train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().map(PathBuf::from);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/evaluate_overlay".into()));

    let ckpt = match ckpt {
        Some(p) => p,
        None => {
            let cfg = TrainConfig {
                epochs: 5,
                output_dir: Some(out.join("train")),
                ..TrainConfig::default()
            };
            train(&cfg)?.best_checkpoint.expect("output directory was set")
        }
    };

    let data = out.join("heldout");
    let mut cases = Vec::new();
    for seed in 1000..1003 {
        let case = generate_phantom(seed, [64; 3], &TumorParams::default())?;
        save_case(&case, &data, CaseFormat::Brats)?;
        cases.push(case);
    }

    let report = evaluate(&ckpt, &data, &out.join("eval"), true)?;
    for s in &report.scores {
        println!(
            "{}: Dice ET {:.3} WT {:.3} TC {:.3}",
            s.case_id, s.dice[0], s.dice[1], s.dice[2]
        );
    }
    println!("mean Dice {:.3}", report.summary.overall_mean_dice);

    let (mut net, _) = load_checkpoint(&ckpt)?;
    let labels = predict_labels(&mut net, &mbdres_unet::data::normalize_case(&cases[0])?)?;
    for p in overlay(&cases[0], &labels, &out.join(&cases[0].case_id))? {
        println!("{}", p.display());
    }
    Ok(())
}
