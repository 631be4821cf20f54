//! Region Dice and HD95 for a phantom against perturbed copies of its own
//! labels: a one-voxel shift, a dropped enhancing region, and a perfect copy.
//!
//!     cargo run --release --example metrics_demo

use mbdres_unet::data::{generate_phantom, voxel_index, TumorParams};
use mbdres_unet::metrics::{aggregate, evaluate_case, Region};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let case = generate_phantom(5, [64; 3], &TumorParams::default())?;
    let shape = case.shape;
    // anisotropic spacing so HD95 is in millimetres, not voxels
    let spacing = [1.0, 1.0, 2.0];

    let mut shifted = vec![0u8; case.voxels()];
    for h in 1..shape[0] {
        for w in 0..shape[1] {
            for d in 0..shape[2] {
                shifted[voxel_index(shape, [h, w, d])] = case.labels[voxel_index(shape, [h - 1, w, d])];
            }
        }
    }
    let no_enhancing: Vec<u8> = case.labels.iter().map(|&l| if l == 4 { 1 } else { l }).collect();

    let mut scores = Vec::new();
    for (name, pred) in [
        ("perfect", &case.labels),
        ("shifted", &shifted),
        ("no_enhancing", &no_enhancing),
    ] {
        let s = evaluate_case(name, pred, &case.labels, shape, spacing)?;
        print!("{name:<13}");
        for r in Region::ALL {
            let hd = s.hd95_of(r).map_or("  n/a".into(), |v| format!("{v:5.2}"));
            print!("  {} Dice {:.4} HD95 {hd}", r.name(), s.dice_of(r));
        }
        println!();
        scores.push(s);
    }

    let summary = aggregate(&scores)?;
    println!(
        "mean Dice ET {:.4} WT {:.4} TC {:.4}; HD95 excluded per region {:?}",
        summary.mean_dice[0], summary.mean_dice[1], summary.mean_dice[2], summary.hd95_excluded
    );
    Ok(())
}
