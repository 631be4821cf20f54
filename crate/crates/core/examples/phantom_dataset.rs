//! Generates a few phantoms, writes them in both on-disk formats and reads
//! them back.
//!
//!     cargo run --release --example phantom_dataset -- [OUT_DIR]

use std::path::PathBuf;

use mbdres_unet::data::{generate_phantom, list_cases, load_case, save_case, CaseFormat, TumorParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/phantom_dataset".into()));
    let params = TumorParams::default();

    for seed in 0..3 {
        let case = generate_phantom(seed, [64, 64, 48], &params)?;
        let n = case.voxels() as f64;
        let frac = |l: u8| case.labels.iter().filter(|&&v| v == l).count() as f64 / n;
        println!(
            "{}: necrotic {:.4}, edema {:.4}, enhancing {:.4}",
            case.case_id,
            frac(1),
            frac(2),
            frac(4)
        );
        for (format, dir) in [(CaseFormat::Raw, "raw"), (CaseFormat::Brats, "brats")] {
            save_case(&case, &out.join(dir), format)?;
        }
    }

    for dir in ["raw", "brats"] {
        for path in list_cases(&out.join(dir))? {
            let case = load_case(&path)?;
            let original = generate_phantom(case.case_id[8..].parse()?, case.shape, &params)?;
            assert_eq!(case, original, "{} did not round-trip", path.display());
            println!("{} -> {} {:?}, identical", path.display(), case.case_id, case.shape);
        }
    }
    Ok(())
}
