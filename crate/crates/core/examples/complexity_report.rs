//! Parameter and FLOP budget of the default network at 128³.
//!
//!     cargo run --release --example complexity_report [-- H W D]

use mbdres_unet::complexity::{grouping_reduction_check, model_complexity};
use mbdres_unet::network::NetworkConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let shape = match args[..] {
        [h, w, d] => [h, w, d],
        [] => [128, 128, 128],
        _ => return Err("expected H W D".into()),
    };
    let report = model_complexity(&NetworkConfig::default(), shape)?;
    print!("{}", report.to_table());

    let (ungrouped, grouped) = grouping_reduction_check(32, 32, 32, 8)?;
    println!("grouped 3×3×3 stages at 32 channels, g=8: {grouped} vs {ungrouped} ungrouped");
    Ok(())
}
