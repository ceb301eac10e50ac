//! Analytic multiply-add and parameter counts for every built-in preset,
//! dense and deployed, next to published reference figures where they exist.
//!
//! cargo run --release --example flops_report

use sfrnet::network::{config_cost, NetworkConfig, Sparsity, PRESETS};
use sfrnet::reference::reference_cost;

fn mega(v: u64) -> f64 {
    v as f64 / 1e6
}

fn main() -> sfrnet::Result<()> {
    println!(
        "{:<10} {:>12} {:>12} {:>12} {:>12} {:>16}",
        "preset", "dense MACs", "final MACs", "final params", "sfr MACs", "reference"
    );
    for name in PRESETS {
        let cfg = NetworkConfig::preset(name)?;
        let dense = config_cost(&cfg, Sparsity::Dense).total();
        let fin = config_cost(&cfg, Sparsity::Final);
        let reference = match reference_cost(name) {
            Some(r) => format!("{:.1}M/{:.2}M", r.flops / 1e6, r.params / 1e6),
            None => "-".into(),
        };
        println!(
            "{name:<10} {:>11.1}M {:>11.1}M {:>11.2}M {:>11.2}M {reference:>16}",
            mega(dense.macs),
            mega(fin.total().macs),
            mega(fin.total().params),
            mega(fin.sfr.macs),
        );
    }
    println!("\nbreakdown of cnv2-a after all stages:\n{}", config_cost(&NetworkConfig::cnv2_a(), Sparsity::Final));
    Ok(())
}
