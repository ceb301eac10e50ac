//! Sweeps the reactivation sparsity factor and the group count of a preset
//! and prints the deployed cost of each setting. Pass `--train` to also train
//! every toy variant on the synthetic task (runs in parallel; set
//! CNV2_THREADS to limit the worker count).
//!
//! cargo run --release --example ablation_sweep [--train]

use sfrnet::analysis::{ablation_sweep, sweep_csv, Axis};
use sfrnet::network::NetworkConfig;
use sfrnet::train::TrainConfig;

fn main() -> sfrnet::Result<()> {
    let train = std::env::args().any(|a| a == "--train");
    let base = NetworkConfig::cnv2_a();
    for axis in [Axis::S, Axis::G] {
        let rows = ablation_sweep(&base, axis, &[1, 2, 4, 8], None, 0)?;
        println!("{} sweep on {}:\n{}", axis.name(), base.name, sweep_csv(axis, &rows));
    }
    if train {
        let tc = TrainConfig {
            epochs: 16,
            ..TrainConfig::synthetic()
        };
        let rows = ablation_sweep(&NetworkConfig::toy(), Axis::S, &[1, 2, 4, 8], Some(&tc), 0)?;
        println!("trained S sweep on toy:\n{}", sweep_csv(Axis::S, &rows));
    }
    Ok(())
}
