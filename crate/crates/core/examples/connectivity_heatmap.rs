//! Trains the toy network briefly, then writes per-group and per-layer
//! connection-strength heatmaps as CSV and PGM.
//!
//! cargo run --release --example connectivity_heatmap [out-dir]

use std::path::PathBuf;

use sfrnet::analysis::{connectivity, export_heatmap, Aggregation, Cell, Granularity};
use sfrnet::network::{Network, NetworkConfig};
use sfrnet::train::{train_on, TrainConfig};

fn main() -> sfrnet::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sfrnet-heatmaps"));
    std::fs::create_dir_all(&out)?;

    let cfg = TrainConfig {
        epochs: 12,
        ..TrainConfig::synthetic()
    };
    let data = cfg.dataset.load()?;
    let mut net = Network::new(&NetworkConfig::toy(), 3)?;
    train_on(&mut net, &cfg, &data, &mut |_| {})?;

    for (gran, stem) in [(Granularity::PerGroup, "per_group"), (Granularity::PerLayer, "per_layer")] {
        let m = connectivity(&net, gran, Aggregation::Mean);
        let pruned = m.cells.iter().filter(|c| **c == Cell::Pruned).count();
        let (csv, pgm) = export_heatmap(&m, &out.join(stem))?;
        println!(
            "{stem}: {}x{} cells, {pruned} fully pruned -> {} and {}",
            m.rows.len(),
            m.cols.len(),
            csv.display(),
            pgm.display()
        );
    }
    let layers = connectivity(&net, Granularity::PerLayer, Aggregation::Mean);
    println!("\nmean |w| of surviving connections (source row -> target column):");
    print!("{:>8}", "");
    for c in &layers.cols {
        print!("{c:>8}");
    }
    println!();
    for (r, row) in layers.rows.iter().enumerate() {
        print!("{row:>8}");
        for c in 0..layers.cols.len() {
            match layers.get(r, c) {
                Cell::Live { value, .. } => print!("{value:>8.3}"),
                Cell::Pruned => print!("{:>8}", "NA"),
                Cell::Undefined => print!("{:>8}", "."),
            }
        }
        println!();
    }
    Ok(())
}
