//! Trains the toy network on seeded two-class blobs with staged pruning and
//! prints the per-epoch log.
//!
//! cargo run --release --example train_synthetic [epochs]

use sfrnet::network::{Network, NetworkConfig};
use sfrnet::train::{evaluate, metrics_csv, train_on, TrainConfig};

fn main() -> sfrnet::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::synthetic()
    };
    let data = cfg.dataset.load()?;
    let mut net = Network::new(&NetworkConfig::toy(), 0)?;
    let start = std::time::Instant::now();
    let report = train_on(&mut net, &cfg, &data, &mut |m| {
        println!(
            "epoch {:>3}  loss {:.4}  acc {:.3}  live sfr {:>5}  live lgc {:>5}  lr {:.5}",
            m.epoch, m.loss, m.acc, m.live_sfr, m.live_lgc, m.lr
        )
    })?;
    let eval = evaluate(&mut net, &data, 50)?;
    println!("eval-mode train accuracy {:.3} (loss {:.4})", eval.acc, eval.loss);
    println!(
        "prune events: sfr {}/{}, lgc {}/{}; masked weights frozen: {}",
        report.sfr_events_fired,
        report.sfr_schedule.prune_events.len(),
        report.lgc_events_fired,
        report.lgc_schedule.prune_events.len(),
        report.masked_weights_frozen
    );
    println!("{:.1}s", start.elapsed().as_secs_f64());
    print!("{}", metrics_csv(&report.metrics[report.metrics.len().saturating_sub(1)..]));
    Ok(())
}
