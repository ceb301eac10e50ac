//! Ablation sweeps over the sparse factor or the reactivation group count.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{config_cost, Network, NetworkConfig, Sparsity};
use crate::train::{evaluate, train_on, TrainConfig};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "CNV2_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    /// Sparse factor of the reactivation modules.
    S,
    /// Group count of the reactivation modules only.
    G,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(Axis::S),
            "G" | "g" => Ok(Axis::G),
            _ => Err(Error::InvalidArgument(format!("sweep axis must be S or G, got `{s}`"))),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::S => "S",
            Axis::G => "G",
        }
    }

    pub fn apply(self, base: &NetworkConfig, value: usize) -> Result<NetworkConfig> {
        if value == 0 {
            return Err(Error::InvalidArgument(format!("{} must be at least 1", self.name())));
        }
        let mut cfg = base.clone();
        match self {
            Axis::S => cfg.sparse_factor = value,
            Axis::G => cfg.sfr_groups = Some(value),
        }
        cfg.validate()
            .map_err(|e| Error::InvalidArgument(format!("{}={value}: {e}", self.name())))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: usize,
    /// Deployed multiply-adds and parameters.
    pub flops: u64,
    pub params: u64,
    /// Multiply-adds of the reactivation modules alone.
    pub sfr_flops: u64,
    /// Eval-mode training accuracy after training, when training was requested.
    pub final_acc: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Worker count: `CNV2_THREADS` if set, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_one(base: &NetworkConfig, axis: Axis, value: usize, train: Option<&TrainConfig>, seed: u64) -> Result<SweepRow> {
    let cfg = axis.apply(base, value)?;
    let cost = config_cost(&cfg, Sparsity::Final);
    let mut row = SweepRow {
        value,
        flops: cost.total().macs,
        params: cost.total().params,
        sfr_flops: cost.sfr.macs,
        final_acc: None,
        final_loss: None,
    };
    if let Some(tc) = train {
        let data = tc.dataset.load()?;
        let mut net = Network::new(&cfg, seed)?;
        train_on(&mut net, tc, &data, &mut |_| {})?;
        let ev = evaluate(&mut net, &data, tc.batch_size.max(32))?;
        row.final_acc = Some(ev.acc);
        row.final_loss = Some(ev.loss);
    }
    Ok(row)
}

/// One row per value, in input order. Every run uses the same network and
/// data seeds; runs are spread over [`worker_threads`] threads.
pub fn ablation_sweep(
    base: &NetworkConfig,
    axis: Axis,
    values: &[usize],
    train: Option<&TrainConfig>,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    for &v in values {
        axis.apply(base, v)?;
    }
    let threads = worker_threads().min(values.len()).max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..values.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= values.len() {
                    break;
                }
                let r = run_one(base, axis, values[i], train, seed);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

pub fn sweep_csv(axis: Axis, rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,value,flops,params,sfr_flops,final_acc,final_loss\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            axis.name(),
            r.value,
            r.flops,
            r.params,
            r.sfr_flops,
            opt(r.final_acc),
            opt(r.final_loss)
        );
    }
    s
}
