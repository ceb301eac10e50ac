//! The epoch loop: cosine-annealed SGD with staged pruning events and a
//! per-epoch metrics log.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{softmax_cross_entropy, Network};
use crate::nn::{zero_grads, Layer};
use crate::schedule::{build_schedule, StageSchedule};
use crate::tensor::Matrix;
use crate::train::data::{epoch_batches, Dataset, DatasetSource};
use crate::train::optim::{cosine_lr, Sgd, SgdConfig};

fn default_momentum() -> f32 {
    0.9
}
fn default_weight_decay() -> f32 {
    4e-5
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default = "yes")]
    pub nesterov: bool,
    /// Seeds batch order and augmentation.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSource,
}

impl TrainConfig {
    /// 30 epochs of batch 16 on the synthetic two-class blobs.
    pub fn synthetic() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 4e-5,
            nesterov: true,
            seed: 0,
            dataset: DatasetSource::synthetic_default(),
        }
    }

    /// CIFAR schedule: 300 epochs, batch 64, initial rate 0.1.
    pub fn cifar(files: Vec<std::path::PathBuf>) -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 4e-5,
            nesterov: true,
            seed: 0,
            dataset: DatasetSource::Cifar10Binary {
                files,
                normalization: Default::default(),
                augment: crate::train::data::Augment::CIFAR,
                limit: None,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
        }
    }

    /// Reactivation and condensation schedules for a network. A network
    /// without reactivation modules gets an empty reactivation schedule.
    pub fn schedules(&self, net: &Network) -> Result<(StageSchedule, StageSchedule)> {
        let cfg = net.config();
        let s = if cfg.reactivation { cfg.sparse_factor } else { 1 };
        Ok((build_schedule(self.epochs, s)?, build_schedule(self.epochs, cfg.condense_factor)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Training accuracy over the epoch's batches.
    pub acc: f64,
    /// Live connections after this epoch's prune events.
    pub live_sfr: usize,
    pub live_lgc: usize,
    /// Rate of the epoch's last iteration.
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss,acc,live_sfr,live_lgc,lr";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", m.epoch, m.loss, m.acc, m.live_sfr, m.live_lgc, m.lr);
    }
    s
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[EpochMetrics]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

/// Values of one tensor's masked entries, hashed, captured at a prune event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrozenSnapshot {
    /// Epoch after which the snapshot was taken.
    pub epoch: usize,
    positions: Vec<(String, Vec<usize>)>,
    pub hash: u64,
}

impl FrozenSnapshot {
    /// Records every masked position of `net` and hashes their values.
    pub fn capture(net: &mut Network, epoch: usize) -> Self {
        let mut positions = Vec::new();
        net.visit("", &mut |p| {
            if let Some(m) = p.mask {
                let idx: Vec<usize> = m.iter().enumerate().filter(|(_, &v)| v == 0.0).map(|(i, _)| i).collect();
                if !idx.is_empty() {
                    positions.push((p.name, idx));
                }
            }
        });
        let mut snap = Self {
            epoch,
            positions,
            hash: 0,
        };
        snap.hash = snap.rehash(net);
        snap
    }

    pub fn entries(&self) -> usize {
        self.positions.iter().map(|(_, v)| v.len()).sum()
    }

    /// Hash of the same positions in the current state of `net`.
    pub fn rehash(&self, net: &mut Network) -> u64 {
        let mut h = DefaultHasher::new();
        let mut k = 0;
        net.visit("", &mut |p| {
            if let Some((name, idx)) = self.positions.get(k) {
                if *name == p.name {
                    name.hash(&mut h);
                    for &i in idx {
                        p.data.get(i).map(|v| v.to_bits()).hash(&mut h);
                    }
                    k += 1;
                }
            }
        });
        (k == self.positions.len()).hash(&mut h);
        h.finish()
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub sfr_schedule: StageSchedule,
    pub lgc_schedule: StageSchedule,
    /// One snapshot per epoch that ended with a prune event.
    pub snapshots: Vec<FrozenSnapshot>,
    /// Whether every snapshot still hashes identically after the last epoch.
    pub masked_weights_frozen: bool,
    pub sfr_events_fired: usize,
    pub lgc_events_fired: usize,
}

impl TrainReport {
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.metrics.last()
    }
}

/// Loads the configured dataset and trains on it.
pub fn train(net: &mut Network, cfg: &TrainConfig) -> Result<TrainReport> {
    let data = cfg.dataset.load()?;
    train_on(net, cfg, &data, &mut |_| {})
}

/// Trains on an in-memory dataset, calling `observe` after every epoch.
pub fn train_on(
    net: &mut Network,
    cfg: &TrainConfig,
    data: &Dataset,
    observe: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(net, data)?;
    let (sfr_schedule, lgc_schedule) = cfg.schedules(net)?;
    let augment = cfg.dataset.augment();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.sgd());
    let iters = data.len().div_ceil(cfg.batch_size);
    let total_iters = (cfg.epochs * iters) as f64;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();
    let (mut sfr_fired, mut lgc_fired) = (0, 0);

    for epoch in 1..=cfg.epochs {
        net.set_training(true);
        let (mut loss_sum, mut correct, mut seen, mut lr) = (0.0f64, 0usize, 0usize, 0.0f64);
        for (it, idx) in epoch_batches(data.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let t = ((epoch - 1) * iters + it) as f64 / total_iters;
            lr = cosine_lr(t, cfg.lr0);
            let (x, labels) = data.batch(&idx, augment, Some(&mut rng));
            zero_grads(net);
            let logits = net.logits(&x)?;
            let out = softmax_cross_entropy(&logits, &labels)?;
            net.backward(&out.grad.into_pooled())?;
            opt.step(net, lr as f32)?;
            loss_sum += out.loss * labels.len() as f64;
            correct += out.correct;
            seen += labels.len();
        }
        let mut pruned = false;
        if sfr_schedule.fires_after(epoch) {
            net.prune_sfr_stage()?;
            sfr_fired += 1;
            pruned = true;
        }
        if lgc_schedule.fires_after(epoch) {
            net.prune_lgc_stage()?;
            lgc_fired += 1;
            pruned = true;
        }
        if pruned {
            snapshots.push(FrozenSnapshot::capture(net, epoch));
        }
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            acc: correct as f64 / seen.max(1) as f64,
            live_sfr: net.live_sfr(),
            live_lgc: net.live_lgc(),
            lr,
        };
        observe(&m);
        metrics.push(m);
    }
    let masked_weights_frozen = snapshots.iter().all(|s| s.rehash(net) == s.hash);
    Ok(TrainReport {
        metrics,
        sfr_schedule,
        lgc_schedule,
        snapshots,
        masked_weights_frozen,
        sfr_events_fired: sfr_fired,
        lgc_events_fired: lgc_fired,
    })
}

fn check_compatible(net: &Network, data: &Dataset) -> Result<()> {
    let c = net.config();
    if data.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if data.channels != c.input_channels || data.height != c.input_resolution || data.width != c.input_resolution {
        return Err(Error::InvalidArgument(format!(
            "dataset images are {}x{}x{}, `{}` expects {}x{}x{}",
            data.channels, data.height, data.width, c.name, c.input_channels, c.input_resolution, c.input_resolution
        )));
    }
    if data.num_classes > c.num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, network only {}",
            data.num_classes, c.num_classes
        )));
    }
    Ok(())
}

/// Eval-mode mean loss and accuracy over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub acc: f64,
    pub samples: usize,
}

pub fn evaluate(net: &mut Network, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    evaluate_with(data, batch_size, |x| {
        net.set_training(false);
        net.logits(x)
    })
}

/// Evaluation driven by any logits function, shared by networks and compiled plans.
pub fn evaluate_with(
    data: &Dataset,
    batch_size: usize,
    mut logits: impl FnMut(&crate::tensor::Tensor4) -> Result<Matrix>,
) -> Result<Evaluation> {
    let (mut loss, mut correct) = (0.0f64, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk, Default::default(), None);
        let out = softmax_cross_entropy(&logits(&x)?, &labels)?;
        loss += out.loss * labels.len() as f64;
        correct += out.correct;
    }
    let n = data.len().max(1) as f64;
    Ok(Evaluation {
        loss: loss / n,
        acc: correct as f64 / n,
        samples: data.len(),
    })
}
