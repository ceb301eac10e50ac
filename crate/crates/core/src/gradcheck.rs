//! Central finite-difference checks of analytic gradients.
//!
//! The scalar loss is `sum_i probe_i * out_i`. With [`Probe::Sum`] every
//! probe weight is 1, i.e. the loss is the sum of the outputs; [`Probe::Random`]
//! uses fixed pseudo-random weights, which is needed for layers whose output
//! sum is constant (train-mode batch norm).
//!
//! The error for one entry is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{zero_grads, Layer, ParamKind};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Probe {
    Sum,
    Random(u64),
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f32,
    pub probe: Probe,
    pub floor: f64,
    /// Check at most this many entries per tensor (sampled deterministically).
    pub max_entries: Option<usize>,
    /// Skip entries whose one-sided slopes disagree enough to explain the
    /// discrepancy (an activation kink inside `[x - eps, x + eps]`).
    pub skip_kinks: bool,
    pub check_input: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            probe: Probe::Sum,
            floor: 1e-2,
            max_entries: None,
            skip_kinks: false,
            check_input: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Name of the tensor holding the worst entry.
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
}

/// Sum-of-outputs check at the given `eps`; returns the max relative error.
pub fn grad_check(layer: &mut dyn Layer, input: &Tensor4, eps: f32) -> Result<f64> {
    let cfg = GradCheckConfig {
        eps,
        ..GradCheckConfig::default()
    };
    Ok(grad_check_with(layer, input, &cfg)?.max_relative_error)
}

fn probe_tensor(out: &Tensor4, probe: Probe) -> Tensor4 {
    match probe {
        Probe::Sum => Tensor4::full(out.shape(), 1.0),
        Probe::Random(seed) => {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            Tensor4::uniform(out.shape(), -1.0, 1.0, &mut r)
        }
    }
}

fn loss(layer: &mut dyn Layer, x: &Tensor4, probe: &Tensor4) -> Result<f64> {
    let y = layer.forward(x)?;
    Ok(y.data()
        .iter()
        .zip(probe.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum())
}

fn entries(len: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let mut v = sample(rng, len, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

struct Tracker<'a> {
    cfg: &'a GradCheckConfig,
    report: GradCheckReport,
}

impl Tracker<'_> {
    /// `delta` is the perturbation actually realised in f32 on each side.
    fn record(&mut self, name: &str, analytic: f64, plus: f64, minus: f64, center: f64, delta: [f64; 2]) {
        let numeric = (plus - minus) / (delta[0] + delta[1]);
        let denom = analytic.abs().max(numeric.abs()).max(self.cfg.floor);
        let err = (analytic - numeric).abs() / denom;
        if self.cfg.skip_kinks {
            let s_plus = (plus - center) / delta[0];
            let s_minus = (center - minus) / delta[1];
            let asym = (s_plus - s_minus).abs();
            let scale = s_plus.abs().max(s_minus.abs()).max(self.cfg.floor);
            if asym > 1e-2 * scale && asym >= (analytic - numeric).abs() {
                self.report.skipped += 1;
                return;
            }
        }
        self.report.checked += 1;

        if err > self.report.max_relative_error {
            self.report.max_relative_error = err;
            self.report.worst = name.to_string();
        }
    }
}

/// Full check of input and parameter gradients.
pub fn grad_check_with(
    layer: &mut dyn Layer,
    input: &Tensor4,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    zero_grads(layer);
    let y = layer.forward(input)?;
    let probe = probe_tensor(&y, cfg.probe);
    let grad_in = layer.backward(&probe)?;

    let mut analytic: Vec<(String, Vec<f32>, Option<Vec<f32>>)> = Vec::new();
    layer.visit("", &mut |p| {
        if p.kind != ParamKind::Buffer {
            if let Some(g) = p.grad {
                analytic.push((p.name, g.clone(), p.mask.map(|m| m.clone())));
            }
        }
    });

    let mut tracker = Tracker {
        cfg,
        report: GradCheckReport::default(),
    };
    let center = loss(layer, input, &probe)?;
    let eps = cfg.eps;

    if cfg.check_input {
        for i in entries(input.len(), cfg.max_entries, &mut rng) {
            let x0 = input.data()[i];
            let mut xp = input.clone();
            xp.data_mut()[i] = x0 + eps;
            let plus = loss(layer, &xp, &probe)?;
            let mut xm = input.clone();
            xm.data_mut()[i] = x0 - eps;
            let minus = loss(layer, &xm, &probe)?;
            let delta = realised(x0, eps);
            tracker.record("input", grad_in.data()[i] as f64, plus, minus, center, delta);
        }
    }

    for (name, grad, mask) in &analytic {
        for i in entries(grad.len(), cfg.max_entries, &mut rng) {
            if mask.as_ref().is_some_and(|m| m[i] == 0.0) {
                continue;
            }
            let mut values = [0.0f64; 2];
            let mut x0 = 0.0;
            for (slot, delta) in [eps, -eps].into_iter().enumerate() {
                x0 = set_entry(layer, name, i, |v| v + delta);
                values[slot] = loss(layer, input, &probe)?;
                set_entry(layer, name, i, |_| x0);
            }
            let delta = realised(x0, eps);
            tracker.record(name, grad[i] as f64, values[0], values[1], center, delta);
        }
    }
    Ok(tracker.report)
}

/// Replaces one entry through `f` and returns its previous value.
fn set_entry(layer: &mut dyn Layer, name: &str, index: usize, f: impl Fn(f32) -> f32) -> f32 {
    let mut old = 0.0;
    layer.visit("", &mut |p| {
        if p.name == name {
            old = p.data[index];
            p.data[index] = f(old);
        }
    });
    old
}

/// Step sizes `x + eps - x` and `x - (x - eps)` after f32 rounding.
fn realised(x: f32, eps: f32) -> [f64; 2] {
    [((x + eps) - x) as f64, (x - (x - eps)) as f64]
}

/// Sets every batch-norm offset to `beta`. Train-mode batch norm centres its
/// output, so a positive offset moves most ReLU inputs away from the kink and
/// makes composite checks measure the gradient rather than the gating.
pub fn shift_norm_offsets(layer: &mut dyn Layer, beta: f32) {
    layer.visit("", &mut |p| {
        if p.name.ends_with(".beta") || p.name == "beta" {
            p.data.fill(beta);
        }
    });
}

/// Random input whose entries stay at least `margin` away from zero.
pub fn input_away_from_zero<R: Rng + ?Sized>(
    shape: crate::tensor::Shape4,
    margin: f32,
    rng: &mut R,
) -> Tensor4 {
    let data = (0..shape.numel())
        .map(|_| {
            let mag = rng.random_range(margin..1.0 + margin);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor4::from_vec(shape, data).expect("sized")
}
