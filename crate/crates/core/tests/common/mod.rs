//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfrnet::gradcheck::{grad_check_with, input_away_from_zero, shift_norm_offsets, GradCheckConfig, GradCheckReport, Probe};
use sfrnet::lgc::LgcLayer;
use sfrnet::network::{DenseLayer, DenseLayerSpec, Network, NetworkConfig};
use sfrnet::nn::{Act, BatchNorm2d, Conv2d, Layer, Linear, SeBlock};
use sfrnet::ops::activation::Activation;
use sfrnet::ops::conv::ConvWeights;
use sfrnet::ops::{avg_pool, avg_pool_backward, channel_shuffle, channel_unshuffle, global_avg_pool, global_avg_pool_backward, Mode};
use sfrnet::sfr::SfrModule;
use sfrnet::{Result, Shape4, Tensor4};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Outcome of one finite-difference check.
pub struct GradCase {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < self.tolerance && self.report.checked > 0
    }
}

struct AvgPool(Option<Shape4>);

impl Layer for AvgPool {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.0 = Some(x.shape());
        avg_pool(x, 2, 2)
    }
    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        avg_pool_backward(self.0.unwrap(), g, 2, 2)
    }
}

struct GlobalPool(Option<Shape4>);

impl Layer for GlobalPool {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.0 = Some(x.shape());
        Ok(global_avg_pool(x))
    }
    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        global_avg_pool_backward(self.0.unwrap(), g)
    }
}

struct Shuffle(usize);

impl Layer for Shuffle {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        channel_shuffle(x, self.0)
    }
    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        channel_unshuffle(g, self.0)
    }
}

/// Affine maps have no truncation error, so a wide step isolates the
/// analytic gradient from f32 rounding.
fn linear_cfg() -> GradCheckConfig {
    GradCheckConfig {
        eps: 1e-2,
        floor: 1.0,
        probe: Probe::Random(3),
        max_entries: Some(64),
        ..GradCheckConfig::default()
    }
}

fn nonlinear_cfg() -> GradCheckConfig {
    GradCheckConfig {
        eps: 3e-3,
        probe: Probe::Random(5),
        skip_kinks: true,
        max_entries: Some(48),
        ..GradCheckConfig::default()
    }
}

const LINEAR_TOL: f64 = 1e-4;
const NONLINEAR_TOL: f64 = 1e-2;

/// Finite-difference checks of every primitive layer, the masked layers, a
/// dense layer and the whole toy network.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut out = Vec::new();
    let mut r = rng(40);
    let mut case = |name, layer: &mut dyn Layer, x: &Tensor4, cfg: GradCheckConfig, tolerance| {
        let report = grad_check_with(layer, x, &cfg).expect("grad check runs");
        out.push(GradCase { name, report, tolerance });
    };

    let x = Tensor4::randn(Shape4::new(2, 4, 5, 5), 1.0, &mut r);
    let mut conv = Conv2d::new(ConvWeights::he_normal(6, 4, 3, 3, 2, &mut r).unwrap(), 1, 1);
    case("conv 3x3 grouped", &mut conv, &x, linear_cfg(), LINEAR_TOL);
    let mut strided = Conv2d::new(ConvWeights::he_normal(4, 4, 3, 3, 1, &mut r).unwrap(), 2, 1);
    case("conv 3x3 stride 2", &mut strided, &x, linear_cfg(), LINEAR_TOL);
    let mut masked = Conv2d::masked(ConvWeights::he_normal(4, 4, 1, 1, 1, &mut r).unwrap(), 1, 0);
    if let Some(m) = masked.mask.as_mut() {
        m.iter_mut().step_by(3).for_each(|v| *v = 0.0);
    }
    case("conv 1x1 masked", &mut masked, &x, linear_cfg(), LINEAR_TOL);

    let mut fc = Linear::init(4, 3, &mut r);
    fc.bias = vec![0.2, -0.1, 0.05];
    let xf = Tensor4::randn(Shape4::new(3, 4, 1, 1), 1.0, &mut r);
    case("linear", &mut fc, &xf, linear_cfg(), LINEAR_TOL);

    let mut bn = BatchNorm2d::new(4);
    bn.gamma = vec![1.2, 0.7, -0.5, 1.0];
    bn.beta = vec![0.1, -0.3, 0.2, 0.0];
    case("batch norm (train)", &mut bn, &x, nonlinear_cfg(), NONLINEAR_TOL);
    bn.set_mode(Mode::Eval);
    case("batch norm (eval)", &mut bn, &x, linear_cfg(), LINEAR_TOL);

    let xa = input_away_from_zero(Shape4::new(2, 3, 3, 3), 0.05, &mut r);
    case("relu", &mut Act::new(Activation::Relu), &xa, nonlinear_cfg(), NONLINEAR_TOL);
    let xh = Tensor4::randn(Shape4::new(2, 3, 3, 3), 2.5, &mut r);
    case("hard-swish", &mut Act::new(Activation::HardSwish), &xh, nonlinear_cfg(), NONLINEAR_TOL);

    let mut se = SeBlock::new(4, 2, &mut r).unwrap();
    case("squeeze-excitation", &mut se, &x, nonlinear_cfg(), NONLINEAR_TOL);

    let x4 = Tensor4::randn(Shape4::new(2, 4, 4, 4), 1.0, &mut r);
    case("average pool", &mut AvgPool(None), &x4, linear_cfg(), LINEAR_TOL);
    case("global average pool", &mut GlobalPool(None), &x4, linear_cfg(), LINEAR_TOL);
    case("channel shuffle", &mut Shuffle(2), &x4, linear_cfg(), LINEAR_TOL);

    let mut lgc = LgcLayer::new(8, 8, 2, 4, &mut r).unwrap();
    lgc.prune_stage().unwrap();
    let x8 = Tensor4::randn(Shape4::new(2, 8, 3, 3), 1.0, &mut r);
    case("learned group conv (pruned)", &mut lgc, &x8, linear_cfg(), LINEAR_TOL);

    let mut sfr = SfrModule::new(4, 8, 2, 4, &mut r).unwrap();
    sfr.prune_stage().unwrap();
    shift_norm_offsets(&mut sfr, 1.5);
    let xs = Tensor4::randn(Shape4::new(2, 4, 3, 3), 1.0, &mut r);
    case("reactivation module (pruned)", &mut sfr, &xs, nonlinear_cfg(), NONLINEAR_TOL);

    let spec = DenseLayerSpec {
        in_channels: 8,
        growth: 4,
        bottleneck: 4,
        groups: 2,
        sfr_groups: 2,
        condense_factor: 2,
        sparse_factor: 2,
        activation: Activation::HardSwish,
        se_reduction: Some(2),
        reactivation: true,
    };
    let mut dense = DenseLayer::new(spec, &mut r).unwrap();
    dense.sfr.as_mut().unwrap().prune_stage().unwrap();
    dense.lgc.prune_stage().unwrap();
    shift_norm_offsets(&mut dense, 1.5);
    let xd = Tensor4::randn(Shape4::new(1, 8, 6, 6), 1.0, &mut r);
    let cfg = GradCheckConfig {
        max_entries: Some(24),
        ..nonlinear_cfg()
    };
    case("dense layer", &mut dense, &xd, cfg, NONLINEAR_TOL);

    let mut net = Network::new(&NetworkConfig::toy(), 3).unwrap();
    net.prune_sfr_stage().unwrap();
    net.prune_lgc_stage().unwrap();
    shift_norm_offsets(&mut net, 3.0);
    let xn = Tensor4::randn(Shape4::new(1, 3, 8, 8), 1.0, &mut r);
    let cfg = GradCheckConfig {
        eps: 1e-2,
        probe: Probe::Random(1),
        max_entries: Some(8),
        ..GradCheckConfig::default()
    };
    case("toy network end to end", &mut net, &xn, cfg, NONLINEAR_TOL);
    out
}

/// Logistic regression by full-batch gradient descent; returns training accuracy.
pub fn logistic_regression_accuracy(x: &[f32], labels: &[usize], dim: usize, epochs: usize, lr: f64) -> f64 {
    let n = labels.len();
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    for _ in 0..epochs {
        let mut gw = vec![0.0f64; dim];
        let mut gb = 0.0;
        for i in 0..n {
            let xi = &x[i * dim..(i + 1) * dim];
            let z: f64 = b + xi.iter().zip(&w).map(|(&a, &c)| a as f64 * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - labels[i] as f64;
            for (g, &a) in gw.iter_mut().zip(xi) {
                *g += err * a as f64;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g / n as f64;
        }
        b -= lr * gb / n as f64;
    }
    let correct = (0..n)
        .filter(|&i| {
            let xi = &x[i * dim..(i + 1) * dim];
            let z: f64 = b + xi.iter().zip(&w).map(|(&a, &c)| a as f64 * c).sum::<f64>();
            (z > 0.0) as usize == labels[i]
        })
        .count();
    correct as f64 / n as f64
}
