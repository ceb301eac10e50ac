//! Whole-network assembly, forward/backward and the classification loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::network::buffer::{FeatureBuffer, SegmentOwner};
use crate::network::config::NetworkConfig;
use crate::network::layer::{DenseLayer, DenseLayerSpec};
use crate::nn::{join, Act, BatchNorm2d, Conv2d, Layer, Linear, SeBlock, Visitor};
use crate::ops::activation::Activation;
use crate::ops::conv::ConvWeights;
use crate::ops::norm::Mode;
use crate::ops::pool::{avg_pool_backward, global_avg_pool, global_avg_pool_backward};
use crate::tensor::{Matrix, Shape4, Tensor4};

/// Pooled-feature head: optional SE, affine map, hard-swish.
#[derive(Clone, Debug)]
pub struct Head {
    pub se: Option<SeBlock>,
    pub fc: Linear,
    pub act: Act,
}

#[derive(Clone, Debug, Default)]
struct NetCache {
    /// Buffer shapes right before each transition pool.
    pool_inputs: Vec<Shape4>,
    final_shape: Option<Shape4>,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    stem_act: Act,
    pub blocks: Vec<Vec<DenseLayer>>,
    pub head: Option<Head>,
    pub classifier: Linear,
    cache: NetCache,
}

impl Network {
    /// Builds a freshly initialised network; all randomness comes from `seed`.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_w = ConvWeights::he_normal(
            config.stem.channels,
            config.input_channels,
            config.stem.kernel,
            config.stem.kernel,
            1,
            &mut rng,
        )?;
        let geometry = config.geometry();
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for (spec, geo) in config.blocks.iter().zip(&geometry) {
            let mut layers = Vec::with_capacity(spec.layers);
            for l in 0..spec.layers {
                let layer_spec = DenseLayerSpec {
                    in_channels: geo.in_channels + l * spec.growth,
                    growth: spec.growth,
                    bottleneck: config.bottleneck,
                    groups: config.groups,
                    sfr_groups: config.sfr_groups(),
                    condense_factor: config.condense_factor,
                    sparse_factor: config.sparse_factor,
                    activation: if spec.hard_swish {
                        Activation::HardSwish
                    } else {
                        Activation::Relu
                    },
                    se_reduction: spec.se.then_some(config.se_reduction),
                    reactivation: config.reactivation,
                };
                layers.push(DenseLayer::new(layer_spec, &mut rng)?);
            }
            blocks.push(layers);
        }
        let width = config.final_width();
        let head = match &config.head {
            Some(h) => Some(Head {
                se: if h.se {
                    Some(SeBlock::new(width, h.se_reduction, &mut rng)?)
                } else {
                    None
                },
                fc: Linear::init(width, h.width, &mut rng),
                act: Act::new(Activation::HardSwish),
            }),
            None => None,
        };
        let classifier = Linear::init(config.classifier_inputs(), config.num_classes, &mut rng);
        Ok(Self {
            config: config.clone(),
            stem: Conv2d::new(stem_w, config.stem.stride, config.stem.kernel / 2),
            stem_bn: BatchNorm2d::new(config.stem.channels),
            stem_act: Act::new(Activation::Relu),
            blocks,
            head,
            classifier,
            cache: NetCache::default(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.blocks.iter().flatten()
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.blocks.iter_mut().flatten()
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let s = x.shape();
        let r = self.config.input_resolution;
        if s.c != self.config.input_channels || s.h != r || s.w != r {
            return Err(shape_err(
                "network_forward",
                format!(
                    "input {s} does not match ({}, {r}, {r}) of `{}`",
                    self.config.input_channels, self.config.name
                ),
            ));
        }
        Ok(())
    }

    /// Output of the stem.
    pub fn stem_forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let z = self.stem.forward(x)?;
        let z = self.stem_bn.forward(&z)?;
        self.stem_act.forward(&z)
    }

    /// Runs stem and dense blocks, keeping track of which layer owns which channels.
    pub fn features(&mut self, x: &Tensor4) -> Result<FeatureBuffer> {
        let stem = self.stem_forward(x)?;
        let mut buffer = FeatureBuffer::new(stem, SegmentOwner::Stem);
        self.cache.pool_inputs.clear();
        for (b, layers) in self.blocks.iter_mut().enumerate() {
            if b > 0 {
                self.cache.pool_inputs.push(buffer.tensor().shape());
                buffer = buffer.pooled(2, 2)?;
            }
            for (l, layer) in layers.iter_mut().enumerate() {
                layer.forward_buffer(&mut buffer, SegmentOwner::Layer { block: b, layer: l })?;
            }
        }
        self.cache.final_shape = Some(buffer.tensor().shape());
        Ok(buffer)
    }

    /// Logits from the pooled final buffer.
    fn classify(&mut self, pooled: &Tensor4) -> Result<Tensor4> {
        let mut z = pooled.clone();
        if let Some(h) = &mut self.head {
            if let Some(se) = &mut h.se {
                z = se.forward(&z)?;
            }
            z = h.fc.forward(&z)?;
            z = h.act.forward(&z)?;
        }
        self.classifier.forward(&z)
    }

    /// Forward pass returning logits as an `(N, classes)` matrix.
    pub fn logits(&mut self, x: &Tensor4) -> Result<Matrix> {
        Matrix::from_pooled(&self.forward(x)?)
    }

    /// Sets every BN layer to train or eval mode.
    pub fn set_training(&mut self, training: bool) {
        self.set_mode(if training { Mode::Train } else { Mode::Eval });
    }

    /// Ends one reactivation stage in every layer.
    pub fn prune_sfr_stage(&mut self) -> Result<()> {
        for layer in self.layers_mut() {
            if let Some(sfr) = &mut layer.sfr {
                sfr.prune_stage()?;
            }
        }
        Ok(())
    }

    /// Ends one condensing stage in every layer.
    pub fn prune_lgc_stage(&mut self) -> Result<()> {
        for layer in self.layers_mut() {
            layer.lgc.prune_stage()?;
        }
        Ok(())
    }

    /// Unmasked reactivation weights across the network.
    pub fn live_sfr(&self) -> usize {
        self.layers()
            .filter_map(|l| l.sfr.as_ref())
            .map(|s| s.live_connections())
            .sum()
    }

    /// Unmasked learned-group-convolution weights across the network.
    pub fn live_lgc(&self) -> usize {
        self.layers().map(|l| l.lgc.live_connections()).sum()
    }

    /// Whether every masked layer has completed its schedule.
    pub fn is_fully_sparsified(&self) -> bool {
        self.layers().all(|l| {
            l.lgc.is_fully_condensed() && l.sfr.as_ref().is_none_or(|s| s.is_fully_sparsified())
        })
    }

    /// Copies every tensor whose name and length also exist in `other`.
    /// Returns the number of tensors copied.
    pub fn copy_params_from(&mut self, other: &mut Network) -> usize {
        let mut src = std::collections::HashMap::new();
        other.visit("", &mut |p| {
            src.insert(p.name.clone(), (p.data.clone(), p.mask.map(|m| m.clone())));
        });
        let mut copied = 0;
        self.visit("", &mut |p| {
            if let Some((data, mask)) = src.get(&p.name) {
                if data.len() == p.data.len() {
                    p.data.copy_from_slice(data);
                    if let (Some(dst), Some(m)) = (p.mask, mask) {
                        dst.copy_from_slice(m);
                    }
                    copied += 1;
                }
            }
        });
        self.sync_masks();
        copied
    }

    /// Rebuilds pruned-set bookkeeping from the mask tensors.
    pub(crate) fn sync_masks(&mut self) {
        for layer in self.layers_mut() {
            layer.lgc.sync_from_mask();
            if let Some(sfr) = &mut layer.sfr {
                sfr.sync_from_mask();
            }
        }
    }
}

impl Layer for Network {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let buffer = self.features(x)?;
        let pooled = global_avg_pool(buffer.tensor());
        self.classify(&pooled)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let final_shape = self
            .cache
            .final_shape
            .ok_or_else(|| shape_err("network_backward", "backward before forward"))?;
        let mut g = self.classifier.backward(grad_out)?;
        if let Some(h) = &mut self.head {
            g = h.act.backward(&g)?;
            g = h.fc.backward(&g)?;
            if let Some(se) = &mut h.se {
                g = se.backward(&g)?;
            }
        }
        let mut g = global_avg_pool_backward(final_shape, &g)?;
        for b in (0..self.blocks.len()).rev() {
            for layer in self.blocks[b].iter_mut().rev() {
                g = layer.backward(&g)?;
            }
            if b > 0 {
                g = avg_pool_backward(self.cache.pool_inputs[b - 1], &g, 2, 2)?;
            }
        }
        let g = self.stem_act.backward(&g)?;
        let g = self.stem_bn.backward(&g)?;
        self.stem.backward(&g)
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.stem.visit(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit(&join(prefix, "stem.bn"), f);
        for (b, layers) in self.blocks.iter_mut().enumerate() {
            for (l, layer) in layers.iter_mut().enumerate() {
                layer.visit(&join(prefix, &format!("blocks.{b}.{l}")), f);
            }
        }
        if let Some(h) = &mut self.head {
            if let Some(se) = &mut h.se {
                se.visit(&join(prefix, "head.se"), f);
            }
            h.fc.visit(&join(prefix, "head.fc"), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.stem_bn.set_mode(mode);
        for layer in self.layers_mut() {
            layer.set_mode(mode);
        }
    }
}

/// Mean softmax cross-entropy over the batch.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient of the mean loss with respect to the logits.
    pub grad: Matrix,
    pub correct: usize,
}

pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    if logits.rows != labels.len() {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("{} rows vs {} labels", logits.rows, labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            logits.cols
        )));
    }
    let n = logits.rows.max(1) as f64;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut loss = 0.0f64;
    let mut correct = 0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        loss += denom.ln() + max - row[label] as f64;
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
        if argmax == label {
            correct += 1;
        }
        for (c, &v) in row.iter().enumerate() {
            let p = (v as f64 - max).exp() / denom;
            let target = if c == label { 1.0 } else { 0.0 };
            grad.set(r, c, ((p - target) / n) as f32);
        }
    }
    Ok(LossOutput {
        loss: loss / n,
        grad,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_with, shift_norm_offsets, GradCheckConfig, Probe};
    use crate::network::config::{BlockSpec, Dataset};
    use crate::nn::zero_grads;

    fn tiny() -> NetworkConfig {
        let mut c = NetworkConfig::toy();
        c.blocks = vec![BlockSpec::new(2, 4), BlockSpec::new(2, 4)];
        c.dataset = Dataset::Synthetic;
        c
    }

    #[test]
    fn cifar_logits_shape() {
        let mut net = Network::new(&NetworkConfig::cifar_110(), 0).unwrap();
        let x = Tensor4::zeros(Shape4::new(1, 3, 32, 32));
        let logits = net.logits(&x).unwrap();
        assert_eq!((logits.rows, logits.cols), (1, 10));
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let mut net = Network::new(&NetworkConfig::toy(), 0).unwrap();
        assert!(net.forward(&Tensor4::zeros(Shape4::new(1, 3, 16, 16))).is_err());
    }

    #[test]
    fn buffer_bookkeeping() {
        let cfg = NetworkConfig::toy();
        let mut net = Network::new(&cfg, 1).unwrap();
        let x = Tensor4::zeros(Shape4::new(2, 3, 8, 8));
        let buf = net.features(&x).unwrap();
        assert_eq!(buf.width(), cfg.final_width());
        assert_eq!(buf.segments().len(), 1 + 6);
        assert_eq!(buf.tensor().shape().h, 2);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Matrix::zeros(2, 4);
        let out = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-9);
        assert!((out.grad.get(0, 0) - (0.25 - 1.0) / 2.0).abs() < 1e-7);
        assert!((out.grad.get(1, 1) - 0.125).abs() < 1e-7);
        assert!(softmax_cross_entropy(&logits, &[0, 4]).is_err());
    }

    #[test]
    fn end_to_end_gradients() {
        let mut net = Network::new(&tiny(), 3).unwrap();
        net.prune_sfr_stage().unwrap();
        net.prune_lgc_stage().unwrap();
        shift_norm_offsets(&mut net, 3.0);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor4::randn(Shape4::new(1, 3, 8, 8), 1.0, &mut r);
        // A step of 1e-2 keeps f32 rounding of the logits well below the signal.
        let cfg = GradCheckConfig {
            eps: 1e-2,
            probe: Probe::Random(1),
            max_entries: Some(12),
            ..GradCheckConfig::default()
        };
        let rep = grad_check_with(&mut net, &x, &cfg).unwrap();
        assert!(rep.max_relative_error < 1e-2, "{rep:?}");
    }

    #[test]
    fn batched_backward_is_sum_of_samples() {
        let mut net = Network::new(&tiny(), 3).unwrap();
        net.prune_sfr_stage().unwrap();
        net.set_mode(Mode::Eval);
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor4::randn(Shape4::new(2, 3, 8, 8), 1.0, &mut r);
        let grads = |net: &mut Network, x: &Tensor4| {
            zero_grads(net);
            let y = net.forward(x).unwrap();
            net.backward(&Tensor4::full(y.shape(), 1.0)).unwrap();
            let mut out = Vec::new();
            net.visit("", &mut |p| {
                if let Some(g) = p.grad {
                    out.extend_from_slice(g);
                }
            });
            out
        };
        let both = grads(&mut net, &x);
        let a = grads(&mut net, &x.slice_batch(0..1));
        let b = grads(&mut net, &x.slice_batch(1..2));
        for ((&g, &ga), &gb) in both.iter().zip(&a).zip(&b) {
            assert!((g - ga - gb).abs() <= 1e-4 * (1.0 + g.abs()), "{g} vs {ga} + {gb}");
        }
    }
}
