//! Stateful layers: each wraps a primitive from [`crate::ops`], caches what
//! its backward pass needs and owns its parameters and gradients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::ops::activation::{relu_scalar, sigmoid_scalar, Activation};
use crate::ops::conv::{conv2d, conv2d_backward, ConvWeights};
use crate::ops::linear::{fully_connected, fully_connected_backward};
use crate::ops::norm::{batch_norm_backward, batch_norm_forward, BnCache, Mode, RunningStats};
use crate::ops::pool::{global_avg_pool, global_avg_pool_backward};
use crate::ops::se::{scale_channels, SeWeights};
use crate::tensor::{Matrix, Tensor4};

/// How the optimiser treats a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained with weight decay.
    Weight,
    /// Trained without weight decay (BN affine, biases).
    NoDecay,
    /// Persistent state that is not trained (running stats, stage counters).
    Buffer,
}

/// Mutable view of one named tensor handed to a visitor.
pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut Vec<f32>,
    pub grad: Option<&'a mut Vec<f32>>,
    /// Binary keep-mask with the same length as `data`.
    pub mask: Option<&'a mut Vec<f32>>,
    pub kind: ParamKind,
}

pub type Visitor<'v> = dyn FnMut(ParamMut<'_>) + 'v;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A differentiable layer with explicit forward and backward passes.
pub trait Layer {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4>;

    /// Propagates `grad_out` from the most recent forward call, accumulating
    /// parameter gradients, and returns the input gradient.
    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4>;

    fn visit(&mut self, _prefix: &str, _f: &mut Visitor<'_>) {}

    fn set_mode(&mut self, _mode: Mode) {}
}

pub fn zero_grads(layer: &mut dyn Layer) {
    layer.visit("", &mut |p| {
        if let Some(g) = p.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    });
}

fn accumulate(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Convolution layer with an optional binary mask over its filters.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weights: ConvWeights,
    pub stride: usize,
    pub padding: usize,
    pub mask: Option<Vec<f32>>,
    cache: Option<Tensor4>,
}

impl Conv2d {
    pub fn new(weights: ConvWeights, stride: usize, padding: usize) -> Self {
        Self {
            weights,
            stride,
            padding,
            mask: None,
            cache: None,
        }
    }

    pub fn masked(weights: ConvWeights, stride: usize, padding: usize) -> Self {
        let mask = vec![1.0; weights.data.len()];
        Self {
            mask: Some(mask),
            ..Self::new(weights, stride, padding)
        }
    }

    /// Filters with the mask applied.
    pub fn effective_weights(&self) -> ConvWeights {
        match &self.mask {
            None => ConvWeights {
                grad: None,
                ..self.weights.clone()
            },
            Some(m) => {
                let mut w = self.weights.zeros_like();
                for ((d, &v), &k) in w.data.iter_mut().zip(&self.weights.data).zip(m) {
                    *d = v * k;
                }
                w
            }
        }
    }

    pub fn live_weights(&self) -> usize {
        match &self.mask {
            None => self.weights.data.len(),
            Some(m) => m.iter().filter(|&&v| v != 0.0).count(),
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let y = conv2d(x, &self.effective_weights(), self.stride, self.padding)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| shape_err("conv2d_backward", "backward before forward"))?;
        let w = self.effective_weights();
        let (gi, mut gw) = conv2d_backward(x, &w, grad_out, self.stride, self.padding)?;
        if let Some(m) = &self.mask {
            for (g, &k) in gw.data.iter_mut().zip(m) {
                *g *= k;
            }
        }
        accumulate(self.weights.grad_mut(), &gw.data);
        Ok(gi)
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        let shape = self.weights.shape().to_vec();
        let n = self.weights.data.len();
        let grad = self.weights.grad.get_or_insert_with(|| vec![0.0; n]);
        f(ParamMut {
            name: join(prefix, "weight"),
            shape,
            data: &mut self.weights.data,
            grad: Some(grad),
            mask: self.mask.as_mut(),
            kind: ParamKind::Weight,
        });
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub stats: RunningStats,
    pub grad_gamma: Vec<f32>,
    pub grad_beta: Vec<f32>,
    pub mode: Mode,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            stats: RunningStats::new(channels),
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
            mode: Mode::Train,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let (y, cache) = batch_norm_forward(x, &self.gamma, &self.beta, &mut self.stats, self.mode)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| shape_err("batch_norm_backward", "backward before forward"))?;
        let (gi, dg, db) = batch_norm_backward(cache, &self.gamma, grad_out)?;
        accumulate(&mut self.grad_gamma, &dg);
        accumulate(&mut self.grad_beta, &db);
        Ok(gi)
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        let c = self.gamma.len();
        f(ParamMut {
            name: join(prefix, "gamma"),
            shape: vec![c],
            data: &mut self.gamma,
            grad: Some(&mut self.grad_gamma),
            mask: None,
            kind: ParamKind::NoDecay,
        });
        f(ParamMut {
            name: join(prefix, "beta"),
            shape: vec![c],
            data: &mut self.beta,
            grad: Some(&mut self.grad_beta),
            mask: None,
            kind: ParamKind::NoDecay,
        });
        f(ParamMut {
            name: join(prefix, "running_mean"),
            shape: vec![c],
            data: &mut self.stats.mean,
            grad: None,
            mask: None,
            kind: ParamKind::Buffer,
        });
        f(ParamMut {
            name: join(prefix, "running_var"),
            shape: vec![c],
            data: &mut self.stats.var,
            grad: None,
            mask: None,
            kind: ParamKind::Buffer,
        });
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }
}

#[derive(Clone, Debug)]
pub struct Act {
    pub kind: Activation,
    cache: Option<Tensor4>,
}

impl Act {
    pub fn new(kind: Activation) -> Self {
        Self { kind, cache: None }
    }
}

impl Layer for Act {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.cache = Some(x.clone());
        Ok(self.kind.apply(x))
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| shape_err("activation_backward", "backward before forward"))?;
        self.kind.backward(x, grad_out)
    }
}

/// Fully connected layer acting on `(N, C, 1, 1)` tensors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f32>,
    pub grad_weight: Vec<f32>,
    pub grad_bias: Vec<f32>,
    cache: Option<Matrix>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Vec<f32>) -> Self {
        let (nw, nb) = (weight.data.len(), bias.len());
        Self {
            weight,
            bias,
            grad_weight: vec![0.0; nw],
            grad_bias: vec![0.0; nb],
            cache: None,
        }
    }

    /// Normal(0, 1/sqrt(in)) weights, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (1.0 / inputs.max(1) as f32).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::new(
            Matrix::from_vec(inputs, outputs, data).expect("sized"),
            vec![0.0; outputs],
        )
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols
    }

    pub fn forward_matrix(&mut self, x: &Matrix) -> Result<Matrix> {
        let y = fully_connected(x, &self.weight, &self.bias)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward_matrix(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| shape_err("fully_connected_backward", "backward before forward"))?;
        let (gi, gw, gb) = fully_connected_backward(x, &self.weight, grad_out)?;
        accumulate(&mut self.grad_weight, &gw.data);
        accumulate(&mut self.grad_bias, &gb);
        Ok(gi)
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        Ok(self.forward_matrix(&Matrix::from_pooled(x)?)?.into_pooled())
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        Ok(self.backward_matrix(&Matrix::from_pooled(grad_out)?)?.into_pooled())
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        let shape = vec![self.weight.rows, self.weight.cols];
        let nb = self.bias.len();
        f(ParamMut {
            name: join(prefix, "weight"),
            shape,
            data: &mut self.weight.data,
            grad: Some(&mut self.grad_weight),
            mask: None,
            kind: ParamKind::Weight,
        });
        f(ParamMut {
            name: join(prefix, "bias"),
            shape: vec![nb],
            data: &mut self.bias,
            grad: Some(&mut self.grad_bias),
            mask: None,
            kind: ParamKind::NoDecay,
        });
    }
}

/// Squeeze-and-excitation block as a trainable layer.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub squeeze: Linear,
    pub excite: Linear,
    cache: Option<SeCache>,
}

#[derive(Clone, Debug)]
struct SeCache {
    input: Tensor4,
    hidden_pre: Matrix,
    gates: Matrix,
}

impl SeBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        SeWeights::zeros(channels, reduction)?;
        let hidden = channels / reduction;
        Ok(Self {
            squeeze: Linear::init(channels, hidden, rng),
            excite: Linear::init(hidden, channels, rng),
            cache: None,
        })
    }

    pub fn from_weights(w: SeWeights) -> Self {
        Self {
            squeeze: Linear::new(w.squeeze, w.squeeze_bias),
            excite: Linear::new(w.excite, w.excite_bias),
            cache: None,
        }
    }

    pub fn weights(&self) -> SeWeights {
        SeWeights {
            squeeze: self.squeeze.weight.clone(),
            squeeze_bias: self.squeeze.bias.clone(),
            excite: self.excite.weight.clone(),
            excite_bias: self.excite.bias.clone(),
        }
    }

    pub fn channels(&self) -> usize {
        self.squeeze.inputs()
    }

    pub fn hidden(&self) -> usize {
        self.squeeze.outputs()
    }
}

impl Layer for SeBlock {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        if x.shape().c != self.channels() {
            return Err(shape_err(
                "se_block",
                format!("input has {} channels, SE expects {}", x.shape().c, self.channels()),
            ));
        }
        let pooled = Matrix::from_pooled(&global_avg_pool(x))?;
        let hidden_pre = self.squeeze.forward_matrix(&pooled)?;
        let mut hidden = hidden_pre.clone();
        hidden.data.iter_mut().for_each(|v| *v = relu_scalar(*v));
        let mut gates = self.excite.forward_matrix(&hidden)?;
        gates.data.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
        let y = scale_channels(x, &gates);
        self.cache = Some(SeCache {
            input: x.clone(),
            hidden_pre,
            gates,
        });
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| shape_err("se_backward", "backward before forward"))?;
        let s = cache.input.shape();
        let mut grad_in = scale_channels(grad_out, &cache.gates);
        let mut d_z = Matrix::zeros(s.n, s.c);
        for n in 0..s.n {
            for c in 0..s.c {
                let ds: f64 = grad_out
                    .plane(n, c)
                    .iter()
                    .zip(cache.input.plane(n, c))
                    .map(|(&g, &x)| g as f64 * x as f64)
                    .sum();
                let gate = cache.gates.get(n, c) as f64;
                d_z.set(n, c, (ds * gate * (1.0 - gate)) as f32);
            }
        }
        let mut d_hidden = self.excite.backward_matrix(&d_z)?;
        for (d, &pre) in d_hidden.data.iter_mut().zip(&cache.hidden_pre.data) {
            if pre <= 0.0 {
                *d = 0.0;
            }
        }
        let d_pooled = self.squeeze.backward_matrix(&d_hidden)?;
        let g_pool = global_avg_pool_backward(s, &d_pooled.into_pooled())?;
        grad_in.add_assign(&g_pool)?;
        self.cache = Some(cache);
        Ok(grad_in)
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.squeeze.visit(&join(prefix, "squeeze"), f);
        self.excite.visit(&join(prefix, "excite"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(layer: &mut dyn Layer) -> Vec<(String, ParamKind)> {
        let mut out = Vec::new();
        layer.visit("x", &mut |p| out.push((p.name, p.kind)));
        out
    }

    #[test]
    fn masked_filters_do_not_contribute_or_learn() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = ConvWeights::he_normal(2, 3, 1, 1, 1, &mut rng).unwrap();
        let mut conv = Conv2d::masked(w, 1, 0);
        conv.mask.as_mut().unwrap()[1] = 0.0;
        assert_eq!(conv.live_weights(), 5);
        let x = Tensor4::randn(Shape4::new(2, 3, 2, 2), 1.0, &mut rng);
        let y = conv.forward(&x).unwrap();
        let w = &conv.weights.data;
        let expect = w[0] * x.at(0, 0, 1, 1) + w[2] * x.at(0, 2, 1, 1);
        assert!((y.at(0, 0, 1, 1) - expect).abs() < 1e-6);
        conv.backward(&Tensor4::full(y.shape(), 1.0)).unwrap();
        let g = conv.weights.grad.as_ref().unwrap();
        assert_eq!(g[1], 0.0);
        assert!(g[0] != 0.0);
    }

    #[test]
    fn batch_norm_modes() {
        let mut bn = BatchNorm2d::new(1);
        let x = Tensor4::from_vec(Shape4::new(4, 1, 1, 1), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let y = bn.forward(&x).unwrap();
        assert!(y.sum().abs() < 1e-5, "training output is centred");
        assert!(bn.stats.mean[0] > 0.0, "running mean moves");
        bn.set_mode(Mode::Eval);
        bn.stats.mean[0] = 2.0;
        bn.stats.var[0] = 4.0;
        let y = bn.forward(&x).unwrap();
        assert!((y.at(3, 0, 0, 0) - 2.0).abs() < 1e-3);
    }

    #[test]
    fn linear_shapes_and_values() {
        let w = Matrix::from_vec(3, 2, vec![1.0, 0.5, 0.0, 0.5, -1.0, 0.5]).unwrap();
        let mut fc = Linear::new(w, vec![0.0, 1.0]);
        assert_eq!((fc.inputs(), fc.outputs()), (3, 2));
        let x = Matrix::from_vec(1, 3, vec![2.0, 4.0, 6.0]).unwrap();
        let y = fc.forward_matrix(&x).unwrap();
        assert_eq!(y.data, vec![-4.0, 7.0]);
        assert!(fc.forward_matrix(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn backward_needs_forward() {
        let mut act = Act::new(Activation::Relu);
        assert!(act.backward(&Tensor4::zeros(Shape4::new(1, 1, 1, 1))).is_err());
        assert!(BatchNorm2d::new(2).backward(&Tensor4::zeros(Shape4::new(1, 2, 1, 1))).is_err());
    }

    #[test]
    fn visit_names_and_zeroing() {
        let mut bn = BatchNorm2d::new(2);
        let got = names(&mut bn);
        assert_eq!(
            got,
            vec![
                ("x.gamma".into(), ParamKind::NoDecay),
                ("x.beta".into(), ParamKind::NoDecay),
                ("x.running_mean".into(), ParamKind::Buffer),
                ("x.running_var".into(), ParamKind::Buffer),
            ]
        );
        bn.grad_gamma = vec![3.0, 4.0];
        zero_grads(&mut bn);
        assert_eq!(bn.grad_gamma, vec![0.0, 0.0]);
    }
}
