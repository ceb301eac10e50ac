//! Cosine learning-rate schedule and Nesterov SGD over masked parameters.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, ParamKind};

/// `0.5 lr0 (1 + cos(pi t))` for training progress `t`, clamped to `[0, 1]`.
pub fn cosine_lr(t: f64, lr0: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 4e-5,
            nesterov: true,
        }
    }
}

/// SGD with momentum (no dampening). Weight decay applies to
/// [`ParamKind::Weight`] tensors only; masked entries are never touched.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: HashMap::new(),
        }
    }

    /// One update of every trainable tensor of `layer`. Fails without
    /// modifying anything if a gradient is NaN or infinite.
    pub fn step(&mut self, layer: &mut dyn Layer, lr: f32) -> Result<()> {
        let mut bad: Option<String> = None;
        layer.visit("", &mut |p| {
            if bad.is_none() && p.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                bad = Some(p.name);
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteGradient(name));
        }
        let SgdConfig {
            momentum,
            weight_decay,
            nesterov,
        } = self.config;
        let velocity = &mut self.velocity;
        layer.visit("", &mut |p| {
            if p.kind == ParamKind::Buffer {
                return;
            }
            let Some(grad) = p.grad else { return };
            let decay = if p.kind == ParamKind::Weight { weight_decay } else { 0.0 };
            let v = velocity.entry(p.name).or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..p.data.len() {
                if p.mask.as_ref().is_some_and(|m| m[i] == 0.0) {
                    continue;
                }
                let d = grad[i] + decay * p.data[i];
                v[i] = momentum * v[i] + d;
                let step = if nesterov { d + momentum * v[i] } else { v[i] };
                p.data[i] -= lr * step;
            }
        });
        Ok(())
    }
}
