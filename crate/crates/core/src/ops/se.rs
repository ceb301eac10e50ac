//! Squeeze-and-excitation channel gating.

use crate::error::{shape_err, Result};
use crate::ops::activation::{relu_scalar, sigmoid_scalar};
use crate::ops::linear::fully_connected;
use crate::ops::pool::global_avg_pool;
use crate::tensor::{Matrix, Tensor4};

/// Weights of an SE block: `C -> C/r -> C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeWeights {
    pub squeeze: Matrix,
    pub squeeze_bias: Vec<f32>,
    pub excite: Matrix,
    pub excite_bias: Vec<f32>,
}

impl SeWeights {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(shape_err(
                "se_block",
                format!("reduction {reduction} does not divide {channels} channels"),
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            squeeze: Matrix::zeros(channels, hidden),
            squeeze_bias: vec![0.0; hidden],
            excite: Matrix::zeros(hidden, channels),
            excite_bias: vec![0.0; channels],
        })
    }

    pub fn channels(&self) -> usize {
        self.squeeze.rows
    }
}

/// Per-sample channel gates in `(0, 1)`, shape `(N, C)`.
pub fn se_gates(input: &Tensor4, w: &SeWeights) -> Result<Matrix> {
    let pooled = Matrix::from_pooled(&global_avg_pool(input))?;
    let mut hidden = fully_connected(&pooled, &w.squeeze, &w.squeeze_bias)?;
    hidden.data.iter_mut().for_each(|v| *v = relu_scalar(*v));
    let mut z = fully_connected(&hidden, &w.excite, &w.excite_bias)?;
    z.data.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    Ok(z)
}

/// global pool -> FC -> ReLU -> FC -> sigmoid -> channel-wise scale.
pub fn se_block(input: &Tensor4, w: &SeWeights) -> Result<Tensor4> {
    let s = input.shape();
    if w.channels() != s.c {
        return Err(shape_err(
            "se_block",
            format!("input has {} channels, SE expects {}", s.c, w.channels()),
        ));
    }
    let gates = se_gates(input, w)?;
    Ok(scale_channels(input, &gates))
}

pub(crate) fn scale_channels(input: &Tensor4, gates: &Matrix) -> Tensor4 {
    let s = input.shape();
    let mut out = input.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let g = gates.get(n, c);
            out.plane_mut(n, c).iter_mut().for_each(|v| *v *= g);
        }
    }
    out
}
