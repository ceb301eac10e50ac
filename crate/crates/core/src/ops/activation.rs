//! Element-wise nonlinearities.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    HardSwish,
}

#[inline]
pub fn relu_scalar(x: f32) -> f32 {
    x.max(0.0)
}

/// `x * clamp(x + 3, 0, 6) / 6`
#[inline]
pub fn hard_swish_scalar(x: f32) -> f32 {
    x * (x + 3.0).clamp(0.0, 6.0) / 6.0
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn relu_grad(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
fn hard_swish_grad(x: f32) -> f32 {
    if x <= -3.0 {
        0.0
    } else if x >= 3.0 {
        1.0
    } else {
        (2.0 * x + 3.0) / 6.0
    }
}

pub fn relu(input: &Tensor4) -> Tensor4 {
    input.map(relu_scalar)
}

pub fn hard_swish(input: &Tensor4) -> Tensor4 {
    input.map(hard_swish_scalar)
}

impl Activation {
    pub fn apply(self, input: &Tensor4) -> Tensor4 {
        match self {
            Activation::Relu => relu(input),
            Activation::HardSwish => hard_swish(input),
        }
    }

    pub fn apply_scalar(self, x: f32) -> f32 {
        match self {
            Activation::Relu => relu_scalar(x),
            Activation::HardSwish => hard_swish_scalar(x),
        }
    }

    /// Gradient with respect to the pre-activation `input`.
    pub fn backward(self, input: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
        if input.shape() != grad_out.shape() {
            return Err(shape_err(
                "activation_backward",
                format!("{} vs {}", input.shape(), grad_out.shape()),
            ));
        }
        let d: fn(f32) -> f32 = match self {
            Activation::Relu => relu_grad,
            Activation::HardSwish => hard_swish_grad,
        };
        let data = input
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| d(x) * g)
            .collect();
        Tensor4::from_vec(input.shape(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        assert_eq!(relu_scalar(-1.0), 0.0);
        assert_eq!(relu_scalar(2.0), 2.0);
    }

    #[test]
    fn hard_swish_values() {
        assert_eq!(hard_swish_scalar(0.0), 0.0);
        assert_eq!(hard_swish_scalar(3.0), 3.0);
        assert_eq!(hard_swish_scalar(-3.0), 0.0);
        assert!((hard_swish_scalar(1.0) - 4.0 / 6.0).abs() < 1e-6);
        assert!((hard_swish_scalar(1.0) - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn hard_swish_grad_matches_difference_quotient() {
        for &x in &[-2.5f32, -1.0, 0.3, 2.0, 4.0, -5.0] {
            let h = 1e-3f32;
            let num = (hard_swish_scalar(x + h) - hard_swish_scalar(x - h)) / (2.0 * h);
            assert!((num - hard_swish_grad(x)).abs() < 1e-3, "x={x}");
        }
    }
}
