//! Per-channel batch normalisation.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor4;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Running mean and (unbiased) variance tracked during training.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Values kept from a forward pass for [`batch_norm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache {
    mode: Mode,
    x_hat: Tensor4,
    inv_std: Vec<f64>,
}

fn check(op: &'static str, input: &Tensor4, gamma: &[f32], beta: &[f32], stats: &RunningStats) -> Result<()> {
    let c = input.shape().c;
    if gamma.len() != c || beta.len() != c || stats.mean.len() != c || stats.var.len() != c {
        return Err(shape_err(
            op,
            format!(
                "input has {c} channels, gamma {} beta {} running {}",
                gamma.len(),
                beta.len(),
                stats.mean.len()
            ),
        ));
    }
    Ok(())
}

/// Batch statistics (mean, biased variance) per channel with f64 accumulation.
pub fn channel_moments(input: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let s = input.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0f64; s.c];
    let mut var = vec![0.0f64; s.c];
    for c in 0..s.c {
        let mut acc = 0.0f64;
        for n in 0..s.n {
            acc += input.plane(n, c).iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = acc / count;
        let mut sq = 0.0f64;
        for n in 0..s.n {
            sq += input
                .plane(n, c)
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

/// Batch norm forward. Train mode normalises with batch statistics over
/// `(N, H, W)` and updates `stats` with momentum 0.1; eval mode uses `stats`.
pub fn batch_norm_forward(
    input: &Tensor4,
    gamma: &[f32],
    beta: &[f32],
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<(Tensor4, BnCache)> {
    check("batch_norm", input, gamma, beta, stats)?;
    let s = input.shape();
    let mut out = Tensor4::zeros(s);
    match mode {
        Mode::Train => {
            let (mean, var) = channel_moments(input);
            let count = (s.n * s.plane()) as f64;
            let mut x_hat = Tensor4::zeros(s);
            let mut inv_std = vec![0.0f64; s.c];
            for c in 0..s.c {
                let istd = 1.0 / (var[c] + BN_EPS).sqrt();
                inv_std[c] = istd;
                for n in 0..s.n {
                    let src = input.plane(n, c);
                    let xh: Vec<f32> = src.iter().map(|&v| ((v as f64 - mean[c]) * istd) as f32).collect();
                    let dst = out.plane_mut(n, c);
                    for (d, &h) in dst.iter_mut().zip(&xh) {
                        *d = gamma[c] * h + beta[c];
                    }
                    x_hat.plane_mut(n, c).copy_from_slice(&xh);
                }
                let unbiased = if count > 1.0 {
                    var[c] * count / (count - 1.0)
                } else {
                    var[c]
                };
                stats.mean[c] =
                    ((1.0 - BN_MOMENTUM) * stats.mean[c] as f64 + BN_MOMENTUM * mean[c]) as f32;
                stats.var[c] =
                    ((1.0 - BN_MOMENTUM) * stats.var[c] as f64 + BN_MOMENTUM * unbiased) as f32;
            }
            Ok((
                out,
                BnCache {
                    mode,
                    x_hat,
                    inv_std,
                },
            ))
        }
        Mode::Eval => {
            let mut inv_std = vec![0.0f64; s.c];
            let mut x_hat = Tensor4::zeros(s);
            for c in 0..s.c {
                let istd = 1.0 / (stats.var[c] as f64 + BN_EPS).sqrt();
                inv_std[c] = istd;
                let (scale, shift) = eval_affine_channel(gamma[c], beta[c], stats.mean[c], stats.var[c]);
                let mean = stats.mean[c] as f64;
                for n in 0..s.n {
                    let src = input.plane(n, c).to_vec();
                    for (d, &v) in out.plane_mut(n, c).iter_mut().zip(&src) {
                        *d = scale * v + shift;
                    }
                    for (d, v) in x_hat.plane_mut(n, c).iter_mut().zip(src) {
                        *d = ((v as f64 - mean) * istd) as f32;
                    }
                }
            }
            Ok((
                out,
                BnCache {
                    mode,
                    x_hat,
                    inv_std,
                },
            ))
        }
    }
}

/// Convenience wrapper returning only the normalised tensor.
pub fn batch_norm(
    input: &Tensor4,
    gamma: &[f32],
    beta: &[f32],
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<Tensor4> {
    batch_norm_forward(input, gamma, beta, stats, mode).map(|(y, _)| y)
}

fn eval_affine_channel(gamma: f32, beta: f32, mean: f32, var: f32) -> (f32, f32) {
    let istd = 1.0 / (var as f64 + BN_EPS).sqrt();
    (
        (gamma as f64 * istd) as f32,
        (beta as f64 - gamma as f64 * mean as f64 * istd) as f32,
    )
}

/// Eval-mode batch norm as a per-channel affine map `(scale, shift)`.
pub fn eval_affine(gamma: &[f32], beta: &[f32], stats: &RunningStats) -> (Vec<f32>, Vec<f32>) {
    (0..gamma.len())
        .map(|c| eval_affine_channel(gamma[c], beta[c], stats.mean[c], stats.var[c]))
        .unzip()
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward(
    cache: &BnCache,
    gamma: &[f32],
    grad_out: &Tensor4,
) -> Result<(Tensor4, Vec<f32>, Vec<f32>)> {
    let s = cache.x_hat.shape();
    if grad_out.shape() != s {
        return Err(shape_err(
            "batch_norm_backward",
            format!("grad_out {} vs input {}", grad_out.shape(), s),
        ));
    }
    let mut grad_in = Tensor4::zeros(s);
    let mut d_gamma = vec![0.0f32; s.c];
    let mut d_beta = vec![0.0f32; s.c];
    let count = (s.n * s.plane()) as f64;
    for c in 0..s.c {
        let istd = cache.inv_std[c];
        match cache.mode {
            Mode::Train => {
                let mut sum_dy = 0.0f64;
                let mut sum_dy_xhat = 0.0f64;
                for n in 0..s.n {
                    for (&dy, &xh) in grad_out.plane(n, c).iter().zip(cache.x_hat.plane(n, c)) {
                        sum_dy += dy as f64;
                        sum_dy_xhat += dy as f64 * xh as f64;
                    }
                }
                d_beta[c] = sum_dy as f32;
                d_gamma[c] = sum_dy_xhat as f32;
                let g = gamma[c] as f64;
                for n in 0..s.n {
                    let dys = grad_out.plane(n, c).to_vec();
                    let xhs = cache.x_hat.plane(n, c).to_vec();
                    for ((d, dy), xh) in grad_in.plane_mut(n, c).iter_mut().zip(dys).zip(xhs) {
                        let v = g * istd / count
                            * (count * dy as f64 - sum_dy - xh as f64 * sum_dy_xhat);
                        *d = v as f32;
                    }
                }
            }
            Mode::Eval => {
                let mut sum_dy = 0.0f64;
                let mut sum_dy_xhat = 0.0f64;
                for n in 0..s.n {
                    for (&dy, &xh) in grad_out.plane(n, c).iter().zip(cache.x_hat.plane(n, c)) {
                        sum_dy += dy as f64;
                        sum_dy_xhat += dy as f64 * xh as f64;
                    }
                }
                d_beta[c] = sum_dy as f32;
                d_gamma[c] = sum_dy_xhat as f32;
                let scale = (gamma[c] as f64 * istd) as f32;
                for n in 0..s.n {
                    let dys = grad_out.plane(n, c).to_vec();
                    for (d, dy) in grad_in.plane_mut(n, c).iter_mut().zip(dys) {
                        *d = scale * dy;
                    }
                }
            }
        }
    }
    Ok((grad_in, d_gamma, d_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor4::full(Shape4::new(2, 2, 3, 3), 4.0);
        let mut st = RunningStats::new(2);
        let y = batch_norm(&x, &[2.0, 3.0], &[0.5, -1.0], &mut st, Mode::Train).unwrap();
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| (v - 0.5).abs() < 1e-6));
            assert!(y.plane(n, 1).iter().all(|&v| (v + 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn unit_affine_standardises() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::randn(Shape4::new(4, 3, 5, 5), 3.0, &mut r).map(|v| v + 2.0);
        let mut st = RunningStats::new(3);
        let y = batch_norm(&x, &[1.0; 3], &[0.0; 3], &mut st, Mode::Train).unwrap();
        let (m, v) = channel_moments(&y);
        for c in 0..3 {
            assert!(m[c].abs() < 1e-4);
            assert!((v[c] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::randn(Shape4::new(4, 3, 2, 2), 1.0, &mut r);
        let gamma = [0.5f32, 1.5, -0.7];
        let beta = [0.1f32, -0.2, 0.3];
        let mut st = RunningStats::new(3);
        let y = batch_norm(&x, &gamma, &beta, &mut st, Mode::Train).unwrap();
        for c in 0..3 {
            let mut vals = Vec::new();
            for n in 0..4 {
                for h in 0..2 {
                    for w in 0..2 {
                        vals.push(x.at(n, c, h, w) as f64);
                    }
                }
            }
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            for n in 0..4 {
                for h in 0..2 {
                    for w in 0..2 {
                        let expect = gamma[c] as f64 * (x.at(n, c, h, w) as f64 - mean)
                            / (var + 1e-5).sqrt()
                            + beta[c] as f64;
                        assert!((y.at(n, c, h, w) as f64 - expect).abs() < 1e-5);
                    }
                }
            }
            let unbiased = var * 16.0 / 15.0;
            assert!((st.mean[c] as f64 - 0.1 * mean).abs() < 1e-6);
            assert!((st.var[c] as f64 - (0.9 + 0.1 * unbiased)).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor4::full(Shape4::new(1, 1, 2, 2), 3.0);
        let mut st = RunningStats {
            mean: vec![1.0],
            var: vec![4.0],
        };
        let y = batch_norm(&x, &[1.0], &[0.0], &mut st, Mode::Eval).unwrap();
        let expect = 2.0 / (4.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] as f64 - expect).abs() < 1e-6);
        assert_eq!(st.mean, vec![1.0]);
    }

    #[test]
    fn channel_count_mismatch() {
        let x = Tensor4::zeros(Shape4::new(1, 2, 1, 1));
        let mut st = RunningStats::new(3);
        assert!(batch_norm(&x, &[1.0; 3], &[0.0; 3], &mut st, Mode::Train).is_err());
    }
}
