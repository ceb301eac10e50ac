//! Fully connected affine map on `(N, C)` matrices.

use crate::error::{shape_err, Result};
use crate::tensor::Matrix;

/// `input (N, C) x weight (C, out) + bias (out)`.
pub fn fully_connected(input: &Matrix, weight: &Matrix, bias: &[f32]) -> Result<Matrix> {
    if input.cols != weight.rows || bias.len() != weight.cols {
        return Err(shape_err(
            "fully_connected",
            format!(
                "input ({}, {}), weight ({}, {}), bias {}",
                input.rows,
                input.cols,
                weight.rows,
                weight.cols,
                bias.len()
            ),
        ));
    }
    let mut out = Matrix::zeros(input.rows, weight.cols);
    for r in 0..input.rows {
        let dst = &mut out.data[r * weight.cols..(r + 1) * weight.cols];
        dst.copy_from_slice(bias);
        for (k, &x) in input.row(r).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (d, &w) in dst.iter_mut().zip(weight.row(k)) {
                *d += x * w;
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn fully_connected_backward(
    input: &Matrix,
    weight: &Matrix,
    grad_out: &Matrix,
) -> Result<(Matrix, Matrix, Vec<f32>)> {
    if grad_out.rows != input.rows || grad_out.cols != weight.cols || input.cols != weight.rows {
        return Err(shape_err(
            "fully_connected_backward",
            format!(
                "grad_out ({}, {}), input ({}, {}), weight ({}, {})",
                grad_out.rows, grad_out.cols, input.rows, input.cols, weight.rows, weight.cols
            ),
        ));
    }
    let mut gi = Matrix::zeros(input.rows, input.cols);
    let mut gw = Matrix::zeros(weight.rows, weight.cols);
    let mut gb = vec![0.0f32; weight.cols];
    for r in 0..input.rows {
        let go = grad_out.row(r);
        for (b, &g) in gb.iter_mut().zip(go) {
            *b += g;
        }
        for k in 0..input.cols {
            let x = input.get(r, k);
            let w_row = weight.row(k);
            let mut acc = 0.0f32;
            for (j, &g) in go.iter().enumerate() {
                acc += g * w_row[j];
                gw.data[k * weight.cols + j] += x * g;
            }
            gi.data[r * input.cols + k] = acc;
        }
    }
    Ok((gi, gw, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn identity_weight_zero_bias() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = random(3, 4, &mut r);
        let y = fully_connected(&x, &Matrix::identity(4), &[0.0; 4]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weight_yields_bias_rows() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = random(2, 3, &mut r);
        let b = [0.5f32, -1.0];
        let y = fully_connected(&x, &Matrix::zeros(3, 2), &b).unwrap();
        for row in 0..2 {
            assert_eq!(y.row(row), &b);
        }
    }

    #[test]
    fn matches_triple_loop() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x = random(2, 3, &mut r);
        let w = random(3, 4, &mut r);
        let b: Vec<f32> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let y = fully_connected(&x, &w, &b).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = b[j] as f64;
                for k in 0..3 {
                    acc += (x.get(i, k) * w.get(k, j)) as f64;
                }
                assert!((y.get(i, j) as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inner_dimension_mismatch() {
        assert!(fully_connected(&Matrix::zeros(1, 3), &Matrix::zeros(4, 2), &[0.0; 2]).is_err());
    }
}
