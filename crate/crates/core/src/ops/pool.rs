//! Average pooling.

use crate::error::{shape_err, Result};
use crate::tensor::{Shape4, Tensor4};

/// Mean over each `k x k` window with the given stride, no padding.
pub fn avg_pool(input: &Tensor4, k: usize, stride: usize) -> Result<Tensor4> {
    let s = input.shape();
    if k == 0 || stride == 0 {
        return Err(shape_err("avg_pool", "window and stride must be positive"));
    }
    if s.h < k || s.w < k {
        return Err(shape_err(
            "avg_pool",
            format!("window {k}x{k} larger than input {}x{}", s.h, s.w),
        ));
    }
    let oh = (s.h - k) / stride + 1;
    let ow = (s.w - k) / stride + 1;
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, oh, ow));
    let area = (k * k) as f64;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c).to_vec();
            let dst = out.plane_mut(n, c);
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0f64;
                    for dy in 0..k {
                        let row = (y * stride + dy) * s.w + x * stride;
                        acc += src[row..row + k].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    dst[y * ow + x] = (acc / area) as f32;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(input_shape: Shape4, grad_out: &Tensor4, k: usize, stride: usize) -> Result<Tensor4> {
    let go = grad_out.shape();
    if go.n != input_shape.n || go.c != input_shape.c {
        return Err(shape_err("avg_pool_backward", format!("{go} vs input {input_shape}")));
    }
    let mut grad_in = Tensor4::zeros(input_shape);
    let scale = 1.0 / (k * k) as f32;
    for n in 0..go.n {
        for c in 0..go.c {
            let g = grad_out.plane(n, c).to_vec();
            let dst = grad_in.plane_mut(n, c);
            for y in 0..go.h {
                for x in 0..go.w {
                    let v = g[y * go.w + x] * scale;
                    for dy in 0..k {
                        let row = (y * stride + dy) * input_shape.w + x * stride;
                        for d in &mut dst[row..row + k] {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

/// Spatial mean per channel, producing `(N, C, 1, 1)`.
pub fn global_avg_pool(input: &Tensor4) -> Tensor4 {
    let s = input.shape();
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, 1, 1));
    let area = s.plane() as f64;
    for n in 0..s.n {
        for c in 0..s.c {
            let mean = input.plane(n, c).iter().map(|&v| v as f64).sum::<f64>() / area;
            out.data_mut()[n * s.c + c] = mean as f32;
        }
    }
    out
}

pub fn global_avg_pool_backward(input_shape: Shape4, grad_out: &Tensor4) -> Result<Tensor4> {
    let go = grad_out.shape();
    if go != Shape4::new(input_shape.n, input_shape.c, 1, 1) {
        return Err(shape_err("global_avg_pool_backward", format!("{go} vs input {input_shape}")));
    }
    let mut grad_in = Tensor4::zeros(input_shape);
    let scale = 1.0 / input_shape.plane() as f32;
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            let v = grad_out.data()[n * input_shape.c + c] * scale;
            grad_in.plane_mut(n, c).fill(v);
        }
    }
    Ok(grad_in)
}
