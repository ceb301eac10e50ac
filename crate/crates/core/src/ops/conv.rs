//! Direct (no im2col) grouped 2-D convolution without bias.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Convolution filter bank, laid out as `(O, I/G, kh, kw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub out_channels: usize,
    pub in_per_group: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub groups: usize,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
}

impl ConvWeights {
    /// Zero-initialised filters mapping `in_channels` to `out_channels`.
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::InvalidArgument(
                "groups and kernel dimensions must be positive".into(),
            ));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "groups={groups} must divide in_channels={in_channels} and out_channels={out_channels}"
            )));
        }
        let in_per_group = in_channels / groups;
        Ok(Self {
            out_channels,
            in_per_group,
            kernel_h,
            kernel_w,
            groups,
            data: vec![0.0; out_channels * in_per_group * kernel_h * kernel_w],
            grad: None,
        })
    }

    pub fn from_data(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        groups: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let mut w = Self::zeros(out_channels, in_channels, kernel_h, kernel_w, groups)?;
        if data.len() != w.data.len() {
            return Err(shape_err(
                "conv weights",
                format!("expected {} values, got {}", w.data.len(), data.len()),
            ));
        }
        w.data = data;
        Ok(w)
    }

    /// He-normal initialisation with fan-in `I/G · kh · kw`.
    pub fn he_normal<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = Self::zeros(out_channels, in_channels, kernel_h, kernel_w, groups)?;
        let fan_in = (w.in_per_group * kernel_h * kernel_w).max(1) as f32;
        let std = (2.0 / fan_in).sqrt();
        for v in &mut w.data {
            let z: f32 = StandardNormal.sample(rng);
            *v = z * std;
        }
        Ok(w)
    }

    pub fn in_channels(&self) -> usize {
        self.in_per_group * self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    #[inline]
    pub fn index(&self, o: usize, i_local: usize, kh: usize, kw: usize) -> usize {
        ((o * self.in_per_group + i_local) * self.kernel_h + kh) * self.kernel_w + kw
    }

    #[inline]
    pub fn at(&self, o: usize, i_local: usize, kh: usize, kw: usize) -> f32 {
        self.data[self.index(o, i_local, kh, kw)]
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut Vec<f32> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_per_group, self.kernel_h, self.kernel_w]
    }

    /// Same geometry, all-zero filters, no gradient.
    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            grad: None,
            ..self.clone()
        }
    }

    /// Identity 1x1 depthwise filters: output channel `c` copies input channel `c`.
    pub fn identity(channels: usize) -> Self {
        let mut w = Self::zeros(channels, channels, 1, 1, channels).expect("valid identity geometry");
        w.data.fill(1.0);
        w
    }
}

/// Spatial output size for one axis.
pub fn output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn check_geometry(
    op: &'static str,
    input: Shape4,
    weights: &ConvWeights,
    stride: usize,
    padding: usize,
) -> Result<Shape4> {
    if stride == 0 {
        return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
    }
    if input.c != weights.in_channels() {
        return Err(shape_err(
            op,
            format!(
                "input has {} channels, weights expect {} ({} groups x {})",
                input.c,
                weights.in_channels(),
                weights.groups,
                weights.in_per_group
            ),
        ));
    }
    let oh = output_dim(input.h, weights.kernel_h, stride, padding);
    let ow = output_dim(input.w, weights.kernel_w, stride, padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape4::new(input.n, weights.out_channels, oh, ow)),
        _ => Err(shape_err(
            op,
            format!(
                "kernel {}x{} does not fit input {}x{} with padding {padding}",
                weights.kernel_h, weights.kernel_w, input.h, input.w
            ),
        )),
    }
}

/// Valid output index range `[lo, hi)` along one axis for kernel tap `k`.
#[inline]
fn tap_range(k: usize, stride: usize, padding: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // input position = o*stride + k - padding must lie in [0, in_len)
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let hi = if in_len + padding > k {
        ((in_len + padding - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Grouped convolution with zero padding. Output shape is
/// `(N, O, (H + 2p - kh)/stride + 1, (W + 2p - kw)/stride + 1)`.
pub fn conv2d(input: &Tensor4, weights: &ConvWeights, stride: usize, padding: usize) -> Result<Tensor4> {
    let out_shape = check_geometry("conv2d", input.shape(), weights, stride, padding)?;
    let s = input.shape();
    let mut out = Tensor4::zeros(out_shape);
    let (oh_n, ow_n) = (out_shape.h, out_shape.w);
    let opg = weights.out_per_group();
    let ipg = weights.in_per_group;
    let x = input.data();
    let o_data = out.data_mut();
    for n in 0..s.n {
        for g in 0..weights.groups {
            for oc in g * opg..(g + 1) * opg {
                let o_base = (n * out_shape.c + oc) * oh_n * ow_n;
                for il in 0..ipg {
                    let ic = g * ipg + il;
                    let i_base = (n * s.c + ic) * s.h * s.w;
                    for kh in 0..weights.kernel_h {
                        let (oh_lo, oh_hi) = tap_range(kh, stride, padding, s.h, oh_n);
                        for kw in 0..weights.kernel_w {
                            let wv = weights.at(oc, il, kh, kw);
                            if wv == 0.0 {
                                continue;
                            }
                            let (ow_lo, ow_hi) = tap_range(kw, stride, padding, s.w, ow_n);
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + kh - padding;
                                let in_row = i_base + ih * s.w;
                                let out_row = o_base + oh * ow_n;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * stride + kw - padding;
                                    o_data[out_row + ow] += wv * x[in_row + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input and its weights.
/// The returned weights carry the gradient in `data`.
pub fn conv2d_backward(
    input: &Tensor4,
    weights: &ConvWeights,
    grad_out: &Tensor4,
    stride: usize,
    padding: usize,
) -> Result<(Tensor4, ConvWeights)> {
    let out_shape = check_geometry("conv2d_backward", input.shape(), weights, stride, padding)?;
    if grad_out.shape() != out_shape {
        return Err(shape_err(
            "conv2d_backward",
            format!("grad_out {} but forward output is {}", grad_out.shape(), out_shape),
        ));
    }
    let s = input.shape();
    let mut grad_in = Tensor4::zeros(s);
    let mut grad_w = weights.zeros_like();
    let (oh_n, ow_n) = (out_shape.h, out_shape.w);
    let opg = weights.out_per_group();
    let ipg = weights.in_per_group;
    let x = input.data();
    let go = grad_out.data();
    let gi = grad_in.data_mut();
    for n in 0..s.n {
        for g in 0..weights.groups {
            for oc in g * opg..(g + 1) * opg {
                let o_base = (n * out_shape.c + oc) * oh_n * ow_n;
                for il in 0..ipg {
                    let ic = g * ipg + il;
                    let i_base = (n * s.c + ic) * s.h * s.w;
                    for kh in 0..weights.kernel_h {
                        let (oh_lo, oh_hi) = tap_range(kh, stride, padding, s.h, oh_n);
                        for kw in 0..weights.kernel_w {
                            let widx = weights.index(oc, il, kh, kw);
                            let wv = weights.data[widx];
                            let (ow_lo, ow_hi) = tap_range(kw, stride, padding, s.w, ow_n);
                            let mut acc = 0.0f32;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + kh - padding;
                                let in_row = i_base + ih * s.w;
                                let out_row = o_base + oh * ow_n;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * stride + kw - padding;
                                    let g_o = go[out_row + ow];
                                    acc += g_o * x[in_row + iw];
                                    gi[in_row + iw] += wv * g_o;
                                }
                            }
                            grad_w.data[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Literal seven-loop convolution used as the reference.
    fn naive_conv(x: &Tensor4, w: &ConvWeights, stride: usize, pad: usize) -> Tensor4 {
        let s = x.shape();
        let oh = (s.h + 2 * pad - w.kernel_h) / stride + 1;
        let ow = (s.w + 2 * pad - w.kernel_w) / stride + 1;
        let mut out = Tensor4::zeros(Shape4::new(s.n, w.out_channels, oh, ow));
        let opg = w.out_channels / w.groups;
        for n in 0..s.n {
            for o in 0..w.out_channels {
                let g = o / opg;
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0f64;
                        for il in 0..w.in_per_group {
                            for kh in 0..w.kernel_h {
                                for kw in 0..w.kernel_w {
                                    let iy = (y * stride + kh) as isize - pad as isize;
                                    let ix = (xx * stride + kw) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                        continue;
                                    }
                                    let ic = g * w.in_per_group + il;
                                    acc += (w.at(o, il, kh, kw) * x.at(n, ic, iy as usize, ix as usize))
                                        as f64;
                                }
                            }
                        }
                        let idx = out.index(n, o, y, xx);
                        out.data_mut()[idx] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn stem_geometry_halves_resolution() {
        let x = Tensor4::zeros(Shape4::new(1, 3, 224, 224));
        let w = ConvWeights::zeros(4, 3, 3, 3, 1).unwrap();
        let y = conv2d(&x, &w, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 4, 112, 112));
    }

    #[test]
    fn identity_filters_copy_input() {
        let mut r = rng();
        let x = Tensor4::randn(Shape4::new(2, 5, 3, 4), 1.0, &mut r);
        let y = conv2d(&x, &ConvWeights::identity(5), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut r = rng();
        let x = Tensor4::randn(Shape4::new(2, 3, 5, 5), 1.0, &mut r);
        let w = ConvWeights::he_normal(4, 3, 3, 3, 1, &mut r).unwrap();
        let fast = conv2d(&x, &w, 1, 1).unwrap();
        assert!(fast.max_abs_diff(&naive_conv(&x, &w, 1, 1)) < 1e-5);
        for (stride, pad) in [(2, 1), (2, 0), (3, 2), (1, 0)] {
            let fast = conv2d(&x, &w, stride, pad).unwrap();
            assert!(fast.max_abs_diff(&naive_conv(&x, &w, stride, pad)) < 1e-5);
        }
    }

    #[test]
    fn grouped_equals_sliced_dense() {
        let mut r = rng();
        for groups in [1usize, 2, 4] {
            let x = Tensor4::randn(Shape4::new(2, 8, 4, 4), 1.0, &mut r);
            let w = ConvWeights::he_normal(8, 8, 3, 3, groups, &mut r).unwrap();
            let y = conv2d(&x, &w, 1, 1).unwrap();
            let ipg = 8 / groups;
            let opg = 8 / groups;
            let mut parts = Vec::new();
            for g in 0..groups {
                let xs = x.slice_channels(g * ipg..(g + 1) * ipg).unwrap();
                let len = opg * ipg * 9;
                let wg = ConvWeights::from_data(
                    opg,
                    ipg,
                    3,
                    3,
                    1,
                    w.data[g * len..(g + 1) * len].to_vec(),
                )
                .unwrap();
                parts.push(conv2d(&xs, &wg, 1, 1).unwrap());
            }
            let refs: Vec<&Tensor4> = parts.iter().collect();
            let cat = Tensor4::concat_channels(&refs).unwrap();
            assert!(y.max_abs_diff(&cat) < 1e-6, "groups={groups}");
        }
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor4::zeros(Shape4::new(1, 3, 4, 4));
        let w = ConvWeights::zeros(2, 4, 1, 1, 1).unwrap();
        let err = conv2d(&x, &w, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(ConvWeights::zeros(3, 4, 1, 1, 2).is_err());
    }

    #[test]
    fn backward_of_zero_grad_is_zero() {
        let mut r = rng();
        let x = Tensor4::randn(Shape4::new(1, 2, 4, 4), 1.0, &mut r);
        let w = ConvWeights::he_normal(3, 2, 3, 3, 1, &mut r).unwrap();
        let go = Tensor4::zeros(Shape4::new(1, 3, 4, 4));
        let (gi, gw) = conv2d_backward(&x, &w, &go, 1, 1).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_backward_passes_gradient_through() {
        let mut r = rng();
        let x = Tensor4::randn(Shape4::new(1, 3, 2, 2), 1.0, &mut r);
        let go = Tensor4::randn(Shape4::new(1, 3, 2, 2), 1.0, &mut r);
        let (gi, _) = conv2d_backward(&x, &ConvWeights::identity(3), &go, 1, 0).unwrap();
        assert_eq!(gi, go);
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut r = rng();
        let x = Tensor4::randn(Shape4::new(1, 2, 4, 4), 1.0, &mut r);
        let w = ConvWeights::he_normal(3, 2, 3, 3, 1, &mut r).unwrap();
        // loss = <probe, conv(x, w)>
        let probe = Tensor4::randn(Shape4::new(1, 3, 4, 4), 1.0, &mut r);
        let loss = |x: &Tensor4, w: &ConvWeights| -> f64 {
            let y = conv2d(x, w, 1, 1).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (gi, gw) = conv2d_backward(&x, &w, &probe, 1, 1).unwrap();
        let eps = 1e-3f32;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-2);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let num = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * eps as f64);
            assert!(rel(gi.data()[i] as f64, num) < 1e-2, "input {i}");
        }
        for i in 0..w.data.len() {
            let mut wp = w.clone();
            wp.data[i] += eps;
            let mut wm = w.clone();
            wm.data[i] -= eps;
            let num = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps as f64);
            assert!(rel(gw.data[i] as f64, num) < 1e-2, "weight {i}");
        }
    }
}
