//! Channel shuffle: transpose of the `(G, C/G)` channel grid.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor4;

/// Destination index of source channel `src` when shuffling `channels` into `groups`.
#[inline]
pub fn shuffled_index(src: usize, channels: usize, groups: usize) -> usize {
    let per = channels / groups;
    let (g, i) = (src / per, src % per);
    i * groups + g
}

/// Moves channel `g * (C/G) + i` to position `i * G + g`.
pub fn channel_shuffle(input: &Tensor4, groups: usize) -> Result<Tensor4> {
    let s = input.shape();
    if groups == 0 || s.c % groups != 0 {
        return Err(shape_err(
            "channel_shuffle",
            format!("{} channels not divisible into {groups} groups", s.c),
        ));
    }
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let dst = shuffled_index(c, s.c, groups);
            let src = input.plane(n, c).to_vec();
            out.plane_mut(n, dst).copy_from_slice(&src);
        }
    }
    Ok(out)
}

/// Inverse permutation; also the gradient of [`channel_shuffle`].
pub fn channel_unshuffle(input: &Tensor4, groups: usize) -> Result<Tensor4> {
    let c = input.shape().c;
    if groups == 0 || c % groups != 0 {
        return Err(shape_err(
            "channel_shuffle",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    channel_shuffle(input, c / groups)
}
