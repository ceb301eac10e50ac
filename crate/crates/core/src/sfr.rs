//! Sparse feature reactivation module.
//!
//! A masked 1x1 convolution from the `I` channels of a freshly produced
//! feature map to the `O` channels of the feature buffer it refreshes,
//! followed by batch norm and ReLU. The `I` inputs are split into `G`
//! contiguous groups; group `g` owns an `O x I/G` binary mask whose rows are
//! switched off whole during staged pruning. After `S - 1` stages each group
//! keeps `O - (S-1) * ceil(O/S)` rows.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Act, BatchNorm2d, Conv2d, Layer, ParamKind, ParamMut, Visitor};
use crate::ops::activation::Activation;
use crate::ops::conv::{conv2d, ConvWeights};
use crate::ops::norm::Mode;
use crate::tensor::{Matrix, Tensor4};

/// Rows pruned from each group at one stage, before clamping.
pub fn rows_per_stage(out_channels: usize, sparse_factor: usize) -> usize {
    out_channels.div_ceil(sparse_factor.max(1))
}

/// Live rows per group once every stage has fired.
pub fn final_live_rows(out_channels: usize, sparse_factor: usize) -> usize {
    if sparse_factor <= 1 {
        return out_channels;
    }
    let per = rows_per_stage(out_channels, sparse_factor);
    out_channels
        .saturating_sub((sparse_factor - 1) * per)
        .max(1)
        .min(out_channels)
}

/// Collapses a `(O, I/G, kh, kw)` filter bank to an `(O, I/G)` matrix by taking
/// the maximum absolute value over the spatial taps.
pub fn reduce_kernel(weights: &ConvWeights) -> Matrix {
    let mut m = Matrix::zeros(weights.out_channels, weights.in_per_group);
    let k = weights.kernel_len();
    for o in 0..weights.out_channels {
        for i in 0..weights.in_per_group {
            let start = weights.index(o, i, 0, 0);
            let v = weights.data[start..start + k]
                .iter()
                .fold(0.0f32, |acc, w| acc.max(w.abs()));
            m.set(o, i, v);
        }
    }
    m
}

/// The `count` live candidates with the smallest score; ties go to the lower index.
pub(crate) fn lowest_live(scores: &[f32], live: &[bool], count: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| live[i]).collect();
    candidates.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    candidates.truncate(count);
    candidates.sort_unstable();
    candidates
}

#[derive(Clone, Debug)]
pub struct SfrModule {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: Act,
    groups: usize,
    sparse_factor: usize,
    stages_done: usize,
    pruned: Vec<BTreeSet<usize>>,
}

impl SfrModule {
    /// Module mapping `in_channels` (I) to `out_channels` (O) with He-initialised weights.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        sparse_factor: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = ConvWeights::he_normal(out_channels, in_channels, 1, 1, 1, rng)?;
        Self::from_weights(weights, groups, sparse_factor)
    }

    /// Wraps dense `(O, I, 1, 1)` weights; masks start all-ones.
    pub fn from_weights(weights: ConvWeights, groups: usize, sparse_factor: usize) -> Result<Self> {
        if weights.groups != 1 || weights.kernel_h != 1 || weights.kernel_w != 1 {
            return Err(Error::InvalidArgument(
                "reactivation weights must be a dense 1x1 filter bank".into(),
            ));
        }
        let in_channels = weights.in_channels();
        if groups == 0 || in_channels % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{groups} groups do not divide {in_channels} input channels"
            )));
        }
        if sparse_factor == 0 {
            return Err(Error::InvalidArgument("sparse factor must be >= 1".into()));
        }
        let out_channels = weights.out_channels;
        Ok(Self {
            conv: Conv2d::masked(weights, 1, 0),
            bn: BatchNorm2d::new(out_channels),
            act: Act::new(Activation::Relu),
            groups,
            sparse_factor,
            stages_done: 0,
            pruned: vec![BTreeSet::new(); groups],
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv.weights.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.weights.out_channels
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn sparse_factor(&self) -> usize {
        self.sparse_factor
    }

    pub fn stages_done(&self) -> usize {
        self.stages_done
    }

    /// Input channels per group, `I/G`.
    pub fn group_width(&self) -> usize {
        self.in_channels() / self.groups
    }

    pub fn weights(&self) -> &ConvWeights {
        &self.conv.weights
    }

    pub fn weights_mut(&mut self) -> &mut ConvWeights {
        &mut self.conv.weights
    }

    pub fn bn(&self) -> &BatchNorm2d {
        &self.bn
    }

    pub fn bn_mut(&mut self) -> &mut BatchNorm2d {
        &mut self.bn
    }

    /// Dense `O x I` keep-mask; the `G` group masks side by side.
    pub fn mask(&self) -> &[f32] {
        self.conv.mask.as_deref().expect("reactivation conv is always masked")
    }

    fn mask_mut(&mut self) -> &mut Vec<f32> {
        self.conv.mask.as_mut().expect("reactivation conv is always masked")
    }

    /// Binary mask `M^g` of group `g`, `O` rows by `I/G` columns.
    pub fn group_mask(&self, g: usize) -> Vec<Vec<u8>> {
        let (i_total, w) = (self.in_channels(), self.group_width());
        let mask = self.mask();
        (0..self.out_channels())
            .map(|o| {
                (0..w)
                    .map(|j| (mask[o * i_total + g * w + j] != 0.0) as u8)
                    .collect()
            })
            .collect()
    }

    pub fn pruned_rows(&self, g: usize) -> &BTreeSet<usize> {
        &self.pruned[g]
    }

    pub fn row_is_live(&self, g: usize, row: usize) -> bool {
        !self.pruned[g].contains(&row)
    }

    pub fn live_rows(&self, g: usize) -> usize {
        self.out_channels() - self.pruned[g].len()
    }

    /// Number of unmasked weights.
    pub fn live_connections(&self) -> usize {
        self.conv.live_weights()
    }

    pub fn is_fully_sparsified(&self) -> bool {
        self.stages_done + 1 >= self.sparse_factor
    }

    fn set_row(&mut self, g: usize, row: usize, live: bool) {
        let (i_total, w) = (self.in_channels(), self.group_width());
        let value = if live { 1.0 } else { 0.0 };
        let mask = self.mask_mut();
        for j in 0..w {
            mask[row * i_total + g * w + j] = value;
        }
    }

    /// Overwrites all masks at once from per-group pruned row sets. Intended for
    /// constructing specific connectivity patterns in tests and tools.
    pub fn set_pruned_rows(&mut self, pruned: Vec<BTreeSet<usize>>, stages_done: usize) -> Result<()> {
        if pruned.len() != self.groups || pruned.iter().flatten().any(|&r| r >= self.out_channels()) {
            return Err(Error::InvalidArgument("pruned row sets do not match module geometry".into()));
        }
        for g in 0..self.groups {
            for row in 0..self.out_channels() {
                self.set_row(g, row, !pruned[g].contains(&row));
            }
        }
        self.pruned = pruned;
        self.stages_done = stages_done;
        Ok(())
    }

    /// Rebuilds pruned row sets from the mask (after loading a checkpoint).
    pub(crate) fn sync_from_mask(&mut self) {
        let (i_total, w) = (self.in_channels(), self.group_width());
        let mut pruned = vec![BTreeSet::new(); self.groups];
        let mask = self.mask();
        for (g, set) in pruned.iter_mut().enumerate() {
            for o in 0..self.out_channels() {
                if (0..w).all(|j| mask[o * i_total + g * w + j] == 0.0) {
                    set.insert(o);
                }
            }
        }
        self.pruned = pruned;
    }

    /// L1 norm of each output row within group `g`, over currently live weights.
    pub fn importance(&self, g: usize) -> Result<Vec<f32>> {
        if g >= self.groups {
            return Err(Error::InvalidArgument(format!(
                "group {g} out of range ({} groups)",
                self.groups
            )));
        }
        let reduced = reduce_kernel(&self.conv.weights);
        let (i_total, w) = (self.in_channels(), self.group_width());
        let mask = self.mask();
        Ok((0..self.out_channels())
            .map(|o| {
                (0..w)
                    .map(|j| {
                        let col = g * w + j;
                        reduced.get(o, col) * mask[o * i_total + col]
                    })
                    .sum()
            })
            .collect())
    }

    /// Ends one sparsification stage: in every group the `ceil(O/S)` live rows
    /// with the smallest importance are masked out (at least one row survives).
    pub fn prune_stage(&mut self) -> Result<()> {
        if self.stages_done + 1 >= self.sparse_factor {
            return Err(Error::StageOverflow(format!(
                "reactivation module with S={} already completed {} stages",
                self.sparse_factor, self.stages_done
            )));
        }
        let o = self.out_channels();
        for g in 0..self.groups {
            let scores = self.importance(g)?;
            let live: Vec<bool> = (0..o).map(|r| self.row_is_live(g, r)).collect();
            let n_live = live.iter().filter(|&&l| l).count();
            let count = rows_per_stage(o, self.sparse_factor).min(n_live.saturating_sub(1));
            for row in lowest_live(&scores, &live, count) {
                self.set_row(g, row, false);
                self.pruned[g].insert(row);
            }
        }
        self.stages_done += 1;
        Ok(())
    }

    /// Output of the masked convolution alone, before BN.
    pub fn conv_only(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        conv2d(x, &self.conv.effective_weights(), 1, 0)
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.shape().c != self.in_channels() {
            return Err(shape_err(
                "sfr_forward",
                format!(
                    "input has {} channels, module expects {}",
                    x.shape().c,
                    self.in_channels()
                ),
            ));
        }
        Ok(())
    }
}

impl Layer for SfrModule {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let z = self.conv.forward(x)?;
        let z = self.bn.forward(&z)?;
        self.act.forward(&z)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let g = self.act.backward(grad_out)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        let mut stages = vec![self.stages_done as f32];
        f(ParamMut {
            name: join(prefix, "stages_done"),
            shape: vec![1],
            data: &mut stages,
            grad: None,
            mask: None,
            kind: ParamKind::Buffer,
        });
        self.stages_done = stages[0] as usize;
    }

    fn set_mode(&mut self, mode: Mode) {
        self.bn.set_mode(mode);
    }
}

/// `y = ReLU(BN(conv1x1(x, M ⊙ F)))`.
pub fn sfr_forward(module: &mut SfrModule, x_new: &Tensor4) -> Result<Tensor4> {
    module.forward(x_new)
}

/// Adds the reactivation increment to the existing features.
pub fn reactivate(x_in: &Tensor4, y: &Tensor4) -> Result<Tensor4> {
    if x_in.shape() != y.shape() {
        return Err(shape_err(
            "reactivate",
            format!("features {} vs increment {}", x_in.shape(), y.shape()),
        ));
    }
    x_in.add(y)
}
