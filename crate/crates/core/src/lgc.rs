//! Learned group convolution: a 1x1 convolution whose `O` outputs are split
//! into contiguous groups, each learning which of the `I` input channels it
//! keeps. Every condensing stage drops `floor(I/C)` input columns per group.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Conv2d, Layer, ParamKind, ParamMut, Visitor};
use crate::ops::conv::{conv2d, ConvWeights};
use crate::sfr::lowest_live;
use crate::tensor::Tensor4;

/// Live input columns per group once every condensing stage has fired.
pub fn final_live_cols(in_channels: usize, condense_factor: usize) -> usize {
    if condense_factor <= 1 {
        return in_channels;
    }
    let per = in_channels / condense_factor;
    in_channels.saturating_sub((condense_factor - 1) * per).max(1)
}

#[derive(Clone, Debug)]
pub struct LgcLayer {
    conv: Conv2d,
    groups: usize,
    condense_factor: usize,
    stages_done: usize,
    pruned: Vec<BTreeSet<usize>>,
}

impl LgcLayer {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        condense_factor: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = ConvWeights::he_normal(out_channels, in_channels, 1, 1, 1, rng)?;
        Self::from_weights(weights, groups, condense_factor)
    }

    pub fn from_weights(weights: ConvWeights, groups: usize, condense_factor: usize) -> Result<Self> {
        if weights.groups != 1 || weights.kernel_h != 1 || weights.kernel_w != 1 {
            return Err(Error::InvalidArgument(
                "learned group convolution needs a dense 1x1 filter bank".into(),
            ));
        }
        if groups == 0 || weights.out_channels % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{groups} groups do not divide {} output channels",
                weights.out_channels
            )));
        }
        if condense_factor == 0 {
            return Err(Error::InvalidArgument("condense factor must be >= 1".into()));
        }
        Ok(Self {
            conv: Conv2d::masked(weights, 1, 0),
            groups,
            condense_factor,
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

    pub fn condense_factor(&self) -> usize {
        self.condense_factor
    }

    pub fn stages_done(&self) -> usize {
        self.stages_done
    }

    /// Output rows per group.
    pub fn group_rows(&self) -> usize {
        self.out_channels() / self.groups
    }

    pub fn weights(&self) -> &ConvWeights {
        &self.conv.weights
    }

    pub fn weights_mut(&mut self) -> &mut ConvWeights {
        &mut self.conv.weights
    }

    pub fn mask(&self) -> &[f32] {
        self.conv.mask.as_deref().expect("lgc conv is always masked")
    }

    /// Binary input-selection vector of group `g` (length `I`).
    pub fn group_mask(&self, g: usize) -> Vec<u8> {
        (0..self.in_channels())
            .map(|j| (!self.pruned[g].contains(&j)) as u8)
            .collect()
    }

    pub fn pruned_columns(&self, g: usize) -> &BTreeSet<usize> {
        &self.pruned[g]
    }

    /// Sorted live input columns of group `g`.
    pub fn live_columns(&self, g: usize) -> Vec<usize> {
        (0..self.in_channels())
            .filter(|j| !self.pruned[g].contains(j))
            .collect()
    }

    pub fn live_connections(&self) -> usize {
        self.conv.live_weights()
    }

    pub fn is_fully_condensed(&self) -> bool {
        self.stages_done + 1 >= self.condense_factor
    }

    fn set_column(&mut self, g: usize, col: usize, live: bool) {
        let (rows, i) = (self.group_rows(), self.in_channels());
        let value = if live { 1.0 } else { 0.0 };
        let mask = self.conv.mask.as_mut().expect("lgc conv is always masked");
        for o in g * rows..(g + 1) * rows {
            mask[o * i + col] = value;
        }
    }

    /// Overwrites masks from per-group pruned column sets.
    pub fn set_pruned_columns(&mut self, pruned: Vec<BTreeSet<usize>>, stages_done: usize) -> Result<()> {
        if pruned.len() != self.groups || pruned.iter().flatten().any(|&c| c >= self.in_channels()) {
            return Err(Error::InvalidArgument("pruned column sets do not match layer geometry".into()));
        }
        for g in 0..self.groups {
            for col in 0..self.in_channels() {
                self.set_column(g, col, !pruned[g].contains(&col));
            }
        }
        self.pruned = pruned;
        self.stages_done = stages_done;
        Ok(())
    }

    pub(crate) fn sync_from_mask(&mut self) {
        let (rows, i) = (self.group_rows(), self.in_channels());
        let mask = self.mask();
        let pruned = (0..self.groups)
            .map(|g| {
                (0..i)
                    .filter(|&j| (g * rows..(g + 1) * rows).all(|o| mask[o * i + j] == 0.0))
                    .collect()
            })
            .collect();
        self.pruned = pruned;
    }

    /// L1 norm of each input column over the group's rows; pruned columns report 0.
    pub fn importance(&self, g: usize) -> Result<Vec<f32>> {
        if g >= self.groups {
            return Err(Error::InvalidArgument(format!(
                "group {g} out of range ({} groups)",
                self.groups
            )));
        }
        let (rows, i) = (self.group_rows(), self.in_channels());
        let w = &self.conv.weights.data;
        let mask = self.mask();
        Ok((0..i)
            .map(|j| {
                (g * rows..(g + 1) * rows)
                    .map(|o| w[o * i + j].abs() * mask[o * i + j])
                    .sum()
            })
            .collect())
    }

    /// Ends one condensing stage: each group drops its `floor(I/C)` weakest live columns.
    pub fn prune_stage(&mut self) -> Result<()> {
        if self.stages_done + 1 >= self.condense_factor {
            return Err(Error::StageOverflow(format!(
                "learned group convolution with C={} already completed {} stages",
                self.condense_factor, self.stages_done
            )));
        }
        let i = self.in_channels();
        for g in 0..self.groups {
            let scores = self.importance(g)?;
            let live: Vec<bool> = (0..i).map(|j| !self.pruned[g].contains(&j)).collect();
            let n_live = live.iter().filter(|&&l| l).count();
            let count = (i / self.condense_factor).min(n_live.saturating_sub(1));
            for col in lowest_live(&scores, &live, count) {
                self.set_column(g, col, false);
                self.pruned[g].insert(col);
            }
        }
        self.stages_done += 1;
        Ok(())
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.shape().c != self.in_channels() {
            return Err(shape_err(
                "lgc_forward",
                format!("input has {} channels, layer expects {}", x.shape().c, self.in_channels()),
            ));
        }
        Ok(())
    }

    /// Stateless forward (no cache), used by the compiler's oracles.
    pub fn apply(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        conv2d(x, &self.conv.effective_weights(), 1, 0)
    }
}

impl Layer for LgcLayer {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        self.conv.forward(x)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        self.conv.backward(grad_out)
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.conv.visit(prefix, f);
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
}

/// Forward pass of a learned group convolution (mask-multiplied dense conv).
pub fn lgc_forward(layer: &mut LgcLayer, x_in: &Tensor4) -> Result<Tensor4> {
    layer.forward(x_in)
}
