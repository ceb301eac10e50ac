//! The growing feature buffer of a dense block, with per-segment ownership.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::ops::pool::avg_pool;
use crate::tensor::Tensor4;

/// Which part of the network produced a run of buffer channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SegmentOwner {
    Stem,
    Layer { block: usize, layer: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub owner: SegmentOwner,
    pub start: usize,
    pub channels: usize,
}

/// Concatenation `[x_0, x_1, ...]` of everything produced so far.
#[derive(Clone, Debug)]
pub struct FeatureBuffer {
    segments: Vec<Segment>,
    tensor: Tensor4,
}

impl FeatureBuffer {
    pub fn new(tensor: Tensor4, owner: SegmentOwner) -> Self {
        let channels = tensor.shape().c;
        Self {
            segments: vec![Segment {
                owner,
                start: 0,
                channels,
            }],
            tensor,
        }
    }

    pub fn width(&self) -> usize {
        self.tensor.shape().c
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.tensor
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Adds a reactivation increment to every existing channel.
    pub fn reactivate(&mut self, y: &Tensor4) -> Result<()> {
        if y.shape() != self.tensor.shape() {
            return Err(shape_err(
                "reactivate",
                format!("buffer {} vs increment {}", self.tensor.shape(), y.shape()),
            ));
        }
        self.tensor.add_assign(y)
    }

    pub fn append(&mut self, owner: SegmentOwner, x: &Tensor4) -> Result<()> {
        let start = self.width();
        self.tensor = Tensor4::concat_channels(&[&self.tensor, x])?;
        self.segments.push(Segment {
            owner,
            start,
            channels: x.shape().c,
        });
        Ok(())
    }

    /// Average-pools every segment; ownership is kept.
    pub fn pooled(&self, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            segments: self.segments.clone(),
            tensor: avg_pool(&self.tensor, k, stride)?,
        })
    }
}
