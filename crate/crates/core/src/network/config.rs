//! Declarative network description and the shipped presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    /// 5 blocks, stride-2 stem, 1x1 head before the classifier.
    Imagenet,
    /// 3 blocks, stride-1 stem, no head.
    Cifar,
    /// Free-form desk-scale networks.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub layers: usize,
    pub growth: usize,
    #[serde(default)]
    pub se: bool,
    #[serde(default)]
    pub hard_swish: bool,
}

impl BlockSpec {
    pub fn new(layers: usize, growth: usize) -> Self {
        Self {
            layers,
            growth,
            se: false,
            hard_swish: false,
        }
    }

    fn flags(mut self, se: bool, hard_swish: bool) -> Self {
        self.se = se;
        self.hard_swish = hard_swish;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

/// Pooled-feature head: optional SE gate, then an affine map to `width`
/// channels followed by hard-swish.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub width: usize,
    pub se: bool,
    pub se_reduction: usize,
}

fn default_bottleneck() -> usize {
    4
}

fn default_se_reduction() -> usize {
    4
}

fn default_input_channels() -> usize {
    3
}

fn enabled() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub name: String,
    pub dataset: Dataset,
    pub blocks: Vec<BlockSpec>,
    /// `C`: each LGC group keeps about `1/C` of its inputs.
    pub condense_factor: usize,
    /// `S`: each reactivation group keeps about `1/S` of its output rows.
    pub sparse_factor: usize,
    /// `G`: groups of the learned and the 3x3 group convolutions.
    pub groups: usize,
    /// Groups of the reactivation modules; `groups` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sfr_groups: Option<usize>,
    /// Bottleneck width multiplier of the learned group convolution.
    #[serde(default = "default_bottleneck")]
    pub bottleneck: usize,
    /// Reduction ratio of SE blocks inside dense layers.
    #[serde(default = "default_se_reduction")]
    pub se_reduction: usize,
    pub stem: StemSpec,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub input_resolution: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub head: Option<HeadSpec>,
    /// Build the reactivation modules. Without them each dense layer only
    /// appends its output and never touches earlier features.
    #[serde(default = "enabled")]
    pub reactivation: bool,
}

/// Channel and resolution bookkeeping of one dense block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub resolution: usize,
}

impl NetworkConfig {
    pub fn sfr_groups(&self) -> usize {
        self.sfr_groups.unwrap_or(self.groups)
    }

    pub fn stem_resolution(&self) -> usize {
        let pad = self.stem.kernel / 2;
        (self.input_resolution + 2 * pad - self.stem.kernel) / self.stem.stride.max(1) + 1
    }

    /// Per block: buffer width on entry and exit, and the spatial size.
    pub fn geometry(&self) -> Vec<BlockGeometry> {
        let mut width = self.stem.channels;
        let mut res = self.stem_resolution();
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 {
                res /= 2;
            }
            let exit = width + b.layers * b.growth;
            out.push(BlockGeometry {
                in_channels: width,
                out_channels: exit,
                resolution: res,
            });
            width = exit;
        }
        out
    }

    /// Width of the final feature buffer.
    pub fn final_width(&self) -> usize {
        self.geometry().last().map_or(self.stem.channels, |g| g.out_channels)
    }

    /// Width entering the classifier.
    pub fn classifier_inputs(&self) -> usize {
        self.head.as_ref().map_or(self.final_width(), |h| h.width)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name)));
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        match self.dataset {
            Dataset::Imagenet if self.blocks.len() != 5 => {
                return bad(format!("imagenet networks have 5 blocks, got {}", self.blocks.len()))
            }
            Dataset::Cifar if self.blocks.len() != 3 => {
                return bad(format!("cifar networks have 3 blocks, got {}", self.blocks.len()))
            }
            _ => {}
        }
        if self.condense_factor == 0 || self.sparse_factor == 0 || self.groups == 0 || self.sfr_groups() == 0 {
            return bad("C, S and G must all be >= 1".into());
        }
        if self.bottleneck == 0 || self.se_reduction == 0 {
            return bad("bottleneck and SE reduction must be >= 1".into());
        }
        if self.stem.kernel % 2 == 0 || self.stem.stride == 0 || self.stem.channels == 0 {
            return bad("stem needs an odd kernel, stride >= 1 and channels >= 1".into());
        }
        if self.input_channels == 0 || self.num_classes == 0 {
            return bad("input channels and classes must be >= 1".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.growth == 0 {
                return bad(format!("block {i}: growth must be >= 1"));
            }
            if b.growth % self.groups != 0 {
                return bad(format!("block {i}: growth {} not divisible by G={}", b.growth, self.groups));
            }
            if b.growth % self.sfr_groups() != 0 {
                return bad(format!(
                    "block {i}: growth {} not divisible by reactivation groups {}",
                    b.growth,
                    self.sfr_groups()
                ));
            }
            if b.se && b.growth % self.se_reduction != 0 {
                return bad(format!(
                    "block {i}: growth {} not divisible by SE reduction {}",
                    b.growth, self.se_reduction
                ));
            }
        }
        let mut res = self.stem_resolution();
        if self.input_resolution < self.stem.kernel / 2 + 1 || res == 0 {
            return bad("input resolution too small for the stem".into());
        }
        for i in 1..self.blocks.len() {
            if res < 2 {
                return bad(format!("resolution collapses before block {i}"));
            }
            res /= 2;
        }
        if let Some(h) = &self.head {
            if h.width == 0 {
                return bad("head width must be >= 1".into());
            }
            if h.se && (h.se_reduction == 0 || self.final_width() % h.se_reduction != 0) {
                return bad(format!(
                    "head SE reduction {} does not divide final width {}",
                    h.se_reduction,
                    self.final_width()
                ));
            }
        }
        Ok(())
    }

    fn imagenet(
        name: &str,
        layers: [usize; 5],
        growth: [usize; 5],
        factor: usize,
        head_width: usize,
        head_se_reduction: usize,
    ) -> Self {
        let blocks = layers
            .iter()
            .zip(growth)
            .enumerate()
            .map(|(i, (&d, k))| BlockSpec::new(d, k).flags(i >= 3, i >= 2))
            .collect();
        Self {
            name: name.into(),
            dataset: Dataset::Imagenet,
            blocks,
            condense_factor: factor,
            sparse_factor: factor,
            groups: factor,
            sfr_groups: None,
            bottleneck: 4,
            se_reduction: 4,
            stem: StemSpec {
                kernel: 3,
                stride: 2,
                channels: 2 * growth[0],
            },
            input_channels: 3,
            input_resolution: 224,
            num_classes: 1000,
            head: Some(HeadSpec {
                width: head_width,
                se: true,
                se_reduction: head_se_reduction,
            }),
            reactivation: true,
        }
    }

    pub fn cnv2_a() -> Self {
        Self::imagenet("cnv2-a", [1, 1, 4, 6, 8], [8, 8, 16, 32, 64], 8, 828, 16)
    }

    pub fn cnv2_b() -> Self {
        Self::imagenet("cnv2-b", [2, 4, 6, 8, 6], [6, 12, 24, 48, 96], 6, 1024, 8)
    }

    pub fn cnv2_c() -> Self {
        Self::imagenet("cnv2-c", [4, 6, 8, 10, 8], [8, 16, 32, 64, 128], 8, 1024, 16)
    }

    /// CIFAR network with `layers` dense layers in each of its three blocks.
    pub fn cifar(name: &str, layers: usize, num_classes: usize) -> Self {
        Self {
            name: name.into(),
            dataset: Dataset::Cifar,
            blocks: [8, 16, 32].iter().map(|&k| BlockSpec::new(layers, k)).collect(),
            condense_factor: 4,
            sparse_factor: 4,
            groups: 4,
            sfr_groups: None,
            bottleneck: 4,
            se_reduction: 4,
            stem: StemSpec {
                kernel: 3,
                stride: 1,
                channels: 16,
            },
            input_channels: 3,
            input_resolution: 32,
            num_classes,
            head: None,
            reactivation: true,
        }
    }

    /// Depth counts three convolutions per dense layer plus stem and
    /// classifier, `2 + 9d`.
    pub fn cifar_110() -> Self {
        Self::cifar("cifar-110", 12, 10)
    }

    pub fn cifar_146() -> Self {
        Self::cifar("cifar-146", 16, 10)
    }

    /// Desk-scale network for the synthetic two-class task.
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            dataset: Dataset::Synthetic,
            blocks: [4, 8, 16].iter().map(|&k| BlockSpec::new(2, k)).collect(),
            condense_factor: 4,
            sparse_factor: 4,
            groups: 4,
            sfr_groups: None,
            bottleneck: 4,
            se_reduction: 4,
            stem: StemSpec {
                kernel: 3,
                stride: 1,
                channels: 8,
            },
            input_channels: 3,
            input_resolution: 8,
            num_classes: 2,
            head: None,
            reactivation: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cnv2-a" => Ok(Self::cnv2_a()),
            "cnv2-b" => Ok(Self::cnv2_b()),
            "cnv2-c" => Ok(Self::cnv2_c()),
            "cifar-110" => Ok(Self::cifar_110()),
            "cifar-146" => Ok(Self::cifar_146()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }
}

pub const PRESETS: [&str; 6] = ["cnv2-a", "cnv2-b", "cnv2-c", "cifar-110", "cifar-146", "toy"];
