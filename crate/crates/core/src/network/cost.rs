//! Multiply-add and parameter accounting.
//!
//! Convolutions cost `live weights x output positions`; fully connected and
//! SE layers cost their weight count. Parameters are live convolution
//! weights, BN affine pairs, and FC/SE weights with biases. Pooling,
//! activations, BN arithmetic and the index layers are free.

use std::fmt;
use std::ops::{Add, AddAssign};

use serde::Serialize;

use crate::lgc::final_live_cols;
use crate::network::config::NetworkConfig;
use crate::network::net::Network;
use crate::sfr::final_live_rows;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub macs: u64,
    pub params: u64,
}

impl Cost {
    pub const fn new(macs: u64, params: u64) -> Self {
        Self { macs, params }
    }

    pub(crate) fn conv(weights: usize, positions: usize) -> Self {
        Self::new((weights * positions) as u64, weights as u64)
    }

    pub(crate) fn bn(channels: usize) -> Self {
        Self::new(0, 2 * channels as u64)
    }

    pub(crate) fn fc(inputs: usize, outputs: usize) -> Self {
        Self::new((inputs * outputs) as u64, (inputs * outputs + outputs) as u64)
    }

    pub(crate) fn se(channels: usize, reduction: usize) -> Self {
        let hidden = channels / reduction;
        Self::fc(channels, hidden) + Self::fc(hidden, channels)
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost::new(self.macs + o.macs, self.params + o.params)
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

/// Which connectivity to count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sparsity {
    /// Every masked weight counted.
    Dense,
    /// The deployed structure after all pruning stages.
    Final,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostBreakdown {
    pub stem: Cost,
    pub lgc: Cost,
    pub group_conv: Cost,
    pub sfr: Cost,
    pub se: Cost,
    pub batch_norm: Cost,
    pub head: Cost,
    pub classifier: Cost,
}

impl CostBreakdown {
    pub fn total(&self) -> Cost {
        self.stem + self.lgc + self.group_conv + self.sfr + self.se + self.batch_norm + self.head + self.classifier
    }

    pub fn rows(&self) -> [(&'static str, Cost); 8] {
        [
            ("stem", self.stem),
            ("lgc", self.lgc),
            ("group_conv", self.group_conv),
            ("sfr", self.sfr),
            ("se", self.se),
            ("batch_norm", self.batch_norm),
            ("head", self.head),
            ("classifier", self.classifier),
        ]
    }
}

impl fmt::Display for CostBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>14} {:>12}", "part", "mult-adds", "params")?;
        for (name, c) in self.rows() {
            writeln!(f, "{name:<12} {:>14} {:>12}", c.macs, c.params)?;
        }
        let t = self.total();
        write!(f, "{:<12} {:>14} {:>12}", "total", t.macs, t.params)
    }
}

/// Live weight counts of one dense layer's two masked convolutions.
type LiveWeights = (usize, Option<usize>);

fn accumulate(cfg: &NetworkConfig, mut live: impl FnMut(usize, usize, usize) -> LiveWeights) -> CostBreakdown {
    let mut out = CostBreakdown::default();
    let stem_pos = cfg.stem_resolution().pow(2);
    out.stem = Cost::conv(cfg.stem.channels * cfg.input_channels * cfg.stem.kernel.pow(2), stem_pos);
    out.batch_norm += Cost::bn(cfg.stem.channels);
    for (b, (spec, geo)) in cfg.blocks.iter().zip(cfg.geometry()).enumerate() {
        let pos = geo.resolution * geo.resolution;
        let mid = cfg.bottleneck * spec.growth;
        for l in 0..spec.layers {
            let width = geo.in_channels + l * spec.growth;
            let (lgc_w, sfr_w) = live(b, l, width);
            out.lgc += Cost::conv(lgc_w, pos);
            out.batch_norm += Cost::bn(mid);
            out.group_conv += Cost::conv(spec.growth * (mid / cfg.groups) * 9, pos);
            out.batch_norm += Cost::bn(spec.growth);
            if spec.se {
                out.se += Cost::se(spec.growth, cfg.se_reduction);
            }
            if let Some(w) = sfr_w {
                out.sfr += Cost::conv(w, pos);
                out.batch_norm += Cost::bn(width);
            }
        }
    }
    let width = cfg.final_width();
    if let Some(h) = &cfg.head {
        if h.se {
            out.head += Cost::se(width, h.se_reduction);
        }
        out.head += Cost::fc(width, h.width);
    }
    out.classifier = Cost::fc(cfg.classifier_inputs(), cfg.num_classes);
    out
}

/// Cost of a configuration at the requested sparsity.
pub fn config_cost(cfg: &NetworkConfig, sparsity: Sparsity) -> CostBreakdown {
    accumulate(cfg, |b, _, width| {
        let k = cfg.blocks[b].growth;
        let mid = cfg.bottleneck * k;
        let (cols, rows) = match sparsity {
            Sparsity::Dense => (width, width),
            Sparsity::Final => (
                final_live_cols(width, cfg.condense_factor),
                final_live_rows(width, cfg.sparse_factor),
            ),
        };
        (cols * mid, cfg.reactivation.then_some(rows * k))
    })
}

/// Cost of a network with its masks as they currently are.
pub fn network_cost(net: &Network) -> CostBreakdown {
    let layers: Vec<LiveWeights> = net
        .layers()
        .map(|l| (l.lgc.live_connections(), l.sfr.as_ref().map(|s| s.live_connections())))
        .collect();
    let mut idx = 0;
    accumulate(net.config(), |_, _, _| {
        idx += 1;
        layers[idx - 1]
    })
}

/// Multiply-adds of the deployed (fully pruned) network.
pub fn count_flops(net: &Network) -> u64 {
    config_cost(net.config(), Sparsity::Final).total().macs
}

/// Parameters of the deployed (fully pruned) network.
pub fn count_params(net: &Network) -> u64 {
    config_cost(net.config(), Sparsity::Final).total().params
}
