//! Inference compiler: masked layers become ordinary group convolutions plus
//! index layers.
//!
//! A reactivation module keeps, per input group, a set of live output rows.
//! Packing each group's live rows contiguously gives a standard group
//! convolution whose outputs are scattered (and summed, when several groups
//! keep the same row) back to the buffer width before batch norm. A learned
//! group convolution is the mirror image: a gather picks each output group's
//! live input columns into a contiguous slab that a group convolution reads.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, Record, RecordKind, PLAN_TAG};
use crate::error::{shape_err, Error, Result};
use crate::lgc::LgcLayer;
use crate::network::config::NetworkConfig;
use crate::network::cost::{Cost, CostBreakdown};
use crate::network::layer::DenseLayer;
use crate::network::net::Network;
use crate::nn::{BatchNorm2d, Linear};
use crate::ops::activation::Activation;
use crate::ops::conv::{conv2d, ConvWeights};
use crate::ops::linear::fully_connected;
use crate::ops::norm::{eval_affine, RunningStats};
use crate::ops::pool::{avg_pool, global_avg_pool};
use crate::ops::se::{se_block, SeWeights};
use crate::ops::shuffle::channel_shuffle;
use crate::sfr::SfrModule;
use crate::tensor::{Matrix, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    /// Destinations may repeat (summed) or be missing (zero).
    ScatterSum,
    /// Every destination has exactly one source.
    Gather,
}

/// Channel index layer: a list of `(source, destination)` channel pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    pub mode: IndexMode,
    pub entries: Vec<(usize, usize)>,
    pub output_width: usize,
}

impl IndexMap {
    pub fn identity(width: usize) -> Self {
        Self {
            mode: IndexMode::Gather,
            entries: (0..width).map(|i| (i, i)).collect(),
            output_width: width,
        }
    }

    pub fn scatter_sum(entries: Vec<(usize, usize)>, output_width: usize) -> Result<Self> {
        if let Some(&(_, d)) = entries.iter().find(|&&(_, d)| d >= output_width) {
            return Err(Error::InvalidArgument(format!(
                "scatter destination {d} outside width {output_width}"
            )));
        }
        Ok(Self {
            mode: IndexMode::ScatterSum,
            entries,
            output_width,
        })
    }

    /// Gather whose destinations are exactly `0..entries.len()`, each once.
    pub fn gather(entries: Vec<(usize, usize)>) -> Result<Self> {
        let n = entries.len();
        let mut seen = vec![false; n];
        for &(_, d) in &entries {
            if d >= n || std::mem::replace(&mut seen[d], true) {
                return Err(Error::InvalidArgument(format!(
                    "gather destination {d} repeated or outside 0..{n}"
                )));
            }
        }
        Ok(Self {
            mode: IndexMode::Gather,
            entries,
            output_width: n,
        })
    }

    /// Smallest input width this map can read from.
    pub fn input_width(&self) -> usize {
        self.entries.iter().map(|&(s, _)| s + 1).max().unwrap_or(0)
    }

    /// Scatter with distinct destinations, or any gather: a pure relabelling.
    pub fn is_injective(&self) -> bool {
        let mut dst: Vec<usize> = self.entries.iter().map(|&(_, d)| d).collect();
        dst.sort_unstable();
        dst.windows(2).all(|w| w[0] != w[1])
    }

    /// The map sending every destination back to its source. Requires
    /// distinct destinations and distinct sources.
    pub fn inverse(&self) -> Result<IndexMap> {
        let mut src: Vec<usize> = self.entries.iter().map(|&(s, _)| s).collect();
        src.sort_unstable();
        let distinct_src = src.windows(2).all(|w| w[0] != w[1]);
        if !self.is_injective() || !distinct_src || self.input_width() != self.entries.len() {
            return Err(Error::InvalidArgument("index map is not a permutation of its sources".into()));
        }
        IndexMap::gather(self.entries.iter().map(|&(s, d)| (d, s)).collect())
    }

    pub fn apply(&self, x: &Tensor4) -> Result<Tensor4> {
        let s = x.shape();
        if self.input_width() > s.c {
            return Err(shape_err(
                "index_map",
                format!("reads channel {} of a {}-channel input", self.input_width() - 1, s.c),
            ));
        }
        let mut out = Tensor4::zeros(s.with_channels(self.output_width));
        for n in 0..s.n {
            for &(src, dst) in &self.entries {
                let from = x.plane(n, src).to_vec();
                let to = out.plane_mut(n, dst);
                match self.mode {
                    IndexMode::Gather => to.copy_from_slice(&from),
                    IndexMode::ScatterSum => to.iter_mut().zip(&from).for_each(|(t, f)| *t += f),
                }
            }
        }
        Ok(out)
    }

    fn pairs(&self) -> Vec<(u32, u32)> {
        self.entries.iter().map(|&(s, d)| (s as u32, d as u32)).collect()
    }
}

/// Per-channel normalisation retained by the plan.
#[derive(Clone, Debug, PartialEq)]
pub enum Norm {
    /// Eval-mode batch norm with its trained parameters.
    Batch {
        gamma: Vec<f32>,
        beta: Vec<f32>,
        stats: RunningStats,
    },
    /// Shift left over after the scale was folded into the convolution.
    Bias(Vec<f32>),
}

impl Norm {
    fn from_bn(bn: &BatchNorm2d) -> Self {
        Norm::Batch {
            gamma: bn.gamma.clone(),
            beta: bn.beta.clone(),
            stats: bn.stats.clone(),
        }
    }

    fn channels(&self) -> usize {
        match self {
            Norm::Batch { gamma, .. } => gamma.len(),
            Norm::Bias(b) => b.len(),
        }
    }

    fn apply(&self, x: &Tensor4) -> Result<Tensor4> {
        let s = x.shape();
        if s.c != self.channels() {
            return Err(shape_err("plan_norm", format!("{} channels vs {}", s.c, self.channels())));
        }
        let (scale, shift) = match self {
            Norm::Batch { gamma, beta, stats } => eval_affine(gamma, beta, stats),
            Norm::Bias(b) => (vec![1.0; b.len()], b.clone()),
        };
        let mut out = x.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let (a, b) = (scale[c], shift[c]);
                out.plane_mut(n, c).iter_mut().for_each(|v| *v = a * *v + b);
            }
        }
        Ok(out)
    }

    /// Scales output filter `dst_of(o)` of `w` into the weights and keeps the shift.
    fn fold_into(&mut self, w: &mut ConvWeights, dst_of: impl Fn(usize) -> Option<usize>) {
        let Norm::Batch { gamma, beta, stats } = self else {
            return;
        };
        let (scale, shift) = eval_affine(gamma, beta, stats);
        let per = w.in_per_group * w.kernel_len();
        for o in 0..w.out_channels {
            if let Some(d) = dst_of(o) {
                w.data[o * per..(o + 1) * per].iter_mut().for_each(|v| *v *= scale[d]);
            }
        }
        *self = Norm::Bias(shift);
    }
}

/// Convolution, normalisation and optional activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub weights: ConvWeights,
    pub stride: usize,
    pub padding: usize,
    pub norm: Norm,
    pub act: Option<Activation>,
}

impl ConvStage {
    fn run(&self, x: &Tensor4) -> Result<Tensor4> {
        let z = conv2d(x, &self.weights, self.stride, self.padding)?;
        let z = self.norm.apply(&z)?;
        Ok(match self.act {
            Some(a) => a.apply(&z),
            None => z,
        })
    }

    fn fold(&mut self) {
        self.norm.fold_into(&mut self.weights, Some);
    }
}

/// Compiled reactivation module: packed group conv, scatter-sum, BN, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct SfrPlan {
    pub conv: ConvWeights,
    pub index: IndexMap,
    pub norm: Norm,
}

impl SfrPlan {
    /// Reactivation term `y` for new features `x_new`.
    pub fn forward(&self, x_new: &Tensor4) -> Result<Tensor4> {
        let z = conv2d(x_new, &self.conv, 1, 0)?;
        let z = self.index.apply(&z)?;
        Ok(Activation::Relu.apply(&self.norm.apply(&z)?))
    }

    fn fold(&mut self) {
        let dst: BTreeMap<usize, usize> = match self.index.mode {
            IndexMode::ScatterSum => self.index.entries.iter().copied().collect(),
            // A gather here is the identity of the S = 1 case.
            IndexMode::Gather => self.index.entries.iter().map(|&(s, d)| (d, s)).collect(),
        };
        self.norm.fold_into(&mut self.conv, |o| dst.get(&o).copied());
    }
}

/// Compiled learned group convolution: gather into a slab, then a group conv.
#[derive(Clone, Debug, PartialEq)]
pub struct LgcPlan {
    pub gather: IndexMap,
    pub conv: ConvWeights,
}

impl LgcPlan {
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        conv2d(&self.gather.apply(x)?, &self.conv, 1, 0)
    }
}

fn not_ready(what: &str, done: usize, needed: usize) -> Error {
    Error::NotSparsified(format!("{what} finished {done} of {needed} pruning stages"))
}

/// Packs every group's live rows into a standard group convolution and the
/// scatter-sum index that returns packed outputs to their original rows.
/// With `S = 1` the module is already dense and compiles to itself.
pub fn convert_sfr(module: &SfrModule) -> Result<SfrPlan> {
    let (o, i, g) = (module.out_channels(), module.in_channels(), module.groups());
    let s = module.sparse_factor();
    let norm = Norm::from_bn(module.bn());
    let dense = masked_dense(module.weights(), module.mask());
    if s <= 1 {
        return Ok(SfrPlan {
            conv: dense,
            index: IndexMap::identity(o),
            norm,
        });
    }
    if !module.is_fully_sparsified() {
        return Err(not_ready("reactivation module", module.stages_done(), s - 1));
    }
    let w = module.group_width();
    let live: Vec<Vec<usize>> = (0..g)
        .map(|gi| (0..o).filter(|&r| module.row_is_live(gi, r)).collect())
        .collect();
    let slots = live.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut conv = ConvWeights::zeros(g * slots, i, 1, 1, g)?;
    let mut entries = Vec::new();
    for (gi, rows) in live.iter().enumerate() {
        for (j, &r) in rows.iter().enumerate() {
            let p = gi * slots + j;
            for c in 0..w {
                conv.data[p * w + c] = dense.data[r * i + gi * w + c];
            }
            entries.push((p, r));
        }
    }
    Ok(SfrPlan {
        conv,
        index: IndexMap::scatter_sum(entries, o)?,
        norm,
    })
}

/// Gathers each output group's live input columns into a contiguous slab read
/// by a standard group convolution. With `C = 1` the layer is dense.
pub fn convert_lgc(layer: &LgcLayer) -> Result<LgcPlan> {
    let (i, o, g) = (layer.in_channels(), layer.out_channels(), layer.groups());
    let dense = masked_dense(layer.weights(), layer.mask());
    if layer.condense_factor() <= 1 {
        return Ok(LgcPlan {
            gather: IndexMap::identity(i),
            conv: dense,
        });
    }
    if !layer.is_fully_condensed() {
        return Err(not_ready(
            "learned group convolution",
            layer.stages_done(),
            layer.condense_factor() - 1,
        ));
    }
    let rows = layer.group_rows();
    let live: Vec<Vec<usize>> = (0..g).map(|gi| layer.live_columns(gi)).collect();
    let slots = live.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut conv = ConvWeights::zeros(o, g * slots, 1, 1, g)?;
    let mut entries = Vec::with_capacity(g * slots);
    for (gi, cols) in live.iter().enumerate() {
        for j in 0..slots {
            // Padding slots read channel 0 through all-zero filters.
            entries.push((cols.get(j).copied().unwrap_or(0), gi * slots + j));
        }
        for r in gi * rows..(gi + 1) * rows {
            for (j, &c) in cols.iter().enumerate() {
                conv.data[r * slots + j] = dense.data[r * i + c];
            }
        }
    }
    Ok(LgcPlan {
        gather: IndexMap::gather(entries)?,
        conv,
    })
}

fn masked_dense(w: &ConvWeights, mask: &[f32]) -> ConvWeights {
    let mut out = w.zeros_like();
    for ((d, &v), &m) in out.data.iter_mut().zip(&w.data).zip(mask) {
        *d = v * m;
    }
    out
}

/// One compiled dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanLayer {
    pub in_channels: usize,
    pub groups: usize,
    pub lgc: LgcPlan,
    pub bn1: Norm,
    pub act: Activation,
    pub conv: ConvStage,
    pub se: Option<SeWeights>,
    pub sfr: Option<SfrPlan>,
}

impl PlanLayer {
    fn compile(layer: &DenseLayer) -> Result<Self> {
        Ok(Self {
            in_channels: layer.spec.in_channels,
            groups: layer.spec.groups,
            lgc: convert_lgc(&layer.lgc)?,
            bn1: Norm::from_bn(&layer.bn1),
            act: layer.spec.activation,
            conv: ConvStage {
                weights: plain(&layer.conv.weights),
                stride: layer.conv.stride,
                padding: layer.conv.padding,
                norm: Norm::from_bn(&layer.bn2),
                act: Some(layer.spec.activation),
            },
            se: layer.se.as_ref().map(|s| s.weights()),
            sfr: layer.sfr.as_ref().map(convert_sfr).transpose()?,
        })
    }

    /// New features from the buffer.
    pub fn produce(&self, x: &Tensor4) -> Result<Tensor4> {
        let z = self.lgc.forward(x)?;
        let z = self.act.apply(&self.bn1.apply(&z)?);
        let z = channel_shuffle(&z, self.groups)?;
        let z = self.conv.run(&z)?;
        match &self.se {
            Some(se) => se_block(&z, se),
            None => Ok(z),
        }
    }

    /// `[x + y, x_new]`.
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        if x.shape().c != self.in_channels {
            return Err(shape_err(
                "plan_layer",
                format!("buffer has {} channels, layer expects {}", x.shape().c, self.in_channels),
            ));
        }
        let x_new = self.produce(x)?;
        let old = match &self.sfr {
            Some(sfr) => x.add(&sfr.forward(&x_new)?)?,
            None => x.clone(),
        };
        Tensor4::concat_channels(&[&old, &x_new])
    }

    fn fold(&mut self) {
        self.bn1.fold_into(&mut self.lgc.conv, Some);
        self.conv.fold();
        if let Some(s) = &mut self.sfr {
            s.fold();
        }
    }
}

fn plain(w: &ConvWeights) -> ConvWeights {
    ConvWeights {
        grad: None,
        ..w.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Dense {
    fn from_linear(l: &Linear) -> Self {
        Self {
            weight: l.weight.clone(),
            bias: l.bias.clone(),
        }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        fully_connected(x, &self.weight, &self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanHead {
    pub se: Option<SeWeights>,
    pub fc: Dense,
}

/// A compiled network. Immutable; `forward` takes `&self` so one plan can
/// serve several threads.
#[derive(Clone, Debug, PartialEq)]
pub struct InferencePlan {
    pub config: NetworkConfig,
    pub folded: bool,
    pub stem: ConvStage,
    pub blocks: Vec<Vec<PlanLayer>>,
    pub head: Option<PlanHead>,
    pub classifier: Dense,
}

/// Compiles every masked layer of `net`; `fold_bn` additionally folds each
/// batch norm's scale into the convolution in front of it.
pub fn compile_network(net: &Network, fold_bn: bool) -> Result<InferencePlan> {
    let blocks = net
        .blocks
        .iter()
        .map(|layers| layers.iter().map(PlanLayer::compile).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut plan = InferencePlan {
        config: net.config().clone(),
        folded: false,
        stem: ConvStage {
            weights: plain(&net.stem.weights),
            stride: net.stem.stride,
            padding: net.stem.padding,
            norm: Norm::from_bn(&net.stem_bn),
            act: Some(Activation::Relu),
        },
        blocks,
        head: net.head.as_ref().map(|h| PlanHead {
            se: h.se.as_ref().map(|s| s.weights()),
            fc: Dense::from_linear(&h.fc),
        }),
        classifier: Dense::from_linear(&net.classifier),
    };
    if fold_bn {
        plan.fold_batch_norm();
    }
    Ok(plan)
}

impl InferencePlan {
    pub fn fold_batch_norm(&mut self) {
        self.stem.fold();
        self.blocks.iter_mut().flatten().for_each(PlanLayer::fold);
        self.folded = true;
    }

    pub fn layers(&self) -> impl Iterator<Item = &PlanLayer> {
        self.blocks.iter().flatten()
    }

    /// Final feature buffer before global pooling.
    pub fn features(&self, x: &Tensor4) -> Result<Tensor4> {
        let s = x.shape();
        let r = self.config.input_resolution;
        if s.c != self.config.input_channels || s.h != r || s.w != r {
            return Err(shape_err(
                "plan_forward",
                format!("input {s} does not match ({}, {r}, {r})", self.config.input_channels),
            ));
        }
        let mut buf = self.stem.run(x)?;
        for (b, layers) in self.blocks.iter().enumerate() {
            if b > 0 {
                buf = avg_pool(&buf, 2, 2)?;
            }
            for layer in layers {
                buf = layer.forward(&buf)?;
            }
        }
        Ok(buf)
    }

    /// Logits, shape `(N, classes)`.
    pub fn forward(&self, x: &Tensor4) -> Result<Matrix> {
        let mut z = global_avg_pool(&self.features(x)?);
        if let Some(h) = &self.head {
            if let Some(se) = &h.se {
                z = se_block(&z, se)?;
            }
            let y = h.fc.apply(&Matrix::from_pooled(&z)?)?;
            z = Activation::HardSwish.apply(&y.into_pooled());
        }
        self.classifier.apply(&Matrix::from_pooled(&z)?)
    }

    /// Mult-adds and parameters of the compiled form. Index layers are free;
    /// zero padding slots of unequal groups are counted.
    pub fn cost(&self) -> CostBreakdown {
        let cfg = &self.config;
        let mut out = CostBreakdown::default();
        let stem_pos = cfg.stem_resolution().pow(2);
        out.stem = Cost::conv(self.stem.weights.data.len(), stem_pos);
        out.batch_norm += norm_cost(&self.stem.norm);
        for (layers, geo) in self.blocks.iter().zip(cfg.geometry()) {
            let pos = geo.resolution * geo.resolution;
            for l in layers {
                out.lgc += Cost::conv(l.lgc.conv.data.len(), pos);
                out.batch_norm += norm_cost(&l.bn1);
                out.group_conv += Cost::conv(l.conv.weights.data.len(), pos);
                out.batch_norm += norm_cost(&l.conv.norm);
                if let Some(se) = &l.se {
                    out.se += Cost::se(se.channels(), se.channels() / se.squeeze.cols);
                }
                if let Some(s) = &l.sfr {
                    out.sfr += Cost::conv(s.conv.data.len(), pos);
                    out.batch_norm += norm_cost(&s.norm);
                }
            }
        }
        if let Some(h) = &self.head {
            if let Some(se) = &h.se {
                out.head += Cost::se(se.channels(), se.channels() / se.squeeze.cols);
            }
            out.head += Cost::fc(h.fc.weight.rows, h.fc.weight.cols);
        }
        out.classifier = Cost::fc(self.classifier.weight.rows, self.classifier.weight.cols);
        out
    }

    pub fn to_container(&self) -> Result<Container> {
        let header = PlanHeader {
            config: self.config.clone(),
            folded: self.folded,
        };
        let mut c = Container::new(PLAN_TAG, &header)?;
        let r = &mut c.records;
        push_conv(r, "stem.weight", &self.stem.weights);
        push_norm(r, "stem.norm", &self.stem.norm);
        for (b, layers) in self.blocks.iter().enumerate() {
            for (l, layer) in layers.iter().enumerate() {
                let p = format!("blocks.{b}.{l}");
                r.push(Record::index(format!("{p}.lgc.gather"), &layer.lgc.gather.pairs()));
                push_conv(r, &format!("{p}.lgc.weight"), &layer.lgc.conv);
                push_norm(r, &format!("{p}.bn1"), &layer.bn1);
                push_conv(r, &format!("{p}.conv.weight"), &layer.conv.weights);
                push_norm(r, &format!("{p}.bn2"), &layer.conv.norm);
                if let Some(se) = &layer.se {
                    push_se(r, &format!("{p}.se"), se);
                }
                if let Some(s) = &layer.sfr {
                    let tag = match s.index.mode {
                        IndexMode::ScatterSum => "scatter_sum",
                        IndexMode::Gather => "gather",
                    };
                    r.push(Record::index(format!("{p}.sfr.{tag}"), &s.index.pairs()));
                    push_conv(r, &format!("{p}.sfr.weight"), &s.conv);
                    push_norm(r, &format!("{p}.sfr.norm"), &s.norm);
                }
            }
        }
        if let Some(h) = &self.head {
            if let Some(se) = &h.se {
                push_se(r, "head.se", se);
            }
            push_dense(r, "head.fc", &h.fc);
        }
        push_dense(r, "classifier", &self.classifier);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_tag(PLAN_TAG)?;
        let header: PlanHeader = c.header_as()?;
        header.config.validate()?;
        let rec = Records(c.by_name());
        let cfg = header.config;
        let folded = header.folded;
        let act = |hs: bool| if hs { Activation::HardSwish } else { Activation::Relu };
        let stem = ConvStage {
            weights: rec.conv("stem.weight", 1)?,
            stride: cfg.stem.stride,
            padding: cfg.stem.kernel / 2,
            norm: rec.norm("stem.norm", folded)?,
            act: Some(Activation::Relu),
        };
        let mut blocks = Vec::new();
        for (b, (spec, geo)) in cfg.blocks.iter().zip(cfg.geometry()).enumerate() {
            let mut layers = Vec::new();
            for l in 0..spec.layers {
                let p = format!("blocks.{b}.{l}");
                let in_channels = geo.in_channels + l * spec.growth;
                let gather = IndexMap::gather(rec.pairs(&format!("{p}.lgc.gather"))?)?;
                let lgc_w = rec.conv_reading(&format!("{p}.lgc.weight"), gather.output_width)?;
                let se = if spec.se {
                    Some(rec.se(&format!("{p}.se"))?)
                } else {
                    None
                };
                let sfr = if cfg.reactivation {
                    let index = match rec.0.contains_key(format!("{p}.sfr.gather").as_str()) {
                        true => IndexMap::gather(rec.pairs(&format!("{p}.sfr.gather"))?)?,
                        false => IndexMap::scatter_sum(rec.pairs(&format!("{p}.sfr.scatter_sum"))?, in_channels)?,
                    };
                    Some(SfrPlan {
                        conv: rec.conv_reading(&format!("{p}.sfr.weight"), spec.growth)?,
                        index,
                        norm: rec.norm(&format!("{p}.sfr.norm"), folded)?,
                    })
                } else {
                    None
                };
                layers.push(PlanLayer {
                    in_channels,
                    groups: cfg.groups,
                    lgc: LgcPlan { gather, conv: lgc_w },
                    bn1: rec.norm(&format!("{p}.bn1"), folded)?,
                    act: act(spec.hard_swish),
                    conv: ConvStage {
                        weights: rec.conv_reading(&format!("{p}.conv.weight"), cfg.bottleneck * spec.growth)?,
                        stride: 1,
                        padding: 1,
                        norm: rec.norm(&format!("{p}.bn2"), folded)?,
                        act: Some(act(spec.hard_swish)),
                    },
                    se,
                    sfr,
                });
            }
            blocks.push(layers);
        }
        let head = match &cfg.head {
            Some(h) => Some(PlanHead {
                se: if h.se { Some(rec.se("head.se")?) } else { None },
                fc: rec.dense("head.fc")?,
            }),
            None => None,
        };
        let classifier = rec.dense("classifier")?;
        if rec.0.len() != c.records.len() {
            return Err(Error::Format("duplicate record names in plan".into()));
        }
        Ok(Self {
            config: cfg,
            folded,
            stem,
            blocks,
            head,
            classifier,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn norm_cost(n: &Norm) -> Cost {
    match n {
        Norm::Batch { gamma, .. } => Cost::bn(gamma.len()),
        Norm::Bias(b) => Cost::new(0, b.len() as u64),
    }
}

#[derive(Serialize, Deserialize)]
struct PlanHeader {
    config: NetworkConfig,
    folded: bool,
}

fn push_conv(r: &mut Vec<Record>, name: &str, w: &ConvWeights) {
    r.push(Record::f32(RecordKind::Weight, name, w.shape().to_vec(), w.data.clone()));
}

fn push_vec(r: &mut Vec<Record>, kind: RecordKind, name: String, v: &[f32]) {
    r.push(Record::f32(kind, name, vec![v.len()], v.to_vec()));
}

fn push_norm(r: &mut Vec<Record>, p: &str, n: &Norm) {
    match n {
        Norm::Batch { gamma, beta, stats } => {
            push_vec(r, RecordKind::NoDecay, format!("{p}.gamma"), gamma);
            push_vec(r, RecordKind::NoDecay, format!("{p}.beta"), beta);
            push_vec(r, RecordKind::Buffer, format!("{p}.running_mean"), &stats.mean);
            push_vec(r, RecordKind::Buffer, format!("{p}.running_var"), &stats.var);
        }
        Norm::Bias(b) => push_vec(r, RecordKind::NoDecay, format!("{p}.bias"), b),
    }
}

fn push_matrix(r: &mut Vec<Record>, name: String, m: &Matrix) {
    r.push(Record::f32(RecordKind::Weight, name, vec![m.rows, m.cols], m.data.clone()));
}

fn push_dense(r: &mut Vec<Record>, p: &str, d: &Dense) {
    push_matrix(r, format!("{p}.weight"), &d.weight);
    push_vec(r, RecordKind::NoDecay, format!("{p}.bias"), &d.bias);
}

fn push_se(r: &mut Vec<Record>, p: &str, se: &SeWeights) {
    push_matrix(r, format!("{p}.squeeze.weight"), &se.squeeze);
    push_vec(r, RecordKind::NoDecay, format!("{p}.squeeze.bias"), &se.squeeze_bias);
    push_matrix(r, format!("{p}.excite.weight"), &se.excite);
    push_vec(r, RecordKind::NoDecay, format!("{p}.excite.bias"), &se.excite_bias);
}

struct Records<'a>(BTreeMap<&'a str, &'a Record>);

impl Records<'_> {
    fn get(&self, name: &str) -> Result<&Record> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("plan is missing record `{name}`")))
    }

    fn vec(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.get(name)?.as_f32()?.to_vec())
    }

    fn pairs(&self, name: &str) -> Result<Vec<(usize, usize)>> {
        Ok(self
            .get(name)?
            .as_pairs()?
            .into_iter()
            .map(|(s, d)| (s as usize, d as usize))
            .collect())
    }

    fn conv(&self, name: &str, groups: usize) -> Result<ConvWeights> {
        let r = self.get(name)?;
        let [o, ipg, kh, kw] = <[usize; 4]>::try_from(r.shape.as_slice())
            .map_err(|_| Error::Format(format!("`{name}` is not a 4-d filter bank")))?;
        ConvWeights::from_data(o, ipg * groups, kh, kw, groups, r.as_f32()?.to_vec())
    }

    /// Filter bank reading `in_channels` inputs; the group count follows from its shape.
    fn conv_reading(&self, name: &str, in_channels: usize) -> Result<ConvWeights> {
        let ipg = self.get(name)?.shape.get(1).copied().unwrap_or(0);
        if ipg == 0 || in_channels % ipg != 0 {
            return Err(Error::Format(format!("`{name}` does not read {in_channels} channels")));
        }
        self.conv(name, in_channels / ipg)
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let r = self.get(name)?;
        match r.shape.as_slice() {
            &[rows, cols] => Matrix::from_vec(rows, cols, r.as_f32()?.to_vec()),
            _ => Err(Error::Format(format!("`{name}` is not a matrix"))),
        }
    }

    fn norm(&self, p: &str, folded: bool) -> Result<Norm> {
        if folded {
            return Ok(Norm::Bias(self.vec(&format!("{p}.bias"))?));
        }
        Ok(Norm::Batch {
            gamma: self.vec(&format!("{p}.gamma"))?,
            beta: self.vec(&format!("{p}.beta"))?,
            stats: RunningStats {
                mean: self.vec(&format!("{p}.running_mean"))?,
                var: self.vec(&format!("{p}.running_var"))?,
            },
        })
    }

    fn dense(&self, p: &str) -> Result<Dense> {
        Ok(Dense {
            weight: self.matrix(&format!("{p}.weight"))?,
            bias: self.vec(&format!("{p}.bias"))?,
        })
    }

    fn se(&self, p: &str) -> Result<SeWeights> {
        Ok(SeWeights {
            squeeze: self.matrix(&format!("{p}.squeeze.weight"))?,
            squeeze_bias: self.vec(&format!("{p}.squeeze.bias"))?,
            excite: self.matrix(&format!("{p}.excite.weight"))?,
            excite_bias: self.vec(&format!("{p}.excite.bias"))?,
        })
    }
}

/// Maximum absolute logit difference between the eval-mode training form and
/// the compiled plan on `x`.
pub fn verify_equivalence(net: &mut Network, plan: &InferencePlan, x: &Tensor4) -> Result<f32> {
    net.set_training(false);
    let reference = net.logits(x)?;
    Ok(reference.max_abs_diff(&plan.forward(x)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::config::BlockSpec;
    use crate::network::cost::{config_cost, Sparsity};
    use crate::nn::Layer;
    use crate::ops::norm::Mode;
    use crate::tensor::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randomise_bn(bn: &mut BatchNorm2d, r: &mut ChaCha8Rng) {
        for c in 0..bn.channels() {
            bn.gamma[c] = r.random_range(0.5..1.5);
            bn.beta[c] = r.random_range(-0.5..0.5);
            bn.stats.mean[c] = r.random_range(-0.5..0.5);
            bn.stats.var[c] = r.random_range(0.5..2.0);
        }
        bn.set_mode(Mode::Eval);
    }

    fn sparsified(o: usize, i: usize, g: usize, s: usize, seed: u64) -> SfrModule {
        let mut r = rng(seed);
        let mut m = SfrModule::new(i, o, g, s, &mut r).unwrap();
        randomise_bn(m.bn_mut(), &mut r);
        for _ in 1..s {
            m.prune_stage().unwrap();
        }
        m
    }

    #[test]
    fn identity_and_permutation_maps() {
        let x = Tensor4::from_vec(Shape4::new(1, 3, 1, 1), vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(IndexMap::identity(3).apply(&x).unwrap(), x);
        let p = IndexMap::scatter_sum(vec![(0, 2), (1, 0), (2, 1)], 3).unwrap();
        assert!(p.is_injective());
        let y = p.apply(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 1.0]);
        assert_eq!(p.inverse().unwrap().apply(&y).unwrap(), x);
    }

    #[test]
    fn scatter_sums_repeats_and_zeroes_gaps() {
        let x = Tensor4::from_vec(Shape4::new(1, 3, 1, 1), vec![1.0, 2.0, 4.0]).unwrap();
        let m = IndexMap::scatter_sum(vec![(0, 1), (1, 1), (2, 3)], 4).unwrap();
        assert_eq!(m.apply(&x).unwrap().data(), &[0.0, 3.0, 0.0, 4.0]);
        assert!(m.inverse().is_err());
    }

    #[test]
    fn gather_rejects_repeated_destinations() {
        assert!(IndexMap::gather(vec![(0, 0), (1, 0)]).is_err());
        assert!(IndexMap::gather(vec![(0, 1)]).is_err());
        assert!(IndexMap::gather(vec![(5, 0), (5, 1)]).is_ok());
    }

    #[test]
    fn sfr_three_groups_three_stages_packs_o_rows() {
        let mut m = sparsified(9, 6, 3, 3, 1);
        let plan = convert_sfr(&m).unwrap();
        assert_eq!(plan.conv.out_channels, 9 * 3 / 3);
        assert_eq!(plan.conv.groups, 3);
        assert_eq!(plan.conv.in_channels(), 6);
        let x = Tensor4::randn(Shape4::new(2, 6, 3, 3), 1.0, &mut rng(2));
        let want = m.forward(&x).unwrap();
        assert!(want.max_abs_diff(&plan.forward(&x).unwrap()) < 1e-5);
    }

    #[test]
    fn sfr_single_stage_is_identity_conversion() {
        let m = sparsified(8, 4, 2, 1, 3);
        let plan = convert_sfr(&m).unwrap();
        assert_eq!(plan.index, IndexMap::identity(8));
        assert_eq!(plan.conv.groups, 1);
        assert_eq!(&plan.conv.data, &m.weights().data);
    }

    #[test]
    fn sfr_matches_masked_dense_oracle() {
        let mut r = rng(4);
        let mut m = SfrModule::new(6, 6, 2, 3, &mut r).unwrap();
        let legal = |r: &mut ChaCha8Rng| -> BTreeSet<usize> {
            let mut rows: Vec<usize> = (0..6).collect();
            rows.sort_by_key(|_| r.random::<u32>());
            rows[..4].iter().copied().collect()
        };
        let pruned = vec![legal(&mut r), legal(&mut r)];
        m.set_pruned_rows(pruned, 2).unwrap();
        let plan = convert_sfr(&m).unwrap();
        for _ in 0..100 {
            let x = Tensor4::randn(Shape4::new(1, 6, 2, 2), 1.0, &mut r);
            let oracle = m.conv_only(&x).unwrap();
            let packed = plan.index.apply(&conv2d(&x, &plan.conv, 1, 0).unwrap()).unwrap();
            assert!(oracle.max_abs_diff(&packed) < 1e-6);
        }
    }

    #[test]
    fn sfr_not_sparsified_is_rejected() {
        let mut m = sparsified(8, 4, 2, 4, 5);
        assert!(matches!(convert_sfr(&m), Ok(_)));
        m = SfrModule::new(4, 8, 2, 4, &mut rng(5)).unwrap();
        m.prune_stage().unwrap();
        assert!(matches!(convert_sfr(&m), Err(Error::NotSparsified(_))));
    }

    #[test]
    fn lgc_known_masks() {
        let mut r = rng(6);
        let mut l = LgcLayer::new(8, 4, 2, 4, &mut r).unwrap();
        let keep = |cols: [usize; 2]| (0..8).filter(|c| !cols.contains(c)).collect::<BTreeSet<_>>();
        l.set_pruned_columns(vec![keep([1, 5]), keep([0, 7])], 3).unwrap();
        let plan = convert_lgc(&l).unwrap();
        assert_eq!(plan.gather.entries, vec![(1, 0), (5, 1), (0, 2), (7, 3)]);
        assert_eq!(plan.conv.groups, 2);
        assert_eq!(plan.conv.in_per_group, 2);
        for _ in 0..20 {
            let x = Tensor4::randn(Shape4::new(1, 8, 3, 3), 1.0, &mut r);
            assert!(l.apply(&x).unwrap().max_abs_diff(&plan.forward(&x).unwrap()) < 1e-6);
        }
    }

    #[test]
    fn lgc_dense_when_condense_factor_is_one() {
        let l = LgcLayer::new(6, 4, 2, 1, &mut rng(7)).unwrap();
        let plan = convert_lgc(&l).unwrap();
        assert_eq!(plan.gather, IndexMap::identity(6));
        assert_eq!(plan.conv.groups, 1);
        let l = LgcLayer::new(8, 4, 2, 4, &mut rng(7)).unwrap();
        assert!(matches!(convert_lgc(&l), Err(Error::NotSparsified(_))));
    }

    fn trained_toy(seed: u64) -> (Network, Tensor4) {
        let mut net = Network::new(&NetworkConfig::toy(), seed).unwrap();
        let mut r = rng(seed + 1);
        let x = Tensor4::randn(Shape4::new(8, 3, 8, 8), 1.0, &mut r);
        for _ in 0..3 {
            net.forward(&x).unwrap();
            net.prune_sfr_stage().unwrap();
            net.prune_lgc_stage().unwrap();
        }
        net.visit("", &mut |p| {
            if p.name.ends_with("beta") {
                p.data.iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
            }
        });
        (net, x)
    }

    #[test]
    fn whole_network_equivalence() {
        let (mut net, x) = trained_toy(9);
        let plan = compile_network(&net, false).unwrap();
        assert!(verify_equivalence(&mut net, &plan, &x).unwrap() < 1e-4);
    }

    #[test]
    fn folding_stays_within_tolerance() {
        let (mut net, x) = trained_toy(10);
        let plan = compile_network(&net, true).unwrap();
        assert!(plan.folded);
        assert!(verify_equivalence(&mut net, &plan, &x).unwrap() < 1e-3);
    }

    #[test]
    fn compile_requires_finished_schedule() {
        let net = Network::new(&NetworkConfig::toy(), 1).unwrap();
        assert!(matches!(compile_network(&net, false), Err(Error::NotSparsified(_))));
    }

    #[test]
    fn dense_factors_compile_to_identical_structure() {
        let mut cfg = NetworkConfig::toy();
        cfg.condense_factor = 1;
        cfg.sparse_factor = 1;
        let mut net = Network::new(&cfg, 2).unwrap();
        let plan = compile_network(&net, false).unwrap();
        assert_eq!(plan.cost(), config_cost(&cfg, Sparsity::Dense));
        let x = Tensor4::randn(Shape4::new(2, 3, 8, 8), 1.0, &mut rng(3));
        assert!(verify_equivalence(&mut net, &plan, &x).unwrap() < 1e-5);
    }

    #[test]
    fn compiled_cost_is_below_dense() {
        let (net, _) = trained_toy(11);
        let plan = compile_network(&net, false).unwrap();
        let dense = config_cost(net.config(), Sparsity::Dense).total();
        assert!(plan.cost().total().macs < dense.macs);
        assert_eq!(plan.cost(), config_cost(net.config(), Sparsity::Final));
    }

    #[test]
    fn plan_file_round_trip() {
        let (mut net, x) = trained_toy(12);
        for fold in [false, true] {
            let plan = compile_network(&net, fold).unwrap();
            let bytes = plan.to_container().unwrap().to_bytes().unwrap();
            let back = InferencePlan::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, plan);
            assert_eq!(back.to_container().unwrap().to_bytes().unwrap(), bytes);
            let a = verify_equivalence(&mut net, &plan, &x).unwrap();
            let b = verify_equivalence(&mut net, &back, &x).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn head_and_se_layers_compile() {
        let mut cfg = NetworkConfig::toy();
        cfg.blocks = vec![BlockSpec::new(2, 4), {
            let mut b = BlockSpec::new(2, 8);
            b.se = true;
            b.hard_swish = true;
            b
        }];
        cfg.head = Some(crate::network::config::HeadSpec {
            width: 12,
            se: true,
            se_reduction: 4,
        });
        let mut net = Network::new(&cfg, 4).unwrap();
        for _ in 0..3 {
            net.prune_sfr_stage().unwrap();
            net.prune_lgc_stage().unwrap();
        }
        let plan = compile_network(&net, false).unwrap();
        let x = Tensor4::randn(Shape4::new(3, 3, 8, 8), 1.0, &mut rng(5));
        assert!(verify_equivalence(&mut net, &plan, &x).unwrap() < 1e-4);
        let back = InferencePlan::from_container(&plan.to_container().unwrap()).unwrap();
        assert_eq!(back, plan);
    }
}
