//! The dense layer: learned group convolution, 3x3 group convolution and a
//! reactivation module that refreshes the buffer it reads from.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::lgc::LgcLayer;
use crate::network::buffer::{FeatureBuffer, SegmentOwner};
use crate::nn::{join, Act, BatchNorm2d, Conv2d, Layer, SeBlock, Visitor};
use crate::ops::activation::Activation;
use crate::ops::conv::ConvWeights;
use crate::ops::norm::Mode;
use crate::ops::shuffle::{channel_shuffle, channel_unshuffle};
use crate::sfr::SfrModule;
use crate::tensor::Tensor4;

/// Hyper-parameters of one dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseLayerSpec {
    pub in_channels: usize,
    pub growth: usize,
    pub bottleneck: usize,
    pub groups: usize,
    pub sfr_groups: usize,
    pub condense_factor: usize,
    pub sparse_factor: usize,
    pub activation: Activation,
    /// SE reduction, when the layer has an SE block.
    pub se_reduction: Option<usize>,
    pub reactivation: bool,
}

/// `x_new = SE(act(BN(GC3x3(shuffle(act(BN(LGC(x))))))))`, `y = SFR(x_new)`,
/// output `[x + y, x_new]`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub spec: DenseLayerSpec,
    pub lgc: LgcLayer,
    pub bn1: BatchNorm2d,
    pub act1: Act,
    pub conv: Conv2d,
    pub bn2: BatchNorm2d,
    pub act2: Act,
    pub se: Option<SeBlock>,
    pub sfr: Option<SfrModule>,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(spec: DenseLayerSpec, rng: &mut R) -> Result<Self> {
        let mid = spec.bottleneck * spec.growth;
        let lgc = LgcLayer::new(spec.in_channels, mid, spec.groups, spec.condense_factor, rng)?;
        let conv_w = ConvWeights::he_normal(spec.growth, mid, 3, 3, spec.groups, rng)?;
        let se = match spec.se_reduction {
            Some(r) => Some(SeBlock::new(spec.growth, r, rng)?),
            None => None,
        };
        let sfr = if spec.reactivation {
            Some(SfrModule::new(
                spec.growth,
                spec.in_channels,
                spec.sfr_groups,
                spec.sparse_factor,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            spec,
            lgc,
            bn1: BatchNorm2d::new(mid),
            act1: Act::new(spec.activation),
            conv: Conv2d::new(conv_w, 1, 1),
            bn2: BatchNorm2d::new(spec.growth),
            act2: Act::new(spec.activation),
            se,
            sfr,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.spec.in_channels + self.spec.growth
    }

    /// New features `x_new` produced from the buffer.
    pub fn produce(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let z = self.lgc.forward(x)?;
        let z = self.bn1.forward(&z)?;
        let z = self.act1.forward(&z)?;
        let z = channel_shuffle(&z, self.spec.groups)?;
        let z = self.conv.forward(&z)?;
        let z = self.bn2.forward(&z)?;
        let z = self.act2.forward(&z)?;
        match &mut self.se {
            Some(se) => se.forward(&z),
            None => Ok(z),
        }
    }

    fn produce_backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        let g = match &mut self.se {
            Some(se) => se.backward(g)?,
            None => g.clone(),
        };
        let g = self.act2.backward(&g)?;
        let g = self.bn2.backward(&g)?;
        let g = self.conv.backward(&g)?;
        let g = channel_unshuffle(&g, self.spec.groups)?;
        let g = self.act1.backward(&g)?;
        let g = self.bn1.backward(&g)?;
        self.lgc.backward(&g)
    }

    fn check_width(&self, c: usize) -> Result<()> {
        if c != self.spec.in_channels {
            return Err(shape_err(
                "dense_layer_forward",
                format!("buffer has {c} channels, layer expects {}", self.spec.in_channels),
            ));
        }
        Ok(())
    }

    /// Runs the layer on a tracked buffer: reactivates it in place and
    /// appends the new segment.
    pub fn forward_buffer(&mut self, buffer: &mut FeatureBuffer, owner: SegmentOwner) -> Result<()> {
        self.check_width(buffer.width())?;
        let x_new = self.produce(buffer.tensor())?;
        if let Some(sfr) = &mut self.sfr {
            let y = sfr.forward(&x_new)?;
            buffer.reactivate(&y)?;
        }
        buffer.append(owner, &x_new)
    }
}

impl Layer for DenseLayer {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.check_width(x.shape().c)?;
        let x_new = self.produce(x)?;
        let refreshed = match &mut self.sfr {
            Some(sfr) => x.add(&sfr.forward(&x_new)?)?,
            None => x.clone(),
        };
        Tensor4::concat_channels(&[&refreshed, &x_new])
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let o = self.spec.in_channels;
        let g_old = grad_out.slice_channels(0..o)?;
        let mut g_new = grad_out.slice_channels(o..o + self.spec.growth)?;
        if let Some(sfr) = &mut self.sfr {
            g_new.add_assign(&sfr.backward(&g_old)?)?;
        }
        let mut g_in = self.produce_backward(&g_new)?;
        g_in.add_assign(&g_old)?;
        Ok(g_in)
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        self.lgc.visit(&join(prefix, "lgc"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some(se) = &mut self.se {
            se.visit(&join(prefix, "se"), f);
        }
        if let Some(sfr) = &mut self.sfr {
            sfr.visit(&join(prefix, "sfr"), f);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.bn1.set_mode(mode);
        self.bn2.set_mode(mode);
        if let Some(sfr) = &mut self.sfr {
            sfr.set_mode(mode);
        }
    }
}
