//! Multi-scale convolutional attention and the attention unit that wraps it.

use crate::blocks::conv::ConvBlock;
use crate::blocks::conv::ConvBlockSpec;
use crate::error::{Error, Result};
use crate::params::{join, Parameterized, Visit, VisitMut};
use crate::profile::{push_elementwise, LayerKind, LayerRecord, Profile};
use crate::tensor::{add, gelu, mul, Conv2dSpec, Tensor};

/// Strip kernel lengths of the three context paths.
pub const STRIP_LENGTHS: [usize; 3] = [7, 11, 21];

/// A depthwise `1×L` conv followed by a depthwise `L×1` conv.
#[derive(Clone, Debug, PartialEq)]
pub struct StripPair {
    pub horizontal: ConvBlock,
    pub vertical: ConvBlock,
}

impl StripPair {
    fn new(channels: usize, len: usize) -> Self {
        StripPair {
            horizontal: ConvBlock::new(ConvBlockSpec::plain(Conv2dSpec::depthwise(channels, 1, len).with_bias(true))),
            vertical: ConvBlock::new(ConvBlockSpec::plain(Conv2dSpec::depthwise(channels, len, 1).with_bias(true))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.vertical.forward(&self.horizontal.forward(x)?)
    }
}

/// `att = mix(u + Σ strip_i(u))` with `u = dw5×5(x)`; output `att ⊗ x`.
#[derive(Clone, Debug, PartialEq)]
pub struct MscaBlock {
    pub channels: usize,
    pub base: ConvBlock,
    pub strips: Vec<StripPair>,
    pub mix: ConvBlock,
}

impl MscaBlock {
    pub fn new(channels: usize) -> Self {
        MscaBlock {
            channels,
            base: ConvBlock::new(ConvBlockSpec::plain(Conv2dSpec::depthwise(channels, 5, 5).with_bias(true))),
            strips: STRIP_LENGTHS.iter().map(|&l| StripPair::new(channels, l)).collect(),
            mix: ConvBlock::new(ConvBlockSpec::plain(Conv2dSpec::new(channels, channels, 1).with_bias(true))),
        }
    }

    /// The pixelwise attention map.
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        if x.c() != self.channels {
            return Err(Error::shape("channels", self.channels, x.c()));
        }
        let u = self.base.forward(x)?;
        let mut s = u.clone();
        for pair in &self.strips {
            s = add(&s, &pair.forward(&u)?)?;
        }
        self.mix.forward(&s)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        mul(&self.attention(x)?, x)
    }
}

impl Parameterized for MscaBlock {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        self.base.visit_params(&join(prefix, "base"), f);
        for (pair, len) in self.strips.iter().zip(STRIP_LENGTHS) {
            pair.horizontal.visit_params(&join(prefix, &format!("strip{len}.h")), f);
            pair.vertical.visit_params(&join(prefix, &format!("strip{len}.v")), f);
        }
        self.mix.visit_params(&join(prefix, "mix"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        self.base.visit_params_mut(&join(prefix, "base"), f)?;
        for (pair, len) in self.strips.iter_mut().zip(STRIP_LENGTHS) {
            pair.horizontal.visit_params_mut(&join(prefix, &format!("strip{len}.h")), f)?;
            pair.vertical.visit_params_mut(&join(prefix, &format!("strip{len}.v")), f)?;
        }
        self.mix.visit_params_mut(&join(prefix, "mix"), f)
    }
}

impl Profile for MscaBlock {
    fn profile(&self, prefix: &str, input: [usize; 4], out: &mut Vec<LayerRecord>) -> Result<[usize; 4]> {
        let u = self.base.profile(&join(prefix, "base"), input, out)?;
        for (pair, len) in self.strips.iter().zip(STRIP_LENGTHS) {
            let d = pair.horizontal.profile(&join(prefix, &format!("strip{len}.h")), u, out)?;
            let d = pair.vertical.profile(&join(prefix, &format!("strip{len}.v")), d, out)?;
            push_elementwise(out, join(prefix, &format!("strip{len}.sum")), LayerKind::Add, d);
        }
        let d = self.mix.profile(&join(prefix, "mix"), u, out)?;
        push_elementwise(out, join(prefix, "gate"), LayerKind::Mul, d);
        Ok(d)
    }
}

/// Residual attention unit: `x + proj_out(msca(gelu(proj_in(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNextAttention {
    pub channels: usize,
    pub proj_in: ConvBlock,
    pub msca: MscaBlock,
    pub proj_out: ConvBlock,
}

impl SegNextAttention {
    pub fn new(channels: usize) -> Self {
        let proj = || ConvBlock::new(ConvBlockSpec::plain(Conv2dSpec::new(channels, channels, 1).with_bias(true)));
        SegNextAttention {
            channels,
            proj_in: proj(),
            msca: MscaBlock::new(channels),
            proj_out: proj(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = gelu(&self.proj_in.forward(x)?);
        let y = self.proj_out.forward(&self.msca.forward(&y)?)?;
        add(x, &y)
    }
}

impl Parameterized for SegNextAttention {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        self.proj_in.visit_params(&join(prefix, "proj_in"), f);
        self.msca.visit_params(&join(prefix, "msca"), f);
        self.proj_out.visit_params(&join(prefix, "proj_out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        self.proj_in.visit_params_mut(&join(prefix, "proj_in"), f)?;
        self.msca.visit_params_mut(&join(prefix, "msca"), f)?;
        self.proj_out.visit_params_mut(&join(prefix, "proj_out"), f)
    }
}

impl Profile for SegNextAttention {
    fn profile(&self, prefix: &str, input: [usize; 4], out: &mut Vec<LayerRecord>) -> Result<[usize; 4]> {
        let d = self.proj_in.profile(&join(prefix, "proj_in"), input, out)?;
        push_elementwise(out, join(prefix, "gelu"), LayerKind::Gelu, d);
        let d = self.msca.profile(&join(prefix, "msca"), d, out)?;
        let d = self.proj_out.profile(&join(prefix, "proj_out"), d, out)?;
        push_elementwise(out, join(prefix, "residual"), LayerKind::Add, d);
        Ok(d)
    }
}
