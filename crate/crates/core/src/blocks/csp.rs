//! Cross-stage-partial blocks: C2f with standard or EMCM bottlenecks, and SPPF.

use crate::blocks::conv::{ConvBlock, ConvBlockSpec, Form};
use crate::error::{Error, Result};
use crate::params::{join, Parameterized, Visit, VisitMut};
use crate::profile::{push_elementwise, LayerKind, LayerRecord, Profile};
use crate::tensor::{add, concat_channels, pool2d, split_channels, PoolMode, Tensor};

/// Efficient multi-scale conv: keep half the channels, run one quarter
/// through a 3×3 conv and the other quarter through a 5×5 conv, concatenate
/// and mix with a 1×1 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct EmcmBlock {
    pub in_ch: usize,
    pub out_ch: usize,
    pub path3: ConvBlock,
    pub path5: ConvBlock,
    pub fuse: ConvBlock,
}

impl EmcmBlock {
    pub fn new(in_ch: usize, out_ch: usize, form: Form) -> Result<Self> {
        if in_ch == 0 || !in_ch.is_multiple_of(4) {
            return Err(Error::Spec(format!("EMCM input channels {in_ch} not divisible by 4")));
        }
        let q = in_ch / 4;
        Ok(EmcmBlock {
            in_ch,
            out_ch,
            path3: ConvBlock::new(ConvBlockSpec::conv_bn_silu(q, q, 3, 1).in_form(form)),
            path5: ConvBlock::new(ConvBlockSpec::conv_bn_silu(q, q, 5, 1).in_form(form)),
            fuse: ConvBlock::new(ConvBlockSpec::conv_bn_silu(in_ch, out_ch, 1, 1).in_form(form)),
        })
    }

    /// `[kept, quarter for 3×3, quarter for 5×5]`
    pub fn split_sizes(&self) -> [usize; 3] {
        [self.in_ch / 2, self.in_ch / 4, self.in_ch / 4]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.c() != self.in_ch {
            return Err(Error::shape("channels", self.in_ch, x.c()));
        }
        let parts = split_channels(x, &self.split_sizes())?;
        let p3 = self.path3.forward(&parts[1])?;
        let p5 = self.path5.forward(&parts[2])?;
        self.fuse.forward(&concat_channels(&[&parts[0], &p3, &p5])?)
    }
}

impl Parameterized for EmcmBlock {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        self.path3.visit_params(&join(prefix, "path3"), f);
        self.path5.visit_params(&join(prefix, "path5"), f);
        self.fuse.visit_params(&join(prefix, "fuse"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        self.path3.visit_params_mut(&join(prefix, "path3"), f)?;
        self.path5.visit_params_mut(&join(prefix, "path5"), f)?;
        self.fuse.visit_params_mut(&join(prefix, "fuse"), f)
    }
}

impl Profile for EmcmBlock {
    fn profile(&self, prefix: &str, input: [usize; 4], out: &mut Vec<LayerRecord>) -> Result<[usize; 4]> {
        push_elementwise(out, join(prefix, "split"), LayerKind::Split, input);
        let [n, _, h, w] = input;
        let q = [n, self.in_ch / 4, h, w];
        let d3 = self.path3.profile(&join(prefix, "path3"), q, out)?;
        self.path5.profile(&join(prefix, "path5"), q, out)?;
        push_elementwise(out, join(prefix, "concat"), LayerKind::Concat, [n, self.in_ch, d3[2], d3[3]]);
        self.fuse.profile(&join(prefix, "fuse"), [n, self.in_ch, d3[2], d3[3]], out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum C2fVariant {
    Standard,
    Emcm,
}

/// One stage of a bottleneck: a 3×3 conv unit or an EMCM block.
// built once per graph and never moved in hot loops
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum BottleneckUnit {
    Conv(ConvBlock),
    Emcm(EmcmBlock),
}

impl BottleneckUnit {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            BottleneckUnit::Conv(c) => c.forward(x),
            BottleneckUnit::Emcm(e) => e.forward(x),
        }
    }
}

impl Parameterized for BottleneckUnit {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        match self {
            BottleneckUnit::Conv(c) => c.visit_params(prefix, f),
            BottleneckUnit::Emcm(e) => e.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        match self {
            BottleneckUnit::Conv(c) => c.visit_params_mut(prefix, f),
            BottleneckUnit::Emcm(e) => e.visit_params_mut(prefix, f),
        }
    }
}

impl Profile for BottleneckUnit {
    fn profile(&self, prefix: &str, input: [usize; 4], out: &mut Vec<LayerRecord>) -> Result<[usize; 4]> {
        match self {
            BottleneckUnit::Conv(c) => c.profile(prefix, input, out),
            BottleneckUnit::Emcm(e) => e.profile(prefix, input, out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub cv1: BottleneckUnit,
    pub cv2: BottleneckUnit,
    /// Residual add; only when input and output channels agree.
    pub add: bool,
}

impl Bottleneck {
    pub fn new(channels: usize, variant: C2fVariant, shortcut: bool, form: Form) -> Result<Self> {
        let unit = || -> Result<BottleneckUnit> {
            Ok(match variant {
                C2fVariant::Standard => {
                    BottleneckUnit::Conv(ConvBlock::new(ConvBlockSpec::conv_bn_silu(channels, channels, 3, 1).in_form(form)))
                }
                C2fVariant::Emcm => BottleneckUnit::Emcm(EmcmBlock::new(channels, channels, form)?),
            })
        };
        Ok(Bottleneck {
            cv1: unit()?,
            cv2: unit()?,
            add: shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.cv2.forward(&self.cv1.forward(x)?)?;
        if self.add {
            add(x, &y)
        } else {
            Ok(y)
        }
    }
}

impl Parameterized for Bottleneck {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        self.cv2.visit_params(&join(prefix, "cv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f)?;
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f)
    }
}

impl Profile for Bottleneck {
    fn profile(&self, prefix: &str, input: [usize; 4], out: &mut Vec<LayerRecord>) -> Result<[usize; 4]> {
        let d = self.cv1.profile(&join(prefix, "cv1"), input, out)?;
        let d = self.cv2.profile(&join(prefix, "cv2"), d, out)?;
        if self.add {
            push_elementwise(out, join(prefix, "add"), LayerKind::Add, d);
        }
        Ok(d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct C2fSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    /// Number of bottlenecks.
    pub n: usize,
    pub variant: C2fVariant,
    pub shortcut: bool,
}

impl C2fSpec {
    pub fn hidden(&self) -> usize {
        self.out_ch / 2
    }

    pub fn validate(&self) -> Result<()> {
        if !self.out_ch.is_multiple_of(2) {
            return Err(Error::Spec(format!("C2f output channels {} must be even", self.out_ch)));
        }
        if self.variant == C2fVariant::Emcm && !self.hidden().is_multiple_of(4) {
            return Err(Error::Spec(format!(
                "C2f-EMCM hidden width {} not divisible by 4",
                self.hidden()
            )));
        }
        Ok(())
    }
}

/// 1×1 conv to `2h`, split into two `h` chunks, chain `n` bottlenecks on
/// the second chunk keeping every intermediate, concat `(2+n)·h`, 1×1 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct C2fBlock {
    pub spec: C2fSpec,
    pub cv1: ConvBlock,
    pub m: Vec<Bottleneck>,
    pub cv2: ConvBlock,
}

impl C2fBlock {
    pub fn new(spec: C2fSpec, form: Form) -> Result<Self> {
        spec.validate()?;
        let h = spec.hidden();
        Ok(C2fBlock {
            spec,
            cv1: ConvBlock::new(ConvBlockSpec::conv_bn_silu(spec.in_ch, 2 * h, 1, 1).in_form(form)),
            m: (0..spec.n)
                .map(|_| Bottleneck::new(h, spec.variant, spec.shortcut, form))
                .collect::<Result<_>>()?,
            cv2: ConvBlock::new(ConvBlockSpec::conv_bn_silu((2 + spec.n) * h, spec.out_ch, 1, 1).in_form(form)),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.spec.hidden();
        let mut ys = split_channels(&self.cv1.forward(x)?, &[h, h])?;
        for b in &self.m {
            let next = b.forward(ys.last().expect("two chunks"))?;
            ys.push(next);
        }
        self.cv2.forward(&concat_channels(&ys.iter().collect::<Vec<_>>())?)
    }
}

impl Parameterized for C2fBlock {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        for (i, b) in self.m.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("m.{i}")), f);
        }
        self.cv2.visit_params(&join(prefix, "cv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f)?;
        for (i, b) in self.m.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("m.{i}")), f)?;
        }
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f)
    }
}

impl Profile for C2fBlock {
    fn profile(&self, prefix: &str, input: [usize; 4], out: &mut Vec<LayerRecord>) -> Result<[usize; 4]> {
        let d = self.cv1.profile(&join(prefix, "cv1"), input, out)?;
        push_elementwise(out, join(prefix, "split"), LayerKind::Split, d);
        let mut chunk = [d[0], d[1] / 2, d[2], d[3]];
        for (i, b) in self.m.iter().enumerate() {
            chunk = b.profile(&join(prefix, &format!("m.{i}")), chunk, out)?;
        }
        let cat = [d[0], (2 + self.m.len()) * self.spec.hidden(), d[2], d[3]];
        push_elementwise(out, join(prefix, "concat"), LayerKind::Concat, cat);
        self.cv2.profile(&join(prefix, "cv2"), cat, out)
    }
}

/// Spatial pyramid pooling (fast): 1×1 to `c/2`, three chained 5×5 max
/// pools, concat of all four maps, 1×1 back to `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct SppfBlock {
    pub channels: usize,
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
}

impl SppfBlock {
    pub fn new(channels: usize, form: Form) -> Self {
        let h = channels / 2;
        SppfBlock {
            channels,
            cv1: ConvBlock::new(ConvBlockSpec::conv_bn_silu(channels, h, 1, 1).in_form(form)),
            cv2: ConvBlock::new(ConvBlockSpec::conv_bn_silu(4 * h, channels, 1, 1).in_form(form)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y0 = self.cv1.forward(x)?;
        let y1 = pool2d(&y0, PoolMode::Max, 5, 1, 2)?;
        let y2 = pool2d(&y1, PoolMode::Max, 5, 1, 2)?;
        let y3 = pool2d(&y2, PoolMode::Max, 5, 1, 2)?;
        self.cv2.forward(&concat_channels(&[&y0, &y1, &y2, &y3])?)
    }
}

impl Parameterized for SppfBlock {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        self.cv2.visit_params(&join(prefix, "cv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f)?;
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f)
    }
}

impl Profile for SppfBlock {
    fn profile(&self, prefix: &str, input: [usize; 4], out: &mut Vec<LayerRecord>) -> Result<[usize; 4]> {
        let d = self.cv1.profile(&join(prefix, "cv1"), input, out)?;
        for i in 0..3 {
            push_elementwise(out, join(prefix, &format!("pool{i}")), LayerKind::MaxPool, d);
        }
        let cat = [d[0], 4 * d[1], d[2], d[3]];
        push_elementwise(out, join(prefix, "concat"), LayerKind::Concat, cat);
        self.cv2.profile(&join(prefix, "cv2"), cat, out)
    }
}
