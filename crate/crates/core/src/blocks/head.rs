//! Detection heads producing `nc + 4·reg_max` channels per pyramid level,
//! box distribution logits first.

use crate::blocks::conv::{ConvBlock, ConvBlockSpec, Form};
use crate::blocks::repconv::RepConvBlock;
use crate::error::{Error, Result};
use crate::params::{join, visit_vec, visit_vec_mut, ParamRole, Parameterized, Visit, VisitMut};
use crate::profile::{push_elementwise, LayerKind, LayerRecord, Profile};
use crate::tensor::{concat_channels, Conv2dSpec, Tensor};

pub const LEVEL_NAMES: [&str; 3] = ["p3", "p4", "p5"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub nc: usize,
    pub reg_max: usize,
    pub strides: [usize; 3],
    /// Input channels of P3/P4/P5.
    pub level_channels: [usize; 3],
    pub rldd_hidden: usize,
}

impl HeadConfig {
    /// The n-scale defaults: reg_max 16, strides 8/16/32, widths 64/128/256.
    pub fn new(nc: usize) -> Self {
        HeadConfig {
            nc,
            reg_max: 16,
            strides: [8, 16, 32],
            level_channels: [64, 128, 256],
            rldd_hidden: 64,
        }
    }

    pub fn box_channels(&self) -> usize {
        4 * self.reg_max
    }

    pub fn outputs_per_level(&self) -> usize {
        self.nc + self.box_channels()
    }

    fn check_inputs(&self, feats: [&Tensor; 3]) -> Result<()> {
        for ((t, &c), name) in feats.iter().zip(&self.level_channels).zip(LEVEL_NAMES) {
            if t.c() != c {
                return Err(Error::shape(format!("{name} channels"), c, t.c()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Decoupled per-level box and class branches.
    Baseline,
    /// Reparameterized head with a shared RepConv stack.
    Rldd,
}

/// One level of the decoupled head.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineLevel {
    pub box_convs: [ConvBlock; 2],
    pub box_out: ConvBlock,
    pub cls_convs: [ConvBlock; 2],
    pub cls_out: ConvBlock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineHead {
    pub cfg: HeadConfig,
    pub levels: Vec<BaselineLevel>,
}

impl BaselineHead {
    pub fn new(cfg: HeadConfig, form: Form) -> Self {
        let box_hidden = 64;
        let cls_hidden = cfg.nc.max(64);
        let unit = |ci, co, k| ConvBlock::new(ConvBlockSpec::conv_bn_silu(ci, co, k, 1).in_form(form));
        let out = |ci, co| ConvBlock::new(ConvBlockSpec::plain(Conv2dSpec::new(ci, co, 1).with_bias(true)));
        let levels = cfg
            .level_channels
            .iter()
            .map(|&c| BaselineLevel {
                box_convs: [unit(c, box_hidden, 3), unit(box_hidden, box_hidden, 3)],
                box_out: out(box_hidden, cfg.box_channels()),
                cls_convs: [unit(c, cls_hidden, 3), unit(cls_hidden, cls_hidden, 3)],
                cls_out: out(cls_hidden, cfg.nc),
            })
            .collect();
        BaselineHead { cfg, levels }
    }

    pub fn forward(&self, feats: [&Tensor; 3]) -> Result<[Tensor; 3]> {
        self.cfg.check_inputs(feats)?;
        let level = |i: usize| -> Result<Tensor> {
            let l = &self.levels[i];
            let b = l.box_out.forward(&l.box_convs[1].forward(&l.box_convs[0].forward(feats[i])?)?)?;
            let c = l.cls_out.forward(&l.cls_convs[1].forward(&l.cls_convs[0].forward(feats[i])?)?)?;
            concat_channels(&[&b, &c])
        };
        Ok([level(0)?, level(1)?, level(2)?])
    }
}

impl Parameterized for BaselineLevel {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        self.box_convs[0].visit_params(&join(prefix, "box.0"), f);
        self.box_convs[1].visit_params(&join(prefix, "box.1"), f);
        self.box_out.visit_params(&join(prefix, "box.out"), f);
        self.cls_convs[0].visit_params(&join(prefix, "cls.0"), f);
        self.cls_convs[1].visit_params(&join(prefix, "cls.1"), f);
        self.cls_out.visit_params(&join(prefix, "cls.out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        self.box_convs[0].visit_params_mut(&join(prefix, "box.0"), f)?;
        self.box_convs[1].visit_params_mut(&join(prefix, "box.1"), f)?;
        self.box_out.visit_params_mut(&join(prefix, "box.out"), f)?;
        self.cls_convs[0].visit_params_mut(&join(prefix, "cls.0"), f)?;
        self.cls_convs[1].visit_params_mut(&join(prefix, "cls.1"), f)?;
        self.cls_out.visit_params_mut(&join(prefix, "cls.out"), f)
    }
}

impl Parameterized for BaselineHead {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        for (l, name) in self.levels.iter().zip(LEVEL_NAMES) {
            l.visit_params(&join(prefix, name), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        for (l, name) in self.levels.iter_mut().zip(LEVEL_NAMES) {
            l.visit_params_mut(&join(prefix, name), f)?;
        }
        Ok(())
    }
}

/// Reparameterized lightweight head.
///
/// Per level a 1×1 unit maps the input to `rldd_hidden` channels; then two
/// RepConv blocks and the box/class 1×1 convs are shared by all levels. The
/// box map of level `i` is multiplied by `scales[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RlddHead {
    pub cfg: HeadConfig,
    pub stems: Vec<ConvBlock>,
    pub rep: [RepConvBlock; 2],
    pub box_out: ConvBlock,
    pub cls_out: ConvBlock,
    pub scales: Vec<f32>,
}

impl RlddHead {
    pub fn new(cfg: HeadConfig, form: Form) -> Self {
        let hid = cfg.rldd_hidden;
        let rep = || match form {
            Form::Train => RepConvBlock::new(hid, hid, 1),
            Form::Deploy => RepConvBlock::new_deploy(hid, hid, 1),
        };
        let out = |co| ConvBlock::new(ConvBlockSpec::plain(Conv2dSpec::new(hid, co, 1).with_bias(true)));
        RlddHead {
            stems: cfg
                .level_channels
                .iter()
                .map(|&c| ConvBlock::new(ConvBlockSpec::conv_bn_silu(c, hid, 1, 1).in_form(form)))
                .collect(),
            rep: [rep(), rep()],
            box_out: out(cfg.box_channels()),
            cls_out: out(cfg.nc),
            scales: vec![1.0; 3],
            cfg,
        }
    }

    pub fn forward(&self, feats: [&Tensor; 3]) -> Result<[Tensor; 3]> {
        self.cfg.check_inputs(feats)?;
        if self.rep[0].is_deploy() != self.rep[1].is_deploy() {
            return Err(Error::State("shared RepConv stack mixes train and deploy forms".into()));
        }
        let level = |i: usize| -> Result<Tensor> {
            let y = self.stems[i].forward(feats[i])?;
            let y = self.rep[1].forward(&self.rep[0].forward(&y)?)?;
            let s = self.scales[i];
            let b = self.box_out.forward(&y)?.map(|v| v * s);
            let c = self.cls_out.forward(&y)?;
            concat_channels(&[&b, &c])
        };
        Ok([level(0)?, level(1)?, level(2)?])
    }
}

impl Parameterized for RlddHead {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        for (s, name) in self.stems.iter().zip(LEVEL_NAMES) {
            s.visit_params(&join(prefix, &format!("{name}.stem")), f);
        }
        self.rep[0].visit_params(&join(prefix, "rep0"), f);
        self.rep[1].visit_params(&join(prefix, "rep1"), f);
        self.box_out.visit_params(&join(prefix, "box.out"), f);
        self.cls_out.visit_params(&join(prefix, "cls.out"), f);
        visit_vec(prefix, "scales", ParamRole::Scale, &self.scales, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        for (s, name) in self.stems.iter_mut().zip(LEVEL_NAMES) {
            s.visit_params_mut(&join(prefix, &format!("{name}.stem")), f)?;
        }
        self.rep[0].visit_params_mut(&join(prefix, "rep0"), f)?;
        self.rep[1].visit_params_mut(&join(prefix, "rep1"), f)?;
        self.box_out.visit_params_mut(&join(prefix, "box.out"), f)?;
        self.cls_out.visit_params_mut(&join(prefix, "cls.out"), f)?;
        visit_vec_mut(prefix, "scales", ParamRole::Scale, &mut self.scales, f)
    }
}

// built once per graph and never moved in hot loops
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum DetectHead {
    Baseline(BaselineHead),
    Rldd(RlddHead),
}

impl DetectHead {
    pub fn new(kind: HeadKind, cfg: HeadConfig, form: Form) -> Self {
        match kind {
            HeadKind::Baseline => DetectHead::Baseline(BaselineHead::new(cfg, form)),
            HeadKind::Rldd => DetectHead::Rldd(RlddHead::new(cfg, form)),
        }
    }

    pub fn cfg(&self) -> &HeadConfig {
        match self {
            DetectHead::Baseline(h) => &h.cfg,
            DetectHead::Rldd(h) => &h.cfg,
        }
    }

    pub fn forward(&self, feats: [&Tensor; 3]) -> Result<[Tensor; 3]> {
        match self {
            DetectHead::Baseline(h) => h.forward(feats),
            DetectHead::Rldd(h) => h.forward(feats),
        }
    }

    /// Profiles all three levels; returns the per-level output dims.
    pub fn profile_levels(
        &self,
        prefix: &str,
        inputs: [[usize; 4]; 3],
        out: &mut Vec<LayerRecord>,
    ) -> Result<[[usize; 4]; 3]> {
        let mut dims = [[0; 4]; 3];
        for (i, name) in LEVEL_NAMES.iter().enumerate() {
            let p = join(prefix, name);
            let input = inputs[i];
            let (b, c) = match self {
                DetectHead::Baseline(h) => {
                    let l = &h.levels[i];
                    let d = l.box_convs[0].profile(&join(&p, "box.0"), input, out)?;
                    let d = l.box_convs[1].profile(&join(&p, "box.1"), d, out)?;
                    let b = l.box_out.profile(&join(&p, "box.out"), d, out)?;
                    let d = l.cls_convs[0].profile(&join(&p, "cls.0"), input, out)?;
                    let d = l.cls_convs[1].profile(&join(&p, "cls.1"), d, out)?;
                    (b, l.cls_out.profile(&join(&p, "cls.out"), d, out)?)
                }
                DetectHead::Rldd(h) => {
                    let d = h.stems[i].profile(&join(&p, "stem"), input, out)?;
                    let d = h.rep[0].profile(&join(&p, "rep0"), d, out)?;
                    let d = h.rep[1].profile(&join(&p, "rep1"), d, out)?;
                    let b = h.box_out.profile(&join(&p, "box.out"), d, out)?;
                    push_elementwise(out, join(&p, "box.scale"), LayerKind::Scale, b);
                    (b, h.cls_out.profile(&join(&p, "cls.out"), d, out)?)
                }
            };
            dims[i] = [b[0], b[1] + c[1], b[2], b[3]];
            push_elementwise(out, join(&p, "concat"), LayerKind::Concat, dims[i]);
        }
        Ok(dims)
    }
}

impl Parameterized for DetectHead {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        match self {
            DetectHead::Baseline(h) => h.visit_params(prefix, f),
            DetectHead::Rldd(h) => h.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        match self {
            DetectHead::Baseline(h) => h.visit_params_mut(prefix, f),
            DetectHead::Rldd(h) => h.visit_params_mut(prefix, f),
        }
    }
}
