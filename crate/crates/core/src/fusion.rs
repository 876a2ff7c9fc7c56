//! Folding batch norms into convolutions and collapsing RepConv branches.

use crate::blocks::{
    Bottleneck, BottleneckUnit, BaselineHead, BaselineLevel, C2fBlock, ConvBlock, DetectHead, EmcmBlock,
    MscaBlock, RepConvBlock, RepConvForm, RlddHead, SegNextAttention, SppfBlock,
};
use crate::blocks::repconv::rep_conv_spec;
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Network};
use crate::params::{join, visit_vec, visit_vec_mut, ParamMut, ParamRef, ParamRole, Parameterized, Visit, VisitMut};
use crate::tensor::{conv2d, BatchNormParams, Conv2dSpec, Tensor};

/// The single biased 3×3 conv a RepConv block collapses to.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv {
    pub spec: Conv2dSpec,
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl FusedConv {
    pub fn zeros(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let spec = rep_conv_spec(in_ch, out_ch, stride);
        FusedConv {
            weight: Tensor::zeros(spec.weight_dims()),
            bias: vec![0.0; out_ch],
            spec,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.spec, &self.weight, Some(&self.bias))
    }
}

impl Parameterized for FusedConv {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        let name = join(prefix, "w");
        f(ParamRef {
            name: &name,
            role: ParamRole::ConvWeight,
            dims: &self.weight.dims(),
            data: self.weight.data(),
            fan_in: self.spec.fan_in(),
        });
        visit_vec(prefix, "b", ParamRole::ConvBias, &self.bias, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        let name = join(prefix, "w");
        let dims = self.weight.dims();
        f(ParamMut {
            name: &name,
            role: ParamRole::ConvWeight,
            dims: &dims,
            data: self.weight.data_mut(),
            fan_in: self.spec.fan_in(),
        })?;
        visit_vec_mut(prefix, "b", ParamRole::ConvBias, &mut self.bias, f)
    }
}

/// `W' = W·γ/√(var+ε)` per output channel, `b' = β + (b − μ)·γ/√(var+ε)`.
pub fn fuse_conv_bn(weight: &Tensor, bias: Option<&[f32]>, bn: &BatchNormParams) -> Result<(Tensor, Vec<f32>)> {
    bn.validate()?;
    let out_ch = weight.n();
    if bn.channels() != out_ch {
        return Err(Error::shape("batch norm channels", out_ch, bn.channels()));
    }
    if let Some(b) = bias {
        if b.len() != out_ch {
            return Err(Error::shape("bias length", out_ch, b.len()));
        }
    }
    let per_out = weight.len() / out_ch.max(1);
    let mut w = weight.clone();
    let mut fused_bias = Vec::with_capacity(out_ch);
    for o in 0..out_ch {
        let scale = f64::from(bn.gamma[o]) / (f64::from(bn.running_var[o]) + f64::from(bn.eps)).sqrt();
        for v in &mut w.data_mut()[o * per_out..(o + 1) * per_out] {
            *v = (f64::from(*v) * scale) as f32;
        }
        let b = bias.map_or(0.0, |b| f64::from(b[o]));
        fused_bias.push((f64::from(bn.beta[o]) + (b - f64::from(bn.running_mean[o])) * scale) as f32);
    }
    Ok((w, fused_bias))
}

/// Places a `[o, i, 1, 1]` kernel at the centre of a zero 3×3 kernel.
pub fn lower_1x1_to_3x3(weight: &Tensor) -> Result<Tensor> {
    let [o, i, kh, kw] = weight.dims();
    if (kh, kw) != (1, 1) {
        return Err(Error::Unsupported(format!("cannot lower a {kh}x{kw} kernel as 1x1")));
    }
    let mut k = Tensor::zeros([o, i, 3, 3]);
    for oc in 0..o {
        for ic in 0..i {
            k.set(oc, ic, 1, 1, weight.at(oc, ic, 0, 0));
        }
    }
    Ok(k)
}

/// The 3×3 kernel equal to a stride-1, pad-1 average pool that counts
/// padded cells: `1/9` on the channel diagonal, zero elsewhere.
pub fn avg_pool_as_3x3(in_ch: usize, out_ch: usize, stride: usize) -> Result<Tensor> {
    if stride != 1 {
        return Err(Error::Unsupported(format!("average pool branch with stride {stride}")));
    }
    if in_ch != out_ch {
        return Err(Error::Unsupported(format!(
            "average pool branch maps {in_ch} channels to {out_ch}"
        )));
    }
    let mut k = Tensor::zeros([out_ch, in_ch, 3, 3]);
    for c in 0..out_ch {
        k.plane_mut(c, c).fill(1.0 / 9.0);
    }
    Ok(k)
}

fn folded_parts(unit: &ConvBlock) -> Result<(Tensor, Vec<f32>)> {
    match &unit.bn {
        Some(bn) => fuse_conv_bn(&unit.weight, unit.bias.as_deref(), bn),
        None => Ok((
            unit.weight.clone(),
            unit.bias.clone().unwrap_or_else(|| vec![0.0; unit.out_ch()]),
        )),
    }
}

/// Collapses a train-form RepConv into one 3×3 conv.
pub fn fuse_repconv(blk: &RepConvBlock) -> Result<FusedConv> {
    let RepConvForm::Train {
        branch_3x3,
        branch_1x1,
        branch_avg,
    } = &blk.form
    else {
        return Err(Error::State("RepConv block is already fused".into()));
    };
    let (w3, b3) = folded_parts(branch_3x3)?;
    let (w1, b1) = folded_parts(branch_1x1)?;
    let w1 = lower_1x1_to_3x3(&w1)?;
    let mut weight = w3;
    for (a, b) in weight.data_mut().iter_mut().zip(w1.data()) {
        *a += b;
    }
    let mut bias: Vec<f32> = b3.iter().zip(&b1).map(|(a, b)| a + b).collect();
    if let Some(bn) = branch_avg {
        let pool = avg_pool_as_3x3(blk.in_ch, blk.out_ch, blk.stride)?;
        let (wa, ba) = fuse_conv_bn(&pool, None, bn)?;
        for (a, b) in weight.data_mut().iter_mut().zip(wa.data()) {
            *a += b;
        }
        for (a, b) in bias.iter_mut().zip(&ba) {
            *a += b;
        }
    }
    Ok(FusedConv {
        spec: rep_conv_spec(blk.in_ch, blk.out_ch, blk.stride),
        weight,
        bias,
    })
}

/// Produces the inference-form equivalent of a block. Already-fused blocks
/// come back unchanged.
pub trait Fuse: Sized {
    fn fuse(&self) -> Result<Self>;
}

impl Fuse for ConvBlock {
    fn fuse(&self) -> Result<Self> {
        let Some(bn) = &self.bn else {
            return Ok(self.clone());
        };
        let (weight, bias) = fuse_conv_bn(&self.weight, self.bias.as_deref(), bn)?;
        Ok(ConvBlock {
            spec: self.spec.with_bias(true),
            weight,
            bias: Some(bias),
            bn: None,
            act: self.act,
        })
    }
}

impl Fuse for RepConvBlock {
    fn fuse(&self) -> Result<Self> {
        if self.is_deploy() {
            return Ok(self.clone());
        }
        Ok(RepConvBlock {
            form: RepConvForm::Deploy(fuse_repconv(self)?),
            ..self.clone()
        })
    }
}

impl Fuse for EmcmBlock {
    fn fuse(&self) -> Result<Self> {
        Ok(EmcmBlock {
            path3: self.path3.fuse()?,
            path5: self.path5.fuse()?,
            fuse: self.fuse.fuse()?,
            in_ch: self.in_ch,
            out_ch: self.out_ch,
        })
    }
}

impl Fuse for BottleneckUnit {
    fn fuse(&self) -> Result<Self> {
        Ok(match self {
            BottleneckUnit::Conv(c) => BottleneckUnit::Conv(c.fuse()?),
            BottleneckUnit::Emcm(e) => BottleneckUnit::Emcm(e.fuse()?),
        })
    }
}

impl Fuse for Bottleneck {
    fn fuse(&self) -> Result<Self> {
        Ok(Bottleneck {
            cv1: self.cv1.fuse()?,
            cv2: self.cv2.fuse()?,
            add: self.add,
        })
    }
}

impl Fuse for C2fBlock {
    fn fuse(&self) -> Result<Self> {
        Ok(C2fBlock {
            spec: self.spec,
            cv1: self.cv1.fuse()?,
            m: self.m.iter().map(Fuse::fuse).collect::<Result<_>>()?,
            cv2: self.cv2.fuse()?,
        })
    }
}

impl Fuse for SppfBlock {
    fn fuse(&self) -> Result<Self> {
        Ok(SppfBlock {
            channels: self.channels,
            cv1: self.cv1.fuse()?,
            cv2: self.cv2.fuse()?,
        })
    }
}

impl Fuse for MscaBlock {
    fn fuse(&self) -> Result<Self> {
        Ok(self.clone())
    }
}

impl Fuse for SegNextAttention {
    fn fuse(&self) -> Result<Self> {
        Ok(self.clone())
    }
}

impl Fuse for BaselineLevel {
    fn fuse(&self) -> Result<Self> {
        Ok(BaselineLevel {
            box_convs: [self.box_convs[0].fuse()?, self.box_convs[1].fuse()?],
            box_out: self.box_out.fuse()?,
            cls_convs: [self.cls_convs[0].fuse()?, self.cls_convs[1].fuse()?],
            cls_out: self.cls_out.fuse()?,
        })
    }
}

impl Fuse for BaselineHead {
    fn fuse(&self) -> Result<Self> {
        Ok(BaselineHead {
            cfg: self.cfg.clone(),
            levels: self.levels.iter().map(Fuse::fuse).collect::<Result<_>>()?,
        })
    }
}

impl Fuse for RlddHead {
    fn fuse(&self) -> Result<Self> {
        Ok(RlddHead {
            cfg: self.cfg.clone(),
            stems: self.stems.iter().map(Fuse::fuse).collect::<Result<_>>()?,
            rep: [self.rep[0].fuse()?, self.rep[1].fuse()?],
            box_out: self.box_out.fuse()?,
            cls_out: self.cls_out.fuse()?,
            scales: self.scales.clone(),
        })
    }
}

impl Fuse for DetectHead {
    fn fuse(&self) -> Result<Self> {
        Ok(match self {
            DetectHead::Baseline(h) => DetectHead::Baseline(h.fuse()?),
            DetectHead::Rldd(h) => DetectHead::Rldd(h.fuse()?),
        })
    }
}

/// The inference-form structure of a graph. Idempotent.
pub fn fuse_model_graph(graph: &ModelGraph) -> ModelGraph {
    graph.in_form(crate::blocks::Form::Deploy)
}

/// Folds every batch norm and RepConv in a weighted network.
pub fn fuse_network(net: &Network) -> Result<Network> {
    net.fuse()
}
