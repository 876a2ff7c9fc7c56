use crate::blocks::conv::{Activation, ConvBlock, ConvBlockSpec};
use crate::error::{Error, Result};
use crate::fusion::FusedConv;
use crate::params::{join, Parameterized, Visit, VisitMut};
use crate::profile::{push_conv, push_elementwise, LayerKind, LayerRecord, Profile};
use crate::tensor::{add, batch_norm_inference, pool2d, silu, BatchNormParams, Conv2dSpec, PoolMode, Tensor};

/// Multi-branch 3×3 convolution that collapses to a single conv.
///
/// Train form sums a 3×3 conv+BN, a 1×1 conv+BN and (stride 1, equal
/// channels only) a 3×3 average pool+BN, then applies SiLU. Deploy form is
/// one biased 3×3 conv followed by SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct RepConvBlock {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub form: RepConvForm,
}

// built once per graph and never moved in hot loops
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum RepConvForm {
    Train {
        branch_3x3: ConvBlock,
        branch_1x1: ConvBlock,
        branch_avg: Option<BatchNormParams>,
    },
    Deploy(FusedConv),
}

impl RepConvBlock {
    /// Train form with zero weights and identity batch norms.
    pub fn new(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let unit = |k: usize| {
            ConvBlock::new(ConvBlockSpec::conv_bn_silu(in_ch, out_ch, k, stride).with_act(Activation::Identity))
        };
        RepConvBlock {
            in_ch,
            out_ch,
            stride,
            form: RepConvForm::Train {
                branch_3x3: unit(3),
                branch_1x1: unit(1),
                branch_avg: Self::has_avg_branch(in_ch, out_ch, stride).then(|| BatchNormParams::identity(out_ch)),
            },
        }
    }

    /// Deploy form holding zeros, for building fused graphs before loading.
    pub fn new_deploy(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        RepConvBlock {
            in_ch,
            out_ch,
            stride,
            form: RepConvForm::Deploy(FusedConv::zeros(in_ch, out_ch, stride)),
        }
    }

    /// The pooling branch needs stride 1 and a channel-preserving block so
    /// that it aligns with the conv branches.
    pub fn has_avg_branch(in_ch: usize, out_ch: usize, stride: usize) -> bool {
        stride == 1 && in_ch == out_ch
    }

    pub fn is_deploy(&self) -> bool {
        matches!(self.form, RepConvForm::Deploy(_))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.form {
            RepConvForm::Train {
                branch_3x3,
                branch_1x1,
                branch_avg,
            } => {
                let mut sum = add(&branch_3x3.forward(x)?, &branch_1x1.forward(x)?)?;
                if let Some(bn) = branch_avg {
                    if self.stride != 1 {
                        return Err(Error::State("average branch present on a strided RepConv".into()));
                    }
                    let pooled = batch_norm_inference(&pool2d(x, PoolMode::Avg, 3, 1, 1)?, bn)?;
                    sum = add(&sum, &pooled)?;
                }
                Ok(silu(&sum))
            }
            RepConvForm::Deploy(fused) => Ok(silu(&fused.forward(x)?)),
        }
    }
}

impl Parameterized for RepConvBlock {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        match &self.form {
            RepConvForm::Train {
                branch_3x3,
                branch_1x1,
                branch_avg,
            } => {
                branch_3x3.visit_params(&join(prefix, "branch_3x3"), f);
                branch_1x1.visit_params(&join(prefix, "branch_1x1"), f);
                if let Some(bn) = branch_avg {
                    bn.visit_params(&join(prefix, "branch_avg.bn"), f);
                }
            }
            RepConvForm::Deploy(fused) => fused.visit_params(&join(prefix, "fused"), f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        match &mut self.form {
            RepConvForm::Train {
                branch_3x3,
                branch_1x1,
                branch_avg,
            } => {
                branch_3x3.visit_params_mut(&join(prefix, "branch_3x3"), f)?;
                branch_1x1.visit_params_mut(&join(prefix, "branch_1x1"), f)?;
                if let Some(bn) = branch_avg {
                    bn.visit_params_mut(&join(prefix, "branch_avg.bn"), f)?;
                }
                Ok(())
            }
            RepConvForm::Deploy(fused) => fused.visit_params_mut(&join(prefix, "fused"), f),
        }
    }
}

impl Profile for RepConvBlock {
    fn profile(&self, prefix: &str, input: [usize; 4], out: &mut Vec<LayerRecord>) -> Result<[usize; 4]> {
        let dims = match &self.form {
            RepConvForm::Train {
                branch_3x3,
                branch_1x1,
                branch_avg,
            } => {
                let d = branch_3x3.profile(&join(prefix, "branch_3x3"), input, out)?;
                branch_1x1.profile(&join(prefix, "branch_1x1"), input, out)?;
                push_elementwise(out, join(prefix, "branch_sum"), LayerKind::Add, d);
                if branch_avg.is_some() {
                    push_elementwise(out, join(prefix, "branch_avg.pool"), LayerKind::AvgPool, input);
                    push_elementwise(out, join(prefix, "branch_avg.bn"), LayerKind::BatchNorm, d);
                    push_elementwise(out, join(prefix, "branch_avg.sum"), LayerKind::Add, d);
                }
                d
            }
            RepConvForm::Deploy(fused) => push_conv(out, join(prefix, "fused.conv"), &fused.spec, input)?,
        };
        push_elementwise(out, join(prefix, "act"), LayerKind::Silu, dims);
        Ok(dims)
    }
}

/// Geometry shared by every branch once lowered to 3×3.
pub(crate) fn rep_conv_spec(in_ch: usize, out_ch: usize, stride: usize) -> Conv2dSpec {
    Conv2dSpec::new(in_ch, out_ch, 3).with_stride(stride).with_bias(true)
}
