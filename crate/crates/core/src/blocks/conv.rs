use crate::error::{Error, Result};
use crate::params::{join, ParamMut, ParamRef, ParamRole, Parameterized, Visit, VisitMut};
use crate::profile::{push_conv, push_elementwise, LayerKind, LayerRecord, Profile};
use crate::tensor::{batch_norm_inference, conv2d, silu, BatchNormParams, Conv2dSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Silu,
}

impl Activation {
    pub fn apply(self, x: Tensor) -> Tensor {
        match self {
            Activation::Identity => x,
            Activation::Silu => silu(&x),
        }
    }
}

/// Whether blocks carry their training-time structure (separate batch norms,
/// multi-branch RepConv) or the folded inference structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Form {
    Train,
    Deploy,
}

/// Structure of a conv unit without its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub conv: Conv2dSpec,
    pub norm: bool,
    pub act: Activation,
}

impl ConvBlockSpec {
    /// The family's standard Conv-BN-SiLU unit with same padding.
    pub fn conv_bn_silu(in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        ConvBlockSpec {
            conv: Conv2dSpec::new(in_ch, out_ch, k).with_stride(stride),
            norm: true,
            act: Activation::Silu,
        }
    }

    /// A bare conv (bias per `conv.has_bias`), no norm, no activation.
    pub fn plain(conv: Conv2dSpec) -> Self {
        ConvBlockSpec {
            conv,
            norm: false,
            act: Activation::Identity,
        }
    }

    pub fn with_act(mut self, act: Activation) -> Self {
        self.act = act;
        self
    }

    /// The same unit after its batch norm is folded into a conv bias.
    pub fn folded(mut self) -> Self {
        if self.norm {
            self.norm = false;
            self.conv.has_bias = true;
        }
        self
    }

    pub fn in_form(self, form: Form) -> Self {
        match form {
            Form::Train => self,
            Form::Deploy => self.folded(),
        }
    }
}

/// Conv → optional batch norm → activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub spec: Conv2dSpec,
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
    pub bn: Option<BatchNormParams>,
    pub act: Activation,
}

impl ConvBlock {
    /// Zero weights and identity batch norm. A normalized unit never has a
    /// conv bias.
    pub fn new(bs: ConvBlockSpec) -> Self {
        let mut spec = bs.conv;
        if bs.norm {
            spec.has_bias = false;
        }
        ConvBlock {
            spec,
            weight: Tensor::zeros(spec.weight_dims()),
            bias: spec.has_bias.then(|| vec![0.0; spec.out_ch]),
            bn: bs.norm.then(|| BatchNormParams::identity(spec.out_ch)),
            act: bs.act,
        }
    }

    pub fn block_spec(&self) -> ConvBlockSpec {
        ConvBlockSpec {
            conv: self.spec,
            norm: self.bn.is_some(),
            act: self.act,
        }
    }

    pub fn in_ch(&self) -> usize {
        self.spec.in_ch
    }

    pub fn out_ch(&self) -> usize {
        self.spec.out_ch
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.bn.is_some() && self.bias.is_some() {
            return Err(Error::State("conv unit has both a bias and a batch norm".into()));
        }
        let mut y = conv2d(x, &self.spec, &self.weight, self.bias.as_deref())?;
        if let Some(bn) = &self.bn {
            y = batch_norm_inference(&y, bn)?;
        }
        Ok(self.act.apply(y))
    }
}

impl Parameterized for ConvBlock {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        let name = join(prefix, "w");
        f(ParamRef {
            name: &name,
            role: ParamRole::ConvWeight,
            dims: &self.weight.dims(),
            data: self.weight.data(),
            fan_in: self.spec.fan_in(),
        });
        if let Some(b) = &self.bias {
            crate::params::visit_vec(prefix, "b", ParamRole::ConvBias, b, f);
        }
        if let Some(bn) = &self.bn {
            bn.visit_params(&join(prefix, "bn"), f);
        }
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
        if let Some(b) = &mut self.bias {
            crate::params::visit_vec_mut(prefix, "b", ParamRole::ConvBias, b, f)?;
        }
        if let Some(bn) = &mut self.bn {
            bn.visit_params_mut(&join(prefix, "bn"), f)?;
        }
        Ok(())
    }
}

impl Profile for ConvBlock {
    fn profile(&self, prefix: &str, input: [usize; 4], out: &mut Vec<LayerRecord>) -> Result<[usize; 4]> {
        let dims = push_conv(out, join(prefix, "conv"), &self.spec, input)?;
        if self.bn.is_some() {
            push_elementwise(out, join(prefix, "bn"), LayerKind::BatchNorm, dims);
        }
        if self.act == Activation::Silu {
            push_elementwise(out, join(prefix, "act"), LayerKind::Silu, dims);
        }
        Ok(dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::randomize_all;
    use crate::tensor::{batch_norm_inference, conv2d, silu};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_unit_passes_input() {
        let mut blk = ConvBlock::new(ConvBlockSpec::conv_bn_silu(2, 2, 1, 1).with_act(Activation::Identity));
        blk.weight = Tensor::from_vec([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        blk.bn = Some(BatchNormParams::identity(2).with_eps(0.0));
        let x = Tensor::from_fn([1, 2, 3, 3], |_, c, y, x| (c * 9 + y * 3 + x) as f32 - 4.0);
        assert_eq!(blk.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_silu_of_beta() {
        let mut blk = ConvBlock::new(ConvBlockSpec::conv_bn_silu(3, 2, 3, 1));
        let bn = blk.bn.as_mut().unwrap();
        bn.beta = vec![0.5, -1.0];
        let y = blk.forward(&Tensor::full([1, 3, 4, 4], 9.0)).unwrap();
        for c in 0..2 {
            let expect = crate::tensor::silu_scalar([0.5, -1.0][c]);
            assert!(y.plane(0, c).iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn matches_op_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut blk = ConvBlock::new(ConvBlockSpec::conv_bn_silu(4, 6, 3, 2));
        randomize_all(&mut blk, &mut rng).unwrap();
        let x = crate::init::random_tensor([2, 4, 9, 7], -1.0, 1.0, &mut rng);
        let reference = silu(
            &batch_norm_inference(&conv2d(&x, &blk.spec, &blk.weight, None).unwrap(), blk.bn.as_ref().unwrap())
                .unwrap(),
        );
        assert_eq!(blk.forward(&x).unwrap(), reference);
    }

    #[test]
    fn param_names_and_count() {
        let blk = ConvBlock::new(ConvBlockSpec::conv_bn_silu(3, 16, 3, 2));
        assert_eq!(blk.param_count(), 3 * 16 * 9 + 16 + 16);
        let mut names = Vec::new();
        blk.visit_params("model.0", &mut |p| names.push(p.name.to_string()));
        assert_eq!(names[0], "model.0.w");
        assert_eq!(names[1], "model.0.bn.gamma");
    }
}
