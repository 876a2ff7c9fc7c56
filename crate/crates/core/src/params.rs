//! Named parameter traversal.
//!
//! Every block reports its tensors through [`Parameterized`]: once read-only
//! (counting, export) and once mutable (initialization, import). Names are
//! dotted paths built from the node name and field roles, e.g.
//! `model.6.m.0.cv1.fuse.bn.gamma`.

use crate::error::Result;
use crate::tensor::BatchNormParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
    /// Per-level box scale of the reparameterized head.
    Scale,
}

impl ParamRole {
    /// Running statistics are state, not learnable parameters.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamRole::BnMean | ParamRole::BnVar)
    }
}

/// Read-only view of one named parameter.
pub struct ParamRef<'a> {
    pub name: &'a str,
    pub role: ParamRole,
    pub dims: &'a [usize],
    pub data: &'a [f32],
    /// Inputs per output element for conv weights; 0 otherwise.
    pub fan_in: usize,
}

pub struct ParamMut<'a> {
    pub name: &'a str,
    pub role: ParamRole,
    pub dims: &'a [usize],
    pub data: &'a mut [f32],
    pub fan_in: usize,
}

pub type Visit<'v> = dyn FnMut(ParamRef<'_>) + 'v;
pub type VisitMut<'v> = dyn FnMut(ParamMut<'_>) -> Result<()> + 'v;

pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>);

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()>;

    /// Learnable scalars, running statistics excluded.
    fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |p| {
            if p.role.is_learnable() {
                total += p.data.len();
            }
        });
        total
    }
}

/// `prefix.name`, or just `name` at the root.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_vec(prefix: &str, name: &str, role: ParamRole, v: &[f32], f: &mut Visit<'_>) {
    let full = join(prefix, name);
    f(ParamRef {
        name: &full,
        role,
        dims: &[v.len()],
        data: v,
        fan_in: 0,
    });
}

pub(crate) fn visit_vec_mut(
    prefix: &str,
    name: &str,
    role: ParamRole,
    v: &mut [f32],
    f: &mut VisitMut<'_>,
) -> Result<()> {
    let full = join(prefix, name);
    let len = v.len();
    f(ParamMut {
        name: &full,
        role,
        dims: &[len],
        data: v,
        fan_in: 0,
    })
}

impl Parameterized for BatchNormParams {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_>) {
        visit_vec(prefix, "gamma", ParamRole::BnGamma, &self.gamma, f);
        visit_vec(prefix, "beta", ParamRole::BnBeta, &self.beta, f);
        visit_vec(prefix, "mean", ParamRole::BnMean, &self.running_mean, f);
        visit_vec(prefix, "var", ParamRole::BnVar, &self.running_var, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) -> Result<()> {
        visit_vec_mut(prefix, "gamma", ParamRole::BnGamma, &mut self.gamma, f)?;
        visit_vec_mut(prefix, "beta", ParamRole::BnBeta, &mut self.beta, f)?;
        visit_vec_mut(prefix, "mean", ParamRole::BnMean, &mut self.running_mean, f)?;
        visit_vec_mut(prefix, "var", ParamRole::BnVar, &mut self.running_var, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_norm_counts_affine_only() {
        let bn = BatchNormParams::identity(8);
        assert_eq!(bn.param_count(), 16);
        let mut names = Vec::new();
        bn.visit_params("x.bn", &mut |p| names.push(p.name.to_string()));
        assert_eq!(names, ["x.bn.gamma", "x.bn.beta", "x.bn.mean", "x.bn.var"]);
    }

    #[test]
    fn join_at_root() {
        assert_eq!(join("", "w"), "w");
        assert_eq!(join("a.b", "w"), "a.b.w");
    }
}
