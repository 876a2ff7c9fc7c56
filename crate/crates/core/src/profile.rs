//! Primitive-layer listings for cost accounting.
//!
//! A block's profile flattens it into the primitive operations its forward
//! executes (conv, batch norm, activation, pool, add/mul, resampling), each
//! with its output dims and cost. Multiply-accumulates are counted only for
//! convolutions; normalization, activation, pooling and elementwise
//! arithmetic count `c·h·w` elementwise ops each.

use crate::error::Result;
use crate::tensor::Conv2dSpec;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { kernel: (usize, usize), groups: usize, bias: bool },
    BatchNorm,
    Silu,
    Gelu,
    MaxPool,
    AvgPool,
    Add,
    Mul,
    /// Box-map scaling in the reparameterized head.
    Scale,
    Upsample,
    Concat,
    Split,
}

impl LayerKind {
    pub fn label(&self) -> String {
        match self {
            LayerKind::Conv { kernel, groups, .. } if *groups > 1 => format!("dwconv{}x{}", kernel.0, kernel.1),
            LayerKind::Conv { kernel, .. } => format!("conv{}x{}", kernel.0, kernel.1),
            other => format!("{other:?}").to_lowercase(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub out_dims: [usize; 4],
    pub macs: u64,
    pub elementwise_ops: u64,
}

pub trait Profile {
    /// Appends this block's primitive layers for an input of `input` dims and
    /// returns the output dims.
    fn profile(&self, prefix: &str, input: [usize; 4], out: &mut Vec<LayerRecord>) -> Result<[usize; 4]>;
}

pub(crate) fn elem_count(d: [usize; 4]) -> u64 {
    d.iter().product::<usize>() as u64
}

pub(crate) fn push_conv(
    out: &mut Vec<LayerRecord>,
    name: String,
    spec: &Conv2dSpec,
    input: [usize; 4],
) -> Result<[usize; 4]> {
    let (oh, ow) = spec.output_hw(input[2], input[3])?;
    let dims = [input[0], spec.out_ch, oh, ow];
    out.push(LayerRecord {
        name,
        kind: LayerKind::Conv {
            kernel: spec.kernel,
            groups: spec.groups,
            bias: spec.has_bias,
        },
        out_dims: dims,
        macs: input[0] as u64 * spec.macs(input[2], input[3])?,
        elementwise_ops: 0,
    });
    Ok(dims)
}

pub(crate) fn push_elementwise(out: &mut Vec<LayerRecord>, name: String, kind: LayerKind, dims: [usize; 4]) {
    let ops = match kind {
        LayerKind::Upsample | LayerKind::Concat | LayerKind::Split => 0,
        _ => elem_count(dims),
    };
    out.push(LayerRecord {
        name,
        kind,
        out_dims: dims,
        macs: 0,
        elementwise_ops: ops,
    });
}
