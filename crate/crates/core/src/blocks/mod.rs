//! Composite network blocks built on the tensor kernels.

pub mod attention;
pub mod conv;
pub mod csp;
pub mod head;
pub mod repconv;

pub use attention::{MscaBlock, SegNextAttention, StripPair, STRIP_LENGTHS};
pub use conv::{Activation, ConvBlock, ConvBlockSpec, Form};
pub use csp::{Bottleneck, BottleneckUnit, C2fBlock, C2fSpec, C2fVariant, EmcmBlock, SppfBlock};
pub use head::{BaselineHead, BaselineLevel, DetectHead, HeadConfig, HeadKind, RlddHead, LEVEL_NAMES};
pub use repconv::{RepConvBlock, RepConvForm};
