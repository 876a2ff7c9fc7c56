//! Deterministic parameter initialization.
//!
//! The generator is ChaCha8 (`rand_chacha`) seeded from a `u64`; parameters
//! draw from it in traversal order, so a given graph and seed always yield
//! the same bits.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamRole, Parameterized};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Half-width of the uniform conv weight distribution: `√(1/fan_in)`.
pub fn weight_bound(fan_in: usize) -> f32 {
    (1.0 / fan_in.max(1) as f32).sqrt()
}

/// Conv weights uniform in `±√(1/fan_in)`; biases 0; batch norm identity
/// (γ = 1, β = 0, μ = 0, σ² = 1); head scales 1.
pub fn init_params<P: Parameterized + ?Sized>(p: &mut P, rng: &mut ChaCha8Rng) -> Result<()> {
    p.visit_params_mut("", &mut |slot| {
        match slot.role {
            ParamRole::ConvWeight => {
                let b = weight_bound(slot.fan_in);
                slot.data.iter_mut().for_each(|v| *v = rng.gen_range(-b..=b));
            }
            ParamRole::ConvBias | ParamRole::BnBeta | ParamRole::BnMean => slot.data.fill(0.0),
            ParamRole::BnGamma | ParamRole::BnVar | ParamRole::Scale => slot.data.fill(1.0),
        }
        Ok(())
    })
}

/// Like [`init_params`] but also randomizes biases, batch norm statistics
/// and scales, so that every branch and fold is exercised.
pub fn randomize_all<P: Parameterized + ?Sized>(p: &mut P, rng: &mut ChaCha8Rng) -> Result<()> {
    p.visit_params_mut("", &mut |slot| {
        let range = match slot.role {
            ParamRole::ConvWeight => {
                let b = weight_bound(slot.fan_in);
                -b..=b
            }
            ParamRole::ConvBias | ParamRole::BnBeta | ParamRole::BnMean => -0.5..=0.5,
            ParamRole::BnGamma => 0.5..=1.5,
            ParamRole::BnVar => 0.5..=2.0,
            ParamRole::Scale => 0.5..=1.5,
        };
        slot.data.iter_mut().for_each(|v| *v = rng.gen_range(range.clone()));
        Ok(())
    })
}

pub fn random_tensor(dims: [usize; 4], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(lo..=hi))
}
