//! Slow, independent re-implementations used to check the fast paths, and
//! the self-test suite built on them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::RepConvBlock;
use crate::fusion::Fuse;
use crate::init::{random_tensor, randomize_all, rng};
use crate::tensor::{Conv2dSpec, Tensor};

/// Direct convolution with `f64` accumulation and explicit bounds checks.
pub fn conv2d_f64(x: &Tensor, spec: &Conv2dSpec, w: &Tensor, bias: Option<&[f32]>) -> Vec<f64> {
    let [n, _, h, wd] = x.dims();
    let (kh, kw) = spec.kernel;
    let ho = (h + 2 * spec.padding.0 - spec.dilation * (kh - 1) - 1) / spec.stride + 1;
    let wo = (wd + 2 * spec.padding.1 - spec.dilation * (kw - 1) - 1) / spec.stride + 1;
    let cin_g = spec.in_ch / spec.groups;
    let cout_g = spec.out_ch / spec.groups;
    let mut out = Vec::with_capacity(n * spec.out_ch * ho * wo);
    for b in 0..n {
        for o in 0..spec.out_ch {
            let g = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| f64::from(bv[o]));
                    for ic in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding.0 as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += f64::from(x.at(b, g * cin_g + ic, iy as usize, ix as usize))
                                    * f64::from(w.at(o, ic, ky, kx));
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Per-element loop convolution in `f32`, accumulating taps in kernel-row,
/// kernel-column, input-channel order and adding the bias last.
pub fn conv2d_loop_f32(x: &Tensor, spec: &Conv2dSpec, w: &Tensor, bias: Option<&[f32]>) -> Vec<f32> {
    let [n, _, h, wd] = x.dims();
    let (kh, kw) = spec.kernel;
    let ho = (h + 2 * spec.padding.0 - spec.dilation * (kh - 1) - 1) / spec.stride + 1;
    let wo = (wd + 2 * spec.padding.1 - spec.dilation * (kw - 1) - 1) / spec.stride + 1;
    let cin_g = spec.in_ch / spec.groups;
    let cout_g = spec.out_ch / spec.groups;
    let mut out = Vec::with_capacity(n * spec.out_ch * ho * wo);
    for b in 0..n {
        for o in 0..spec.out_ch {
            let g = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding.0 as isize;
                            let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding.1 as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ic in 0..cin_g {
                                acc += w.at(o, ic, ky, kx) * x.at(b, g * cin_g + ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    if let Some(bv) = bias {
                        acc += bv[o];
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Average pool that divides by the full window area, padded cells included.
pub fn avg_pool_f64(x: &Tensor, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, w] = x.dims();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut sum = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let (iy, ix) = ((oy * stride + dy) as isize - pad as isize, (ox * stride + dx) as isize - pad as isize);
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                sum += f64::from(x.at(b, ch, iy as usize, ix as usize));
                            }
                        }
                    }
                    out.push(sum / (k * k) as f64);
                }
            }
        }
    }
    out
}

/// Softmax over each run of `group` channels, per pixel, in `f64`.
pub fn softmax_f64(x: &Tensor, group: usize) -> Vec<f64> {
    let [n, c, h, w] = x.dims();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for g in (0..c).step_by(group) {
            for y in 0..h {
                for xx in 0..w {
                    let vals: Vec<f64> = (0..group).map(|k| f64::from(x.at(b, g + k, y, xx))).collect();
                    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = vals.iter().map(|v| (v - m).exp()).sum();
                    for (k, v) in vals.iter().enumerate() {
                        out[((b * c + g + k) * h + y) * w + xx] = (v - m).exp() / s;
                    }
                }
            }
        }
    }
    out
}

/// AP as `Σ over true positives of (1/n)·max precision at any cut at or
/// below that detection`, evaluating precision at every cut of the ranking.
pub fn ap_exhaustive(flags: &[bool], total_truths: usize) -> Option<f64> {
    if total_truths == 0 {
        return None;
    }
    let cuts: Vec<f64> = (1..=flags.len())
        .map(|k| flags[..k].iter().filter(|f| **f).count() as f64 / k as f64)
        .collect();
    let mut ap = 0.0;
    for (k, &f) in flags.iter().enumerate() {
        if f {
            let best = cuts[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / total_truths as f64;
        }
    }
    Some(ap)
}

/// Softmax-expectation over `bins` logits in `f64`.
pub fn dfl_scalar(logits: &[f32]) -> f64 {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().enumerate().map(|(i, v)| i as f64 * v / s).sum()
}

/// Outcome of one self-test suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Random RepConv blocks against their fused form.
pub fn check_repconv_fusion(trials: usize, seed: u64) -> SuiteResult {
    let mut r = rng(seed);
    let mut worst = 0.0f32;
    for t in 0..trials {
        let c = r.gen_range(1..=8);
        let (c_out, stride) = match t % 3 {
            0 => (c, 1),
            1 => (r.gen_range(1..=8), 1),
            _ => (c, 2),
        };
        let mut blk = RepConvBlock::new(c, c_out, stride);
        if randomize_all(&mut blk, &mut r).is_err() {
            return fail("repconv-fusion", format!("trial {t}: randomization failed"));
        }
        let x = random_tensor([1, c, r.gen_range(3..12), r.gen_range(3..12)], -1.0, 1.0, &mut r);
        let d = match (blk.forward(&x), blk.fuse().and_then(|f| f.forward(&x))) {
            (Ok(a), Ok(b)) => a.max_abs_diff(&b),
            (Err(e), _) | (_, Err(e)) => return fail("repconv-fusion", format!("trial {t}: {e}")),
        };
        worst = worst.max(d);
    }
    SuiteResult {
        name: "repconv-fusion",
        passed: worst < 1e-4,
        detail: format!("{trials} blocks, max |train - fused| = {worst:.3e} (limit 1e-4)"),
    }
}

/// A random, valid conv geometry with up to 8 channels.
pub fn random_spec(r: &mut ChaCha8Rng) -> Conv2dSpec {
    let groups = [1, 1, 2][r.gen_range(0..3)];
    let in_ch = groups * r.gen_range(1..=4);
    let out_ch = groups * r.gen_range(1..=4);
    let k = [1, 3, 5][r.gen_range(0..3)];
    Conv2dSpec::new(in_ch, out_ch, k)
        .with_stride(r.gen_range(1..=2))
        .with_padding(r.gen_range(0..=k / 2), r.gen_range(0..=k / 2))
        .with_groups(groups)
        .with_bias(r.gen_bool(0.5))
}

/// The fast convolution against [`conv2d_f64`] on random geometries.
pub fn check_conv(trials: usize, seed: u64) -> SuiteResult {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let spec = random_spec(&mut r);
        let x = random_tensor([1, spec.in_ch, r.gen_range(5..14), r.gen_range(5..14)], -1.0, 1.0, &mut r);
        let w = random_tensor(spec.weight_dims(), -1.0, 1.0, &mut r);
        let b: Vec<f32> = (0..spec.out_ch).map(|_| r.gen_range(-1.0..1.0)).collect();
        let bias = spec.has_bias.then_some(b.as_slice());
        let fast = match crate::tensor::conv2d(&x, &spec, &w, bias) {
            Ok(y) => y,
            Err(e) => return fail("conv-oracle", format!("trial {t}: {e}")),
        };
        let slow = conv2d_f64(&x, &spec, &w, bias);
        if slow.len() != fast.len() {
            return fail("conv-oracle", format!("trial {t}: output size {} vs {}", fast.len(), slow.len()));
        }
        for (a, b) in fast.data().iter().zip(&slow) {
            worst = worst.max((f64::from(*a) - b).abs());
        }
    }
    SuiteResult {
        name: "conv-oracle",
        passed: worst < 1e-5,
        detail: format!("{trials} convolutions, max deviation = {worst:.3e} (limit 1e-5)"),
    }
}

/// The envelope AP against [`ap_exhaustive`] on random rankings.
pub fn check_ap(trials: usize, seed: u64) -> SuiteResult {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let flags: Vec<bool> = (0..r.gen_range(0..30)).map(|_| r.gen_bool(0.5)).collect();
        let tp = flags.iter().filter(|f| **f).count();
        let truths = tp + r.gen_range(0..5);
        if truths == 0 {
            continue;
        }
        let a = crate::eval::average_precision_50(&flags, truths).unwrap_or(f64::NAN);
        let b = ap_exhaustive(&flags, truths).unwrap_or(f64::NAN);
        worst = worst.max((a - b).abs());
    }
    SuiteResult {
        name: "ap-oracle",
        passed: worst < 1e-9,
        detail: format!("{trials} rankings, max deviation = {worst:.3e} (limit 1e-9)"),
    }
}

fn fail(name: &'static str, detail: String) -> SuiteResult {
    SuiteResult {
        name,
        passed: false,
        detail,
    }
}

/// Every embedded suite with fixed seeds.
pub fn selftest() -> Vec<SuiteResult> {
    vec![check_repconv_fusion(100, 1), check_conv(50, 2), check_ap(200, 3)]
}
