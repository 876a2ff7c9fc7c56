//! Deterministic NCHW `f32` kernels.
//!
//! Everything in the engine is built from the functions in this module:
//! direct convolution, inference-mode batch norm, SiLU/GELU, max and average
//! pooling, nearest upsampling, channel concat/split, grouped softmax and
//! elementwise arithmetic. Kernels are straightforward loops with a fixed
//! accumulation order, so a given input always produces the same bits.

use crate::error::{Error, Result};

/// Default epsilon for batch norm layers in the model family.
pub const BN_EPS: f32 = 1e-3;

/// A dense 4-D `(n, c, h, w)` array, row-major with `w` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: [usize; 4], value: f32) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::shape("data length", len, data.len()));
        }
        Ok(Tensor { dims, data })
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every position.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ni, ci, y, x));
                    }
                }
            }
        }
        Tensor { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f32) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.dims;
        ((n * cc + c) * h + y) * w + x
    }

    /// The `h × w` plane of channel `c` in batch item `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest elementwise absolute difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.dims != other.dims {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `(kh, kw)`
    pub kernel: (usize, usize),
    pub stride: usize,
    /// `(ph, pw)`, applied symmetrically on each axis.
    pub padding: (usize, usize),
    pub dilation: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl Conv2dSpec {
    /// Square `k × k` kernel, stride 1, "same" padding `k / 2`, no bias.
    pub fn new(in_ch: usize, out_ch: usize, k: usize) -> Self {
        Conv2dSpec {
            in_ch,
            out_ch,
            kernel: (k, k),
            stride: 1,
            padding: (k / 2, k / 2),
            dilation: 1,
            groups: 1,
            has_bias: false,
        }
    }

    /// Channel-preserving depthwise conv with a `kh × kw` kernel and same padding.
    pub fn depthwise(channels: usize, kh: usize, kw: usize) -> Self {
        Conv2dSpec {
            kernel: (kh, kw),
            padding: (kh / 2, kw / 2),
            groups: channels,
            ..Conv2dSpec::new(channels, channels, 1)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_ch,
            self.in_ch / self.groups.max(1),
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// Inputs feeding each output element.
    pub fn fan_in(&self) -> usize {
        (self.in_ch / self.groups.max(1)) * self.kernel.0 * self.kernel.1
    }

    pub fn param_count(&self) -> usize {
        self.weight_dims().iter().product::<usize>() + if self.has_bias { self.out_ch } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 || self.groups == 0 {
            return Err(Error::Spec("channel counts and groups must be positive".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::Spec("kernel, stride and dilation must be positive".into()));
        }
        if !self.in_ch.is_multiple_of(self.groups) || !self.out_ch.is_multiple_of(self.groups) {
            return Err(Error::Spec(format!(
                "channels {}→{} not divisible by groups {}",
                self.in_ch, self.out_ch, self.groups
            )));
        }
        Ok(())
    }

    /// Output `(h, w)` for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = conv_out_len(h, self.kernel.0, self.stride, self.padding.0, self.dilation)
            .ok_or_else(|| Error::shape("height", self.kernel.0, h + 2 * self.padding.0))?;
        let ow = conv_out_len(w, self.kernel.1, self.stride, self.padding.1, self.dilation)
            .ok_or_else(|| Error::shape("width", self.kernel.1, w + 2 * self.padding.1))?;
        Ok((oh, ow))
    }

    /// Multiply-accumulates for one forward over an `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((self.out_ch * self.fan_in() * oh * ow) as u64)
    }
}

fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = len + 2 * pad;
    if padded < span {
        None
    } else {
        Some((padded - span) / stride + 1)
    }
}

/// Inference-mode batch norm statistics for `c` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    /// γ = 1, β = 0, μ = 0, σ² = 1 with the family default eps.
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
        }
    }

    pub fn with_eps(mut self, eps: f32) -> Self {
        self.eps = eps;
        self
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (name, v) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if v.len() != c {
                return Err(Error::shape(format!("batch norm {name} length"), c, v.len()));
            }
        }
        if self.eps < 0.0 {
            return Err(Error::Numeric(format!("negative batch norm eps {}", self.eps)));
        }
        if let Some(i) = self.running_var.iter().position(|&v| v + self.eps <= 0.0 || v.is_nan()) {
            return Err(Error::Numeric(format!(
                "batch norm channel {i}: running_var + eps = {} is not positive",
                self.running_var[i] + self.eps
            )));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` such that `bn(x) = scale·x + shift`.
    pub fn affine(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        self.validate()?;
        let scale: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.running_mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        Ok((scale, shift))
    }
}

fn expect_channels(x: &Tensor, expected: usize) -> Result<()> {
    if x.c() != expected {
        return Err(Error::shape("channels", expected, x.c()));
    }
    Ok(())
}

/// Direct 2-D convolution.
///
/// Each output element accumulates its products in kernel-row, kernel-column,
/// input-channel order starting from zero; the bias is added last.
pub fn conv2d(x: &Tensor, spec: &Conv2dSpec, weights: &Tensor, bias: Option<&[f32]>) -> Result<Tensor> {
    spec.validate()?;
    expect_channels(x, spec.in_ch)?;
    let wd = spec.weight_dims();
    for (axis, (e, a)) in ["weight out_ch", "weight in_ch/groups", "weight kh", "weight kw"]
        .into_iter()
        .zip(wd.into_iter().zip(weights.dims()))
    {
        if e != a {
            return Err(Error::shape(axis, e, a));
        }
    }
    if let Some(b) = bias {
        if b.len() != spec.out_ch {
            return Err(Error::shape("bias length", spec.out_ch, b.len()));
        }
    }
    let [n, _, h, w] = x.dims();
    let (oh, ow) = spec.output_hw(h, w)?;
    let (kh, kw) = spec.kernel;
    let (ph, pw) = spec.padding;
    let (s, d) = (spec.stride, spec.dilation);
    let cin_g = spec.in_ch / spec.groups;
    let cout_g = spec.out_ch / spec.groups;

    // Valid output index range along one axis for kernel tap `k`.
    let valid = |k: usize, pad: usize, in_len: usize, out_len: usize| -> (usize, usize) {
        let off = (k * d) as isize - pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
        let hi_excl = {
            let limit = in_len as isize - off;
            if limit <= 0 {
                0
            } else {
                ((limit as usize - 1) / s + 1).min(out_len)
            }
        };
        (lo.min(hi_excl), hi_excl)
    };

    let mut out = Tensor::zeros([n, spec.out_ch, oh, ow]);
    let wdata = weights.data();
    for ni in 0..n {
        for oc in 0..spec.out_ch {
            let g = oc / cout_g;
            let mut acc = vec![0.0f32; oh * ow];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid(ky, ph, h, oh);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = valid(kx, pw, w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let x_off = kx * d;
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        let wv = wdata[((oc * cin_g + icg) * kh + ky) * kw + kx];
                        let plane = x.plane(ni, ic);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky * d - ph;
                            let in_row = &plane[iy * w..(iy + 1) * w];
                            let out_row = &mut acc[oy * ow + ox_lo..oy * ow + ox_hi];
                            let first = ox_lo * s + x_off - pw;
                            if s == 1 {
                                for (o, &v) in out_row.iter_mut().zip(&in_row[first..]) {
                                    *o += wv * v;
                                }
                            } else {
                                for (o, &v) in out_row.iter_mut().zip(in_row[first..].iter().step_by(s)) {
                                    *o += wv * v;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                acc.iter_mut().for_each(|v| *v += b[oc]);
            }
            out.plane_mut(ni, oc).copy_from_slice(&acc);
        }
    }
    Ok(out)
}

/// `y = γ·(x − μ)/√(σ² + ε) + β` per channel.
pub fn batch_norm_inference(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    expect_channels(x, p.channels())?;
    p.validate()?;
    let mut out = x.clone();
    for ni in 0..x.n() {
        for c in 0..x.c() {
            let inv = p.gamma[c] / (p.running_var[c] + p.eps).sqrt();
            let (mean, beta) = (p.running_mean[c], p.beta[c]);
            out.plane_mut(ni, c)
                .iter_mut()
                .for_each(|v| *v = (*v - mean) * inv + beta);
        }
    }
    Ok(out)
}

pub fn silu_scalar(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + libm::erff(v * std::f32::consts::FRAC_1_SQRT_2)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    /// Mean over the full window, zero padding included.
    Avg,
}

/// Square-window pooling. Average mode divides by `k·k` even at borders, so
/// it is exactly a fixed convolution.
pub fn pool2d(x: &Tensor, mode: PoolMode, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Spec("pool kernel and stride must be positive".into()));
    }
    let [n, c, h, w] = x.dims();
    let oh = conv_out_len(h, kernel, stride, padding, 1).ok_or_else(|| Error::shape("height", kernel, h + 2 * padding))?;
    let ow = conv_out_len(w, kernel, stride, padding, 1).ok_or_else(|| Error::shape("width", kernel, w + 2 * padding))?;
    let area = (kernel * kernel) as f32;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = match mode {
                        PoolMode::Max => f32::NEG_INFINITY,
                        PoolMode::Avg => 0.0,
                    };
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = plane[iy as usize * w + ix as usize];
                            match mode {
                                PoolMode::Max => acc = acc.max(v),
                                PoolMode::Avg => acc += v,
                            }
                        }
                    }
                    dst[oy * ow + ox] = match mode {
                        PoolMode::Max => acc,
                        PoolMode::Avg => acc / area,
                    };
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for ni in 0..n {
        for ci in 0..c {
            let src = x.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for y in 0..2 * h {
                let row = &src[(y / 2) * w..(y / 2 + 1) * w];
                for (xo, v) in dst[y * 2 * w..(y + 1) * 2 * w].iter_mut().enumerate() {
                    *v = row[xo / 2];
                }
            }
        }
    }
    out
}

/// Concatenates along the channel axis.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::Spec("concat of zero tensors".into()))?;
    let [n, _, h, w] = first.dims();
    for t in xs {
        for (axis, e, a) in [("batch", n, t.n()), ("height", h, t.h()), ("width", w, t.w())] {
            if e != a {
                return Err(Error::shape(axis, e, a));
            }
        }
    }
    let c: usize = xs.iter().map(|t| t.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for ni in 0..n {
        for t in xs {
            let per = t.c() * h * w;
            data.extend_from_slice(&t.data()[ni * per..(ni + 1) * per]);
        }
    }
    Tensor::from_vec([n, c, h, w], data)
}

/// Partitions the channel axis into consecutive chunks of the given sizes.
pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = sizes.iter().sum();
    if total != x.c() {
        return Err(Error::Spec(format!(
            "split sizes {sizes:?} sum to {total}, tensor has {} channels",
            x.c()
        )));
    }
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &sz in sizes {
        let mut data = Vec::with_capacity(n * sz * hw);
        for ni in 0..n {
            let base = (ni * c + start) * hw;
            data.extend_from_slice(&x.data()[base..base + sz * hw]);
        }
        out.push(Tensor::from_vec([n, sz, h, w], data)?);
        start += sz;
    }
    Ok(out)
}

/// Softmax over each run of `group` consecutive channels at every pixel.
pub fn softmax_channelwise(x: &Tensor, group: usize) -> Result<Tensor> {
    if group == 0 || !x.c().is_multiple_of(group) {
        return Err(Error::Spec(format!(
            "{} channels not divisible into softmax groups of {group}",
            x.c()
        )));
    }
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0f32; group];
    for ni in 0..n {
        for g0 in (0..c).step_by(group) {
            for p in 0..hw {
                let idx = |k: usize| (ni * c + g0 + k) * hw + p;
                let max = (0..group).map(|k| data[idx(k)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = (data[idx(k)] - max).exp();
                    sum += *b;
                }
                for (k, b) in buf.iter().enumerate() {
                    data[idx(k)] = b / sum;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
}

pub fn elementwise(x: &Tensor, y: &Tensor, op: ElementwiseOp) -> Result<Tensor> {
    for (axis, (e, a)) in ["batch", "channels", "height", "width"]
        .into_iter()
        .zip(x.dims().into_iter().zip(y.dims()))
    {
        if e != a {
            return Err(Error::shape(axis, e, a));
        }
    }
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| match op {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Mul => a * b,
        })
        .collect();
    Tensor::from_vec(x.dims(), data)
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    elementwise(x, y, ElementwiseOp::Add)
}

pub fn mul(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    elementwise(x, y, ElementwiseOp::Mul)
}
