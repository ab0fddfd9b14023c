//! Neural primitives: convolution, inference batch norm, activations,
//! softmax, pooling and the linear layer.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

pub const DEFAULT_BN_EPS: f32 = 1e-5;

/// Largest f32 below one. `sigmoid` never rounds up to 1.0.
pub const SIGMOID_MAX: f32 = 1.0 - f32::EPSILON / 2.0;
/// 2^-60: the product of two floored sigmoids (2^-120) is still a normal f32.
pub const SIGMOID_MIN: f32 = 8.673_617e-19;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[Cout, Cin/groups, Kh, Kw]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize, groups: usize) -> Result<Self> {
        let p = ConvParams {
            weight,
            bias,
            stride,
            padding,
            groups,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.weight.shape()[1] == 1 && self.out_channels() == self.groups
    }

    pub fn validate(&self) -> Result<()> {
        let [cout, _, _, _] = self.weight.dims4()?;
        if self.stride == 0 || self.groups == 0 {
            return Err(Error::shape("stride and groups must be positive"));
        }
        if cout % self.groups != 0 {
            return Err(Error::shape(format!(
                "{cout} output channels not divisible by {} groups",
                self.groups
            )));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [cout] {
                return Err(Error::shape(format!(
                    "conv bias {:?} does not match {cout} output channels",
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw {
            return Err(Error::shape(format!(
                "{kh}x{kw} kernel does not fit a {h}x{w} input with padding {}",
                self.padding
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

/// Inference-mode batch normalization with frozen statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
}

impl BnParams {
    pub fn identity(c: usize) -> Result<Self> {
        Ok(BnParams {
            gamma: Tensor::ones(&[c])?,
            beta: Tensor::zeros(&[c])?,
            running_mean: Tensor::zeros(&[c])?,
            running_var: Tensor::ones(&[c])?,
            eps: DEFAULT_BN_EPS,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::shape(format!(
                    "batch norm {name} has shape {:?}, expected [{c}]",
                    t.shape()
                )));
            }
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::arg(format!("batch norm eps {} is negative or not finite", self.eps)));
        }
        if let Some(v) = self.running_var.data().iter().find(|&&v| !(v >= 0.0) || v + self.eps <= 0.0) {
            return Err(Error::arg(format!("batch norm running variance {v} is invalid")));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` with `bn(x) = x * scale + shift`.
    pub fn scale_shift(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self
            .gamma
            .data()
            .iter()
            .zip(self.running_var.data())
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .data()
            .iter()
            .zip(self.running_mean.data())
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Gelu,
}

impl Activation {
    pub fn apply(self, t: &mut Tensor) {
        if self == Activation::Gelu {
            t.map_inplace(gelu_scalar);
        }
    }
}

/// A convolution optionally followed by batch norm and an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: ConvParams,
    pub bn: Option<BnParams>,
    pub act: Activation,
}

impl ConvBn {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = conv2d(x, &self.conv)?;
        if let Some(bn) = &self.bn {
            y = batchnorm_infer(&y, bn)?;
        }
        self.act.apply(&mut y);
        Ok(y)
    }

    /// Output before the activation.
    pub fn forward_linear(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.conv)?;
        match &self.bn {
            Some(bn) => batchnorm_infer(&y, bn),
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.as_ref().map_or(0, |b| 2 * b.channels())
    }
}

/// Cross-correlation with symmetric zero padding and grouped channels.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.validate()?;
    let [n, cin, h, w] = x.dims4()?;
    let [cout, cin_g, kh, kw] = p.weight.dims4()?;
    if cin != cin_g * p.groups {
        return Err(Error::shape(format!(
            "conv expects {} input channels ({} groups of {cin_g}), got {cin}",
            cin_g * p.groups,
            p.groups
        )));
    }
    let (oh, ow) = p.output_hw(h, w)?;
    let cout_g = cout / p.groups;
    let plane = oh * ow;
    let mut out = vec![0.0f32; n * cout * plane];
    let wdata = p.weight.data();
    let xdata = x.data();

    for b in 0..n {
        let xb = &xdata[b * cin * h * w..(b + 1) * cin * h * w];
        let ob = &mut out[b * cout * plane..(b + 1) * cout * plane];
        if p.is_depthwise() {
            depthwise(xb, wdata, cin, h, w, kh, kw, p.stride, p.padding, oh, ow, ob);
            continue;
        }
        let pointwise = kh == 1 && kw == 1 && p.stride == 1 && p.padding == 0;
        let kdim = cin_g * kh * kw;
        let mut cols = Vec::new();
        for g in 0..p.groups {
            let xg = &xb[g * cin_g * h * w..(g + 1) * cin_g * h * w];
            let src = if pointwise {
                xg
            } else {
                im2col(xg, cin_g, h, w, kh, kw, p.stride, p.padding, oh, ow, &mut cols);
                &cols[..]
            };
            gemm(
                cout_g,
                kdim,
                plane,
                &wdata[g * cout_g * kdim..(g + 1) * cout_g * kdim],
                false,
                src,
                false,
                &mut ob[g * cout_g * plane..(g + 1) * cout_g * plane],
            );
        }
    }
    if let Some(bias) = &p.bias {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = bias.data()[i % cout];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(&[n, cout, oh, ow], out)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut Vec<f32>,
) {
    cols.clear();
    cols.resize(c * kh * kw * oh * ow, 0.0);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise(
    x: &[f32],
    wt: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f32],
) {
    let per_channel = |ci: usize, dst: &mut [f32]| {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        let k = &wt[ci * kh * kw..(ci + 1) * kh * kw];
        for ky in 0..kh {
            for kx in 0..kw {
                let wv = k[ky * kw + kx];
                // valid output columns: 0 <= ox*stride + kx - pad < w
                let lo = (pad.saturating_sub(kx)).div_ceil(stride);
                let hi = if w + pad > kx {
                    ((w + pad - kx - 1) / stride + 1).min(ow)
                } else {
                    0
                };
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for ox in lo..hi {
                        drow[ox] += wv * srow[ox * stride + kx - pad];
                    }
                }
            }
        }
    };
    if c * oh * ow * kh * kw >= 1 << 15 {
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(ci, d)| per_channel(ci, d));
    } else {
        out.chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(ci, d)| per_channel(ci, d));
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` over axis 1.
pub fn batchnorm_infer(x: &Tensor, p: &BnParams) -> Result<Tensor> {
    p.validate()?;
    if x.rank() < 2 || x.shape()[1] != p.channels() {
        return Err(Error::shape(format!(
            "batch norm over {} channels applied to {:?}",
            p.channels(),
            x.shape()
        )));
    }
    let c = p.channels();
    let inner: usize = x.shape()[2..].iter().product();
    let (scale, _) = p.scale_shift();
    let mean = p.running_mean.data();
    let beta = p.beta.data();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let ci = i % c;
        let (m, s, b) = (mean[ci], scale[ci], beta[ci]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) * s + b);
    }
    Ok(out)
}

#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))) as f32
}

/// Logistic function, kept inside the open interval `(0, 1)` even where the
/// exact value rounds to 0 or 1 in single precision.
#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_MIN, SIGMOID_MAX)
}

#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    x * sigmoid_scalar(x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

/// Max-subtracted softmax over the last axis.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let k = *x.shape().last().unwrap();
    softmax_rows(out.data_mut(), k);
    out
}

pub(crate) fn softmax_rows(data: &mut [f32], k: usize) {
    let row = |r: &mut [f32]| {
        let m = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as f32;
        r.iter_mut().for_each(|v| *v *= inv);
    };
    if data.len() >= 1 << 15 {
        data.par_chunks_mut(k).for_each(row);
    } else {
        data.chunks_mut(k).for_each(row);
    }
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let data = x
        .data()
        .chunks(h * w)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32)
        .collect();
    Tensor::new(&[n, c], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    /// `[Cout, Cin]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// `x·wᵀ + b` for `x: [N, Cin]`, `w: [Cout, Cin]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, cin) = match x.shape() {
        [n, c] => (*n, *c),
        s => return Err(Error::shape(format!("linear input must be [N, Cin], got {s:?}"))),
    };
    let cout = match w.shape() {
        [o, i] if *i == cin => *o,
        s => {
            return Err(Error::shape(format!(
                "linear weight {s:?} does not accept {cin} inputs"
            )))
        }
    };
    if b.shape() != [cout] {
        return Err(Error::shape(format!(
            "linear bias {:?} does not match {cout} outputs",
            b.shape()
        )));
    }
    let mut out = vec![0.0; n * cout];
    gemm(n, cin, cout, x.data(), false, w.data(), true, &mut out);
    for row in out.chunks_mut(cout) {
        row.iter_mut().zip(b.data()).for_each(|(o, &bv)| *o += bv);
    }
    Tensor::new(&[n, cout], out)
}
