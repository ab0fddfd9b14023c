//! Naive reference implementations. They share no code with the library
//! kernels: every loop is written out and accumulates in f64.

#![allow(dead_code)]

use iformer_core::attention::ShmaParams;
use iformer_core::nn::ConvBn;
use iformer_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).unwrap()
}

/// Direct 7-loop cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &[f32],
    [n, cin, h, w]: [usize; 4],
    weight: &[f32],
    [cout, kh, kw]: [usize; 3],
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f32>, [usize; 4]) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0f32; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            let g = o / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[o] as f64);
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * cin + g * cin_g + ci) * h + iy as usize) * w + ix as usize;
                                let wi = ((o * cin_g + ci) * kh + ky) * kw + kx;
                                acc += x[xi] as f64 * weight[wi] as f64;
                            }
                        }
                    }
                    out[((b * cout + o) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

pub fn softmax_naive(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// `softmax(q·kᵀ/√d)·v` for token-major `q, k: [N, L, d]`, `v: [N, L, Cv]`.
pub fn sha_naive(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (n, l, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let cv = v.shape()[2];
    let mut out = vec![0.0; n * l * cv];
    for b in 0..n {
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| {
                    let mut s = 0.0;
                    for e in 0..d {
                        s += q.data()[(b * l + i) * d + e] as f64 * k.data()[(b * l + j) * d + e] as f64;
                    }
                    s / (d as f64).sqrt()
                })
                .collect();
            let a = softmax_naive(&scores);
            for c in 0..cv {
                let mut acc = 0.0;
                for j in 0..l {
                    acc += a[j] * v.data()[(b * l + j) * cv + c] as f64;
                }
                out[(b * l + i) * cv + c] = acc;
            }
        }
    }
    out
}

/// Parameters of one 1×1 projection (+ optional BN) in f64, addressable by
/// name for finite differences.
#[derive(Clone, Debug)]
pub struct Proj64 {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

impl Proj64 {
    pub fn from(l: &ConvBn) -> Self {
        let cout = l.conv.weight.shape()[0];
        let cin = l.conv.weight.shape()[1];
        Proj64 {
            cin,
            cout,
            weight: widen(&l.conv.weight),
            bias: l.conv.bias.as_ref().map(widen),
            gamma: l.bn.as_ref().map(|b| widen(&b.gamma)),
            beta: l.bn.as_ref().map(|b| widen(&b.beta)),
            mean: l.bn.as_ref().map_or(vec![0.0; cout], |b| widen(&b.running_mean)),
            var: l.bn.as_ref().map_or(vec![1.0; cout], |b| widen(&b.running_var)),
            eps: l.bn.as_ref().map_or(0.0, |b| b.eps as f64),
        }
    }

    pub fn field(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        match name {
            "weight" => Some(&mut self.weight),
            "bias" => self.bias.as_mut(),
            "gamma" => self.gamma.as_mut(),
            "beta" => self.beta.as_mut(),
            _ => None,
        }
    }

    /// Output channel `o` at token `t` of a `[cin, L]` input.
    fn at(&self, x: &[f64], l: usize, o: usize, t: usize) -> f64 {
        let mut y: f64 = (0..self.cin).map(|i| self.weight[o * self.cin + i] * x[i * l + t]).sum();
        if let Some(b) = &self.bias {
            y += b[o];
        }
        if let (Some(g), Some(b)) = (&self.gamma, &self.beta) {
            y = g[o] * (y - self.mean[o]) / (self.var[o] + self.eps).sqrt() + b[o];
        }
        y
    }

    fn all(&self, x: &[f64], l: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cout * l);
        for o in 0..self.cout {
            for t in 0..l {
                out.push(self.at(x, l, o, t));
            }
        }
        out
    }
}

pub struct Shma64 {
    pub proj: Vec<(&'static str, Proj64)>,
}

impl Shma64 {
    pub fn from(p: &ShmaParams) -> Self {
        Shma64 {
            proj: vec![
                ("q", Proj64::from(&p.q)),
                ("k", Proj64::from(&p.k)),
                ("v", Proj64::from(&p.v)),
                ("m", Proj64::from(&p.m)),
                ("o", Proj64::from(&p.o)),
            ],
        }
    }

    fn get(&self, name: &str) -> &Proj64 {
        &self.proj.iter().find(|(n, _)| *n == name).unwrap().1
    }

    /// One image `[C, L]` → `[C, L]`.
    pub fn forward_image(&self, x: &[f64], l: usize) -> Vec<f64> {
        let q = self.get("q").all(x, l);
        let k = self.get("k").all(x, l);
        let v = self.get("v").all(x, l);
        let m = self.get("m").all(x, l);
        let d = self.get("q").cout;
        let c = self.get("v").cout;
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut modulated = vec![0.0; c * l];
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|e| q[e * l + i] * k[e * l + j]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let a = softmax_naive(&scores);
            for ch in 0..c {
                let ctx: f64 = (0..l).map(|j| a[j] * v[ch * l + j]).sum();
                modulated[ch * l + i] = sig(m[ch * l + i]) * sig(ctx);
            }
        }
        self.get("o").all(&modulated, l)
    }

    /// `Σ out ⊙ g` over an `[N, C, H, W]` batch.
    pub fn loss(&self, x: &[f64], g: &[f64], n: usize, c: usize, l: usize) -> f64 {
        let mut total = 0.0;
        for b in 0..n {
            let out = self.forward_image(&x[b * c * l..(b + 1) * c * l], l);
            for (i, o) in out.iter().enumerate() {
                total += o * g[b * c * l + i];
            }
        }
        total
    }
}
