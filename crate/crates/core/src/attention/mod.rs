//! Attention mixers: single-head attention (SHA), single-head modulation
//! attention (SHMA), the multi-head baseline (MHA), conditional positional
//! encoding, window partitioning and head-similarity analytics.
//!
//! Feature maps stay in NCHW order. The single-head paths read a `[C, L]`
//! channel-major slice of each image directly and never permute memory;
//! the multi-head path goes through explicit token and head permutes, which
//! the [`Trace`] counts.

mod backward;
mod similarity;
mod window;

pub use backward::{shma_backward, ProjectionGrads, ShmaGrads};
pub use similarity::{head_cosine_similarity, HeadSimilarity};
pub use window::{chunked_window_partition, chunked_window_reverse, window_partition, window_reverse};

use crate::error::{Error, Result};
use crate::nn::{conv2d, sigmoid_scalar, softmax_rows, ConvBn, ConvParams};
use crate::tensor::{gemm, Tensor, Trace};

/// Projections of a single-head modulation attention layer. Each is a 1×1
/// convolution followed (unless fused) by inference batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ShmaParams {
    /// C → d
    pub q: ConvBn,
    /// C → d
    pub k: ConvBn,
    /// C → C
    pub v: ConvBn,
    /// C → C, the feature-mapping (modulation) branch.
    pub m: ConvBn,
    /// C → C output projection.
    pub o: ConvBn,
}

impl ShmaParams {
    pub fn channels(&self) -> usize {
        self.v.conv.in_channels()
    }

    pub fn head_dim(&self) -> usize {
        self.q.conv.out_channels()
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.head_dim() as f32).sqrt()
    }

    pub fn projections(&self) -> [(&'static str, &ConvBn); 5] {
        [("q", &self.q), ("k", &self.k), ("v", &self.v), ("m", &self.m), ("o", &self.o)]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let d = self.head_dim();
        for (name, p) in self.projections() {
            let (kh, kw) = p.conv.kernel();
            if kh != 1 || kw != 1 || p.conv.groups != 1 || p.conv.in_channels() != c {
                return Err(Error::shape(format!(
                    "SHMA projection {name} must be a dense 1x1 conv from {c} channels"
                )));
            }
            let want = if matches!(name, "q" | "k") { d } else { c };
            if p.conv.out_channels() != want {
                return Err(Error::shape(format!(
                    "SHMA projection {name} has {} outputs, expected {want}",
                    p.conv.out_channels()
                )));
            }
        }
        if d == 0 || d > c {
            return Err(Error::shape(format!("head dim {d} outside 1..={c}")));
        }
        Ok(())
    }
}

/// Projections of a standard attention layer (used by both baselines).
#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams {
    pub q: ConvBn,
    pub k: ConvBn,
    pub v: ConvBn,
    pub o: ConvBn,
    pub num_heads: usize,
}

impl MhaParams {
    pub fn channels(&self) -> usize {
        self.q.conv.out_channels()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.num_heads
    }

    pub fn projections(&self) -> [(&'static str, &ConvBn); 4] {
        [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.num_heads == 0 || c % self.num_heads != 0 {
            return Err(Error::shape(format!(
                "{c} channels cannot be split into {} heads",
                self.num_heads
            )));
        }
        for (name, p) in self.projections() {
            if p.conv.kernel() != (1, 1) || p.conv.in_channels() != c || p.conv.out_channels() != c {
                return Err(Error::shape(format!(
                    "attention projection {name} must be a 1x1 conv {c} -> {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Conditional positional encoding: residual depthwise 3×3 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CpeParams {
    pub conv: ConvParams,
}

/// `x + dwconv3x3(x)`.
pub fn cpe(x: &Tensor, p: &CpeParams) -> Result<Tensor> {
    if !p.conv.is_depthwise() && !(p.conv.groups == 1 && p.conv.out_channels() == 1) {
        return Err(Error::shape("CPE convolution must be depthwise"));
    }
    conv2d(x, &p.conv)?.add(x)
}

/// Single-head scaled dot-product attention on token-major tensors
/// `q, k: [N, L, d]`, `v: [N, L, Cv]`.
pub fn sha(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, l, d, cv) = match (q.shape(), k.shape(), v.shape()) {
        ([n, l, d], [n2, l2, d2], [n3, l3, cv]) if n == n2 && n == n3 && l == l2 && l == l3 && d == d2 => {
            (*n, *l, *d, *cv)
        }
        _ => {
            return Err(Error::shape(format!(
                "sha operands disagree: q {:?}, k {:?}, v {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )))
        }
    };
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; n * l * cv];
    let mut scores = vec![0.0f32; l * l];
    for b in 0..n {
        let qb = &q.data()[b * l * d..(b + 1) * l * d];
        let kb = &k.data()[b * l * d..(b + 1) * l * d];
        let vb = &v.data()[b * l * cv..(b + 1) * l * cv];
        gemm(l, d, l, qb, false, kb, true, &mut scores);
        scores.iter_mut().for_each(|s| *s *= scale);
        softmax_rows(&mut scores, l);
        gemm(l, l, cv, &scores, false, vb, false, &mut out[b * l * cv..(b + 1) * l * cv]);
    }
    Tensor::new(&[n, l, cv], out)
}

/// Channel-major single-head attention for one image:
/// `q, k: [d, L]`, `v: [Cv, L]` → (`ctx: [Cv, L]`, `attn: [L, L]`).
pub(crate) fn attend_channel_major(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    d: usize,
    cv: usize,
    l: usize,
    scale: f32,
) -> (Vec<f32>, Vec<f32>) {
    let mut attn = vec![0.0f32; l * l];
    gemm(l, d, l, q, true, k, false, &mut attn);
    attn.iter_mut().for_each(|s| *s *= scale);
    softmax_rows(&mut attn, l);
    let mut ctx = vec![0.0f32; cv * l];
    gemm(cv, l, l, v, false, &attn, true, &mut ctx);
    (ctx, attn)
}

/// Single-head attention over every image of NCHW projections.
fn attend_nchw(q: &Tensor, k: &Tensor, v: &Tensor, scale: f32, trace: &Trace) -> Result<(Tensor, Vec<Vec<f32>>)> {
    let [n, d, h, w] = q.dims4()?;
    let [_, cv, _, _] = v.dims4()?;
    let l = h * w;
    trace.record_attention(n, l);
    let mut ctx = Vec::with_capacity(n * cv * l);
    let mut attn = Vec::with_capacity(n);
    for b in 0..n {
        let (c, a) = attend_channel_major(
            &q.data()[b * d * l..(b + 1) * d * l],
            &k.data()[b * d * l..(b + 1) * d * l],
            &v.data()[b * cv * l..(b + 1) * cv * l],
            d,
            cv,
            l,
            scale,
        );
        ctx.extend_from_slice(&c);
        attn.push(a);
    }
    Ok((Tensor::new(&[n, cv, h, w], ctx)?, attn))
}

fn check_input(x: &Tensor, c: usize) -> Result<()> {
    let [_, xc, _, _] = x.dims4()?;
    if xc != c {
        return Err(Error::shape(format!(
            "attention over {c} channels applied to {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Intermediate values of one SHMA evaluation.
#[derive(Clone, Debug)]
pub struct ShmaCache {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Modulation branch after batch norm, before the sigmoid.
    pub m: Tensor,
    /// Attention context before the sigmoid.
    pub ctx: Tensor,
    /// Per-image `[L, L]` attention weights.
    pub attn: Vec<Vec<f32>>,
    /// `sigmoid(m) * sigmoid(ctx)`, the input of the output projection.
    pub modulation: Tensor,
}

/// `BN(W_o · (σ(BN(W_m x)) ⊙ σ(SHA(BN(W_q x), BN(W_k x), BN(W_v x)))))`
pub fn shma_forward(x: &Tensor, p: &ShmaParams, trace: &Trace) -> Result<Tensor> {
    shma_forward_cached(x, p, trace).map(|(out, _)| out)
}

pub fn shma_forward_cached(x: &Tensor, p: &ShmaParams, trace: &Trace) -> Result<(Tensor, ShmaCache)> {
    p.validate()?;
    check_input(x, p.channels())?;
    let q = p.q.forward_linear(x)?;
    let k = p.k.forward_linear(x)?;
    let v = p.v.forward_linear(x)?;
    let m = p.m.forward_linear(x)?;
    let (ctx, attn) = attend_nchw(&q, &k, &v, p.scale(), trace)?;
    let mut modulation = m.clone();
    modulation
        .data_mut()
        .iter_mut()
        .zip(ctx.data())
        .for_each(|(mv, &cv)| *mv = sigmoid_scalar(*mv) * sigmoid_scalar(cv));
    let out = p.o.forward_linear(&modulation)?;
    Ok((
        out,
        ShmaCache {
            q,
            k,
            v,
            m,
            ctx,
            attn,
            modulation,
        },
    ))
}

/// Plain single-head attention layer: `BN(W_o · SHA(q, k, v))`, no
/// modulation branch and no head split.
pub fn sha_attention_forward(x: &Tensor, p: &MhaParams, trace: &Trace) -> Result<Tensor> {
    p.validate()?;
    check_input(x, p.channels())?;
    let q = p.q.forward_linear(x)?;
    let k = p.k.forward_linear(x)?;
    let v = p.v.forward_linear(x)?;
    let scale = 1.0 / (p.channels() as f32).sqrt();
    let (ctx, _) = attend_nchw(&q, &k, &v, scale, trace)?;
    p.o.forward_linear(&ctx)
}

/// Standard multi-head attention. Heads are split from and merged back into
/// token-major layout with explicit permutes.
pub fn mha_forward(x: &Tensor, p: &MhaParams, trace: &Trace) -> Result<Tensor> {
    p.validate()?;
    check_input(x, p.channels())?;
    let [n, c, h, w] = x.dims4()?;
    let l = h * w;
    let heads = p.num_heads;
    let dh = c / heads;

    // [N,C,H,W] -> [N,L,C] -> [N,L,h,dh] -> [N,h,L,dh] -> [N*h, L, dh]
    let split = |t: Tensor| -> Result<Tensor> {
        t.into_reshape(&[n, c, l])?
            .permute(&[0, 2, 1], trace)?
            .into_reshape(&[n, l, heads, dh])?
            .permute(&[0, 2, 1, 3], trace)?
            .into_reshape(&[n * heads, l, dh])
    };
    let q = split(p.q.forward_linear(x)?)?;
    let k = split(p.k.forward_linear(x)?)?;
    let v = split(p.v.forward_linear(x)?)?;
    trace.record_attention(n * heads, l);
    let ctx = sha(&q, &k, &v)?;

    if trace.wants_heads() {
        let per_head = (0..heads)
            .map(|hi| {
                let mut data = Vec::with_capacity(n * l * dh);
                for b in 0..n {
                    let off = (b * heads + hi) * l * dh;
                    data.extend_from_slice(&ctx.data()[off..off + l * dh]);
                }
                Tensor::new(&[n, l, dh], data)
            })
            .collect::<Result<Vec<_>>>()?;
        trace.record_heads(per_head);
    }

    // [N*h, L, dh] -> [N,h,L,dh] -> [N,L,h,dh] -> [N,L,C] -> [N,C,L]
    let merged = ctx
        .into_reshape(&[n, heads, l, dh])?
        .permute(&[0, 2, 1, 3], trace)?
        .into_reshape(&[n, l, c])?
        .permute(&[0, 2, 1], trace)?
        .into_reshape(&[n, c, h, w])?;
    p.o.forward_linear(&merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, BnParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-scale..scale)).unwrap()
    }

    fn proj(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> ConvBn {
        ConvBn {
            conv: ConvParams::new(rand_tensor(rng, &[cout, cin, 1, 1], 0.8), None, 1, 0, 1).unwrap(),
            bn: Some(BnParams {
                gamma: rand_tensor(rng, &[cout], 1.0).map(|v| 1.0 + 0.3 * v),
                beta: rand_tensor(rng, &[cout], 0.2),
                running_mean: rand_tensor(rng, &[cout], 0.2),
                running_var: rand_tensor(rng, &[cout], 0.4).map(|v| 1.0 + v),
                eps: 1e-5,
            }),
            act: Activation::Identity,
        }
    }

    fn mha_params(rng: &mut ChaCha8Rng, c: usize, heads: usize) -> MhaParams {
        MhaParams {
            q: proj(rng, c, c),
            k: proj(rng, c, c),
            v: proj(rng, c, c),
            o: proj(rng, c, c),
            num_heads: heads,
        }
    }

    fn naive_sha(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let [n, l, d] = [q.shape()[0], q.shape()[1], q.shape()[2]];
        let cv = v.shape()[2];
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0f32; n * l * cv];
        for b in 0..n {
            for i in 0..l {
                let s: Vec<f64> = (0..l)
                    .map(|j| {
                        (0..d)
                            .map(|e| q.data()[(b * l + i) * d + e] as f64 * k.data()[(b * l + j) * d + e] as f64)
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                for c in 0..cv {
                    out[(b * l + i) * cv + c] = (0..l)
                        .map(|j| (s[j] - mx).exp() / z * v.data()[(b * l + j) * cv + c] as f64)
                        .sum::<f64>() as f32;
                }
            }
        }
        Tensor::new(&[n, l, cv], out).unwrap()
    }

    #[test]
    fn sha_single_token_returns_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_tensor(&mut rng, &[2, 1, 3], 1.0);
        let k = rand_tensor(&mut rng, &[2, 1, 3], 1.0);
        let v = rand_tensor(&mut rng, &[2, 1, 5], 1.0);
        assert_eq!(sha(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn sha_zero_qk_is_mean_of_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::zeros(&[1, 4, 2]).unwrap();
        let v = rand_tensor(&mut rng, &[1, 4, 3], 1.0);
        let out = sha(&z, &z, &v).unwrap();
        for c in 0..3 {
            let mean: f32 = (0..4).map(|j| v.data()[j * 3 + c]).sum::<f32>() / 4.0;
            for i in 0..4 {
                assert!((out.data()[i * 3 + c] - mean).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn sha_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_tensor(&mut rng, &[1, 3, 2], 1.0);
        let k = rand_tensor(&mut rng, &[1, 3, 2], 1.0);
        let v = rand_tensor(&mut rng, &[1, 3, 2], 1.0);
        assert!(sha(&q, &k, &v).unwrap().max_abs_diff(&naive_sha(&q, &k, &v)) <= 1e-6);
        assert!(sha(&q, &k, &rand_tensor(&mut rng, &[1, 2, 2], 1.0)).is_err());
    }

    #[test]
    fn sha_is_token_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, d, cv) = (5, 3, 4);
        let q = rand_tensor(&mut rng, &[1, l, d], 1.0);
        let k = rand_tensor(&mut rng, &[1, l, d], 1.0);
        let v = rand_tensor(&mut rng, &[1, l, cv], 1.0);
        let perm = [3, 0, 4, 1, 2];
        let shuffle = |t: &Tensor, w: usize| {
            let data: Vec<f32> = perm.iter().flat_map(|&i| t.data()[i * w..(i + 1) * w].to_vec()).collect();
            Tensor::new(t.shape(), data).unwrap()
        };
        let base = sha(&q, &k, &v).unwrap();
        let shuffled = sha(&shuffle(&q, d), &shuffle(&k, d), &shuffle(&v, cv)).unwrap();
        assert!(shuffle(&base, cv).max_abs_diff(&shuffled) <= 1e-6);
    }

    #[test]
    fn cpe_residual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[1, 2, 3, 3], 1.0);
        let zero = CpeParams {
            conv: ConvParams::new(Tensor::zeros(&[2, 1, 3, 3]).unwrap(), Some(Tensor::zeros(&[2]).unwrap()), 1, 1, 2).unwrap(),
        };
        assert_eq!(cpe(&x, &zero).unwrap(), x);
        let delta = CpeParams {
            conv: ConvParams::new(
                Tensor::from_fn(&[2, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 }).unwrap(),
                Some(Tensor::zeros(&[2]).unwrap()),
                1,
                1,
                2,
            )
            .unwrap(),
        };
        assert_eq!(cpe(&x, &delta).unwrap(), x.map(|v| 2.0 * v));
    }

    #[test]
    fn mha_single_head_matches_sha_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = mha_params(&mut rng, 8, 1);
        let x = rand_tensor(&mut rng, &[2, 8, 3, 3], 1.0);
        let t_mha = Trace::new();
        let t_sha = Trace::new();
        let a = mha_forward(&x, &p, &t_mha).unwrap();
        let b = sha_attention_forward(&x, &p, &t_sha).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
        assert_eq!(a.shape(), x.shape());
        assert_eq!(t_sha.layout_changes(), 0);
        assert!(t_mha.layout_changes() >= 2);
    }

    #[test]
    fn mha_uniform_attention_oracle() {
        // zero q/k weights give uniform attention inside every head, so each
        // head's output is the token mean of its value slice
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 4;
        let ident = |zero: bool| ConvBn {
            conv: ConvParams::new(
                Tensor::from_fn(&[c, c, 1, 1], |i| if !zero && i / c == i % c { 1.0 } else { 0.0 }).unwrap(),
                None,
                1,
                0,
                1,
            )
            .unwrap(),
            bn: if zero { Some(BnParams::identity(c).unwrap()) } else { None },
            act: Activation::Identity,
        };
        let p = MhaParams {
            q: ident(true),
            k: ident(true),
            v: ident(false),
            o: ident(false),
            num_heads: 2,
        };
        let x = rand_tensor(&mut rng, &[1, c, 2, 3], 1.0);
        let out = mha_forward(&x, &p, &Trace::new()).unwrap();
        for ch in 0..c {
            let plane = &x.data()[ch * 6..(ch + 1) * 6];
            let mean = plane.iter().sum::<f32>() / 6.0;
            for v in &out.data()[ch * 6..(ch + 1) * 6] {
                assert!((v - mean).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn mha_rejects_bad_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = mha_params(&mut rng, 6, 4);
        let x = rand_tensor(&mut rng, &[1, 6, 2, 2], 1.0);
        assert!(matches!(mha_forward(&x, &p, &Trace::new()), Err(Error::Shape(_))));
    }

    fn shma_params(rng: &mut ChaCha8Rng, c: usize, d: usize) -> ShmaParams {
        ShmaParams {
            q: proj(rng, c, d),
            k: proj(rng, c, d),
            v: proj(rng, c, c),
            m: proj(rng, c, c),
            o: proj(rng, c, c),
        }
    }

    #[test]
    fn shma_zero_weights_give_quarter_modulation() {
        let c = 4;
        let zero = |cout: usize| ConvBn {
            conv: ConvParams::new(Tensor::zeros(&[cout, c, 1, 1]).unwrap(), None, 1, 0, 1).unwrap(),
            bn: Some(BnParams::identity(cout).unwrap()),
            act: Activation::Identity,
        };
        let p = ShmaParams { q: zero(2), k: zero(2), v: zero(c), m: zero(c), o: zero(c) };
        let x = Tensor::ones(&[1, c, 2, 2]).unwrap();
        let (_, cache) = shma_forward_cached(&x, &p, &Trace::new()).unwrap();
        assert!(cache.modulation.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn shma_shape_and_channel_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = shma_params(&mut rng, 4, 2);
        let x = rand_tensor(&mut rng, &[1, 4, 3, 2], 1.0);
        let trace = Trace::new();
        assert_eq!(shma_forward(&x, &p, &trace).unwrap().shape(), x.shape());
        assert_eq!(trace.layout_changes(), 0);
        assert_eq!(trace.attention_calls()[0].tokens, 6);
        let bad = rand_tensor(&mut rng, &[1, 3, 3, 2], 1.0);
        assert!(matches!(shma_forward(&bad, &p, &trace), Err(Error::Shape(_))));
    }

    #[test]
    fn shma_saturated_modulation_reduces_to_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = shma_params(&mut rng, 4, 2);
        p.m.bn.as_mut().unwrap().beta = Tensor::full(&[4], 50.0).unwrap();
        let x = rand_tensor(&mut rng, &[1, 4, 2, 2], 1.0);
        let (out, cache) = shma_forward_cached(&x, &p, &Trace::new()).unwrap();
        let ctx_only = p.o.forward_linear(&cache.ctx.map(sigmoid_scalar)).unwrap();
        assert!(out.max_abs_diff(&ctx_only) <= 1e-3);
    }
}
