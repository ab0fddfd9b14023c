//! Reverse-mode gradients of one SHMA layer. Batch norm is treated as the
//! fixed affine map it is at inference.

use super::{attend_channel_major, check_input, ShmaParams};
use crate::error::{Error, Result};
use crate::nn::{conv2d, sigmoid_scalar, ConvBn};
use crate::tensor::{gemm, Tensor};

/// Gradients for one projection. `bias` is present only when the conv has a
/// bias; `gamma`/`beta` only when batch norm is attached.
#[derive(Clone, Debug)]
pub struct ProjectionGrads {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ShmaGrads {
    pub x: Tensor,
    pub q: ProjectionGrads,
    pub k: ProjectionGrads,
    pub v: ProjectionGrads,
    pub m: ProjectionGrads,
    pub o: ProjectionGrads,
}

impl ShmaGrads {
    /// Every parameter gradient as `(name, tensor)`, e.g. `("q.weight", ..)`.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (p, g) in [("q", &self.q), ("k", &self.k), ("v", &self.v), ("m", &self.m), ("o", &self.o)] {
            out.push((format!("{p}.weight"), &g.weight));
            for (s, t) in [("bias", &g.bias), ("gamma", &g.gamma), ("beta", &g.beta)] {
                if let Some(t) = t {
                    out.push((format!("{p}.{s}"), t));
                }
            }
        }
        out
    }
}

struct Projected {
    /// conv output before batch norm
    pre: Tensor,
    post: Tensor,
}

fn project(p: &ConvBn, x: &Tensor) -> Result<Projected> {
    let pre = conv2d(x, &p.conv)?;
    let post = match &p.bn {
        Some(bn) => crate::nn::batchnorm_infer(&pre, bn)?,
        None => pre.clone(),
    };
    Ok(Projected { pre, post })
}

/// Backpropagates `g_post` (NCHW, same shape as the projection output)
/// through batch norm and the 1×1 conv. Returns the parameter gradients and
/// adds the input gradient into `gx`.
fn project_backward(p: &ConvBn, x: &Tensor, pre: &Tensor, g_post: &[f32], gx: &mut [f32]) -> Result<ProjectionGrads> {
    let [n, cin, h, w] = x.dims4()?;
    let cout = p.conv.out_channels();
    let l = h * w;
    let mut g_pre = g_post.to_vec();
    let (mut gamma, mut beta) = (None, None);
    if let Some(bn) = &p.bn {
        let (scale, _) = bn.scale_shift();
        let mut gg = vec![0.0f32; cout];
        let mut gb = vec![0.0f32; cout];
        for b in 0..n {
            for c in 0..cout {
                let off = (b * cout + c) * l;
                let inv_std = 1.0 / (bn.running_var.data()[c] + bn.eps).sqrt();
                let mean = bn.running_mean.data()[c];
                for i in off..off + l {
                    gg[c] += g_post[i] * (pre.data()[i] - mean) * inv_std;
                    gb[c] += g_post[i];
                    g_pre[i] = g_post[i] * scale[c];
                }
            }
        }
        gamma = Some(Tensor::new(&[cout], gg)?);
        beta = Some(Tensor::new(&[cout], gb)?);
    }
    let bias = match &p.conv.bias {
        Some(_) => {
            let mut gbias = vec![0.0f32; cout];
            for (i, chunk) in g_pre.chunks(l).enumerate() {
                gbias[i % cout] += chunk.iter().sum::<f32>();
            }
            Some(Tensor::new(&[cout], gbias)?)
        }
        None => None,
    };
    let wdata = p.conv.weight.data();
    let mut gw = vec![0.0f32; cout * cin];
    let mut tmp_w = vec![0.0f32; cout * cin];
    let mut tmp_x = vec![0.0f32; cin * l];
    for b in 0..n {
        let xb = &x.data()[b * cin * l..(b + 1) * cin * l];
        let gb = &g_pre[b * cout * l..(b + 1) * cout * l];
        gemm(cout, l, cin, gb, false, xb, true, &mut tmp_w);
        gw.iter_mut().zip(&tmp_w).for_each(|(a, b)| *a += b);
        gemm(cin, cout, l, wdata, true, gb, false, &mut tmp_x);
        gx[b * cin * l..(b + 1) * cin * l]
            .iter_mut()
            .zip(&tmp_x)
            .for_each(|(a, b)| *a += b);
    }
    Ok(ProjectionGrads {
        weight: Tensor::new(&[cout, cin, 1, 1], gw)?,
        bias,
        gamma,
        beta,
    })
}

/// Gradients of `sum(grad_out ⊙ shma_forward(x, p))` with respect to `x` and
/// every projection parameter.
pub fn shma_backward(x: &Tensor, p: &ShmaParams, grad_out: &Tensor) -> Result<ShmaGrads> {
    p.validate()?;
    check_input(x, p.channels())?;
    if grad_out.shape() != x.shape() {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let [n, c, h, w] = x.dims4()?;
    let l = h * w;
    let d = p.head_dim();
    let scale = p.scale();

    let q = project(&p.q, x)?;
    let k = project(&p.k, x)?;
    let v = project(&p.v, x)?;
    let m = project(&p.m, x)?;

    let mut ctx = vec![0.0f32; n * c * l];
    let mut attn = Vec::with_capacity(n);
    for b in 0..n {
        let (cb, a) = attend_channel_major(
            &q.post.data()[b * d * l..(b + 1) * d * l],
            &k.post.data()[b * d * l..(b + 1) * d * l],
            &v.post.data()[b * c * l..(b + 1) * c * l],
            d,
            c,
            l,
            scale,
        );
        ctx[b * c * l..(b + 1) * c * l].copy_from_slice(&cb);
        attn.push(a);
    }
    let ms: Vec<f32> = m.post.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let cs: Vec<f32> = ctx.iter().map(|&v| sigmoid_scalar(v)).collect();
    let modulation = Tensor::new(&[n, c, h, w], ms.iter().zip(&cs).map(|(a, b)| a * b).collect())?;
    let o_pre = conv2d(&modulation, &p.o.conv)?;

    let mut g_mod = vec![0.0f32; n * c * l];
    let go = project_backward(&p.o, &modulation, &o_pre, grad_out.data(), &mut g_mod)?;

    let mut g_m = vec![0.0f32; n * c * l];
    let mut g_ctx = vec![0.0f32; n * c * l];
    for i in 0..n * c * l {
        g_m[i] = g_mod[i] * cs[i] * ms[i] * (1.0 - ms[i]);
        g_ctx[i] = g_mod[i] * ms[i] * cs[i] * (1.0 - cs[i]);
    }

    let mut g_q = vec![0.0f32; n * d * l];
    let mut g_k = vec![0.0f32; n * d * l];
    let mut g_v = vec![0.0f32; n * c * l];
    let mut g_attn = vec![0.0f32; l * l];
    for b in 0..n {
        let a = &attn[b];
        let gc = &g_ctx[b * c * l..(b + 1) * c * l];
        let vb = &v.post.data()[b * c * l..(b + 1) * c * l];
        let qb = &q.post.data()[b * d * l..(b + 1) * d * l];
        let kb = &k.post.data()[b * d * l..(b + 1) * d * l];
        // ctx = v·Aᵀ
        gemm(c, l, l, gc, false, a, false, &mut g_v[b * c * l..(b + 1) * c * l]);
        gemm(l, c, l, gc, true, vb, false, &mut g_attn);
        // softmax rows, then the 1/sqrt(d) scale
        for i in 0..l {
            let row = &mut g_attn[i * l..(i + 1) * l];
            let arow = &a[i * l..(i + 1) * l];
            let dot: f32 = row.iter().zip(arow).map(|(g, a)| g * a).sum();
            row.iter_mut().zip(arow).for_each(|(g, &a)| *g = a * (*g - dot) * scale);
        }
        // S = qᵀk
        gemm(d, l, l, kb, false, &g_attn, true, &mut g_q[b * d * l..(b + 1) * d * l]);
        gemm(d, l, l, qb, false, &g_attn, false, &mut g_k[b * d * l..(b + 1) * d * l]);
    }

    let mut gx = vec![0.0f32; n * c * l];
    let gq = project_backward(&p.q, x, &q.pre, &g_q, &mut gx)?;
    let gk = project_backward(&p.k, x, &k.pre, &g_k, &mut gx)?;
    let gv = project_backward(&p.v, x, &v.pre, &g_v, &mut gx)?;
    let gm = project_backward(&p.m, x, &m.pre, &g_m, &mut gx)?;

    Ok(ShmaGrads {
        x: Tensor::new(&[n, c, h, w], gx)?,
        q: gq,
        k: gk,
        v: gv,
        m: gm,
        o: go,
    })
}
