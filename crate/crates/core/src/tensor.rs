//! Dense f32 tensors in row-major NCHW order, plus the per-call [`Trace`]
//! that layout-changing operations report into.

use std::cell::{Cell, RefCell};
use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Work below this many multiply-adds stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank must be between 1 and {MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Shape as `[N, C, H, W]`; fails unless the tensor is rank 4.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(format!(
                "expected a rank-4 NCHW tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        self.clone().into_reshape(new_shape)
    }

    /// Metadata-only reshape; element order is untouched.
    pub fn into_reshape(mut self, new_shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(new_shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {new_shape:?}",
                self.shape
            )));
        }
        self.shape = new_shape.to_vec();
        Ok(self)
    }

    /// Physically reorders axes so that output axis `i` is input axis
    /// `axes[i]`. Every call counts as one layout change on `trace`.
    pub fn permute(&self, axes: &[usize], trace: &Trace) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = [false; MAX_RANK];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(format!(
                "{axes:?} is not a permutation of 0..{rank}"
            )));
        }
        trace.record_layout_change();

        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        // stride in the input for each output axis
        let mut step = [0usize; MAX_RANK];
        let mut ext = [1usize; MAX_RANK];
        let pad = MAX_RANK - rank;
        for (i, &a) in axes.iter().enumerate() {
            step[pad + i] = in_strides[a];
            ext[pad + i] = out_shape[i];
        }
        let mut data = Vec::with_capacity(self.data.len());
        for i0 in 0..ext[0] {
            for i1 in 0..ext[1] {
                for i2 in 0..ext[2] {
                    let base = i0 * step[0] + i1 * step[1] + i2 * step[2];
                    data.extend((0..ext[3]).map(|i3| self.data[base + i3 * step[3]]));
                }
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(self, other, BinaryOp::Add)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        elementwise(self, other, BinaryOp::Mul)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32 + Sync) -> Tensor {
        let mut out = self.clone();
        out.map_inplace(f);
        out
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32 + Sync) {
        if self.data.len() >= PAR_THRESHOLD {
            self.data.par_iter_mut().for_each(|v| *v = f(*v));
        } else {
            self.data.iter_mut().for_each(|v| *v = f(*v));
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Mul => a * b,
        }
    }
}

/// `a op b` with identical shapes, or with `b` a length-C vector broadcast
/// over the channel axis (axis 1) of `a`.
pub fn elementwise(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    if b.rank() == 1 && a.rank() >= 2 && a.shape[1] == b.shape[0] {
        let c = a.shape[1];
        let inner: usize = a.shape[2..].iter().product();
        let mut data = a.data.clone();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let y = b.data[i % c];
            chunk.iter_mut().for_each(|x| *x = op.apply(*x, y));
        }
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    Err(Error::shape(format!(
        "cannot combine {:?} with {:?}",
        a.shape, b.shape
    )))
}

/// Matrix product. Rank-2 operands give `[M,K]·[K,P]`; rank-3 operands share
/// a leading batch extent.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, k2, p) = match (&a.shape[..], &b.shape[..]) {
        ([m, k], [k2, p]) => (None, *m, *k, *k2, *p),
        ([ba, m, k], [bb, k2, p]) if ba == bb => (Some(*ba), *m, *k, *k2, *p),
        _ => {
            return Err(Error::shape(format!(
                "matmul needs matching rank-2 or batched rank-3 operands, got {:?} and {:?}",
                a.shape, b.shape
            )))
        }
    };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let nb = batch.unwrap_or(1);
    let mut out = vec![0.0f32; nb * m * p];
    for bi in 0..nb {
        gemm(
            m,
            k,
            p,
            &a.data[bi * m * k..(bi + 1) * m * k],
            false,
            &b.data[bi * k * p..(bi + 1) * k * p],
            false,
            &mut out[bi * m * p..(bi + 1) * m * p],
        );
    }
    let shape = match batch {
        Some(nb) => vec![nb, m, p],
        None => vec![m, p],
    };
    Tensor::new(&shape, out)
}

/// `out[M,P] = op(a)·op(b)` where `op(a)` is `[M,K]` and `op(b)` is `[K,P]`.
/// Transposed operands are read in place (`a` stored `[K,M]`, `b` stored
/// `[P,K]`). Each output row is accumulated sequentially on one thread, so
/// results do not depend on the worker count.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    p: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    out: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    let row = |mi: usize, row: &mut [f32]| {
        if b_t {
            for (pi, o) in row.iter_mut().enumerate() {
                let bp = &b[pi * k..(pi + 1) * k];
                let mut acc = 0.0f32;
                if a_t {
                    for kk in 0..k {
                        acc += a[kk * m + mi] * bp[kk];
                    }
                } else {
                    let ar = &a[mi * k..(mi + 1) * k];
                    for (x, y) in ar.iter().zip(bp) {
                        acc += x * y;
                    }
                }
                *o = acc;
            }
        } else {
            row.fill(0.0);
            for kk in 0..k {
                let av = if a_t { a[kk * m + mi] } else { a[mi * k + kk] };
                if av == 0.0 {
                    continue;
                }
                let br = &b[kk * p..(kk + 1) * p];
                for (o, &bv) in row.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * k * p >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(p)
            .enumerate()
            .for_each(|(mi, r)| row(mi, r));
    } else {
        out.chunks_mut(p).enumerate().for_each(|(mi, r)| row(mi, r));
    }
}

/// Splits axis 1 into `n` equal consecutive chunks.
pub fn chunk_channels(t: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    if t.rank() < 2 {
        return Err(Error::shape("chunk_channels needs a channel axis"));
    }
    let c = t.shape[1];
    if n == 0 || c % n != 0 {
        return Err(Error::shape(format!(
            "{c} channels cannot be split into {n} chunks"
        )));
    }
    let cs = c / n;
    let inner: usize = t.shape[2..].iter().product();
    let outer = t.shape[0];
    let mut shape = t.shape.clone();
    shape[1] = cs;
    Ok((0..n)
        .map(|i| {
            let mut data = Vec::with_capacity(outer * cs * inner);
            for b in 0..outer {
                let start = (b * c + i * cs) * inner;
                data.extend_from_slice(&t.data[start..start + cs * inner]);
            }
            Tensor {
                shape: shape.clone(),
                data,
            }
        })
        .collect())
}

/// Inverse of [`chunk_channels`]: joins tensors along axis 1.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels of an empty list"))?;
    if first.rank() < 2 {
        return Err(Error::shape("concat_channels needs a channel axis"));
    }
    for p in parts {
        if p.rank() != first.rank() || p.shape[0] != first.shape[0] || p.shape[2..] != first.shape[2..]
        {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} with {:?}",
                first.shape, p.shape
            )));
        }
    }
    let inner: usize = first.shape[2..].iter().product();
    let c: usize = parts.iter().map(|p| p.shape[1]).sum();
    let outer = first.shape[0];
    let mut data = Vec::with_capacity(outer * c * inner);
    for b in 0..outer {
        for p in parts {
            let len = p.shape[1] * inner;
            data.extend_from_slice(&p.data[b * len..(b + 1) * len]);
        }
    }
    let mut shape = first.shape.clone();
    shape[1] = c;
    Tensor::new(&shape, data)
}

/// One attention evaluation observed during a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionCall {
    pub scope: String,
    /// Independent attention problems (batch × windows).
    pub groups: usize,
    /// Tokens per problem.
    pub tokens: usize,
}

/// Per-call instrumentation context. Not shared between forwards, so
/// concurrent inferences never contend on it.
#[derive(Debug, Default)]
pub struct Trace {
    layout_changes: Cell<u64>,
    scope: RefCell<String>,
    attention: RefCell<Vec<AttentionCall>>,
    stage_shapes: RefCell<Vec<Vec<usize>>>,
    capture_heads: bool,
    heads: RefCell<Vec<(String, Vec<Tensor>)>>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// A trace that additionally keeps per-head attention outputs.
    pub fn capturing_heads() -> Self {
        Trace {
            capture_heads: true,
            ..Self::default()
        }
    }

    pub fn layout_changes(&self) -> u64 {
        self.layout_changes.get()
    }

    pub(crate) fn record_layout_change(&self) {
        self.layout_changes.set(self.layout_changes.get() + 1);
    }

    pub fn set_scope(&self, scope: impl Into<String>) {
        *self.scope.borrow_mut() = scope.into();
    }

    pub fn scope(&self) -> String {
        self.scope.borrow().clone()
    }

    pub(crate) fn record_attention(&self, groups: usize, tokens: usize) {
        self.attention.borrow_mut().push(AttentionCall {
            scope: self.scope(),
            groups,
            tokens,
        });
    }

    pub fn attention_calls(&self) -> Vec<AttentionCall> {
        self.attention.borrow().clone()
    }

    pub(crate) fn record_stage_shape(&self, shape: &[usize]) {
        self.stage_shapes.borrow_mut().push(shape.to_vec());
    }

    pub fn stage_shapes(&self) -> Vec<Vec<usize>> {
        self.stage_shapes.borrow().clone()
    }

    pub(crate) fn wants_heads(&self) -> bool {
        self.capture_heads
    }

    pub(crate) fn record_heads(&self, heads: Vec<Tensor>) {
        self.heads.borrow_mut().push((self.scope(), heads));
    }

    pub fn take_heads(&self) -> Vec<(String, Vec<Tensor>)> {
        std::mem::take(&mut *self.heads.borrow_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| i as f32).unwrap()
    }

    #[test]
    fn construction_validates_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
    }

    #[test]
    fn reshape_keeps_flat_order() {
        let t = seq(&[2, 3]);
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        let t = seq(&[1, 4, 2, 2]);
        let r = t.reshape(&[4, 4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert_eq!(r.reshape(&[1, 4, 2, 2]).unwrap(), t);
        assert!(matches!(t.reshape(&[3, 5]), Err(Error::Shape(_))));
    }

    #[test]
    fn permute_matches_index_walk() {
        let t = seq(&[1, 2, 3, 4]);
        let trace = Trace::new();
        let p = t.permute(&[0, 2, 1, 3], &trace).unwrap();
        assert_eq!(p.shape(), &[1, 3, 2, 4]);
        for c in 0..2 {
            for h in 0..3 {
                for w in 0..4 {
                    let src = t.data()[(c * 3 + h) * 4 + w];
                    let dst = p.data()[(h * 2 + c) * 4 + w];
                    assert_eq!(src, dst);
                }
            }
        }
        assert_eq!(trace.layout_changes(), 1);
    }

    #[test]
    fn permute_identity_and_inverse() {
        let t = seq(&[2, 3, 4]);
        let trace = Trace::new();
        assert_eq!(t.permute(&[0, 1, 2], &trace).unwrap(), t);
        let axes = [2, 0, 1];
        let p = t.permute(&axes, &trace).unwrap();
        let mut inv = [0; 3];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        assert_eq!(p.permute(&inv, &trace).unwrap(), t);
        assert_eq!(trace.layout_changes(), 3);
        assert!(t.permute(&[0, 0, 1], &trace).is_err());
        assert!(t.permute(&[0, 1], &trace).is_err());
        // failures are not counted
        assert_eq!(trace.layout_changes(), 3);
    }

    #[test]
    fn reshape_does_not_count_as_layout_change() {
        let trace = Trace::new();
        let t = seq(&[2, 3, 4]);
        let _ = t.reshape(&[6, 4]).unwrap();
        assert_eq!(trace.layout_changes(), 0);
    }

    #[test]
    fn elementwise_cases() {
        let t = seq(&[2, 3]);
        assert_eq!(t.mul(&Tensor::ones(&[2, 3]).unwrap()).unwrap(), t);
        let neg = t.map(|v| -v);
        assert!(t.add(&neg).unwrap().data().iter().all(|&v| v == 0.0));
        let a = Tensor::new(&[2], vec![0.5, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![0.5, 0.25]).unwrap();
        assert_eq!(a.mul(&b).unwrap().data(), &[0.25, 0.5]);
        assert!(t.add(&seq(&[3, 2])).is_err());
    }

    #[test]
    fn channel_broadcast() {
        let t = Tensor::ones(&[2, 3, 2, 2]).unwrap();
        let b = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let out = t.mul(&b).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    assert_eq!(out.data()[(n * 3 + c) * 4 + i], (c + 1) as f32);
                }
            }
        }
        assert!(t.mul(&Tensor::ones(&[2]).unwrap()).is_err());
    }

    #[test]
    fn matmul_small_cases() {
        let a = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5., 6., 7., 8.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
        let eye = Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let u = Tensor::new(&[1, 3], vec![1., 2., 3.]).unwrap();
        let v = Tensor::new(&[3, 1], vec![4., 5., 6.]).unwrap();
        assert_eq!(matmul(&u, &v).unwrap().data(), &[32.0]);
        assert!(matmul(&a, &u).is_err());
    }

    #[test]
    fn gemm_transpose_variants_agree() {
        let (m, k, p) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * p).map(|i| (i as f32 * 0.91).cos()).collect();
        let at: Vec<f32> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f32> = (0..p * k).map(|i| b[(i % k) * p + i / k]).collect();
        let mut want = vec![0.0; m * p];
        gemm(m, k, p, &a, false, &b, false, &mut want);
        for (ta, tb) in [(true, false), (false, true), (true, true)] {
            let mut got = vec![0.0; m * p];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(m, k, p, aa, ta, bb, tb, &mut got);
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn chunk_concat_edges() {
        let t = seq(&[1, 4, 2, 2]);
        let one = chunk_channels(&t, 1).unwrap();
        assert_eq!(one, vec![t.clone()]);
        let two = chunk_channels(&t, 2).unwrap();
        assert_eq!(two[0].data(), &t.data()[..8]);
        assert_eq!(two[1].data(), &t.data()[8..]);
        assert!(chunk_channels(&t, 3).is_err());
        let other = seq(&[1, 2, 3, 2]);
        assert!(concat_channels(&[two[0].clone(), other]).is_err());
    }

    proptest! {
        #[test]
        fn chunk_concat_roundtrip(n_pow in 0u32..5, batch in 1usize..3, hw in 1usize..4, seed in 0u64..1000) {
            let n = 1usize << n_pow;
            let t = Tensor::from_fn(&[batch, 16, hw, hw], |i| ((i as u64 * 2654435761 + seed) % 1000) as f32 - 500.0).unwrap();
            let parts = chunk_channels(&t, n).unwrap();
            prop_assert_eq!(parts.len(), n);
            let total: usize = parts.iter().map(|p| p.numel()).sum();
            prop_assert_eq!(total, t.numel());
            prop_assert_eq!(concat_channels(&parts).unwrap(), t);
        }

        #[test]
        fn permute_conserves_elements(a in 1usize..4, b in 1usize..4, c in 1usize..4, d in 1usize..4) {
            let t = seq(&[a, b, c, d]);
            let p = t.permute(&[3, 1, 0, 2], &Trace::new()).unwrap();
            let mut x = p.data().to_vec();
            x.sort_by(f32::total_cmp);
            prop_assert_eq!(&x[..], t.data());
        }
    }
}
