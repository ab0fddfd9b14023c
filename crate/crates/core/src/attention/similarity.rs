use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadSimilarity {
    /// Mean cosine similarity over head pairs (each pair first averaged over
    /// tokens).
    pub mean: f64,
    /// Token vectors with zero norm; their pairs scored 0.
    pub zero_norm: usize,
}

/// Average pairwise cosine similarity of per-token head outputs
/// (`[N, L, dh]` each).
pub fn head_cosine_similarity(heads: &[Tensor]) -> Result<HeadSimilarity> {
    if heads.len() < 2 {
        return Err(Error::arg(format!(
            "head similarity needs at least 2 heads, got {}",
            heads.len()
        )));
    }
    let shape = heads[0].shape();
    if shape.len() != 3 || heads.iter().any(|h| h.shape() != shape) {
        return Err(Error::shape("head outputs must share one [N, L, dh] shape"));
    }
    let dh = shape[2];
    let tokens = shape[0] * shape[1];
    let mut zero_norm = 0;
    let mut pair_sum = 0.0f64;
    let mut pairs = 0usize;
    for a in 0..heads.len() {
        for b in a + 1..heads.len() {
            let mut tok_sum = 0.0f64;
            for t in 0..tokens {
                let u = &heads[a].data()[t * dh..(t + 1) * dh];
                let v = &heads[b].data()[t * dh..(t + 1) * dh];
                let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
                for (&x, &y) in u.iter().zip(v) {
                    dot += x as f64 * y as f64;
                    nu += x as f64 * x as f64;
                    nv += y as f64 * y as f64;
                }
                if nu == 0.0 || nv == 0.0 {
                    zero_norm += 1;
                    continue;
                }
                tok_sum += (dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0);
            }
            pair_sum += tok_sum / tokens as f64;
            pairs += 1;
        }
    }
    Ok(HeadSimilarity {
        mean: pair_sum / pairs as f64,
        zero_norm,
    })
}
