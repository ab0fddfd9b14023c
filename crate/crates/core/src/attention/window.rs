//! Non-overlapping window partitioning and its channel-chunked variant.
//!
//! A `[N, C, H, W]` map becomes `[N·(H/P)·(W/P), C, P, P]`; window `(i, j)`
//! of image `n` lands at batch index `n·(H/P)·(W/P) + i·(W/P) + j`.

use crate::error::{Error, Result};
use crate::tensor::{chunk_channels, concat_channels, Tensor, Trace};

fn grid(h: usize, w: usize, p: usize) -> Result<(usize, usize)> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} feature map is not divisible into {p}x{p} windows"
        )));
    }
    Ok((h / p, w / p))
}

pub fn window_partition(x: &Tensor, p: usize, trace: &Trace) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let (gh, gw) = grid(h, w, p)?;
    trace.record_layout_change();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..n {
        for i in 0..gh {
            for j in 0..gw {
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    for y in 0..p {
                        let row = plane + (i * p + y) * w + j * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(&[n * gh * gw, c, p, p], out)
}

pub fn window_reverse(windows: &Tensor, p: usize, h: usize, w: usize, trace: &Trace) -> Result<Tensor> {
    let [nw, c, ph, pw] = windows.dims4()?;
    let (gh, gw) = grid(h, w, p)?;
    if ph != p || pw != p || nw % (gh * gw) != 0 {
        return Err(Error::shape(format!(
            "{:?} is not a stack of {p}x{p} windows tiling {h}x{w}",
            windows.shape()
        )));
    }
    trace.record_layout_change();
    let n = nw / (gh * gw);
    let src = windows.data();
    let mut out = vec![0.0f32; src.len()];
    let mut k = 0;
    for b in 0..n {
        for i in 0..gh {
            for j in 0..gw {
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    for y in 0..p {
                        let row = plane + (i * p + y) * w + j * p;
                        out[row..row + p].copy_from_slice(&src[k..k + p]);
                        k += p;
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Splits channels into `n_chunks` groups, partitions each group separately
/// and concatenates the windowed groups back along channels.
pub fn chunked_window_partition(x: &Tensor, p: usize, n_chunks: usize, trace: &Trace) -> Result<Tensor> {
    let [_, _, h, w] = x.dims4()?;
    grid(h, w, p)?;
    let parts = chunk_channels(x, n_chunks)?
        .iter()
        .map(|chunk| window_partition(chunk, p, trace))
        .collect::<Result<Vec<_>>>()?;
    concat_channels(&parts)
}

pub fn chunked_window_reverse(
    windows: &Tensor,
    p: usize,
    h: usize,
    w: usize,
    n_chunks: usize,
    trace: &Trace,
) -> Result<Tensor> {
    let parts = chunk_channels(windows, n_chunks)?
        .iter()
        .map(|chunk| window_reverse(chunk, p, h, w, trace))
        .collect::<Result<Vec<_>>>()?;
    concat_channels(&parts)
}
