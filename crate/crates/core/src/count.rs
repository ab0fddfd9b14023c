//! Parameter and multiply-accumulate accounting.
//!
//! Conventions: a convolution costs `H'·W'·Cout·K²·Cin/groups`, a linear
//! layer `Cin·Cout` per sample, attention `L²·d_qk + L²·C_v` per window, the
//! sigmoid modulation product `H·W·C`. Batch norm, activations, residual
//! adds, softmax and pooling are free. Running BN statistics are buffers,
//! not parameters.

use crate::attention::{MhaParams, ShmaParams};
use crate::error::{Error, Result};
use crate::model::{Block, Ffn, LayerRef, Mixer, Model, WindowRole, WindowSpec};
use crate::nn::{ConvBn, ConvParams};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacEntry {
    pub name: String,
    pub macs: u64,
}

/// Trainable parameters: conv/linear weights and biases plus BN γ and β.
pub fn count_params(m: &Model) -> u64 {
    let layers: usize = m
        .layers()
        .iter()
        .map(|(_, l)| match l {
            LayerRef::ConvBn(c) => c.num_params(),
            LayerRef::Cpe(c) => c.conv.num_params(),
        })
        .sum();
    let head = m.head.bn.as_ref().map_or(0, |b| 2 * b.channels()) + m.head.fc.num_params();
    (layers + head) as u64
}

/// MACs of one convolution and its output extent.
pub fn conv_macs(conv: &ConvParams, h: usize, w: usize) -> Result<(u64, usize, usize)> {
    let (oh, ow) = conv.output_hw(h, w)?;
    let (kh, kw) = conv.kernel();
    let per_out = kh * kw * conv.in_channels() / conv.groups;
    Ok(((oh * ow * conv.out_channels() * per_out) as u64, oh, ow))
}

fn layer_macs(l: &ConvBn, h: usize, w: usize) -> Result<u64> {
    conv_macs(&l.conv, h, w).map(|(m, _, _)| m)
}

pub fn ffn_macs(f: &Ffn, h: usize, w: usize) -> Result<u64> {
    Ok(layer_macs(&f.expand, h, w)? + layer_macs(&f.project, h, w)?)
}

/// `(groups, tokens)` seen by the attention core of a block on an `h×w` map.
fn attention_extent(window: Option<WindowSpec>, h: usize, w: usize) -> Result<(usize, usize)> {
    match window {
        Some(WindowSpec { size, role, .. }) if role != WindowRole::ReverseExit => {
            if size == 0 || h % size != 0 || w % size != 0 {
                return Err(Error::shape(format!("{h}x{w} map does not tile into {size}x{size} windows")));
            }
            Ok(((h / size) * (w / size), size * size))
        }
        _ => Ok((1, h * w)),
    }
}

/// Projections + attention + modulation of an SHMA layer (no CPE, no FFN).
/// `window` is the window side for windowed attention, `None` for global.
pub fn shma_macs(p: &ShmaParams, h: usize, w: usize, window: Option<usize>) -> Result<u64> {
    let spec = window.map(|size| WindowSpec {
        size,
        chunks: 1,
        role: WindowRole::Interior,
    });
    shma_macs_inner(p, h, w, spec)
}

fn shma_macs_inner(p: &ShmaParams, h: usize, w: usize, window: Option<WindowSpec>) -> Result<u64> {
    let mut macs = 0;
    for (_, l) in p.projections() {
        macs += layer_macs(l, h, w)?;
    }
    let (groups, l) = attention_extent(window, h, w)?;
    let (c, d) = (p.channels(), p.head_dim());
    macs += (groups * l * l * (d + c)) as u64;
    macs += (h * w * c) as u64;
    Ok(macs)
}

/// Single- or multi-head attention without modulation. Splitting heads does
/// not change the total: `h·L²·(dh + dh) = L²·2C`.
pub fn mha_macs(p: &MhaParams, h: usize, w: usize) -> Result<u64> {
    let mut macs = 0;
    for (_, l) in p.projections() {
        macs += layer_macs(l, h, w)?;
    }
    let l = h * w;
    Ok(macs + (l * l * 2 * p.channels()) as u64)
}

/// Closed-form SHMA cost with `C/R` query/key channels and attention over
/// `P×P` windows (`P² = H·W` for global attention):
/// `(3 + 2/R)·HWC² + HWC + (1 + 1/R)·P²·HW·C`.
///
/// At `R = 2` the projection term is `4HWC²`; at `R = 1` the attention term
/// is `2P²HWC`.
pub fn shma_complexity_formula(h: usize, w: usize, c: usize, p: usize, r: usize) -> Result<u64> {
    if h == 0 || w == 0 || c == 0 || p == 0 || r == 0 {
        return Err(Error::arg("all arguments must be positive"));
    }
    let hw = (h * w) as u64;
    if hw % (p * p) as u64 != 0 {
        return Err(Error::arg(format!("{h}x{w} map is not divisible into {p}x{p} windows")));
    }
    if c % r != 0 {
        return Err(Error::arg(format!("{c} channels are not divisible by reduction {r}")));
    }
    let (c, d, p2) = (c as u64, (c / r) as u64, (p * p) as u64);
    let projections = 3 * hw * c * c + 2 * hw * c * d;
    let modulation = hw * c;
    let attention = p2 * hw * c + p2 * hw * d;
    Ok(projections + modulation + attention)
}

/// Per-layer MAC entries at `resolution`; sums to [`count_macs`].
pub fn mac_breakdown(m: &Model, resolution: usize) -> Result<Vec<MacEntry>> {
    let mut out = Vec::new();
    let mut push = |name: String, macs: u64| out.push(MacEntry { name, macs });
    let (mut h, mut w) = (resolution, resolution);
    let conv = |name: String, l: &ConvBn, h: &mut usize, w: &mut usize, push: &mut dyn FnMut(String, u64)| {
        let (macs, oh, ow) = conv_macs(&l.conv, *h, *w)?;
        push(name, macs);
        *h = oh;
        *w = ow;
        Ok::<_, Error>(())
    };
    for (i, l) in m.stem.iter().enumerate() {
        conv(format!("stem.{i}"), l, &mut h, &mut w, &mut push)?;
    }
    for (si, stage) in m.stages.iter().enumerate() {
        if let Some(ds) = &stage.downsample {
            conv(format!("stages.{si}.downsample"), ds, &mut h, &mut w, &mut push)?;
        }
        for (bi, block) in stage.blocks.iter().enumerate() {
            let p = format!("stages.{si}.blocks.{bi}");
            match block {
                Block::Conv(b) => {
                    push(format!("{p}.dw"), layer_macs(&b.dw, h, w)?);
                    push(format!("{p}.ffn"), ffn_macs(&b.ffn, h, w)?);
                }
                Block::Attention(b) => {
                    if let Some(c) = &b.cpe {
                        push(format!("{p}.cpe"), conv_macs(&c.conv, h, w)?.0);
                    }
                    let macs = match &b.mixer {
                        Mixer::Shma(s) => shma_macs_inner(s, h, w, b.window)?,
                        Mixer::Sha(s) | Mixer::Mha(s) => mha_macs(s, h, w)?,
                    };
                    push(format!("{p}.attn"), macs);
                    push(format!("{p}.ffn"), ffn_macs(&b.ffn, h, w)?);
                }
            }
        }
    }
    let fc = &m.head.fc.weight;
    push("head.fc".into(), (fc.shape()[0] * fc.shape()[1]) as u64);
    Ok(out)
}

pub fn count_macs(m: &Model, resolution: usize) -> Result<u64> {
    Ok(mac_breakdown(m, resolution)?.iter().map(|e| e.macs).sum())
}
