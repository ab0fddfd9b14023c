use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AttentionBlock, Block, BlockSpec, ConvBlock, Ffn, Head, Mixer, Model, ModelConfig, Stage, WindowSpec};
use crate::attention::{CpeParams, MhaParams, ShmaParams};
use crate::error::{Error, Result};
use crate::io::WeightStore;
use crate::nn::{Activation, BnParams, ConvBn, ConvParams, LinearParams, DEFAULT_BN_EPS};
use crate::tensor::Tensor;

/// Random initialisation: weights from a normal distribution truncated at
/// ±2σ, zero biases, identity batch norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitPolicy {
    pub seed: u64,
    pub std: f32,
    /// Draw BN statistics and affine terms at random instead of identity, so
    /// that fusion and loading tests exercise non-trivial BN.
    pub random_bn: bool,
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy {
            seed: 0,
            std: 0.02,
            random_bn: false,
        }
    }
}

pub(super) trait Source {
    fn weight(&mut self, name: &str, shape: &[usize]) -> Result<Tensor>;
    /// Initialised to zero when building from scratch.
    fn bias(&mut self, name: &str, shape: &[usize]) -> Result<Tensor>;
    /// Absent when building from scratch.
    fn optional(&mut self, name: &str, shape: &[usize]) -> Result<Option<Tensor>>;
    fn bn(&mut self, prefix: &str, c: usize) -> Result<Option<BnParams>>;
}

pub(super) struct InitSource {
    rng: ChaCha8Rng,
    normal: Normal<f32>,
    policy: InitPolicy,
}

impl InitSource {
    pub(super) fn new(policy: &InitPolicy) -> Self {
        InitSource {
            rng: ChaCha8Rng::seed_from_u64(policy.seed),
            normal: Normal::new(0.0, policy.std.abs()).expect("finite std"),
            policy: *policy,
        }
    }

    fn trunc_normal(&mut self) -> f32 {
        let bound = 2.0 * self.policy.std.abs();
        loop {
            let v = self.normal.sample(&mut self.rng);
            if v.abs() <= bound {
                return v;
            }
        }
    }

    fn uniform(&mut self, lo: f32, hi: f32, c: usize) -> Tensor {
        Tensor::from_fn(&[c], |_| self.rng.random_range(lo..hi)).expect("rank-1 shape")
    }
}

impl Source for InitSource {
    fn weight(&mut self, _name: &str, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_fn(shape, |_| self.trunc_normal())
    }

    fn bias(&mut self, _name: &str, shape: &[usize]) -> Result<Tensor> {
        Tensor::zeros(shape)
    }

    fn optional(&mut self, _name: &str, _shape: &[usize]) -> Result<Option<Tensor>> {
        Ok(None)
    }

    fn bn(&mut self, _prefix: &str, c: usize) -> Result<Option<BnParams>> {
        if !self.policy.random_bn {
            return BnParams::identity(c).map(Some);
        }
        Ok(Some(BnParams {
            gamma: self.uniform(0.5, 1.5, c),
            beta: self.uniform(-0.2, 0.2, c),
            running_mean: self.uniform(-0.2, 0.2, c),
            running_var: self.uniform(0.5, 1.5, c),
            eps: DEFAULT_BN_EPS,
        }))
    }
}

pub(super) struct StoreSource<'a> {
    store: &'a WeightStore,
    used: HashSet<String>,
}

impl<'a> StoreSource<'a> {
    pub(super) fn new(store: &'a WeightStore) -> Self {
        StoreSource {
            store,
            used: HashSet::new(),
        }
    }

    /// Rejects tensors the architecture never asked for.
    pub(super) fn finish(&self) -> Result<()> {
        let unused: Vec<&str> = self.store.iter().map(|(n, _)| n).filter(|n| !self.used.contains(*n)).collect();
        match unused.first() {
            None => Ok(()),
            Some(first) => Err(Error::arg(format!(
                "weight store has {} tensor(s) the architecture does not use, e.g. `{first}`",
                unused.len()
            ))),
        }
    }
}

impl Source for StoreSource<'_> {
    fn weight(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.optional(name, shape)?
            .ok_or_else(|| Error::MissingWeight(name.to_owned()))
    }

    fn bias(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.weight(name, shape)
    }

    fn optional(&mut self, name: &str, shape: &[usize]) -> Result<Option<Tensor>> {
        let Some(t) = self.store.get(name) else {
            return Ok(None);
        };
        if t.shape() != shape {
            return Err(Error::shape(format!(
                "weight `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        self.used.insert(name.to_owned());
        Ok(Some(t.clone()))
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Result<Option<BnParams>> {
        if !self.store.contains(&format!("{prefix}.gamma")) {
            return Ok(None);
        }
        let mut get = |field: &str| self.weight(&format!("{prefix}.{field}"), &[c]);
        Ok(Some(BnParams {
            gamma: get("gamma")?,
            beta: get("beta")?,
            running_mean: get("running_mean")?,
            running_var: get("running_var")?,
            eps: DEFAULT_BN_EPS,
        }))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bn(
    src: &mut dyn Source,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    groups: usize,
    act: Activation,
) -> Result<ConvBn> {
    let weight = src.weight(&format!("{prefix}.conv.weight"), &[cout, cin / groups, k, k])?;
    let bias = src.optional(&format!("{prefix}.conv.bias"), &[cout])?;
    let bn = src.bn(&format!("{prefix}.bn"), cout)?;
    if bn.is_none() && bias.is_none() {
        // neither an unfused BN nor a fused bias
        return Err(Error::MissingWeight(format!("{prefix}.bn.gamma")));
    }
    Ok(ConvBn {
        conv: ConvParams::new(weight, bias, stride, k / 2, groups)?,
        bn,
        act,
    })
}

fn pointwise(src: &mut dyn Source, prefix: &str, cin: usize, cout: usize, act: Activation) -> Result<ConvBn> {
    conv_bn(src, prefix, cin, cout, 1, 1, 1, act)
}

fn ffn(src: &mut dyn Source, prefix: &str, c: usize, ratio: usize) -> Result<Ffn> {
    Ok(Ffn {
        expand: pointwise(src, &format!("{prefix}.expand"), c, c * ratio, Activation::Gelu)?,
        project: pointwise(src, &format!("{prefix}.project"), c * ratio, c, Activation::Identity)?,
    })
}

fn cpe(src: &mut dyn Source, prefix: &str, c: usize) -> Result<CpeParams> {
    let weight = src.weight(&format!("{prefix}.weight"), &[c, 1, 3, 3])?;
    let bias = src.bias(&format!("{prefix}.bias"), &[c])?;
    Ok(CpeParams {
        conv: ConvParams::new(weight, Some(bias), 1, 1, c)?,
    })
}

fn mha_params(src: &mut dyn Source, prefix: &str, c: usize, heads: usize) -> Result<MhaParams> {
    let mut proj = |n: &str| pointwise(src, &format!("{prefix}.{n}"), c, c, Activation::Identity);
    Ok(MhaParams {
        q: proj("q")?,
        k: proj("k")?,
        v: proj("v")?,
        o: proj("o")?,
        num_heads: heads,
    })
}

fn block(src: &mut dyn Source, prefix: &str, spec: &BlockSpec) -> Result<Block> {
    let c = spec.channels();
    let ffn_prefix = format!("{prefix}.ffn");
    let attn = format!("{prefix}.attn");
    if let BlockSpec::Conv { ratio, kernel, .. } = *spec {
        let dw = conv_bn(src, &format!("{prefix}.dw"), c, c, kernel, 1, c, Activation::Identity)?;
        return Ok(Block::Conv(ConvBlock {
            dw,
            ffn: ffn(src, &ffn_prefix, c, ratio)?,
        }));
    }
    // the baselines carry no positional encoding
    let cpe = match spec {
        BlockSpec::Shma { .. } | BlockSpec::WindowShma { .. } => Some(cpe(src, &format!("{prefix}.cpe"), c)?),
        _ => None,
    };
    let (mixer, window) = match *spec {
        BlockSpec::Shma { head_dim, .. } => (Mixer::Shma(shma_params(src, &attn, c, head_dim)?), None),
        BlockSpec::WindowShma { head_dim, window, role, chunks, .. } => (
            Mixer::Shma(shma_params(src, &attn, c, head_dim)?),
            Some(WindowSpec { size: window, chunks, role }),
        ),
        BlockSpec::Sha { .. } => (Mixer::Sha(mha_params(src, &attn, c, 1)?), None),
        BlockSpec::Mha { head_dim, .. } => (Mixer::Mha(mha_params(src, &attn, c, c / head_dim)?), None),
        BlockSpec::Conv { .. } => unreachable!(),
    };
    Ok(Block::Attention(AttentionBlock {
        cpe,
        mixer,
        ffn: ffn(src, &ffn_prefix, c, spec.ratio())?,
        window,
    }))
}

fn shma_params(src: &mut dyn Source, prefix: &str, c: usize, d: usize) -> Result<ShmaParams> {
    let mut proj = |n: &str, out: usize| pointwise(src, &format!("{prefix}.{n}"), c, out, Activation::Identity);
    Ok(ShmaParams {
        q: proj("q", d)?,
        k: proj("k", d)?,
        v: proj("v", c)?,
        m: proj("m", c)?,
        o: proj("o", c)?,
    })
}

pub(super) fn build(cfg: &ModelConfig, src: &mut dyn Source) -> Result<Model> {
    cfg.validate()?;
    let k = cfg.stem.kernel;
    let [c0, c1, c2] = cfg.stem.channels;
    let stem = vec![
        conv_bn(src, "stem.0", cfg.in_channels, c0, k, 2, 1, Activation::Gelu)?,
        conv_bn(src, "stem.1", c0, c1, k, 2, 1, Activation::Gelu)?,
        pointwise(src, "stem.2", c1, c2, Activation::Identity)?,
    ];
    let mut c = c2;
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (si, sc) in cfg.stages.iter().enumerate() {
        let downsample = match sc.downsample {
            Some(d) => {
                let ds = conv_bn(
                    src,
                    &format!("stages.{si}.downsample"),
                    c,
                    d.channels,
                    d.kernel,
                    d.stride,
                    1,
                    Activation::Identity,
                )?;
                c = d.channels;
                Some(ds)
            }
            None => None,
        };
        let blocks = sc
            .blocks
            .iter()
            .enumerate()
            .map(|(bi, spec)| block(src, &format!("stages.{si}.blocks.{bi}"), spec))
            .collect::<Result<Vec<_>>>()?;
        stages.push(Stage { downsample, blocks });
    }
    let head = Head {
        bn: src.bn("head.bn", c)?,
        fc: LinearParams {
            weight: src.weight("head.fc.weight", &[cfg.num_classes, c])?,
            bias: src.bias("head.fc.bias", &[cfg.num_classes])?,
        },
    };
    Ok(Model {
        config: cfg.clone(),
        stem,
        stages,
        head,
    })
}
