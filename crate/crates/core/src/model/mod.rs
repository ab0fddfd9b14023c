//! Executable hybrid models: config → built layers with bound weights →
//! forward.

mod build;
mod config;

pub use build::InitPolicy;
pub use config::{
    preset_config, BlockSpec, Downsample, ModelConfig, StageConfig, StemConfig, WindowRole, MHA_BASELINE_HEAD_DIM,
    PRESET_NAMES, WINDOW_CHUNKS,
};

use crate::attention::{
    chunked_window_partition, chunked_window_reverse, cpe, mha_forward, sha_attention_forward, shma_forward,
    CpeParams, MhaParams, ShmaParams,
};
use crate::error::{Error, Result};
use crate::io::WeightStore;
use crate::nn::{batchnorm_infer, global_avg_pool, linear, BnParams, ConvBn, LinearParams};
use crate::tensor::{Tensor, Trace};

/// 1×1 expand + BN + GELU, 1×1 project + BN.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub expand: ConvBn,
    pub project: ConvBn,
}

impl Ffn {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.project.forward(&self.expand.forward(x)?)
    }
}

/// Depthwise k×k + BN followed by an FFN, with one residual around both.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub dw: ConvBn,
    pub ffn: Ffn,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    Shma(ShmaParams),
    Sha(MhaParams),
    Mha(MhaParams),
}

impl Mixer {
    pub fn forward(&self, x: &Tensor, trace: &Trace) -> Result<Tensor> {
        match self {
            Mixer::Shma(p) => shma_forward(x, p, trace),
            Mixer::Sha(p) => sha_attention_forward(x, p, trace),
            Mixer::Mha(p) => mha_forward(x, p, trace),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub size: usize,
    pub chunks: usize,
    pub role: WindowRole,
}

/// Optional CPE, attention mixer and FFN, each with a residual.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub cpe: Option<CpeParams>,
    pub mixer: Mixer,
    pub ffn: Ffn,
    pub window: Option<WindowSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Conv(ConvBlock),
    Attention(AttentionBlock),
}

impl Block {
    /// `h, w` are the full-map extents of the stage, needed to reverse windows.
    pub fn forward(&self, x: Tensor, h: usize, w: usize, trace: &Trace) -> Result<Tensor> {
        match self {
            Block::Conv(b) => {
                let y = b.ffn.forward(&b.dw.forward(&x)?)?;
                y.add(&x)
            }
            Block::Attention(b) => {
                let mut x = x;
                if let Some(p) = &b.cpe {
                    x = cpe(&x, p)?;
                }
                match b.window {
                    Some(WindowSpec { size, chunks, role: WindowRole::PartitionEntry }) => {
                        x = chunked_window_partition(&x, size, chunks, trace)?;
                    }
                    Some(WindowSpec { size, chunks, role: WindowRole::ReverseExit }) => {
                        x = chunked_window_reverse(&x, size, h, w, chunks, trace)?;
                    }
                    _ => {}
                }
                let x = b.mixer.forward(&x, trace)?.add(&x)?;
                b.ffn.forward(&x)?.add(&x)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub downsample: Option<ConvBn>,
    pub blocks: Vec<Block>,
}

/// Global average pool → BN → linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub bn: Option<BnParams>,
    pub fc: LinearParams,
}

impl Head {
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut pooled = global_avg_pool(features)?;
        if let Some(bn) = &self.bn {
            pooled = batchnorm_infer(&pooled, bn)?;
        }
        linear(&pooled, &self.fc.weight, &self.fc.bias)
    }
}

/// A built model. Weights are never mutated by forward, so one model can
/// serve concurrent inferences.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub stem: Vec<ConvBn>,
    pub stages: Vec<Stage>,
    pub head: Head,
}

/// A named layer with weights, in build order.
#[derive(Clone, Copy, Debug)]
pub enum LayerRef<'a> {
    ConvBn(&'a ConvBn),
    Cpe(&'a CpeParams),
}

impl Model {
    pub fn new(config: &ModelConfig, init: &InitPolicy) -> Result<Model> {
        build::build(config, &mut build::InitSource::new(init))
    }

    pub fn from_store(config: &ModelConfig, store: &WeightStore) -> Result<Model> {
        let mut source = build::StoreSource::new(store);
        let model = build::build(config, &mut source)?;
        source.finish()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    /// Analytic per-stage `(C, H, W)` at the configured resolution.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.config.stage_feature_shapes(self.config.resolution)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_traced(x, &Trace::new())
    }

    /// Forward that records stage shapes, attention calls and layout changes
    /// into `trace`.
    pub fn forward_traced(&self, x: &Tensor, trace: &Trace) -> Result<Tensor> {
        let features = self.features(x, trace)?;
        trace.set_scope("head");
        self.head.forward(&features)
    }

    /// Output of the last stage.
    pub fn features(&self, x: &Tensor, trace: &Trace) -> Result<Tensor> {
        let [_, c, h, w] = x.dims4()?;
        let res = self.config.resolution;
        if c != self.config.in_channels || h != res || w != res {
            return Err(Error::shape(format!(
                "stem: expected input [N, {}, {res}, {res}], got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        let mut x = self.forward_stem(x, trace)?;
        for si in 0..self.stages.len() {
            x = self.forward_stage(si, x, trace)?;
        }
        Ok(x)
    }

    /// The stem alone; no input-size check.
    pub fn forward_stem(&self, x: &Tensor, trace: &Trace) -> Result<Tensor> {
        trace.set_scope("stem");
        let mut x = x.clone();
        for layer in &self.stem {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Stage `si` on the output of the previous stage (or the stem).
    pub fn forward_stage(&self, si: usize, x: Tensor, trace: &Trace) -> Result<Tensor> {
        let expected = *self
            .stage_shapes()
            .get(si)
            .ok_or_else(|| Error::arg(format!("no stage {si}")))?;
        let stage = &self.stages[si];
        let mut x = x;
        if let Some(ds) = &stage.downsample {
            trace.set_scope(format!("stages.{si}.downsample"));
            x = ds.forward(&x)?;
        }
        let [_, c, h, w] = x.dims4()?;
        for (bi, block) in stage.blocks.iter().enumerate() {
            trace.set_scope(format!("stages.{si}.blocks.{bi}"));
            x = block.forward(x, h, w, trace)?;
        }
        let got = x.dims4()?;
        if (got[1], got[2], got[3]) != expected || (c, h, w) != expected {
            return Err(Error::shape(format!(
                "stage {si}: produced {:?}, expected (C, H, W) = {:?}",
                &got[1..],
                expected
            )));
        }
        trace.record_stage_shape(&got);
        Ok(x)
    }

    /// Every conv/BN layer and CPE with its weight-name prefix.
    pub fn layers(&self) -> Vec<(String, LayerRef<'_>)> {
        let mut out = Vec::new();
        for (i, l) in self.stem.iter().enumerate() {
            out.push((format!("stem.{i}"), LayerRef::ConvBn(l)));
        }
        for (si, stage) in self.stages.iter().enumerate() {
            if let Some(ds) = &stage.downsample {
                out.push((format!("stages.{si}.downsample"), LayerRef::ConvBn(ds)));
            }
            for (bi, block) in stage.blocks.iter().enumerate() {
                let p = format!("stages.{si}.blocks.{bi}");
                match block {
                    Block::Conv(b) => {
                        out.push((format!("{p}.dw"), LayerRef::ConvBn(&b.dw)));
                        out.push((format!("{p}.ffn.expand"), LayerRef::ConvBn(&b.ffn.expand)));
                        out.push((format!("{p}.ffn.project"), LayerRef::ConvBn(&b.ffn.project)));
                    }
                    Block::Attention(b) => {
                        if let Some(c) = &b.cpe {
                            out.push((format!("{p}.cpe"), LayerRef::Cpe(c)));
                        }
                        let projections: Vec<(&str, &ConvBn)> = match &b.mixer {
                            Mixer::Shma(s) => s.projections().to_vec(),
                            Mixer::Sha(m) | Mixer::Mha(m) => m.projections().to_vec(),
                        };
                        for (name, l) in projections {
                            out.push((format!("{p}.attn.{name}"), LayerRef::ConvBn(l)));
                        }
                        out.push((format!("{p}.ffn.expand"), LayerRef::ConvBn(&b.ffn.expand)));
                        out.push((format!("{p}.ffn.project"), LayerRef::ConvBn(&b.ffn.project)));
                    }
                }
            }
        }
        out
    }

    /// Mutable access to every conv/BN layer, in the order of [`Model::layers`].
    pub fn conv_bns_mut(&mut self) -> Vec<&mut ConvBn> {
        let mut out: Vec<&mut ConvBn> = self.stem.iter_mut().collect();
        for stage in &mut self.stages {
            if let Some(ds) = &mut stage.downsample {
                out.push(ds);
            }
            for block in &mut stage.blocks {
                match block {
                    Block::Conv(b) => out.extend([&mut b.dw, &mut b.ffn.expand, &mut b.ffn.project]),
                    Block::Attention(b) => {
                        match &mut b.mixer {
                            Mixer::Shma(ShmaParams { q, k, v, m, o }) => out.extend([q, k, v, m, o]),
                            Mixer::Sha(MhaParams { q, k, v, o, .. }) | Mixer::Mha(MhaParams { q, k, v, o, .. }) => {
                                out.extend([q, k, v, o])
                            }
                        }
                        out.extend([&mut b.ffn.expand, &mut b.ffn.project]);
                    }
                }
            }
        }
        out
    }

    /// All weight tensors under their unique names, in build order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, layer) in self.layers() {
            match layer {
                LayerRef::ConvBn(l) => {
                    out.push((format!("{prefix}.conv.weight"), &l.conv.weight));
                    if let Some(b) = &l.conv.bias {
                        out.push((format!("{prefix}.conv.bias"), b));
                    }
                    if let Some(b) = &l.bn {
                        push_bn(&mut out, &format!("{prefix}.bn"), b);
                    }
                }
                LayerRef::Cpe(c) => {
                    out.push((format!("{prefix}.weight"), &c.conv.weight));
                    if let Some(b) = &c.conv.bias {
                        out.push((format!("{prefix}.bias"), b));
                    }
                }
            }
        }
        if let Some(b) = &self.head.bn {
            push_bn(&mut out, "head.bn", b);
        }
        out.push(("head.fc.weight".into(), &self.head.fc.weight));
        out.push(("head.fc.bias".into(), &self.head.fc.bias));
        out
    }

    pub fn to_store(&self) -> WeightStore {
        let mut store = WeightStore::new();
        for (name, t) in self.named_tensors() {
            store.insert(name, t.clone()).expect("model tensor names are unique");
        }
        store
    }

    pub fn bn_count(&self) -> usize {
        self.layers()
            .iter()
            .filter(|(_, l)| matches!(l, LayerRef::ConvBn(c) if c.bn.is_some()))
            .count()
            + usize::from(self.head.bn.is_some())
    }

    /// Checks every layer's parameter invariants.
    pub fn validate(&self) -> Result<()> {
        let wrap = |name: &str, e: Error| match e {
            Error::Shape(m) => Error::Shape(format!("{name}: {m}")),
            Error::Argument(m) => Error::Argument(format!("{name}: {m}")),
            other => other,
        };
        for (name, layer) in self.layers() {
            match layer {
                LayerRef::ConvBn(l) => {
                    l.conv.validate().map_err(|e| wrap(&name, e))?;
                    if let Some(b) = &l.bn {
                        b.validate().map_err(|e| wrap(&format!("{name}.bn"), e))?;
                    }
                }
                LayerRef::Cpe(c) => c.conv.validate().map_err(|e| wrap(&name, e))?,
            }
        }
        if let Some(b) = &self.head.bn {
            b.validate().map_err(|e| wrap("head.bn", e))?;
        }
        for stage in &self.stages {
            for block in &stage.blocks {
                if let Block::Attention(b) = block {
                    match &b.mixer {
                        Mixer::Shma(p) => p.validate()?,
                        Mixer::Sha(p) | Mixer::Mha(p) => p.validate()?,
                    }
                }
            }
        }
        Ok(())
    }
}

fn push_bn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, b: &'a BnParams) {
    out.push((format!("{prefix}.gamma"), &b.gamma));
    out.push((format!("{prefix}.beta"), &b.beta));
    out.push((format!("{prefix}.running_mean"), &b.running_mean));
    out.push((format!("{prefix}.running_var"), &b.running_var));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        let c = 16;
        ModelConfig {
            name: "small".into(),
            in_channels: 3,
            resolution: 64,
            num_classes: 10,
            stem: StemConfig { kernel: 5, channels: [8, 16, c] },
            stages: vec![
                StageConfig {
                    downsample: None,
                    blocks: vec![BlockSpec::Conv { channels: c, ratio: 2, kernel: 7 }],
                },
                StageConfig {
                    downsample: Some(Downsample { kernel: 3, stride: 2, channels: 32 }),
                    blocks: vec![
                        BlockSpec::Shma { channels: 32, ratio: 2, head_dim: 8 },
                        BlockSpec::Mha { channels: 32, ratio: 2, head_dim: 8 },
                        BlockSpec::Sha { channels: 32, ratio: 2 },
                    ],
                },
                StageConfig {
                    downsample: Some(Downsample { kernel: 3, stride: 2, channels: 32 }),
                    blocks: vec![
                        BlockSpec::WindowShma {
                            channels: 32,
                            ratio: 2,
                            head_dim: 8,
                            window: 2,
                            role: WindowRole::PartitionEntry,
                            chunks: 4,
                        },
                        BlockSpec::WindowShma {
                            channels: 32,
                            ratio: 2,
                            head_dim: 8,
                            window: 2,
                            role: WindowRole::Interior,
                            chunks: 4,
                        },
                        BlockSpec::WindowShma {
                            channels: 32,
                            ratio: 2,
                            head_dim: 8,
                            window: 2,
                            role: WindowRole::ReverseExit,
                            chunks: 4,
                        },
                    ],
                },
            ],
        }
    }

    fn random_input(seed: u64, n: usize, res: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, res, res], |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn builds_are_deterministic() {
        let cfg = small_config();
        let a = Model::new(&cfg, &InitPolicy::default()).unwrap();
        let b = Model::new(&cfg, &InitPolicy::default()).unwrap();
        assert_eq!(a, b);
        let c = Model::new(&cfg, &InitPolicy { seed: 1, ..InitPolicy::default() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn names_are_unique_and_stable() {
        let m = Model::new(&small_config(), &InitPolicy::default()).unwrap();
        let store = m.to_store();
        assert_eq!(store.len(), m.named_tensors().len());
        assert!(store.contains("stem.0.conv.weight"));
        assert!(store.contains("stages.1.blocks.0.attn.m.bn.gamma"));
        assert!(store.contains("stages.1.blocks.0.cpe.bias"));
        assert!(!store.contains("stages.1.blocks.1.cpe.weight"));
        assert!(store.contains("head.bn.running_var"));
        assert!(store.contains("head.fc.weight"));
    }

    #[test]
    fn store_roundtrip_forward_is_bit_exact() {
        let cfg = small_config();
        let m = Model::new(&cfg, &InitPolicy { random_bn: true, ..InitPolicy::default() }).unwrap();
        let store = WeightStore::from_bytes(&m.to_store().to_bytes()).unwrap();
        let back = Model::from_store(&cfg, &store).unwrap();
        assert_eq!(back, m);
        let x = random_input(3, 1, 64);
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn missing_and_extra_weights() {
        let cfg = small_config();
        let m = Model::new(&cfg, &InitPolicy::default()).unwrap();
        let mut partial = WeightStore::new();
        for (name, t) in m.named_tensors() {
            if name != "stages.2.blocks.1.attn.k.conv.weight" {
                partial.insert(name, t.clone()).unwrap();
            }
        }
        match Model::from_store(&cfg, &partial) {
            Err(Error::MissingWeight(name)) => assert_eq!(name, "stages.2.blocks.1.attn.k.conv.weight"),
            other => panic!("{other:?}"),
        }
        let mut extra = m.to_store();
        extra.insert("bogus", Tensor::ones(&[1]).unwrap()).unwrap();
        assert!(Model::from_store(&cfg, &extra).is_err());
    }

    #[test]
    fn stage_shapes_match_config_and_window_tokens() {
        let cfg = small_config();
        let m = Model::new(&cfg, &InitPolicy::default()).unwrap();
        let t = Trace::new();
        let logits = m.forward_traced(&random_input(0, 1, 64), &t).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
        let shapes: Vec<_> = t.stage_shapes().iter().map(|s| (s[1], s[2], s[3])).collect();
        assert_eq!(shapes, cfg.stage_feature_shapes(64));
        let calls = t.attention_calls();
        let tokens: Vec<_> = calls.iter().map(|c| (c.groups, c.tokens)).collect();
        // shma, mha (4 heads), sha at 8x8; two windowed calls on 2x2 windows of a 4x4 map; global exit
        assert_eq!(tokens, vec![(1, 64), (4, 64), (1, 64), (4, 4), (4, 4), (1, 16)]);
    }

    #[test]
    fn wrong_resolution_names_stem() {
        let m = Model::new(&small_config(), &InitPolicy::default()).unwrap();
        let err = m.forward(&random_input(0, 1, 32)).unwrap_err();
        assert!(matches!(&err, Error::Shape(msg) if msg.contains("stem")), "{err}");
    }

    #[test]
    fn batch_independence() {
        let m = Model::new(&small_config(), &InitPolicy { random_bn: true, ..InitPolicy::default() }).unwrap();
        let x = random_input(5, 2, 64);
        let both = m.forward(&x).unwrap();
        let half = 3 * 64 * 64;
        for i in 0..2 {
            let xi = Tensor::new(&[1, 3, 64, 64], x.data()[i * half..(i + 1) * half].to_vec()).unwrap();
            let yi = m.forward(&xi).unwrap();
            for (a, b) in yi.data().iter().zip(&both.data()[i * 10..(i + 1) * 10]) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zeroed_blocks_are_identity() {
        let cfg = small_config();
        let mut m = Model::new(&cfg, &InitPolicy::default()).unwrap();
        for stage in &mut m.stages {
            for block in &mut stage.blocks {
                let zero = |l: &mut ConvBn| l.conv.weight.map_inplace(|_| 0.0);
                match block {
                    Block::Conv(b) => zero(&mut b.dw),
                    Block::Attention(b) => {
                        if let Some(c) = &mut b.cpe {
                            c.conv.weight.map_inplace(|_| 0.0);
                            c.conv.bias.as_mut().unwrap().map_inplace(|_| 0.0);
                        }
                        match &mut b.mixer {
                            Mixer::Shma(p) => zero(&mut p.o),
                            Mixer::Sha(p) | Mixer::Mha(p) => zero(&mut p.o),
                        }
                        zero(&mut b.ffn.project);
                    }
                }
            }
        }
        // stage 1 only: block sequence must reproduce its input (the downsampled map)
        let x = random_input(1, 1, 64);
        let t = Trace::new();
        let mut feat = x.clone();
        for l in &m.stem {
            feat = l.forward(&feat).unwrap();
        }
        let ds = m.stages[1].downsample.as_ref().unwrap();
        let stage_in = ds.forward(&m.stages[0].blocks[0].forward(feat, 16, 16, &t).unwrap()).unwrap();
        let mut y = stage_in.clone();
        for b in &m.stages[1].blocks {
            y = b.forward(y, 8, 8, &t).unwrap();
        }
        assert_eq!(y, stage_in);
        // windowed stage too
        let stage_in = Tensor::from_fn(&[1, 32, 4, 4], |i| (i as f32).sin()).unwrap();
        let mut y = stage_in.clone();
        for b in &m.stages[2].blocks {
            y = b.forward(y, 4, 4, &t).unwrap();
        }
        assert_eq!(y, stage_in);
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        let m = Model::new(&small_config(), &InitPolicy::default()).unwrap();
        let x = Tensor::zeros(&[1, 3, 64, 64]).unwrap();
        assert!(m.forward(&x).unwrap().is_finite());
    }
}
