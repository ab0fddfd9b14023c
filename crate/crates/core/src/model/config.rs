//! Declarative architecture descriptions and the named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position of a windowed attention block inside its stage's window run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowRole {
    /// Partitions the full map into windows before attending.
    PartitionEntry,
    /// Operates on already-partitioned windows.
    Interior,
    /// Reverses the windows and attends globally.
    ReverseExit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockSpec {
    /// Depthwise k×k + BN, 1×1 expand + BN + GELU, 1×1 project + BN.
    Conv { channels: usize, ratio: usize, kernel: usize },
    /// CPE, single-head modulation attention, FFN.
    Shma { channels: usize, ratio: usize, head_dim: usize },
    /// Single-head attention without modulation (baseline).
    Sha { channels: usize, ratio: usize },
    /// Multi-head attention with `channels / head_dim` heads (baseline).
    Mha { channels: usize, ratio: usize, head_dim: usize },
    WindowShma {
        channels: usize,
        ratio: usize,
        head_dim: usize,
        window: usize,
        role: WindowRole,
        chunks: usize,
    },
}

impl BlockSpec {
    pub fn channels(&self) -> usize {
        match *self {
            BlockSpec::Conv { channels, .. }
            | BlockSpec::Shma { channels, .. }
            | BlockSpec::Sha { channels, .. }
            | BlockSpec::Mha { channels, .. }
            | BlockSpec::WindowShma { channels, .. } => channels,
        }
    }

    pub fn ratio(&self) -> usize {
        match *self {
            BlockSpec::Conv { ratio, .. }
            | BlockSpec::Shma { ratio, .. }
            | BlockSpec::Sha { ratio, .. }
            | BlockSpec::Mha { ratio, .. }
            | BlockSpec::WindowShma { ratio, .. } => ratio,
        }
    }

    pub fn head_dim(&self) -> Option<usize> {
        match *self {
            BlockSpec::Shma { head_dim, .. }
            | BlockSpec::Mha { head_dim, .. }
            | BlockSpec::WindowShma { head_dim, .. } => Some(head_dim),
            BlockSpec::Sha { channels, .. } => Some(channels),
            BlockSpec::Conv { .. } => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            BlockSpec::Conv { .. } => "conv",
            BlockSpec::Shma { .. } => "shma",
            BlockSpec::Sha { .. } => "sha",
            BlockSpec::Mha { .. } => "mha",
            BlockSpec::WindowShma { .. } => "window_shma",
        }
    }

    pub fn is_attention(&self) -> bool {
        !matches!(self, BlockSpec::Conv { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Downsample {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub downsample: Option<Downsample>,
    pub blocks: Vec<BlockSpec>,
}

impl StageConfig {
    pub fn channels(&self, input: usize) -> usize {
        self.downsample.map_or(input, |d| d.channels)
    }
}

/// Two k×k stride-2 Conv-BN-GELU layers followed by a 1×1 Conv-BN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub kernel: usize,
    pub channels: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub name: String,
    pub in_channels: usize,
    pub resolution: usize,
    pub num_classes: usize,
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
}

pub const PRESET_NAMES: [&str; 7] = [
    "iformer-t",
    "iformer-s",
    "iformer-m",
    "iformer-l",
    "mha-baseline",
    "sha-baseline",
    "iformer-m-window512",
];

/// Head dimension of the multi-head baseline.
pub const MHA_BASELINE_HEAD_DIM: usize = 32;
/// Channel chunks used by the high-resolution window preset.
pub const WINDOW_CHUNKS: usize = 16;

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    if size + 2 * pad < kernel {
        0
    } else {
        (size + 2 * pad - kernel) / stride + 1
    }
}

fn conv_blocks(channels: usize, ratio: usize, n: usize) -> impl Iterator<Item = BlockSpec> {
    std::iter::repeat_n(BlockSpec::Conv { channels, ratio, kernel: 7 }, n)
}

fn shma_blocks(channels: usize, head_dim: usize, ratio: usize, n: usize) -> impl Iterator<Item = BlockSpec> {
    std::iter::repeat_n(BlockSpec::Shma { channels, ratio, head_dim }, n)
}

fn ds(channels: usize) -> Option<Downsample> {
    Some(Downsample { kernel: 3, stride: 2, channels })
}

struct Variant {
    stem: [usize; 3],
    widths: [usize; 4],
    conv_ratio: [usize; 3],
    stage3_convs: usize,
    stage3_attn: (usize, usize, usize),
    stage4_attn: (usize, usize, usize),
}

fn iformer(name: &str, v: Variant) -> ModelConfig {
    let [c1, c2, c3, c4] = v.widths;
    let [r1, r2, r3] = v.conv_ratio;
    let (hd3, ar3, n3) = v.stage3_attn;
    let (hd4, ar4, n4) = v.stage4_attn;
    ModelConfig {
        name: name.into(),
        in_channels: 3,
        resolution: 224,
        num_classes: 1000,
        stem: StemConfig { kernel: 5, channels: v.stem },
        stages: vec![
            StageConfig { downsample: None, blocks: conv_blocks(c1, r1, 2).collect() },
            StageConfig { downsample: ds(c2), blocks: conv_blocks(c2, r2, 2).collect() },
            StageConfig {
                downsample: ds(c3),
                blocks: conv_blocks(c3, r3, v.stage3_convs)
                    .chain(shma_blocks(c3, hd3, ar3, n3))
                    .chain(conv_blocks(c3, r3, 1))
                    .collect(),
            },
            StageConfig { downsample: ds(c4), blocks: shma_blocks(c4, hd4, ar4, n4).collect() },
        ],
    }
}

fn baseline(name: &str, single_head: bool) -> ModelConfig {
    let mut cfg = preset_config("iformer-m").expect("iformer-m preset");
    cfg.name = name.into();
    let attn = |channels: usize| {
        if single_head {
            BlockSpec::Sha { channels, ratio: 4 }
        } else {
            BlockSpec::Mha { channels, ratio: 4, head_dim: MHA_BASELINE_HEAD_DIM }
        }
    };
    // (2,2,18,2) conv layout with the last half of stage 3 and all of
    // stage 4 turned into attention blocks
    cfg.stages[2].blocks = conv_blocks(192, 4, 9).chain(std::iter::repeat_n(attn(192), 9)).collect();
    cfg.stages[3].blocks = vec![attn(384); 2];
    cfg
}

fn window_preset() -> ModelConfig {
    let mut cfg = preset_config("iformer-m").expect("iformer-m preset");
    cfg.name = "iformer-m-window512".into();
    cfg.resolution = 512;
    let win = |channels, head_dim, role| BlockSpec::WindowShma {
        channels,
        ratio: 3,
        head_dim,
        window: 16,
        role,
        chunks: WINDOW_CHUNKS,
    };
    cfg.stages[2].blocks = conv_blocks(192, 4, 9)
        .chain([
            win(192, 96, WindowRole::PartitionEntry),
            win(192, 96, WindowRole::Interior),
            win(192, 96, WindowRole::Interior),
            win(192, 96, WindowRole::ReverseExit),
        ])
        .chain(conv_blocks(192, 4, 1))
        .collect();
    cfg.stages[3].blocks = vec![win(384, 96, WindowRole::PartitionEntry), win(384, 64, WindowRole::ReverseExit)];
    cfg
}

/// Named architecture presets.
pub fn preset_config(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        "iformer-t" => iformer(
            name,
            Variant {
                stem: [16, 64, 32],
                widths: [32, 64, 128, 256],
                conv_ratio: [3, 3, 3],
                stage3_convs: 6,
                stage3_attn: (64, 2, 3),
                stage4_attn: (64, 2, 2),
            },
        ),
        "iformer-s" => iformer(
            name,
            Variant {
                stem: [16, 64, 32],
                widths: [32, 64, 176, 320],
                conv_ratio: [4, 4, 4],
                stage3_convs: 9,
                stage3_attn: (88, 3, 3),
                stage4_attn: (80, 3, 2),
            },
        ),
        "iformer-m" => iformer(
            name,
            Variant {
                stem: [24, 96, 48],
                widths: [48, 96, 192, 384],
                conv_ratio: [4, 4, 4],
                stage3_convs: 9,
                stage3_attn: (96, 3, 4),
                stage4_attn: (96, 3, 2),
            },
        ),
        "iformer-l" => iformer(
            name,
            Variant {
                stem: [24, 96, 48],
                widths: [48, 96, 256, 384],
                conv_ratio: [4, 4, 4],
                stage3_convs: 8,
                stage3_attn: (128, 3, 8),
                stage4_attn: (96, 3, 2),
            },
        ),
        "mha-baseline" => baseline(name, false),
        "sha-baseline" => baseline(name, true),
        "iformer-m-window512" => window_preset(),
        other => {
            return Err(Error::arg(format!(
                "unknown preset `{other}`; expected one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(cfg)
}

impl ModelConfig {
    /// Output `(C, H, W)` of every stage at `resolution`, without weights.
    pub fn stage_feature_shapes(&self, resolution: usize) -> Vec<(usize, usize, usize)> {
        let k = self.stem.kernel;
        let mut hw = conv_out(conv_out(resolution, k, 2, k / 2), k, 2, k / 2);
        let mut c = self.stem.channels[2];
        self.stages
            .iter()
            .map(|s| {
                if let Some(d) = s.downsample {
                    hw = conv_out(hw, d.kernel, d.stride, d.kernel / 2);
                    c = d.channels;
                }
                (c, hw, hw)
            })
            .collect()
    }

    pub fn stem_output_size(&self, resolution: usize) -> usize {
        let k = self.stem.kernel;
        conv_out(conv_out(resolution, k, 2, k / 2), k, 2, k / 2)
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    /// Structural checks; errors carry a JSON-pointer path into the config.
    pub fn validate(&self) -> Result<()> {
        let positive = |path: &str, v: usize| {
            if v == 0 {
                Err(Error::config(path, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("/in_channels", self.in_channels)?;
        positive("/num_classes", self.num_classes)?;
        positive("/resolution", self.resolution)?;
        if self.stem.kernel % 2 == 0 {
            return Err(Error::config("/stem/kernel", "stem kernel must be odd"));
        }
        for (i, &c) in self.stem.channels.iter().enumerate() {
            positive(&format!("/stem/channels/{i}"), c)?;
        }
        if self.stages.is_empty() || self.stages.len() > 4 {
            return Err(Error::config("/stages", "expected between 1 and 4 stages"));
        }
        let shapes = self.stage_feature_shapes(self.resolution);
        let stride = 1usize << (self.stages.len() + 1);
        if self.resolution % stride != 0 {
            return Err(Error::config(
                "/resolution",
                format!("resolution must be a multiple of {stride}"),
            ));
        }
        let mut c = self.stem.channels[2];
        for (si, stage) in self.stages.iter().enumerate() {
            let path = format!("/stages/{si}");
            match (si, stage.downsample) {
                (0, Some(_)) => {
                    return Err(Error::config(format!("{path}/downsample"), "the first stage does not downsample"))
                }
                (0, None) => {}
                (_, None) => {
                    return Err(Error::config(format!("{path}/downsample"), "stages after the first must downsample"))
                }
                (_, Some(d)) => {
                    if d.stride != 2 || d.kernel % 2 == 0 {
                        return Err(Error::config(
                            format!("{path}/downsample"),
                            "downsample must be an odd kernel with stride 2",
                        ));
                    }
                    positive(&format!("{path}/downsample/channels"), d.channels)?;
                    c = d.channels;
                }
            }
            let hw = shapes[si].1;
            let mut windowed = false;
            for (bi, b) in stage.blocks.iter().enumerate() {
                let bpath = format!("{path}/blocks/{bi}");
                if b.channels() != c {
                    return Err(Error::config(
                        format!("{bpath}/channels"),
                        format!("block has {} channels but the stage carries {c}", b.channels()),
                    ));
                }
                if b.ratio() == 0 {
                    return Err(Error::config(format!("{bpath}/ratio"), "expansion ratio must be at least 1"));
                }
                if let Some(hd) = b.head_dim() {
                    if hd == 0 || hd > c {
                        return Err(Error::config(format!("{bpath}/head_dim"), format!("head dim must be in 1..={c}")));
                    }
                }
                match *b {
                    BlockSpec::Conv { kernel, .. } if kernel % 2 == 0 || kernel == 0 => {
                        return Err(Error::config(format!("{bpath}/kernel"), "kernel must be odd"));
                    }
                    BlockSpec::Mha { head_dim, .. } if c % head_dim != 0 => {
                        return Err(Error::config(
                            format!("{bpath}/head_dim"),
                            format!("{c} channels are not divisible into heads of {head_dim}"),
                        ));
                    }
                    BlockSpec::WindowShma { window, role, chunks, .. } => {
                        if window == 0 || hw % window != 0 {
                            return Err(Error::config(
                                format!("{bpath}/window"),
                                format!("window {window} does not tile a {hw}x{hw} map"),
                            ));
                        }
                        if chunks == 0 || c % chunks != 0 {
                            return Err(Error::config(
                                format!("{bpath}/chunks"),
                                format!("{c} channels cannot be split into {chunks} chunks"),
                            ));
                        }
                        let ok = match role {
                            WindowRole::PartitionEntry => !windowed,
                            WindowRole::Interior | WindowRole::ReverseExit => windowed,
                        };
                        if !ok {
                            return Err(Error::config(
                                format!("{bpath}/role"),
                                "window roles must run partition_entry, interior*, reverse_exit",
                            ));
                        }
                        windowed = role != WindowRole::ReverseExit;
                    }
                    _ if windowed => {
                        return Err(Error::config(bpath, "only windowed blocks may follow a partition_entry block"));
                    }
                    _ => {}
                }
            }
            if windowed {
                return Err(Error::config(format!("{path}/blocks"), "window run is never reversed"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn depths(cfg: &ModelConfig) -> Vec<(usize, usize)> {
        cfg.stages
            .iter()
            .map(|s| {
                let attn = s.blocks.iter().filter(|b| b.is_attention()).count();
                (s.blocks.len() - attn, attn)
            })
            .collect()
    }

    #[test]
    fn presets_validate() {
        for name in PRESET_NAMES {
            preset_config(name).unwrap().validate().unwrap();
        }
        assert!(matches!(preset_config("iformer-h"), Err(Error::Argument(_))));
    }

    #[test]
    fn tiny_variant_layout() {
        let t = preset_config("iformer-t").unwrap();
        assert_eq!(depths(&t), vec![(2, 0), (2, 0), (7, 3), (0, 2)]);
        let s3 = &t.stages[2].blocks;
        assert!(s3[..6].iter().all(|b| b.kind_name() == "conv"));
        assert!(s3[6..9].iter().all(|b| *b == BlockSpec::Shma { channels: 128, ratio: 2, head_dim: 64 }));
        assert_eq!(s3[9].kind_name(), "conv");
    }

    #[test]
    fn medium_variant_layout() {
        let m = preset_config("iformer-m").unwrap();
        assert_eq!(m.stem.channels, [24, 96, 48]);
        assert_eq!(m.stages[2].downsample.unwrap().channels, 192);
        assert_eq!(depths(&m), vec![(2, 0), (2, 0), (10, 4), (0, 2)]);
        assert_eq!(m.stages[3].blocks[0], BlockSpec::Shma { channels: 384, ratio: 3, head_dim: 96 });
    }

    #[test]
    fn baselines_differ_only_in_kind() {
        let mha = preset_config("mha-baseline").unwrap();
        let sha = preset_config("sha-baseline").unwrap();
        assert_eq!(mha.stage_feature_shapes(224), sha.stage_feature_shapes(224));
        for (a, b) in mha.stages.iter().zip(&sha.stages) {
            assert_eq!(a.downsample, b.downsample);
            assert_eq!(a.blocks.len(), b.blocks.len());
            for (x, y) in a.blocks.iter().zip(&b.blocks) {
                assert_eq!(x.channels(), y.channels());
                assert_eq!(x.ratio(), y.ratio());
            }
        }
        assert_eq!(depths(&mha), vec![(2, 0), (2, 0), (9, 9), (0, 2)]);
    }

    #[test]
    fn feature_shapes() {
        let l = preset_config("iformer-l").unwrap();
        assert_eq!(
            l.stage_feature_shapes(224),
            vec![(48, 56, 56), (96, 28, 28), (256, 14, 14), (384, 7, 7)]
        );
        for name in PRESET_NAMES {
            let cfg = preset_config(name).unwrap();
            let base = cfg.stage_feature_shapes(224);
            let doubled = cfg.stage_feature_shapes(448);
            for (a, b) in base.iter().zip(&doubled) {
                assert_eq!((a.0, 2 * a.1, 2 * a.2), *b);
            }
        }
    }

    #[test]
    fn validation_paths() {
        let mut cfg = preset_config("iformer-t").unwrap();
        cfg.stages[1].blocks[0] = BlockSpec::Conv { channels: 63, ratio: 3, kernel: 7 };
        match cfg.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "/stages/1/blocks/0/channels"),
            other => panic!("{other:?}"),
        }
        let mut cfg = preset_config("iformer-m-window512").unwrap();
        cfg.stages[2].blocks.swap(9, 12);
        assert!(cfg.validate().is_err());
        let mut cfg = preset_config("iformer-m-window512").unwrap();
        cfg.resolution = 224;
        assert!(cfg.validate().is_err());
    }
}
