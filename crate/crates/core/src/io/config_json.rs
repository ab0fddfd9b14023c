//! `ModelConfig` ↔ JSON. Documents carry a schema version `"v": 1`; unknown
//! keys are rejected and every error names a JSON pointer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_path_to_error::Segment;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StageConfig, StemConfig};

pub const CONFIG_VERSION: u32 = 1;

fn default_in_channels() -> usize {
    3
}

fn default_num_classes() -> usize {
    1000
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    v: u32,
    name: String,
    #[serde(default = "default_in_channels")]
    in_channels: usize,
    resolution: usize,
    #[serde(default = "default_num_classes")]
    num_classes: usize,
    stem: StemConfig,
    stages: Vec<StageConfig>,
}

pub fn config_to_json(cfg: &ModelConfig) -> String {
    let doc = ConfigDoc {
        v: CONFIG_VERSION,
        name: cfg.name.clone(),
        in_channels: cfg.in_channels,
        resolution: cfg.resolution,
        num_classes: cfg.num_classes,
        stem: cfg.stem,
        stages: cfg.stages.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("config serialization cannot fail")
}

/// Extracts the backquoted key from serde's "missing field `x`" and
/// "unknown field `x`" messages.
fn offending_key(msg: &str) -> Option<&str> {
    ["missing field `", "unknown field `"]
        .iter()
        .find_map(|p| msg.strip_prefix(p))
        .and_then(|rest| rest.split('`').next())
}

fn pointer(err: &serde_path_to_error::Error<serde_json::Error>) -> String {
    let mut out = String::new();
    for seg in err.path().iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { .. } | Segment::Unknown => {}
        }
    }
    let msg = err.inner().to_string();
    if let Some(key) = offending_key(&msg) {
        // serde reports these at the enclosing object
        if !out.ends_with(&format!("/{key}")) {
            out.push('/');
            out.push_str(key);
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

pub fn config_from_json(text: &str) -> Result<ModelConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: ConfigDoc = serde_path_to_error::deserialize(de).map_err(|e| {
        let msg = e.inner().to_string();
        Error::config(pointer(&e), msg)
    })?;
    if doc.v != CONFIG_VERSION {
        return Err(Error::config(
            "/v",
            format!("unsupported schema version {}, expected {CONFIG_VERSION}", doc.v),
        ));
    }
    let cfg = ModelConfig {
        name: doc.name,
        in_channels: doc.in_channels,
        resolution: doc.resolution,
        num_classes: doc.num_classes,
        stem: doc.stem,
        stages: doc.stages,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, config_to_json(cfg) + "\n")?;
    Ok(())
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    config_from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset_config, PRESET_NAMES};

    fn path_of(text: &str) -> String {
        match config_from_json(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn presets_roundtrip() {
        for name in PRESET_NAMES {
            let cfg = preset_config(name).unwrap();
            assert_eq!(config_from_json(&config_to_json(&cfg)).unwrap(), cfg);
        }
    }

    #[test]
    fn error_paths() {
        let good: serde_json::Value = serde_json::from_str(&config_to_json(&preset_config("iformer-s").unwrap())).unwrap();
        let edit = |f: &dyn Fn(&mut serde_json::Value)| {
            let mut v = good.clone();
            f(&mut v);
            v.to_string()
        };
        assert_eq!(path_of(&edit(&|v| {
            v.as_object_mut().unwrap().remove("stages");
        })), "/stages");
        assert_eq!(path_of(&edit(&|v| v["extra"] = 1.into())), "/extra");
        assert_eq!(path_of(&edit(&|v| v["v"] = 2.into())), "/v");
        // tagged block fields are buffered, so type errors inside a block name the block
        assert_eq!(path_of(&edit(&|v| v["stages"][2]["blocks"][0]["ratio"] = "x".into())), "/stages/2/blocks/0");
        assert_eq!(path_of(&edit(&|v| v["stem"]["kernel"] = "x".into())), "/stem/kernel");
        assert_eq!(path_of(&edit(&|v| v["stages"][1]["blocks"][0]["kind"] = "lstm".into())), "/stages/1/blocks/0/kind");
        assert_eq!(
            path_of(&edit(&|v| v["stages"][3]["blocks"][1]["head_dim"] = 1000.into())),
            "/stages/3/blocks/1/head_dim"
        );
        assert!(path_of("not json").starts_with('/'));
    }
}
