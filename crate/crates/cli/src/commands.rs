use std::path::Path;

use iformer_core::attention::head_cosine_similarity;
use iformer_core::io::{self, config_to_json, load_image_ppm, IMAGENET_MEAN, IMAGENET_STD};
use iformer_core::model::BlockSpec;
use iformer_core::verify::{verify_model, VerifyOptions, FUSION_LOGIT_TOL};
use iformer_core::{count_macs, count_params, fuse_model, preset_config, InitPolicy, Model, ModelConfig, Tensor, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::{CliError, CliResult};

/// Prefixes file errors with the offending path.
fn at_path(path: &Path) -> impl FnOnce(iformer_core::Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Presets by name; anything that looks like a path is read as a config.
pub fn load_config(model: &str) -> CliResult<ModelConfig> {
    let path = Path::new(model);
    if model.ends_with(".json") || path.exists() {
        return io::load_config(path).map_err(at_path(path));
    }
    Ok(preset_config(model)?)
}

fn build(cfg: &ModelConfig, weights: Option<&Path>, seed: u64) -> CliResult<Model> {
    Ok(match weights {
        Some(path) => Model::from_store(cfg, &io::load_weights(path).map_err(at_path(path))?)?,
        None => Model::new(cfg, &InitPolicy { seed, random_bn: true, ..InitPolicy::default() })?,
    })
}

pub fn random_input(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.resolution;
    Tensor::from_fn(&[1, cfg.in_channels, r, r], |_| rng.random_range(-1.0..1.0)).expect("valid shape")
}

fn input(cfg: &ModelConfig, image: Option<&Path>, seed: u64) -> CliResult<Tensor> {
    match image {
        Some(path) => load_image_ppm(path, IMAGENET_MEAN, IMAGENET_STD).map_err(at_path(path)),
        None => Ok(random_input(cfg, seed)),
    }
}

fn block_label(b: &BlockSpec) -> String {
    match b {
        BlockSpec::Conv { kernel, .. } => format!("conv k{kernel}"),
        BlockSpec::Shma { .. } => "shma".into(),
        BlockSpec::Sha { .. } => "sha".into(),
        BlockSpec::Mha { .. } => "mha".into(),
        BlockSpec::WindowShma { window, role, .. } => format!("window-shma P{window} {role:?}"),
    }
}

/// Consecutive identical blocks collapse into one `(label, r, hd, count)` row.
fn block_runs(blocks: &[BlockSpec]) -> Vec<(String, usize, Option<usize>, usize)> {
    let mut runs: Vec<(String, usize, Option<usize>, usize)> = Vec::new();
    for b in blocks {
        let key = (block_label(b), b.ratio(), b.head_dim());
        match runs.last_mut() {
            Some(last) if (last.0.as_str(), last.1, last.2) == (key.0.as_str(), key.1, key.2) => last.3 += 1,
            _ => runs.push((key.0, key.1, key.2, 1)),
        }
    }
    runs
}

pub fn describe(model: &str, as_json: bool) -> CliResult {
    let cfg = load_config(model)?;
    let m = Model::new(&cfg, &InitPolicy::default())?;
    let params = count_params(&m);
    let macs = count_macs(&m, cfg.resolution)?;
    let shapes = cfg.stage_feature_shapes(cfg.resolution);
    if as_json {
        let stages: Vec<_> = cfg
            .stages
            .iter()
            .zip(&shapes)
            .map(|(s, &(c, h, w))| {
                json!({
                    "channels": c,
                    "output": [h, w],
                    "blocks": s.blocks.iter().map(|b| b.kind_name()).collect::<Vec<_>>(),
                })
            })
            .collect();
        let config: serde_json::Value = serde_json::from_str(&config_to_json(&cfg)).expect("config JSON");
        let doc = json!({
            "name": cfg.name,
            "params": params,
            "macs": macs,
            "stages": stages,
            "config": config,
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("serializes"));
        return Ok(());
    }
    println!("{} @ {}x{}", cfg.name, cfg.resolution, cfg.resolution);
    println!("{:<6} {:<28} {:>8} {:>3} {:>4} {:>7}", "stage", "blocks", "channels", "r", "hd", "output");
    let stem_out = cfg.stem_output_size(cfg.resolution);
    println!(
        "{:<6} {:<28} {:>8} {:>3} {:>4} {:>7}",
        "stem",
        format!("conv k{} x{}", cfg.stem.kernel, cfg.stem.channels.len()),
        cfg.stem.channels.map(|c| c.to_string()).join("/"),
        "-",
        "-",
        stem_out
    );
    for (si, (stage, &(c, h, _))) in cfg.stages.iter().zip(&shapes).enumerate() {
        for (label, r, hd, n) in block_runs(&stage.blocks) {
            let hd = hd.map_or("-".to_string(), |d| d.to_string());
            println!("{:<6} {:<28} {:>8} {:>3} {:>4} {:>7}", si + 1, format!("{label} x{n}"), c, r, hd, h);
        }
    }
    println!("params: {:.3}M ({params})", params as f64 / 1e6);
    println!("MACs:   {:.4}G ({macs})", macs as f64 / 1e9);
    Ok(())
}

pub fn verify(model: &str, seed: u64, fuzz_cases: usize, inject_negative_eps: bool) -> CliResult {
    let cfg = load_config(model)?;
    let mut m = Model::new(&cfg, &InitPolicy { seed, random_bn: true, ..InitPolicy::default() })?;
    if inject_negative_eps {
        let bn = m.conv_bns_mut().into_iter().find_map(|l| l.bn.as_mut());
        if let Some(bn) = bn {
            bn.eps = -1e-5;
        }
    }
    let report = verify_model(&m, &VerifyOptions { seed, fuzz_cases, ..VerifyOptions::default() });
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if report.passed() {
        println!("{}: all {} checks passed", cfg.name, report.checks.len());
        Ok(())
    } else {
        let failed: Vec<_> = report.failures().map(|c| c.name).collect();
        Err(CliError::Failed(format!("{} check(s) failed: {}", failed.len(), failed.join(", "))))
    }
}

#[derive(Debug, Serialize)]
struct Ranked {
    class: usize,
    probability: f64,
}

/// Softmax in f64, then descending probability with ties to the lower index.
fn rank(logits: &[f32], k: usize) -> Vec<Ranked> {
    let mx = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exp: Vec<f64> = logits.iter().map(|&l| (l as f64 - mx).exp()).collect();
    let z: f64 = exp.iter().sum();
    let mut ranked: Vec<Ranked> =
        exp.iter().enumerate().map(|(class, e)| Ranked { class, probability: e / z }).collect();
    ranked.sort_by(|a, b| b.probability.total_cmp(&a.probability).then(a.class.cmp(&b.class)));
    ranked.truncate(k);
    ranked
}

pub fn infer(
    model: &str,
    weights: Option<&Path>,
    image: Option<&Path>,
    topk: usize,
    seed: u64,
    as_json: bool,
) -> CliResult {
    let cfg = load_config(model)?;
    if topk == 0 || topk > cfg.num_classes {
        return Err(CliError::Usage(format!("--topk must be in 1..={}", cfg.num_classes)));
    }
    let m = build(&cfg, weights, seed)?;
    let x = input(&cfg, image, seed)?;
    let logits = m.forward(&x)?;
    let ranked = rank(logits.data(), topk);
    if as_json {
        let doc = json!({ "model": cfg.name, "topk": ranked });
        println!("{}", serde_json::to_string_pretty(&doc).expect("serializes"));
    } else {
        println!("{:>4} {:>6} {:>12}", "rank", "class", "probability");
        for (i, r) in ranked.iter().enumerate() {
            println!("{:>4} {:>6} {:>12.6e}", i + 1, r.class, r.probability);
        }
    }
    Ok(())
}

pub fn similarity(model: &str, weights: Option<&Path>, image: Option<&Path>, seed: u64, as_json: bool) -> CliResult {
    let cfg = load_config(model)?;
    let has_mha = cfg.stages.iter().flat_map(|s| &s.blocks).any(|b| matches!(b, BlockSpec::Mha { .. }));
    if !has_mha {
        return Err(CliError::Usage(format!("{} has no multi-head attention blocks", cfg.name)));
    }
    let m = build(&cfg, weights, seed)?;
    let x = input(&cfg, image, seed)?;
    let trace = Trace::capturing_heads();
    m.forward_traced(&x, &trace)?;
    let mut layers = Vec::new();
    for (layer, heads) in trace.take_heads() {
        let s = head_cosine_similarity(&heads)?;
        layers.push(json!({ "layer": layer, "heads": heads.len(), "similarity": s.mean }));
    }
    if as_json {
        let doc = json!({ "model": cfg.name, "layers": layers });
        println!("{}", serde_json::to_string_pretty(&doc).expect("serializes"));
    } else {
        println!("{:<22} {:>5} {:>10}", "layer", "heads", "similarity");
        for l in &layers {
            println!(
                "{:<22} {:>5} {:>10.6}",
                l["layer"].as_str().unwrap_or_default(),
                l["heads"],
                l["similarity"].as_f64().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

pub fn fuse(model: &str, weights_in: Option<&Path>, weights_out: &Path, seed: u64) -> CliResult {
    let cfg = load_config(model)?;
    let m = build(&cfg, weights_in, seed)?;
    let fused = fuse_model(&m)?;
    let store = fused.to_store();
    io::save_weights(&store, weights_out).map_err(at_path(weights_out))?;
    let probe = random_input(&cfg, seed);
    let drift = fused.forward(&probe)?.max_abs_diff(&m.forward(&probe)?);
    println!(
        "folded {} BN layers; wrote {} tensors to {}",
        m.bn_count(),
        store.len(),
        weights_out.display()
    );
    println!("max logit drift: {drift:.3e}");
    if drift > FUSION_LOGIT_TOL {
        return Err(CliError::Failed(format!("logit drift {drift:e} exceeds {FUSION_LOGIT_TOL:e}")));
    }
    Ok(())
}
