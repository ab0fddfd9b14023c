//! Batch-1 timing harness. Wall times are host-specific and informational;
//! MACs and layout-change counts are the comparable part of a report.

use std::time::Instant;

use iformer_core::attention::{chunked_window_partition, chunked_window_reverse, cpe};
use iformer_core::count::mac_breakdown;
use iformer_core::model::{Block, WindowRole, WindowSpec};
use iformer_core::{InitPolicy, Model, ModelConfig, Tensor, Trace};
use serde::{Deserialize, Serialize};

use crate::commands::random_input;
use crate::{CliError, CliResult};

pub const SCHEMA: &str = "iformer-bench/1";
pub const MIN_RUNS: usize = 5;
pub const MIN_WARMUP: usize = 3;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BenchReport {
    pub schema: String,
    pub host: String,
    pub model: String,
    pub resolution: usize,
    pub threads: usize,
    pub seed: u64,
    pub entries: Vec<BenchEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BenchEntry {
    /// One of `op`, `block`, `stage`, `model`.
    pub scope: String,
    pub name: String,
    pub warmup_runs: usize,
    pub runs: usize,
    pub samples_us: Vec<f64>,
    pub median_us: f64,
    pub mean_us: f64,
    pub p95_us: f64,
    pub macs: u64,
    pub layout_changes: u64,
}

pub struct BenchOptions {
    pub resolution: Option<usize>,
    pub runs: usize,
    pub warmup: usize,
    pub blocks: bool,
    pub seed: u64,
    pub threads: usize,
}

fn host(threads: usize) -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{}, {cpus} cpus, {threads} worker thread(s)", std::env::consts::OS, std::env::consts::ARCH)
}

/// Median of the sorted samples, nearest-rank p95.
fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let mean = s.iter().sum::<f64>() / n as f64;
    let p95 = s[(0.95 * n as f64).ceil() as usize - 1];
    (median, mean, p95)
}

struct Timer<'a> {
    opts: &'a BenchOptions,
    entries: Vec<BenchEntry>,
}

impl Timer<'_> {
    /// Times `f` and counts the layout changes of one extra traced call.
    fn time(&mut self, scope: &str, name: String, macs: u64, f: impl Fn(&Trace) -> iformer_core::Result<()>) -> CliResult {
        for _ in 0..self.opts.warmup {
            f(&Trace::new())?;
        }
        let mut samples = Vec::with_capacity(self.opts.runs);
        for _ in 0..self.opts.runs {
            let start = Instant::now();
            f(&Trace::new())?;
            // clamp to keep every sample strictly positive on coarse clocks
            samples.push((start.elapsed().as_secs_f64() * 1e6).max(1e-3));
        }
        let trace = Trace::new();
        f(&trace)?;
        let (median_us, mean_us, p95_us) = summarize(&samples);
        self.entries.push(BenchEntry {
            scope: scope.into(),
            name,
            warmup_runs: self.opts.warmup,
            runs: self.opts.runs,
            samples_us: samples,
            median_us,
            mean_us,
            p95_us,
            macs,
            layout_changes: trace.layout_changes(),
        });
        Ok(())
    }
}

/// The tensor an attention block hands to its mixer.
fn mixer_input(block: &Block, x: &Tensor, h: usize, w: usize) -> iformer_core::Result<Option<Tensor>> {
    let Block::Attention(b) = block else { return Ok(None) };
    let mut x = x.clone();
    if let Some(p) = &b.cpe {
        x = cpe(&x, p)?;
    }
    let trace = Trace::new();
    match b.window {
        Some(WindowSpec { size, chunks, role: WindowRole::PartitionEntry }) => {
            x = chunked_window_partition(&x, size, chunks, &trace)?;
        }
        Some(WindowSpec { size, chunks, role: WindowRole::ReverseExit }) => {
            x = chunked_window_reverse(&x, size, h, w, chunks, &trace)?;
        }
        _ => {}
    }
    Ok(Some(x))
}

pub fn run(cfg: &ModelConfig, opts: &BenchOptions) -> CliResult<BenchReport> {
    if opts.runs < MIN_RUNS {
        return Err(CliError::Usage(format!("--runs must be at least {MIN_RUNS}")));
    }
    if opts.warmup < MIN_WARMUP {
        return Err(CliError::Usage(format!("--warmup must be at least {MIN_WARMUP}")));
    }
    let mut cfg = cfg.clone();
    if let Some(r) = opts.resolution {
        cfg.resolution = r;
        cfg.validate()?;
    }
    let m = Model::new(&cfg, &InitPolicy { seed: opts.seed, ..InitPolicy::default() })?;
    let breakdown = mac_breakdown(&m, cfg.resolution)?;
    let macs_of = |prefix: &str| -> u64 {
        breakdown
            .iter()
            .filter(|e| e.name == prefix || e.name.starts_with(&format!("{prefix}.")))
            .map(|e| e.macs)
            .sum()
    };
    let x = random_input(&cfg, opts.seed);
    let mut t = Timer { opts, entries: Vec::new() };

    let total = breakdown.iter().map(|e| e.macs).sum();
    t.time("model", "forward".into(), total, |tr| m.forward_traced(&x, tr).map(drop))?;

    t.time("stage", "stem".into(), macs_of("stem"), |tr| m.forward_stem(&x, tr).map(drop))?;
    let mut act = m.forward_stem(&x, &Trace::new())?;
    for (si, stage) in m.stages.iter().enumerate() {
        let prefix = format!("stages.{si}");
        t.time("stage", prefix.clone(), macs_of(&prefix), |tr| m.forward_stage(si, act.clone(), tr).map(drop))?;
        let mut y = match &stage.downsample {
            Some(ds) => ds.forward(&act)?,
            None => act.clone(),
        };
        let [_, _, h, w] = y.dims4()?;
        for (bi, block) in stage.blocks.iter().enumerate() {
            let name = format!("{prefix}.blocks.{bi}");
            if opts.blocks {
                t.time("block", name.clone(), macs_of(&name), |tr| block.forward(y.clone(), h, w, tr).map(drop))?;
            }
            if let (Some(mx), Block::Attention(b)) = (mixer_input(block, &y, h, w)?, block) {
                let op = format!("{name}.attn");
                t.time("op", op.clone(), macs_of(&op), |tr| b.mixer.forward(&mx, tr).map(drop))?;
            }
            y = block.forward(y, h, w, &Trace::new())?;
        }
        act = y;
    }
    t.time("stage", "head".into(), macs_of("head"), |_| m.head.forward(&act).map(drop))?;

    Ok(BenchReport {
        schema: SCHEMA.into(),
        host: host(opts.threads),
        model: cfg.name.clone(),
        resolution: cfg.resolution,
        threads: opts.threads,
        seed: opts.seed,
        entries: t.entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let (median, mean, p95) = summarize(&[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!((median, mean, p95), (3.0, 3.0, 5.0));
        let (median, _, p95) = summarize(&(1..=20).map(f64::from).collect::<Vec<_>>());
        assert_eq!((median, p95), (10.5, 19.0));
    }
}
