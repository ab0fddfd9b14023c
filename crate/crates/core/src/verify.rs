//! Self-check suite run against a built model: parameter invariants, fusion
//! equivalence, window roundtrips, modulation bounds, a finite-difference
//! gradient check and cost-counter cross-checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    chunked_window_partition, chunked_window_reverse, shma_backward, shma_forward_cached, window_partition,
    window_reverse, ShmaParams,
};
use crate::count::{count_macs, ffn_macs, mac_breakdown, shma_complexity_formula, shma_macs};
use crate::error::Result;
use crate::fusion::{fuse_conv_bn, fuse_model};
use crate::io::WeightStore;
use crate::model::{Block, Ffn, Mixer, Model, WindowRole};
use crate::nn::{Activation, BnParams, ConvBn, ConvParams, DEFAULT_BN_EPS};
use crate::tensor::{Tensor, Trace};

pub const FUSION_LAYER_TOL: f32 = 1e-4;
pub const FUSION_LOGIT_TOL: f32 = 1e-3;
pub const GRAD_REL_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fuzz_cases: usize,
    /// Run whole-model forwards (shape contract, logit drift).
    pub full_forward: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            fuzz_cases: 200,
            full_forward: true,
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale)).expect("valid shape")
}

/// Runs every check; errors inside a check count as that check failing.
pub fn verify_model(model: &Model, opts: &VerifyOptions) -> VerifyReport {
    type Check<'a> = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Result<(bool, String)> + 'a>);
    let checks: Vec<Check> = vec![
        ("parameter invariants", Box::new(|_| check_invariants(model))),
        ("stage shapes", Box::new(|rng| check_shapes(model, opts, rng))),
        ("fusion per layer", Box::new(|rng| check_layer_fusion(model, rng))),
        ("fusion logits", Box::new(|rng| check_model_fusion(model, opts, rng))),
        ("window roundtrips", Box::new(|_| check_windows())),
        ("modulation bounds", Box::new(|rng| check_modulation(model, opts, rng))),
        ("shma gradient", Box::new(check_gradient)),
        ("cost counters", Box::new(|_| check_counters(model))),
        ("weight file roundtrip", Box::new(|_| check_weight_io(model))),
    ];
    let checks = checks
        .into_iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
            let (passed, detail) = f(&mut rng).unwrap_or_else(|e| (false, e.to_string()));
            CheckOutcome { name, passed, detail }
        })
        .collect();
    VerifyReport { checks }
}

fn check_invariants(m: &Model) -> Result<(bool, String)> {
    m.config().validate()?;
    m.validate()?;
    Ok((true, format!("{} layers valid", m.layers().len())))
}

fn check_shapes(m: &Model, opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    if !opts.full_forward {
        return Ok((true, "skipped".into()));
    }
    let r = m.config().resolution;
    let trace = Trace::new();
    m.forward_traced(&rand_tensor(rng, &[1, 3, r, r], 1.0), &trace)?;
    let seen: Vec<_> = trace.stage_shapes().iter().map(|s| (s[1], s[2], s[3])).collect();
    let want = m.stage_shapes();
    Ok((seen == want, format!("{seen:?}")))
}

fn check_layer_fusion(m: &Model, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f32;
    let mut n = 0;
    for (_, layer) in m.layers() {
        let crate::model::LayerRef::ConvBn(l) = layer else { continue };
        if l.bn.is_none() {
            continue;
        }
        let x = rand_tensor(rng, &[1, l.conv.in_channels(), 6, 6], 1.0);
        let fused = fuse_conv_bn(l)?;
        worst = worst.max(fused.forward(&x)?.max_abs_diff(&l.forward(&x)?));
        n += 1;
    }
    Ok((worst <= FUSION_LAYER_TOL, format!("{n} layers, max drift {worst:.3e}")))
}

fn check_model_fusion(m: &Model, opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let fused = fuse_model(m)?;
    if fused.bn_count() != 0 {
        return Ok((false, format!("{} BN layers survived fusion", fused.bn_count())));
    }
    if !opts.full_forward {
        return Ok((true, "skipped forward".into()));
    }
    let r = m.config().resolution;
    let x = rand_tensor(rng, &[1, 3, r, r], 1.0);
    let drift = fused.forward(&x)?.max_abs_diff(&m.forward(&x)?);
    Ok((drift <= FUSION_LOGIT_TOL, format!("max logit drift {drift:.3e}")))
}

fn check_windows() -> Result<(bool, String)> {
    let x = Tensor::from_fn(&[2, 16, 16, 16], |i| ((i * 2654435761) % 1000) as f32 - 500.0)?;
    let mut cases = 0;
    for p in [2, 4, 16] {
        let plain = window_partition(&x, p, &Trace::new())?;
        if window_reverse(&plain, p, 16, 16, &Trace::new())? != x {
            return Ok((false, format!("reverse(partition) != id at P={p}")));
        }
        for n in [1, 2, 4, 16] {
            let chunked = chunked_window_partition(&x, p, n, &Trace::new())?;
            if chunked != plain || chunked_window_reverse(&chunked, p, 16, 16, n, &Trace::new())? != x {
                return Ok((false, format!("chunked mismatch at P={p}, n={n}")));
            }
            cases += 1;
        }
    }
    Ok((true, format!("{cases} cases bit-exact")))
}

fn first_shma(m: &Model) -> Option<&ShmaParams> {
    m.stages.iter().flat_map(|s| &s.blocks).find_map(|b| match b {
        Block::Attention(a) => match &a.mixer {
            Mixer::Shma(p) => Some(p),
            _ => None,
        },
        _ => None,
    })
}

fn random_projection(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> ConvBn {
    ConvBn {
        conv: ConvParams::new(rand_tensor(rng, &[cout, cin, 1, 1], 0.7), None, 1, 0, 1).expect("1x1 conv"),
        bn: Some(BnParams {
            gamma: rand_tensor(rng, &[cout], 0.3).map(|v| v + 1.0),
            beta: rand_tensor(rng, &[cout], 0.2),
            running_mean: rand_tensor(rng, &[cout], 0.2),
            running_var: rand_tensor(rng, &[cout], 0.3).map(|v| v + 1.0),
            eps: DEFAULT_BN_EPS,
        }),
        act: Activation::Identity,
    }
}

pub fn random_shma(rng: &mut ChaCha8Rng, c: usize, d: usize) -> ShmaParams {
    ShmaParams {
        q: random_projection(rng, c, d),
        k: random_projection(rng, c, d),
        v: random_projection(rng, c, c),
        m: random_projection(rng, c, c),
        o: random_projection(rng, c, c),
    }
}

fn check_modulation(m: &Model, opts: &VerifyOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let owned;
    let p = match first_shma(m) {
        Some(p) => p,
        None => {
            owned = random_shma(rng, 8, 4);
            &owned
        }
    };
    let c = p.channels();
    for case in 0..opts.fuzz_cases {
        let mag = 10f32.powf(rng.random_range(-2.0..4.0));
        let x = rand_tensor(rng, &[1, c, 4, 4], mag);
        let (_, cache) = shma_forward_cached(&x, p, &Trace::new())?;
        if let Some(v) = cache.modulation.data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Ok((false, format!("case {case}: modulation value {v} outside (0, 1)")));
        }
    }
    Ok((true, format!("{} inputs, magnitudes up to 1e4", opts.fuzz_cases)))
}

fn check_gradient(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let p = random_shma(rng, 4, 2);
    let x = rand_tensor(rng, &[1, 4, 2, 2], 1.0);
    let g = rand_tensor(rng, &[1, 4, 2, 2], 1.0);
    let worst = reference::max_gradient_error(&x, &p, &g)?;
    Ok((worst <= GRAD_REL_TOL, format!("max relative error {worst:.3e}")))
}

fn check_counters(m: &Model) -> Result<(bool, String)> {
    let r = m.config().resolution;
    let parts: u64 = mac_breakdown(m, r)?.iter().map(|e| e.macs).sum();
    if parts != count_macs(m, r)? {
        return Ok((false, "breakdown does not sum to the total".into()));
    }
    let shapes = m.stage_shapes();
    let mut blocks = 0;
    for (si, stage) in m.stages.iter().enumerate() {
        let (_, h, w) = shapes[si];
        for b in &stage.blocks {
            let Block::Attention(a) = b else { continue };
            let Mixer::Shma(p) = &a.mixer else { continue };
            let (c, d) = (p.channels(), p.head_dim());
            if c % d != 0 {
                continue;
            }
            let window = a.window.filter(|w| w.role != WindowRole::ReverseExit).map(|w| w.size);
            let counted = shma_macs(p, h, w, window)?;
            let formula = shma_complexity_formula(h, w, c, window.unwrap_or(h.max(w)), c / d);
            // global attention: P² = HW only holds for square maps
            if h != w && window.is_none() {
                continue;
            }
            if counted != formula? {
                return Ok((false, format!("SHMA counter {counted} != closed form at stage {si}")));
            }
            blocks += 1;
        }
    }
    let c = 8;
    let pw = |cin: usize, cout: usize| ConvBn {
        conv: ConvParams::new(Tensor::zeros(&[cout, cin, 1, 1]).expect("shape"), None, 1, 0, 1).expect("conv"),
        bn: None,
        act: Activation::Identity,
    };
    let ffn = Ffn { expand: pw(c, 4 * c), project: pw(4 * c, c) };
    if ffn_macs(&ffn, 5, 5)? != (8 * 25 * c * c) as u64 {
        return Ok((false, "ratio-4 FFN != 8HWC²".into()));
    }
    Ok((true, format!("{blocks} SHMA blocks match the closed form")))
}

fn check_weight_io(m: &Model) -> Result<(bool, String)> {
    let bytes = m.to_store().to_bytes();
    let back = WeightStore::from_bytes(&bytes)?;
    let same = back.iter().zip(m.named_tensors()).all(|((n1, a), (n2, b))| {
        n1 == n2 && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x10;
    let detected = WeightStore::from_bytes(&corrupt).is_err();
    Ok((same && detected, format!("{} bytes, corruption detected: {detected}", bytes.len())))
}

/// Double-precision SHMA evaluation used for finite differences.
pub mod reference {
    use super::*;
    use crate::attention::ShmaGrads;

    #[derive(Clone)]
    struct Proj {
        w: Vec<f64>,
        b: Option<Vec<f64>>,
        gamma: Option<Vec<f64>>,
        beta: Option<Vec<f64>>,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        cout: usize,
        cin: usize,
    }

    fn f64s(t: &Tensor) -> Vec<f64> {
        t.data().iter().map(|&v| v as f64).collect()
    }

    impl Proj {
        fn new(l: &ConvBn) -> Self {
            let cout = l.conv.out_channels();
            let bn = l.bn.as_ref();
            Proj {
                w: f64s(&l.conv.weight),
                b: l.conv.bias.as_ref().map(f64s),
                gamma: bn.map(|b| f64s(&b.gamma)),
                beta: bn.map(|b| f64s(&b.beta)),
                mean: bn.map_or(vec![0.0; cout], |b| f64s(&b.running_mean)),
                var: bn.map_or(vec![1.0; cout], |b| f64s(&b.running_var)),
                eps: bn.map_or(0.0, |b| b.eps as f64),
                cout,
                cin: l.conv.in_channels(),
            }
        }

        /// `x: [cin, L]` → `[cout, L]`
        fn apply(&self, x: &[f64], l: usize) -> Vec<f64> {
            let mut out = vec![0.0; self.cout * l];
            for o in 0..self.cout {
                for t in 0..l {
                    let mut acc = self.b.as_ref().map_or(0.0, |b| b[o]);
                    for i in 0..self.cin {
                        acc += self.w[o * self.cin + i] * x[i * l + t];
                    }
                    if let (Some(g), Some(b)) = (&self.gamma, &self.beta) {
                        acc = (acc - self.mean[o]) * g[o] / (self.var[o] + self.eps).sqrt() + b[o];
                    }
                    out[o * l + t] = acc;
                }
            }
            out
        }

        fn slots(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
            let mut out = vec![("weight", &mut self.w)];
            for (name, s) in [("bias", &mut self.b), ("gamma", &mut self.gamma), ("beta", &mut self.beta)] {
                if let Some(v) = s.as_mut() {
                    out.push((name, v));
                }
            }
            out
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// One image, `x: [C, L]`, projections in `q, k, v, m, o` order.
    fn shma(x: &[f64], p: &[Proj; 5], l: usize) -> Vec<f64> {
        let [pq, pk, pv, pm, po] = p;
        let (q, k, v, m) = (pq.apply(x, l), pk.apply(x, l), pv.apply(x, l), pm.apply(x, l));
        let (d, c) = (pq.cout, pv.cout);
        let scale = 1.0 / (d as f64).sqrt();
        let mut ctx = vec![0.0; c * l];
        for i in 0..l {
            let s: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|e| q[e * l + i] * k[e * l + j]).sum::<f64>() * scale)
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            for ch in 0..c {
                ctx[ch * l + i] = (0..l).map(|j| (s[j] - mx).exp() / z * v[ch * l + j]).sum();
            }
        }
        let modulated: Vec<f64> = m.iter().zip(&ctx).map(|(a, b)| sigmoid(*a) * sigmoid(*b)).collect();
        po.apply(&modulated, l)
    }

    fn loss(x: &[f64], p: &[Proj; 5], g: &[f64], n: usize, c: usize, l: usize) -> f64 {
        (0..n)
            .map(|b| {
                let out = shma(&x[b * c * l..(b + 1) * c * l], p, l);
                out.iter().zip(&g[b * c * l..]).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    }

    fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
    }

    /// Largest relative error between `shma_backward` and central differences
    /// (step 1e-3, f64) over the input and every parameter tensor.
    pub fn max_gradient_error(x: &Tensor, p: &ShmaParams, grad_out: &Tensor) -> Result<f64> {
        let grads: ShmaGrads = shma_backward(x, p, grad_out)?;
        let [n, c, h, w] = x.dims4()?;
        let l = h * w;
        let mut params = [Proj::new(&p.q), Proj::new(&p.k), Proj::new(&p.v), Proj::new(&p.m), Proj::new(&p.o)];
        let mut xs = f64s(x);
        let g = f64s(grad_out);
        let step = 1e-3;
        let mut worst = 0.0f64;
        for i in 0..xs.len() {
            let orig = xs[i];
            xs[i] = orig + step;
            let up = loss(&xs, &params, &g, n, c, l);
            xs[i] = orig - step;
            let down = loss(&xs, &params, &g, n, c, l);
            xs[i] = orig;
            worst = worst.max(rel_err(grads.x.data()[i] as f64, (up - down) / (2.0 * step)));
        }
        let analytic = grads.parameters();
        for pi in 0..5 {
            let names: Vec<&'static str> = params[pi].slots().iter().map(|(n, _)| *n).collect();
            for name in names {
                let key = format!("{}.{name}", ["q", "k", "v", "m", "o"][pi]);
                let an = analytic
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| *t)
                    .ok_or_else(|| crate::error::Error::arg(format!("no analytic gradient for {key}")))?;
                let len = an.numel();
                for e in 0..len {
                    let nudge = |params: &mut [Proj; 5], delta: f64| {
                        for (nm, slot) in params[pi].slots() {
                            if nm == name {
                                slot[e] += delta;
                            }
                        }
                    };
                    nudge(&mut params, step);
                    let up = loss(&xs, &params, &g, n, c, l);
                    nudge(&mut params, -2.0 * step);
                    let down = loss(&xs, &params, &g, n, c, l);
                    nudge(&mut params, step);
                    worst = worst.max(rel_err(an.data()[e] as f64, (up - down) / (2.0 * step)));
                }
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset_config, BlockSpec, Downsample, InitPolicy, ModelConfig, StageConfig, StemConfig};

    fn tiny() -> Model {
        let cfg = ModelConfig {
            name: "tiny".into(),
            in_channels: 3,
            resolution: 32,
            num_classes: 5,
            stem: StemConfig { kernel: 5, channels: [4, 8, 8] },
            stages: vec![
                StageConfig { downsample: None, blocks: vec![BlockSpec::Conv { channels: 8, ratio: 2, kernel: 7 }] },
                StageConfig {
                    downsample: Some(Downsample { kernel: 3, stride: 2, channels: 16 }),
                    blocks: vec![BlockSpec::Shma { channels: 16, ratio: 2, head_dim: 8 }],
                },
            ],
        };
        Model::new(&cfg, &InitPolicy { random_bn: true, ..InitPolicy::default() }).unwrap()
    }

    #[test]
    fn fresh_model_passes() {
        let report = verify_model(&tiny(), &VerifyOptions { fuzz_cases: 50, ..VerifyOptions::default() });
        for c in &report.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn negative_eps_fails_invariants() {
        let mut m = tiny();
        m.conv_bns_mut()[0].bn.as_mut().unwrap().eps = -1.0;
        let report = verify_model(&m, &VerifyOptions { fuzz_cases: 5, ..VerifyOptions::default() });
        assert!(!report.passed());
        assert!(report.failures().any(|c| c.name == "parameter invariants"));
    }

    #[test]
    fn deterministic_under_seed() {
        let opts = VerifyOptions { seed: 9, fuzz_cases: 10, ..VerifyOptions::default() };
        assert_eq!(verify_model(&tiny(), &opts), verify_model(&tiny(), &opts));
    }

    #[test]
    fn counters_cover_window_blocks() {
        let m = Model::new(&preset_config("iformer-m-window512").unwrap(), &InitPolicy::default()).unwrap();
        let (ok, detail) = check_counters(&m).unwrap();
        assert!(ok, "{detail}");
        assert!(detail.starts_with("6 "), "{detail}");
    }
}
