//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 4 to 7 share one pretrained model and one extractor built from
//! `configs/default.conf`; each customization variant is trained once and its
//! evaluation reused wherever a criterion needs it.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use flowcc::config::RunConfig;
use flowcc::pipeline::{self, run_all, run_stage, Stage};
use flowcc_core::customization::{
    adaptive_lambda, adaptive_lambda_batch, customize, finetune_plain, learned_representation,
    pure_loss_value, pure_target, target_guidance, ExtractorConfig, LambdaMode, OriginalMode,
    PureConfig, RegressionPoint, DEFAULT_EPS_GUARD,
};
use flowcc_core::data::{make_custom_set, make_pretrain_set, SceneSpec};
use flowcc_core::eval::{EvalReport, METRIC_CONSISTENCY, METRIC_DRIFT, METRIC_FIDELITY};
use flowcc_core::flow::{cfg_velocity, cfg_velocity_implicit, interpolate, train_flow, TrainConfig, VelocityField};
use flowcc_core::net::{ParamClass, TrainMask};
use flowcc_core::{Condition, NetworkConfig, VelocityNetwork};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

// ---------------------------------------------------------------- 1

/// Small network with every tensor randomized, including the adapter's `up`
/// factor (zero at attachment), and every tensor class trainable.
fn random_network(seed: u64, width: usize, embed: usize) -> VelocityNetwork {
    let cfg = NetworkConfig {
        input_dim: 2,
        hidden_width: width,
        num_layers: 3,
        embed_dim: embed,
        vocab_size: 6,
        seq_len: 4,
        concept_token: 5,
    };
    let mut net = VelocityNetwork::new(cfg, seed)
        .unwrap()
        .attach_adapter(1 + (seed as usize % 4), seed + 1)
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in net.params_mut().unwrap().tensors_mut() {
        for v in t.data.iter_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    net.params_mut().unwrap().token_table.row_mut(0).fill(0.0);
    net.set_mask(TrainMask {
        token_table: true,
        concept_slots: true,
        base_weights: true,
        adapter: true,
    })
    .unwrap();
    net
}

/// Magnitude below which gradient components are compared absolutely. Central
/// differences at h = 1e-5 carry roundoff near 1e-10, so components much
/// smaller than this floor cannot be resolved relatively.
const GRAD_FLOOR: f64 = 1e-5;

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut classes_seen = std::collections::HashSet::new();
    let widths = [4, 8, 16, 32];
    let nets = 24;
    for seed in 0..nets {
        let width = widths[seed as usize % widths.len()];
        let net = random_network(seed, width, 3 + seed as usize % 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let base = Condition::base(vec![1 + seed as usize % 3, 4]).unwrap();
        let y = if seed % 3 == 0 {
            base
        } else {
            Condition::complete(&base, 5, (seed as usize) % 2).unwrap()
        };
        let x = normal(&mut rng, 2);
        let t = rng.random::<f64>();
        let u = normal(&mut rng, 2);
        let objective = |n: &VelocityNetwork| -> f64 {
            let v = n.forward(&x, t, &y).unwrap();
            v.iter().zip(&u).map(|(a, b)| a * b).sum()
        };
        let grads = net.backward(&x, t, &y, &u).unwrap();
        let analytic = grads.params.tensors();
        let mut probe = net.clone();
        for (k, g) in analytic.iter().enumerate() {
            for i in 0..g.data.len() {
                if g.class == ParamClass::TokenTable && i < g.shape[1] {
                    continue; // null row: pinned, never trained
                }
                let orig = probe.params().tensors()[k].data[i];
                probe.params_mut().unwrap().tensors_mut()[k].data[i] = orig + h;
                let plus = objective(&probe);
                probe.params_mut().unwrap().tensors_mut()[k].data[i] = orig - h;
                let minus = objective(&probe);
                probe.params_mut().unwrap().tensors_mut()[k].data[i] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let err = (g.data[i] - fd).abs() / g.data[i].abs().max(fd.abs()).max(GRAD_FLOOR);
                worst = worst.max(err);
                checked += 1;
                if g.data[i] != 0.0 {
                    classes_seen.insert(g.class);
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let all_classes = ParamClass::ALL.iter().all(|c| classes_seen.contains(c));
    outcome(
        worst <= 1e-4 && all_classes && elapsed < Duration::from_secs(30),
        format!(
            "{nets} networks, {checked} scalars, worst relative error {worst:.2e}, \
             all classes exercised: {all_classes}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

/// `‖r_learned - λ r_tar‖² - ‖r_learned - λ_ref r_tar‖²`, summed termwise as
/// `(λ_ref - λ) t (e(λ) + e(λ_ref))` so the flat bottom of the quadratic keeps
/// its precision.
fn shifted_projection_error(r_learned: &[f64], r_tar: &[f64], lambda: f64, lambda_ref: f64) -> f64 {
    r_learned
        .iter()
        .zip(r_tar)
        .map(|(l, t)| (lambda_ref - lambda) * t * ((l - lambda * t) + (l - lambda_ref * t)))
        .sum()
}

/// Grid bracket followed by golden-section refinement.
fn numeric_argmin(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let steps = 400;
    let dx = (hi - lo) / steps as f64;
    let (mut best, mut best_f) = (lo, f(lo));
    for k in 1..=steps {
        let x = lo + k as f64 * dx;
        let fx = f(x);
        if fx < best_f {
            best = x;
            best_f = fx;
        }
    }
    let (mut a, mut b) = (best - dx, best + dx);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

fn criterion_lambda() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut guarded = 0;
    let mut near = 0;
    let mut bad_guard = 0;
    for k in 0..1000 {
        let dim = rng.random_range(1..=16);
        let r_learned = normal(&mut rng, dim);
        let mut r_tar = normal(&mut rng, dim);
        let scale = match k % 10 {
            0 => 1e-6, // below the guard
            1 => 1e-3, // small but above it
            _ => rng.random_range(0.1..3.0),
        };
        r_tar.iter_mut().for_each(|v| *v *= scale);
        let est = adaptive_lambda(&r_learned, &r_tar, DEFAULT_EPS_GUARD).unwrap();
        let norm2: f64 = r_tar.iter().map(|v| v * v).sum();
        if norm2 < DEFAULT_EPS_GUARD {
            guarded += 1;
            if !(est.degenerate && est.value == 0.0) {
                bad_guard += 1;
            }
            continue;
        }
        if scale < 0.01 {
            near += 1;
        }
        let bound = (r_learned.iter().map(|v| v * v).sum::<f64>() / norm2).sqrt() + 1.0;
        let numeric = numeric_argmin(
            |l| shifted_projection_error(&r_learned, &r_tar, l, 0.0),
            -bound,
            bound,
        );
        let err = (est.value - numeric).abs() / est.value.abs().max(1.0);
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-6 && bad_guard == 0 && elapsed < Duration::from_secs(5),
        format!(
            "1000 pairs ({near} near-degenerate, {guarded} guarded), worst error {worst:.2e}, \
             guard failures {bad_guard}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 3

/// `v(x | tar) = a(x)`, `v(x | ∅) = b(x)`.
struct StubExtractor;

impl VelocityField for StubExtractor {
    fn dim(&self) -> usize {
        2
    }
    fn is_frozen(&self) -> bool {
        true
    }
    fn velocity(&self, x: &[f64], t: f64, y: &Condition) -> flowcc_core::Result<Vec<f64>> {
        Ok(if y.is_null() {
            vec![x[0] * t - 0.3, x[1] + 1.0]
        } else {
            vec![x[1].sin() + 2.0, x[0] * x[1] - t]
        })
    }
}

/// `v(x | base) = c(x)`, `v(x | complete) = c(x) + k (a(x) - b(x))`: a model
/// whose learned concept bias is exactly a multiple of the stub guidance.
struct MatchedStub {
    k: f64,
}

impl VelocityField for MatchedStub {
    fn dim(&self) -> usize {
        2
    }
    fn velocity(&self, x: &[f64], t: f64, y: &Condition) -> flowcc_core::Result<Vec<f64>> {
        let c = vec![0.5 * x[0] - x[1], t * x[1] + 0.1];
        if y.concept_token().is_none() {
            return Ok(c);
        }
        let tar = StubExtractor.velocity(x, t, &y.target_part()?)?;
        let null = StubExtractor.velocity(x, t, &Condition::null())?;
        Ok((0..2).map(|i| c[i] + self.k * (tar[i] - null[i])).collect())
    }
}

fn small_pretrained(seed: u64) -> (SceneSpec, VelocityNetwork) {
    let spec = SceneSpec::default();
    let vocab = spec.vocabulary().unwrap();
    let cfg = NetworkConfig {
        hidden_width: 16,
        vocab_size: vocab.size(),
        concept_token: vocab.concept_token(),
        ..NetworkConfig::default()
    };
    let data = make_pretrain_set(&spec, 400, seed).unwrap();
    let net = VelocityNetwork::new(cfg, seed + 1).unwrap();
    let tc = TrainConfig {
        iterations: 200,
        learning_rate: 0.05,
        batch_size: 16,
        cond_dropout_prob: 0.1,
        seed: seed + 2,
    };
    let out = train_flow(&net, &data.samples, &data.conditions, &tc).unwrap();
    (spec, out.network.clone_frozen())
}

fn criterion_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut cfg_gap = 0.0f64;
    for seed in 0..20 {
        let net = random_network(seed, 8, 4);
        let y = Condition::complete(&Condition::base(vec![2, 3]).unwrap(), 5, 1).unwrap();
        for _ in 0..50 {
            let x = normal(&mut rng, 2);
            let t = rng.random::<f64>();
            let w = rng.random_range(-2.0..10.0);
            let a = cfg_velocity(&net, &x, t, &y, w).unwrap();
            let b = cfg_velocity_implicit(&net, &x, t, &y, w).unwrap();
            for (p, q) in a.iter().zip(&b) {
                cfg_gap = cfg_gap.max((p - q).abs());
            }
        }
    }

    let mut endpoints_exact = true;
    for _ in 0..1000 {
        let dim = rng.random_range(1..8);
        let x0: Vec<f64> = normal(&mut rng, dim).iter().map(|v| v * 10.0).collect();
        let x1 = normal(&mut rng, dim);
        endpoints_exact &= interpolate(&x0, &x1, 0.0).unwrap() == x0;
        endpoints_exact &= interpolate(&x0, &x1, 1.0).unwrap() == x1;
    }

    let stub = MatchedStub { k: 0.7 };
    let base = Condition::base(vec![1, 3]).unwrap();
    let complete = Condition::complete(&base, 4, 1).unwrap();
    let tar = complete.target_part().unwrap();
    let mut r_l = Vec::new();
    let mut r_t = Vec::new();
    let mut sites = Vec::new();
    for _ in 0..8 {
        let x = normal(&mut rng, 2);
        let t = rng.random::<f64>();
        r_t.push(target_guidance(&StubExtractor, &x, t, &tar).unwrap());
        r_l.push(learned_representation(&stub, &x, t, &complete, &base).unwrap());
        sites.push((x, t));
    }
    let lambda = adaptive_lambda_batch(&r_l, &r_t, DEFAULT_EPS_GUARD).unwrap().value;
    let points: Vec<RegressionPoint> = sites
        .iter()
        .zip(&r_t)
        .map(|((x, t), r)| RegressionPoint {
            x_t: x.clone(),
            t: *t,
            y: complete.clone(),
            target: pure_target(&stub.velocity(x, *t, &base).unwrap(), r, lambda).unwrap(),
        })
        .collect();
    let stub_loss = pure_loss_value(&stub, &points).unwrap();

    let (spec, pretrained) = small_pretrained(30);
    let refs = make_custom_set(&spec, "beach", 4, 31).unwrap();
    let ext_cfg = ExtractorConfig {
        iterations: 40,
        learning_rate: 0.05,
        batch_size: 4,
        seed: 32,
        ..ExtractorConfig::default()
    };
    let extractor = flowcc_core::customization::train_extractor(&pretrained, &refs, &ext_cfg)
        .unwrap()
        .0;
    let pc = PureConfig {
        eta: 0.0,
        iterations: 60,
        learning_rate: 0.05,
        batch_size: 4,
        seed: 33,
        ..PureConfig::default()
    };
    let pure = customize(&pretrained, &extractor, &refs, &pc).unwrap().network;
    let plain = finetune_plain(&pretrained, &extractor, &refs, &pc).unwrap().0;
    let bitwise = pure
        .params()
        .tensors()
        .iter()
        .zip(plain.params().tensors())
        .all(|(a, b)| a.data.iter().zip(b.data).all(|(p, q)| p.to_bits() == q.to_bits()));

    outcome(
        cfg_gap <= 1e-12 && endpoints_exact && stub_loss == 0.0 && bitwise,
        format!(
            "CFG forms differ by {cfg_gap:.1e}, endpoints exact: {endpoints_exact}, \
             matched-stub pure loss {stub_loss:e} (lambda {lambda:.3}), eta=0 bitwise equal: {bitwise}"
        ),
    )
}

// ---------------------------------------------------------------- 4-8

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn default_config() -> RunConfig {
    RunConfig::from_path(&workspace_root().join("configs/default.conf")).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    dir
}

/// Pretrained model and extractor from the default config, built once.
fn shared_stage_one() -> &'static (PathBuf, Duration) {
    static SHARED: OnceLock<(PathBuf, Duration)> = OnceLock::new();
    SHARED.get_or_init(|| {
        let start = Instant::now();
        let mut cfg = default_config();
        cfg.run_dir = scratch("shared");
        run_stage(&cfg, Stage::Pretrain).unwrap();
        run_stage(&cfg, Stage::Extract).unwrap();
        (cfg.run_dir, start.elapsed())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Variant {
    Plain,
    Adaptive,
    Fixed1,
    Fixed5,
    Eta05,
    Eta2,
    Theta3,
}

const VARIANTS: [Variant; 7] = [
    Variant::Plain,
    Variant::Adaptive,
    Variant::Fixed1,
    Variant::Fixed5,
    Variant::Eta05,
    Variant::Eta2,
    Variant::Theta3,
];

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Adaptive => "adaptive",
            Variant::Fixed1 => "fixed1",
            Variant::Fixed5 => "fixed5",
            Variant::Eta05 => "eta0.5",
            Variant::Eta2 => "eta2",
            Variant::Theta3 => "theta3",
        }
    }

    fn apply(self, c: &mut PureConfig) {
        match self {
            Variant::Plain => c.eta = 0.0,
            Variant::Adaptive => {}
            Variant::Fixed1 => c.lambda_mode = LambdaMode::Fixed(1.0),
            Variant::Fixed5 => c.lambda_mode = LambdaMode::Fixed(5.0),
            Variant::Eta05 => c.eta = 0.5,
            Variant::Eta2 => c.eta = 2.0,
            Variant::Theta3 => c.original_mode = OriginalMode::FrozenTheta3,
        }
    }
}

struct VariantRun {
    report: EvalReport,
    elapsed: Duration,
}

/// Customize and eval stages for one variant on top of the shared stage one.
fn variant(v: Variant) -> &'static VariantRun {
    static RUNS: [OnceLock<VariantRun>; 7] = [const { OnceLock::new() }; 7];
    let idx = VARIANTS.iter().position(|x| *x == v).unwrap();
    RUNS[idx].get_or_init(|| {
        let (shared, _) = shared_stage_one();
        let start = Instant::now();
        let mut cfg = default_config();
        cfg.run_dir = scratch(v.name());
        v.apply(&mut cfg.customize);
        fs::create_dir_all(&cfg.run_dir).unwrap();
        for f in [pipeline::PRETRAINED, pipeline::EXTRACTOR, pipeline::CUSTOM_SET] {
            fs::copy(shared.join(f), cfg.run_dir.join(f)).unwrap();
        }
        run_stage(&cfg, Stage::Customize).unwrap();
        run_stage(&cfg, Stage::Eval).unwrap();
        let text = fs::read_to_string(cfg.run_dir.join(pipeline::EVAL)).unwrap();
        VariantRun {
            report: EvalReport::from_csv(&text).unwrap(),
            elapsed: start.elapsed(),
        }
    })
}

fn custom_context() -> String {
    default_config().custom_context
}

fn drift(v: Variant) -> Vec<(String, f64)> {
    variant(v).report.metric(METRIC_DRIFT)
}

fn mean_drift(v: Variant) -> f64 {
    let d = drift(v);
    d.iter().map(|(_, x)| x).sum::<f64>() / d.len() as f64
}

fn at_custom(v: Variant, metric: &str) -> f64 {
    variant(v).report.get(&custom_context(), metric).unwrap()
}

fn fmt_drift(d: &[(String, f64)]) -> String {
    d.iter()
        .map(|(c, x)| format!("{c} {x:.3}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn criterion_customization() -> Outcome {
    let plain_d = drift(Variant::Plain);
    let pure_d = drift(Variant::Adaptive);
    let lower_drift = plain_d.iter().zip(&pure_d).all(|((_, p), (_, q))| q < p);
    let cons_plain = at_custom(Variant::Plain, METRIC_CONSISTENCY);
    let cons_pure = at_custom(Variant::Adaptive, METRIC_CONSISTENCY);
    let fid_plain = at_custom(Variant::Plain, METRIC_FIDELITY);
    let fid_pure = at_custom(Variant::Adaptive, METRIC_FIDELITY);
    let fid_ok = fid_plain >= 0.8 && fid_pure >= 0.8;
    let elapsed = shared_stage_one().1 + variant(Variant::Plain).elapsed + variant(Variant::Adaptive).elapsed;
    outcome(
        lower_drift && cons_pure < cons_plain && fid_ok && elapsed < Duration::from_secs(300),
        format!(
            "drift plain [{}] vs adaptive [{}]; consistency {cons_plain:.4} vs {cons_pure:.4}; \
             fidelity {fid_plain:.3} / {fid_pure:.3}; {:.0}s",
            fmt_drift(&plain_d),
            fmt_drift(&pure_d),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_lambda_ablation() -> Outcome {
    let d5 = mean_drift(Variant::Fixed5);
    let da = mean_drift(Variant::Adaptive);
    let f1 = at_custom(Variant::Fixed1, METRIC_FIDELITY);
    let fa = at_custom(Variant::Adaptive, METRIC_FIDELITY);
    let elapsed = shared_stage_one().1
        + variant(Variant::Fixed1).elapsed
        + variant(Variant::Fixed5).elapsed
        + variant(Variant::Adaptive).elapsed;
    outcome(
        d5 > da && f1 < fa && elapsed < Duration::from_secs(600),
        format!(
            "mean drift fixed(5) {d5:.3} vs adaptive {da:.3}; fidelity fixed(1) {f1:.3} vs adaptive {fa:.3}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_eta_ablation() -> Outcome {
    let f2 = at_custom(Variant::Eta2, METRIC_FIDELITY);
    let f1 = at_custom(Variant::Adaptive, METRIC_FIDELITY);
    let d05 = mean_drift(Variant::Eta05);
    let d1 = mean_drift(Variant::Adaptive);
    outcome(
        f2 < f1 && d05 > d1,
        format!(
            "fidelity eta 2 {f2:.3} vs eta 1 {f1:.3}; mean drift eta 0.5 {d05:.3} vs eta 1 {d1:.3}"
        ),
    )
}

fn criterion_original_modes() -> Outcome {
    let d2 = mean_drift(Variant::Adaptive);
    let d3 = mean_drift(Variant::Theta3);
    let ratio = d2 / d3;
    outcome(
        (0.5..=2.0).contains(&ratio),
        format!("mean drift theta2 {d2:.3} vs theta3 {d3:.3}, ratio {ratio:.3}"),
    )
}

fn criterion_determinism() -> Outcome {
    let mut reports = Vec::new();
    for name in ["determinism-a", "determinism-b"] {
        let mut cfg = default_config();
        cfg.run_dir = scratch(name);
        run_all(&cfg).unwrap();
        reports.push(fs::read(cfg.run_dir.join(pipeline::REPORT)).unwrap());
    }
    let same = reports[0] == reports[1];
    outcome(
        same && !reports[0].is_empty(),
        format!("two full runs, report.csv byte-identical: {same} ({} bytes)", reports[0].len()),
    )
}

/// Runs every criterion, or only those whose numbers are given as arguments
/// (`cargo test --test acceptance -- 1 3`).
fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 8] = [
        ("gradient oracle", criterion_gradients),
        ("adaptive scale oracle", criterion_lambda),
        ("algebraic identities", criterion_identities),
        ("customization vs plain fine-tune", criterion_customization),
        ("lambda ablation", criterion_lambda_ablation),
        ("eta ablation", criterion_eta_ablation),
        ("theta2 / theta3 agreement", criterion_original_modes),
        ("pipeline determinism", criterion_determinism),
    ];
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected: Vec<usize> = (1..=criteria.len())
        .filter(|i| picked.is_empty() || picked.contains(i))
        .collect();
    if selected.iter().any(|i| (4..=7).contains(i)) {
        // One at a time, so each run's recorded wall time is its own.
        for v in VARIANTS {
            variant(v);
        }
    }
    let results: Vec<Outcome> = selected.iter().map(|&i| criteria[i - 1].1()).collect();
    let mut failed = 0;
    for (&i, r) in selected.iter().zip(&results) {
        let tag = if r.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {i}: {}: {}", criteria[i - 1].0, r.detail);
        failed += usize::from(!r.pass);
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", selected.len());
        std::process::exit(1);
    }
}
