//! Two-stage concept customization with implicit target guidance.
//!
//! Stage one fine-tunes a low-rank adapter and per-layer concept slots on the
//! few-shot references, producing a frozen *extractor*. Its conditional bias
//! `R(y_tar) = v₁(x_t|y_tar) - v₁(x_t|∅)` isolates the concept.
//!
//! Stage two trains a fresh adapter on a copy of the pretrained model. Each
//! step regresses the complete-condition prediction onto two targets: the
//! usual flow-matching velocity `x1 - x0`, and the composite velocity
//! `v_original + λ·R(y_tar)` where `v_original` is the base-condition
//! prediction. `λ` defaults to the projection coefficient of the trainable
//! model's own concept bias `v₂(x_t|y_complete) - v₂(x_t|y_base)` onto
//! `R(y_tar)`. The composite target is detached: no gradient flows through
//! the extractor, through `λ`, or (by default) through `v_original`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::condition::Condition;
use crate::data::CustomSet;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::flow::{cfm_loss, draw_batch, squared_distance, FlowBatch, TrainConfig, VelocityField};
use crate::net::{Gradients, TrainMask, VelocityNetwork, DEFAULT_ADAPTER_RANK};

pub const DEFAULT_EPS_GUARD: f64 = 1e-8;
pub const DEFAULT_ETA: f64 = 1.0;

const ADAPTER_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMode {
    Adaptive,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OriginalMode {
    /// Base-condition prediction of the model being trained.
    TrainableTheta2,
    /// Base-condition prediction of a frozen copy of the pretrained model.
    FrozenTheta3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adapter_rank: usize,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            iterations: 400,
            learning_rate: 1e-4,
            batch_size: 2,
            adapter_rank: DEFAULT_ADAPTER_RANK,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PureConfig {
    pub eta: f64,
    pub lambda_mode: LambdaMode,
    pub original_mode: OriginalMode,
    pub eps_guard: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adapter_rank: usize,
    /// Treat `v_original` as a constant target (trainable-θ₂ mode only).
    pub detach_original: bool,
    /// Train all base weights instead of a fresh low-rank adapter.
    pub full_finetune: bool,
    pub seed: u64,
}

impl Default for PureConfig {
    fn default() -> Self {
        PureConfig {
            eta: DEFAULT_ETA,
            lambda_mode: LambdaMode::Adaptive,
            original_mode: OriginalMode::TrainableTheta2,
            eps_guard: DEFAULT_EPS_GUARD,
            iterations: 400,
            learning_rate: 1e-4,
            batch_size: 2,
            adapter_rank: DEFAULT_ADAPTER_RANK,
            detach_original: true,
            full_finetune: false,
            seed: 0,
        }
    }
}

impl PureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if let LambdaMode::Fixed(l) = self.lambda_mode {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("fixed lambda must be >= 0, got {l}")));
            }
        }
        if !(self.eps_guard > 0.0) {
            return Err(Error::Config("eps_guard must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.adapter_rank == 0 {
            return Err(Error::Config("batch_size and adapter_rank must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stage one: adapter + concept-slot fine-tuning on the references with the
/// flow-matching loss. Returns the frozen extractor and its loss trace.
pub fn train_extractor(
    pretrained: &VelocityNetwork,
    refs: &CustomSet,
    cfg: &ExtractorConfig,
) -> Result<(VelocityNetwork, Vec<f64>)> {
    if refs.is_empty() {
        return Err(Error::Empty("custom set"));
    }
    if pretrained.is_adapted() {
        return Err(Error::State("pretrained network already carries an adapter".into()));
    }
    check_concept(pretrained, refs)?;
    let net = pretrained
        .clone_unfrozen()
        .attach_adapter(cfg.adapter_rank, derive_seed(cfg.seed, ADAPTER_STREAM))?;
    let train = TrainConfig {
        iterations: cfg.iterations,
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        cond_dropout_prob: 0.0,
        seed: derive_seed(cfg.seed, BATCH_STREAM),
    };
    let out = crate::flow::train_flow(&net, &refs.samples, &refs.conditions, &train)?;
    Ok((out.network.clone_frozen(), out.losses))
}

fn check_concept(net: &VelocityNetwork, refs: &CustomSet) -> Result<()> {
    if net.config().concept_token != refs.concept_token() {
        return Err(Error::Contract(format!(
            "concept token mismatch: network uses {}, custom set uses {}",
            net.config().concept_token,
            refs.concept_token()
        )));
    }
    Ok(())
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| p - q).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// `R(y_tar) = v(x_t|y_tar) - v(x_t|∅)` from a frozen extractor.
pub fn target_guidance<F: VelocityField + ?Sized>(
    extractor: &F,
    x_t: &[f64],
    t: f64,
    y_tar: &Condition,
) -> Result<Vec<f64>> {
    if !extractor.is_frozen() {
        return Err(Error::Contract(
            "target guidance requires a frozen extractor".into(),
        ));
    }
    let cond = extractor.velocity(x_t, t, y_tar)?;
    let uncond = extractor.velocity(x_t, t, &Condition::null())?;
    Ok(sub(&cond, &uncond))
}

/// `v(x_t|y_complete) - v(x_t|y_base)` of the trainable model.
pub fn learned_representation<F: VelocityField + ?Sized>(
    trainable: &F,
    x_t: &[f64],
    t: f64,
    y_complete: &Condition,
    y_base: &Condition,
) -> Result<Vec<f64>> {
    let complete = trainable.velocity(x_t, t, y_complete)?;
    let base = trainable.velocity(x_t, t, y_base)?;
    Ok(sub(&complete, &base))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaEstimate {
    pub value: f64,
    /// Set when `‖r_tar‖² < eps_guard`; the value is then forced to 0.
    pub degenerate: bool,
}

/// `argmin_λ ‖r_learned - λ r_tar‖² = ⟨r_learned, r_tar⟩ / ‖r_tar‖²`.
pub fn adaptive_lambda(r_learned: &[f64], r_tar: &[f64], eps_guard: f64) -> Result<LambdaEstimate> {
    if r_learned.len() != r_tar.len() {
        return Err(Error::Shape {
            what: "representation vectors",
            expected: r_tar.len(),
            got: r_learned.len(),
        });
    }
    let denom = dot(r_tar, r_tar);
    if !(denom >= eps_guard) {
        return Ok(LambdaEstimate {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(LambdaEstimate {
        value: dot(r_learned, r_tar) / denom,
        degenerate: false,
    })
}

/// Batch form: projection of the flattened batch of learned biases onto the
/// flattened batch of guidance biases. Both sums are averaged over the batch,
/// so the guard applies to the mean per-sample `‖r_tar‖²`.
pub fn adaptive_lambda_batch(
    r_learned: &[Vec<f64>],
    r_tar: &[Vec<f64>],
    eps_guard: f64,
) -> Result<LambdaEstimate> {
    if r_learned.len() != r_tar.len() || r_tar.is_empty() {
        return Err(Error::Shape {
            what: "representation batch",
            expected: r_tar.len(),
            got: r_learned.len(),
        });
    }
    let scale = 1.0 / (r_tar.len() as f64).sqrt();
    let flat = |rows: &[Vec<f64>]| -> Vec<f64> {
        rows.iter().flatten().map(|v| v * scale).collect()
    };
    adaptive_lambda(&flat(r_learned), &flat(r_tar), eps_guard)
}

/// `v_original + λ r_tar`.
pub fn pure_target(v_original: &[f64], r_tar: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if v_original.len() != r_tar.len() {
        return Err(Error::Shape {
            what: "composite target",
            expected: v_original.len(),
            got: r_tar.len(),
        });
    }
    Ok(v_original
        .iter()
        .zip(r_tar)
        .map(|(o, r)| o + lambda * r)
        .collect())
}

/// One element of a pure-learning loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionPoint {
    pub x_t: Vec<f64>,
    pub t: f64,
    pub y: Condition,
    pub target: Vec<f64>,
}

/// Mean of `‖target - v(x_t|y)‖²` for any velocity field.
pub fn pure_loss_value<F: VelocityField + ?Sized>(
    trainable: &F,
    points: &[RegressionPoint],
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("pure loss batch"));
    }
    let mut total = 0.0;
    for p in points {
        let v = trainable.velocity(&p.x_t, p.t, &p.y)?;
        total += squared_distance(&p.target, &v);
    }
    Ok(total / points.len() as f64)
}

/// Mean of `‖target - v(x_t|y)‖²` and its gradient; targets are constants.
pub fn pure_loss(
    trainable: &VelocityNetwork,
    points: &[RegressionPoint],
) -> Result<(f64, Gradients)> {
    if points.is_empty() {
        return Err(Error::Empty("pure loss batch"));
    }
    let n = points.len() as f64;
    let mut grads = trainable.zero_gradients()?;
    let mut total = 0.0;
    for p in points {
        if p.target.len() != trainable.dim() {
            return Err(Error::Shape {
                what: "composite target",
                expected: trainable.dim(),
                got: p.target.len(),
            });
        }
        let trace = trainable.forward_traced(&p.x_t, p.t, &p.y)?;
        let v = trace.output();
        total += squared_distance(&p.target, v);
        let upstream: Vec<f64> = v
            .iter()
            .zip(&p.target)
            .map(|(q, u)| 2.0 * (q - u) / n)
            .collect();
        trainable.accumulate_backward(&trace, &p.y, &upstream, &mut grads)?;
    }
    Ok((total / n, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub iteration: usize,
    pub loss_cc: f64,
    pub loss_pure: f64,
    pub lambda_star: f64,
    /// Root-mean-square per-sample norm of `R(y_tar)`.
    pub r_tar_norm: f64,
    /// Root-mean-square per-sample norm of the learned bias.
    pub r_learned_norm: f64,
    pub degenerate: bool,
}

impl StepDiagnostics {
    pub fn total_loss(&self, eta: f64) -> f64 {
        self.loss_cc + eta * self.loss_pure
    }
}

/// The quantities of one pure-learning step, before any update.
#[derive(Clone, Debug)]
pub struct StepEvaluation {
    pub diagnostics: StepDiagnostics,
    pub gradients: Gradients,
    /// Composite targets `v_original + λ R(y_tar)`, one per batch element.
    pub pure_targets: Vec<Vec<f64>>,
}

fn rms_norm(rows: &[Vec<f64>]) -> f64 {
    (rows.iter().map(|r| dot(r, r)).sum::<f64>() / rows.len() as f64).sqrt()
}

/// Computes `L_CC + η L_pure` and its gradient for the trainable model on a
/// batch whose conditions are complete conditions.
pub fn evaluate_pure_step(
    trainable: &VelocityNetwork,
    extractor: &VelocityNetwork,
    original_ref: Option<&VelocityNetwork>,
    batch: &FlowBatch,
    cfg: &PureConfig,
) -> Result<StepEvaluation> {
    batch.validate()?;
    if !extractor.is_frozen() {
        return Err(Error::Contract("extractor must be frozen".into()));
    }
    let original_net = match cfg.original_mode {
        OriginalMode::TrainableTheta2 => trainable,
        OriginalMode::FrozenTheta3 => original_ref.ok_or_else(|| {
            Error::Contract("frozen-θ₃ mode needs an original reference network".into())
        })?,
    };
    let through_original =
        cfg.original_mode == OriginalMode::TrainableTheta2 && !cfg.detach_original;
    let n = batch.len();
    let nf = n as f64;

    let mut complete_traces = Vec::with_capacity(n);
    let mut base_traces = Vec::with_capacity(n);
    let mut r_tar = Vec::with_capacity(n);
    let mut r_learned = Vec::with_capacity(n);
    let mut v_original = Vec::with_capacity(n);
    let mut bases = Vec::with_capacity(n);
    for i in 0..n {
        let y = &batch.y[i];
        let base = y.base_part()?;
        let target = y.target_part()?;
        let x_t = batch.point(i)?;
        let t = batch.t[i];
        r_tar.push(target_guidance(extractor, &x_t, t, &target)?);
        let complete_trace = trainable.forward_traced(&x_t, t, y)?;
        let base_trace = trainable.forward_traced(&x_t, t, &base)?;
        r_learned.push(sub(complete_trace.output(), base_trace.output()));
        v_original.push(match cfg.original_mode {
            OriginalMode::TrainableTheta2 => base_trace.output().to_vec(),
            OriginalMode::FrozenTheta3 => original_net.forward(&x_t, t, &base)?,
        });
        complete_traces.push(complete_trace);
        base_traces.push(base_trace);
        bases.push(base);
    }

    let guard = adaptive_lambda_batch(&r_learned, &r_tar, cfg.eps_guard)?;
    let lambda = match cfg.lambda_mode {
        LambdaMode::Adaptive => guard.value,
        LambdaMode::Fixed(l) => l,
    };
    let pure_targets = v_original
        .iter()
        .zip(&r_tar)
        .map(|(o, r)| pure_target(o, r, lambda))
        .collect::<Result<Vec<_>>>()?;

    let mut grads = trainable.zero_gradients()?;
    let mut loss_cc = 0.0;
    let mut loss_pure = 0.0;
    for i in 0..n {
        let u = batch.velocity_target(i)?;
        let q = &pure_targets[i];
        let trace = &complete_traces[i];
        let v = trace.output();
        loss_cc += squared_distance(&u, v);
        loss_pure += squared_distance(q, v);
        let upstream: Vec<f64> = if cfg.eta == 0.0 {
            v.iter().zip(&u).map(|(p, u)| 2.0 * (p - u) / nf).collect()
        } else {
            v.iter()
                .zip(&u)
                .zip(q)
                .map(|((p, u), q)| (2.0 * (p - u) + 2.0 * cfg.eta * (p - q)) / nf)
                .collect()
        };
        trainable.accumulate_backward(trace, &batch.y[i], &upstream, &mut grads)?;
        if through_original && cfg.eta != 0.0 {
            let upstream: Vec<f64> = q
                .iter()
                .zip(v)
                .map(|(q, p)| 2.0 * cfg.eta * (q - p) / nf)
                .collect();
            trainable.accumulate_backward(&base_traces[i], &bases[i], &upstream, &mut grads)?;
        }
    }
    let diagnostics = StepDiagnostics {
        iteration: 0,
        loss_cc: loss_cc / nf,
        loss_pure: loss_pure / nf,
        lambda_star: lambda,
        r_tar_norm: rms_norm(&r_tar),
        r_learned_norm: rms_norm(&r_learned),
        degenerate: guard.degenerate,
    };
    Ok(StepEvaluation {
        diagnostics,
        gradients: grads,
        pure_targets,
    })
}

/// One SGD update of the trainable model on `L_CC + η L_pure`.
pub fn pure_learning_step(
    trainable: &mut VelocityNetwork,
    extractor: &VelocityNetwork,
    original_ref: Option<&VelocityNetwork>,
    batch: &FlowBatch,
    cfg: &PureConfig,
) -> Result<StepDiagnostics> {
    let eval = evaluate_pure_step(trainable, extractor, original_ref, batch, cfg)?;
    let d = eval.diagnostics;
    let total = d.total_loss(cfg.eta);
    if !total.is_finite() || !eval.gradients.is_finite() {
        return Err(Error::TrainingDivergence {
            iteration: d.iteration,
            loss: total,
        });
    }
    trainable.apply_sgd(&eval.gradients, cfg.learning_rate)?;
    Ok(d)
}

#[derive(Clone, Debug)]
pub struct CustomizeOutcome {
    pub network: VelocityNetwork,
    pub trace: Vec<StepDiagnostics>,
}

/// Copy of the pretrained model with the extractor's concept slots and a
/// fresh adapter (or full fine-tuning), ready for stage two.
pub fn init_trainable(
    pretrained: &VelocityNetwork,
    extractor: &VelocityNetwork,
    cfg: &PureConfig,
) -> Result<VelocityNetwork> {
    if pretrained.is_adapted() {
        return Err(Error::State("pretrained network already carries an adapter".into()));
    }
    if pretrained.config() != extractor.config() {
        return Err(Error::Contract(
            "extractor and pretrained network differ in architecture".into(),
        ));
    }
    let mut net = pretrained.clone_unfrozen();
    net.set_concept_slots(&extractor.params().concept_slots)?;
    if cfg.full_finetune {
        net.set_mask(TrainMask::FULL)?;
        Ok(net)
    } else {
        net.attach_adapter(cfg.adapter_rank, derive_seed(cfg.seed, ADAPTER_STREAM))
    }
}

fn stage_two_setup(
    pretrained: &VelocityNetwork,
    extractor: &VelocityNetwork,
    refs: &CustomSet,
    cfg: &PureConfig,
) -> Result<(VelocityNetwork, ChaCha8Rng)> {
    cfg.validate()?;
    if refs.is_empty() {
        return Err(Error::Empty("custom set"));
    }
    check_concept(extractor, refs)?;
    if !extractor.is_frozen() {
        return Err(Error::Contract("extractor must be frozen".into()));
    }
    let net = init_trainable(pretrained, extractor, cfg)?;
    Ok((net, ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, BATCH_STREAM))))
}

/// Stage two: `K` pure-learning steps on the references.
pub fn customize(
    pretrained: &VelocityNetwork,
    extractor: &VelocityNetwork,
    refs: &CustomSet,
    cfg: &PureConfig,
) -> Result<CustomizeOutcome> {
    customize_observed(pretrained, extractor, refs, cfg, 0, |_, _| Ok(()))
}

/// [`customize`] that hands the model to `observer` before the first step and
/// after every `every` steps (never when `every` is 0).
pub fn customize_observed<O>(
    pretrained: &VelocityNetwork,
    extractor: &VelocityNetwork,
    refs: &CustomSet,
    cfg: &PureConfig,
    every: usize,
    mut observer: O,
) -> Result<CustomizeOutcome>
where
    O: FnMut(usize, &VelocityNetwork) -> Result<()>,
{
    let (mut net, mut rng) = stage_two_setup(pretrained, extractor, refs, cfg)?;
    let original = match cfg.original_mode {
        OriginalMode::FrozenTheta3 => Some(pretrained.clone_frozen()),
        OriginalMode::TrainableTheta2 => None,
    };
    let mut trace = Vec::with_capacity(cfg.iterations);
    if every > 0 {
        observer(0, &net)?;
    }
    for iteration in 0..cfg.iterations {
        let batch = draw_batch(&mut rng, &refs.samples, &refs.conditions, cfg.batch_size, 0.0)?;
        let mut d = pure_learning_step(&mut net, extractor, original.as_ref(), &batch, cfg)
            .map_err(|e| match e {
                Error::TrainingDivergence { loss, .. } => {
                    Error::TrainingDivergence { iteration, loss }
                }
                other => other,
            })?;
        d.iteration = iteration;
        trace.push(d);
        if every > 0 && (iteration + 1) % every == 0 {
            observer(iteration + 1, &net)?;
        }
    }
    Ok(CustomizeOutcome {
        network: net,
        trace,
    })
}

/// Baseline: the same initialization and batches as [`customize`], trained on
/// the flow-matching loss alone.
pub fn finetune_plain(
    pretrained: &VelocityNetwork,
    extractor: &VelocityNetwork,
    refs: &CustomSet,
    cfg: &PureConfig,
) -> Result<(VelocityNetwork, Vec<f64>)> {
    let (mut net, mut rng) = stage_two_setup(pretrained, extractor, refs, cfg)?;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let batch = draw_batch(&mut rng, &refs.samples, &refs.conditions, cfg.batch_size, 0.0)?;
        let (loss, grads) = cfm_loss(&net, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::TrainingDivergence { iteration, loss });
        }
        net.apply_sgd(&grads, cfg.learning_rate)?;
        losses.push(loss);
    }
    Ok((net, losses))
}

/// Concept slots of a network, for diagnostics and copying.
pub fn concept_slots(net: &VelocityNetwork) -> Array2<f64> {
    net.params().concept_slots.clone()
}
