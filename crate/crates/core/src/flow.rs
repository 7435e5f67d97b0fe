//! Rectified-flow training and sampling.
//!
//! Samples move on straight lines `x_t = (1 - t) x0 + t x1` between data `x0`
//! (t = 0) and standard-normal noise `x1` (t = 1); the network regresses the
//! constant velocity `x1 - x0`. Sampling integrates `dx/dt = v` backwards from
//! t = 1 to t = 0 with explicit Euler steps.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::net::{Gradients, VelocityNetwork};

/// Default number of Euler steps at inference.
pub const DEFAULT_SAMPLER_STEPS: usize = 28;

/// Anything that predicts a conditional velocity.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, y: &Condition) -> Result<Vec<f64>>;

    /// Whether the field's parameters are locked against updates.
    fn is_frozen(&self) -> bool {
        false
    }

    /// Number of token ids the field accepts, when known.
    fn vocab_size(&self) -> Option<usize> {
        None
    }
}

impl VelocityField for VelocityNetwork {
    fn dim(&self) -> usize {
        self.config().input_dim
    }

    fn is_frozen(&self) -> bool {
        VelocityNetwork::is_frozen(self)
    }

    fn vocab_size(&self) -> Option<usize> {
        Some(self.config().vocab_size)
    }

    fn velocity(&self, x: &[f64], t: f64, y: &Condition) -> Result<Vec<f64>> {
        self.forward(x, t, y)
    }
}

fn check_same_len(a: &[f64], b: &[f64], what: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            what,
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// `(1 - t) x0 + t x1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    check_same_len(x0, x1, "interpolation endpoints")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect())
}

/// `x1 - x0`.
pub fn target_velocity(x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    check_same_len(x0, x1, "target velocity")?;
    Ok(x1.iter().zip(x0).map(|(b, a)| b - a).collect())
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub t: Vec<f64>,
    pub y: Vec<Condition>,
}

impl FlowBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        if n == 0 {
            return Err(Error::Empty("flow batch"));
        }
        for (what, got) in [
            ("batch x0 rows", self.x0.nrows()),
            ("batch x1 rows", self.x1.nrows()),
            ("batch conditions", self.y.len()),
        ] {
            if got != n {
                return Err(Error::Shape {
                    what,
                    expected: n,
                    got,
                });
            }
        }
        if self.x0.ncols() != self.x1.ncols() {
            return Err(Error::Shape {
                what: "batch sample dimension",
                expected: self.x0.ncols(),
                got: self.x1.ncols(),
            });
        }
        if let Some(t) = self.t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("batch time {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn x0_row(&self, i: usize) -> &[f64] {
        self.x0.row(i).to_slice().expect("row-major batch")
    }

    pub fn x1_row(&self, i: usize) -> &[f64] {
        self.x1.row(i).to_slice().expect("row-major batch")
    }

    /// `x_t` for element `i`.
    pub fn point(&self, i: usize) -> Result<Vec<f64>> {
        interpolate(self.x0_row(i), self.x1_row(i), self.t[i])
    }

    /// `x1 - x0` for element `i`.
    pub fn velocity_target(&self, i: usize) -> Result<Vec<f64>> {
        target_velocity(self.x0_row(i), self.x1_row(i))
    }
}

/// Draws a training batch: for each element a uniformly chosen reference, a
/// standard-normal `x1`, `t ~ U[0, 1)`, and (with probability `drop_prob`) the
/// condition replaced by the null condition. Every element consumes the same
/// number of random draws regardless of `drop_prob`.
pub fn draw_batch<R: Rng>(
    rng: &mut R,
    samples: &Array2<f64>,
    conditions: &[Condition],
    batch_size: usize,
    drop_prob: f64,
) -> Result<FlowBatch> {
    let n = samples.nrows();
    if n == 0 || conditions.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if conditions.len() != n {
        return Err(Error::Shape {
            what: "dataset conditions",
            expected: n,
            got: conditions.len(),
        });
    }
    let d = samples.ncols();
    let mut x0 = Array2::zeros((batch_size, d));
    let mut x1 = Array2::zeros((batch_size, d));
    let mut t = Vec::with_capacity(batch_size);
    let mut y = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let idx = rng.random_range(0..n);
        x0.row_mut(i).assign(&samples.row(idx));
        for j in 0..d {
            x1[[i, j]] = StandardNormal.sample(rng);
        }
        t.push(rng.random::<f64>());
        let drop = rng.random::<f64>() < drop_prob;
        y.push(if drop {
            Condition::null()
        } else {
            conditions[idx].clone()
        });
    }
    Ok(FlowBatch { x0, x1, t, y })
}

/// Mean over the batch of `‖(x1 - x0) - v(x_t | y)‖²`, for any velocity field.
pub fn cfm_loss_value<F: VelocityField + ?Sized>(field: &F, batch: &FlowBatch) -> Result<f64> {
    batch.validate()?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let xt = batch.point(i)?;
        let v = field.velocity(&xt, batch.t[i], &batch.y[i])?;
        total += squared_distance(&batch.velocity_target(i)?, &v);
    }
    Ok(total / batch.len() as f64)
}

/// Flow-matching loss and its gradient over the network's trainable mask.
pub fn cfm_loss(net: &VelocityNetwork, batch: &FlowBatch) -> Result<(f64, Gradients)> {
    batch.validate()?;
    let n = batch.len() as f64;
    let mut grads = net.zero_gradients()?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let xt = batch.point(i)?;
        let trace = net.forward_traced(&xt, batch.t[i], &batch.y[i])?;
        let target = batch.velocity_target(i)?;
        let v = trace.output();
        total += squared_distance(&target, v);
        let upstream: Vec<f64> = v
            .iter()
            .zip(&target)
            .map(|(p, u)| 2.0 * (p - u) / n)
            .collect();
        net.accumulate_backward(&trace, &batch.y[i], &upstream, &mut grads)?;
    }
    Ok((total / n, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub cond_dropout_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 400,
            learning_rate: 1e-4,
            batch_size: 2,
            cond_dropout_prob: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::Config("cond_dropout_prob must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: VelocityNetwork,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
}

/// Plain SGD on the flow-matching loss with condition dropout.
pub fn train_flow(
    net: &VelocityNetwork,
    samples: &Array2<f64>,
    conditions: &[Condition],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.nrows() == 0 {
        return Err(Error::Empty("training set"));
    }
    if samples.ncols() != net.dim() {
        return Err(Error::Shape {
            what: "training samples",
            expected: net.dim(),
            got: samples.ncols(),
        });
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let batch = draw_batch(
            &mut rng,
            samples,
            conditions,
            cfg.batch_size,
            cfg.cond_dropout_prob,
        )?;
        let (loss, grads) = cfm_loss(&net, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::TrainingDivergence { iteration, loss });
        }
        net.apply_sgd(&grads, cfg.learning_rate)?;
        losses.push(loss);
    }
    Ok(TrainOutcome {
        network: net,
        losses,
    })
}

/// Classifier-free guidance, interpolation form: `(1 - w) v(x|∅) + w v(x|y)`.
pub fn cfg_velocity<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    y: &Condition,
    w: f64,
) -> Result<Vec<f64>> {
    if w == 1.0 {
        return field.velocity(x, t, y);
    }
    let uncond = field.velocity(x, t, &Condition::null())?;
    if w == 0.0 {
        return Ok(uncond);
    }
    let cond = field.velocity(x, t, y)?;
    Ok(uncond
        .iter()
        .zip(&cond)
        .map(|(u, c)| (1.0 - w) * u + w * c)
        .collect())
}

/// Classifier-free guidance, implicit-guidance form:
/// `v(x|∅) + w (v(x|y) - v(x|∅))`.
pub fn cfg_velocity_implicit<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    y: &Condition,
    w: f64,
) -> Result<Vec<f64>> {
    let uncond = field.velocity(x, t, &Condition::null())?;
    let cond = field.velocity(x, t, y)?;
    Ok(uncond
        .iter()
        .zip(&cond)
        .map(|(u, c)| u + w * (c - u))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_w: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: DEFAULT_SAMPLER_STEPS,
            guidance_w: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        if !(self.guidance_w >= 0.0 && self.guidance_w.is_finite()) {
            return Err(Error::Config("guidance_w must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// `n × dim` standard-normal draws from `seed`, row by row.
pub fn noise(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, dim), || StandardNormal.sample(&mut rng))
}

/// Integrates every noise row from t = 1 to t = 0 under guided velocity.
/// Chains run in parallel; each chain is independent, so the result does not
/// depend on scheduling.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    y: &Condition,
    start: &Array2<f64>,
    cfg: &SamplerConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    if start.ncols() != field.dim() {
        return Err(Error::Shape {
            what: "sampler noise",
            expected: field.dim(),
            got: start.ncols(),
        });
    }
    let steps = cfg.steps;
    let dt = 1.0 / steps as f64;
    let rows: Vec<Vec<f64>> = start.rows().into_iter().map(|r| r.to_vec()).collect();
    let finished: Vec<Vec<f64>> = rows
        .into_par_iter()
        .map(|mut x| {
            for k in 0..steps {
                let t = 1.0 - k as f64 / steps as f64;
                let v = cfg_velocity(field, &x, t, y, cfg.guidance_w)?;
                for (xi, vi) in x.iter_mut().zip(&v) {
                    *xi -= dt * vi;
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SamplingDivergence { step: k });
                }
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros(start.raw_dim());
    for (mut row, x) in out.rows_mut().into_iter().zip(finished) {
        row.assign(&ndarray::ArrayView1::from(&x));
    }
    Ok(out)
}

/// Draws `n` samples under condition `y`, noise seeded by `cfg.seed`.
pub fn sample<F: VelocityField + ?Sized>(
    field: &F,
    y: &Condition,
    n: usize,
    cfg: &SamplerConfig,
) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    integrate(field, y, &noise(n, field.dim(), cfg.seed), cfg)
}
