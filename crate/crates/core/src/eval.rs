//! Preservation and fidelity metrics for the toy scenes.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::data::{norm, SceneSpec};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::flow::{sample, SamplerConfig, VelocityField};

pub const DEFAULT_BINS: usize = 64;
pub const DEFAULT_BOUND: f64 = 6.0;
pub const DEFAULT_ALPHA: f64 = 1e-6;
const MAX_CELLS: usize = 1 << 24;

/// Axis-aligned histogram with the same bounds and bin count on every axis.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramGrid {
    pub lower: f64,
    pub upper: f64,
    pub bins: usize,
    pub alpha: f64,
}

impl Default for HistogramGrid {
    fn default() -> Self {
        HistogramGrid {
            lower: -DEFAULT_BOUND,
            upper: DEFAULT_BOUND,
            bins: DEFAULT_BINS,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl HistogramGrid {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config("histogram needs at least 2 bins".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("histogram smoothing must be positive".into()));
        }
        if !(self.lower < self.upper) || !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(Error::Config("histogram bounds must be finite and ordered".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self, dim: usize) -> Result<usize> {
        let mut cells = 1usize;
        for _ in 0..dim {
            cells = cells
                .checked_mul(self.bins)
                .filter(|c| *c <= MAX_CELLS)
                .ok_or_else(|| Error::Config(format!("{dim}-d histogram is too large")))?;
        }
        Ok(cells)
    }

    /// Bin of a coordinate; values outside the bounds land in the edge bins.
    pub fn bin(&self, v: f64) -> usize {
        let u = (v - self.lower) / (self.upper - self.lower) * self.bins as f64;
        if u.is_nan() || u < 0.0 {
            0
        } else {
            (u.floor() as usize).min(self.bins - 1)
        }
    }

    pub fn cell(&self, point: ArrayView1<f64>) -> usize {
        point.iter().fold(0, |acc, v| acc * self.bins + self.bin(*v))
    }

    /// Raw counts per cell.
    pub fn counts(&self, samples: &Array2<f64>) -> Result<Vec<u64>> {
        self.validate()?;
        if samples.nrows() == 0 {
            return Err(Error::Empty("histogram samples"));
        }
        let mut counts = vec![0u64; self.num_cells(samples.ncols())?];
        for row in samples.rows() {
            counts[self.cell(row)] += 1;
        }
        Ok(counts)
    }

    /// `(count + α) / (n + α M)` per cell.
    pub fn smoothed(&self, samples: &Array2<f64>) -> Result<Vec<f64>> {
        let counts = self.counts(samples)?;
        let denom = samples.nrows() as f64 + self.alpha * counts.len() as f64;
        Ok(counts
            .into_iter()
            .map(|c| (c as f64 + self.alpha) / denom)
            .collect())
    }
}

/// `KL(P̂ ‖ Q̂)` between smoothed histograms of two sample sets.
pub fn histogram_kl(p: &Array2<f64>, q: &Array2<f64>, grid: &HistogramGrid) -> Result<f64> {
    if p.ncols() != q.ncols() {
        return Err(Error::Shape {
            what: "histogram samples",
            expected: p.ncols(),
            got: q.ncols(),
        });
    }
    let ph = grid.smoothed(p)?;
    let qh = grid.smoothed(q)?;
    let kl: f64 = ph
        .iter()
        .zip(&qh)
        .map(|(a, b)| if a == b { 0.0 } else { a * (a / b).ln() })
        .sum();
    Ok(kl.max(0.0))
}

/// `½ (KL(P̂‖Q̂) + KL(Q̂‖P̂))`.
pub fn symmetric_histogram_kl(
    p: &Array2<f64>,
    q: &Array2<f64>,
    grid: &HistogramGrid,
) -> Result<f64> {
    Ok(0.5 * (histogram_kl(p, q, grid)? + histogram_kl(q, p, grid)?))
}

fn check_pair<C, O>(custom: &C, original: &O) -> Result<()>
where
    C: VelocityField + ?Sized,
    O: VelocityField + ?Sized,
{
    if custom.dim() != original.dim() {
        return Err(Error::Shape {
            what: "model dimension",
            expected: original.dim(),
            got: custom.dim(),
        });
    }
    if let (Some(a), Some(b)) = (custom.vocab_size(), original.vocab_size()) {
        if a != b {
            return Err(Error::Vocabulary(format!(
                "models disagree on vocabulary size ({a} vs {b})"
            )));
        }
    }
    Ok(())
}

fn context_sampler(cfg: &SamplerConfig, ctx: usize) -> SamplerConfig {
    SamplerConfig {
        seed: derive_seed(cfg.seed, ctx as u64),
        ..cfg.clone()
    }
}

/// Per context, `KL(custom | base ‖ original | base)` with shared noise.
pub fn preservation_drift<C, O>(
    custom: &C,
    original: &O,
    spec: &SceneSpec,
    contexts: &[usize],
    sampler: &SamplerConfig,
    n: usize,
    grid: &HistogramGrid,
) -> Result<Vec<f64>>
where
    C: VelocityField + ?Sized,
    O: VelocityField + ?Sized,
{
    check_pair(custom, original)?;
    let vocab = spec.vocabulary()?;
    contexts
        .par_iter()
        .map(|&ctx| {
            check_context(spec, ctx)?;
            let y = vocab.base_condition(ctx);
            let cfg = context_sampler(sampler, ctx);
            let a = sample(custom, &y, n, &cfg)?;
            let b = sample(original, &y, n, &cfg)?;
            histogram_kl(&a, &b, grid)
        })
        .collect()
}

fn check_context(spec: &SceneSpec, ctx: usize) -> Result<()> {
    if ctx >= spec.contexts.len() {
        return Err(Error::UnknownContext(format!("#{ctx}")));
    }
    Ok(())
}

fn squared(a: ArrayView1<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Fraction of `samples` whose nearest ground-truth center is the concept
/// center of context `ctx`. Ties go to the context clusters.
pub fn fraction_nearest_concept(spec: &SceneSpec, ctx: usize, samples: &Array2<f64>) -> Result<f64> {
    check_context(spec, ctx)?;
    if samples.nrows() == 0 {
        return Err(Error::Empty("fidelity samples"));
    }
    let concept = spec.concept_center(ctx);
    let hits = samples
        .rows()
        .into_iter()
        .filter(|row| {
            let d = squared(*row, &concept);
            spec.contexts.iter().all(|c| d < squared(*row, &c.center))
        })
        .count();
    Ok(hits as f64 / samples.nrows() as f64)
}

/// Fraction of complete-condition samples landing nearest the concept center.
pub fn concept_fidelity<C: VelocityField + ?Sized>(
    custom: &C,
    spec: &SceneSpec,
    ctx: usize,
    sampler: &SamplerConfig,
    n: usize,
) -> Result<f64> {
    check_context(spec, ctx)?;
    let vocab = spec.vocabulary()?;
    let samples = sample(custom, &vocab.complete_condition(ctx), n, &context_sampler(sampler, ctx))?;
    fraction_nearest_concept(spec, ctx, &samples)
}

/// Mean `‖(custom_i - δ) - original_i‖` over paired rows.
pub fn paired_distance(custom: &Array2<f64>, original: &Array2<f64>, displacement: &[f64]) -> Result<f64> {
    if custom.dim() != original.dim() {
        return Err(Error::Shape {
            what: "paired samples",
            expected: original.nrows(),
            got: custom.nrows(),
        });
    }
    if custom.nrows() == 0 {
        return Err(Error::Empty("paired samples"));
    }
    if displacement.len() != custom.ncols() {
        return Err(Error::Shape {
            what: "concept displacement",
            expected: custom.ncols(),
            got: displacement.len(),
        });
    }
    let total: f64 = custom
        .rows()
        .into_iter()
        .zip(original.rows())
        .map(|(c, o)| {
            let diff: Vec<f64> = c
                .iter()
                .zip(o.iter())
                .zip(displacement)
                .map(|((c, o), d)| c - d - o)
                .collect();
            norm(&diff)
        })
        .sum();
    Ok(total / custom.nrows() as f64)
}

/// Shared-noise distance between the custom model under the complete
/// condition (shifted back by the concept displacement) and the original
/// model under the base condition.
pub fn behavior_consistency<C, O>(
    custom: &C,
    original: &O,
    spec: &SceneSpec,
    ctx: usize,
    sampler: &SamplerConfig,
    n: usize,
) -> Result<f64>
where
    C: VelocityField + ?Sized,
    O: VelocityField + ?Sized,
{
    check_pair(custom, original)?;
    check_context(spec, ctx)?;
    let vocab = spec.vocabulary()?;
    let cfg = context_sampler(sampler, ctx);
    let c = sample(custom, &vocab.complete_condition(ctx), n, &cfg)?;
    let o = sample(original, &vocab.base_condition(ctx), n, &cfg)?;
    paired_distance(&c, &o, &spec.concept.displacement)
}

pub const METRIC_DRIFT: &str = "preservation_drift";
pub const METRIC_FIDELITY: &str = "concept_fidelity";
pub const METRIC_CONSISTENCY: &str = "behavior_consistency";
pub const CSV_HEADER: &str = "context,metric,value,n,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub context: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn get(&self, context: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.context == context && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn metric(&self, metric: &str) -> Vec<(String, f64)> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| (r.context.clone(), r.value))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(out, "{},{},{:.16e},{},{}", r.context, r.metric, r.value, r.n, r.seed)
                .expect("writing to a String cannot fail");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(Error::Csv {
                    line: 1,
                    msg: format!("expected header `{CSV_HEADER}`"),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Csv { line: i + 1, msg };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", fields.len())));
            }
            rows.push(ReportRow {
                context: fields[0].to_string(),
                metric: fields[1].to_string(),
                value: fields[2].parse().map_err(|e| err(format!("value: {e}")))?,
                n: fields[3].parse().map_err(|e| err(format!("n: {e}")))?,
                seed: fields[4].parse().map_err(|e| err(format!("seed: {e}")))?,
            });
        }
        Ok(EvalReport { rows })
    }
}

/// Drift, fidelity and consistency for each named context.
pub fn report<C, O>(
    custom: &C,
    original: &O,
    spec: &SceneSpec,
    contexts: &[&str],
    sampler: &SamplerConfig,
    n: usize,
    grid: &HistogramGrid,
) -> Result<EvalReport>
where
    C: VelocityField + ?Sized,
    O: VelocityField + ?Sized,
{
    if contexts.is_empty() {
        return Err(Error::Empty("report contexts"));
    }
    let idx = contexts
        .iter()
        .map(|name| spec.context_index(name))
        .collect::<Result<Vec<_>>>()?;
    let drift = preservation_drift(custom, original, spec, &idx, sampler, n, grid)?;
    let mut rows = Vec::with_capacity(3 * idx.len());
    for (k, &ctx) in idx.iter().enumerate() {
        let row = |metric: &str, value: f64| -> Result<ReportRow> {
            if !value.is_finite() {
                return Err(Error::NumericInput("evaluation report"));
            }
            Ok(ReportRow {
                context: contexts[k].to_string(),
                metric: metric.to_string(),
                value,
                n,
                seed: sampler.seed,
            })
        };
        rows.push(row(METRIC_DRIFT, drift[k])?);
        rows.push(row(METRIC_FIDELITY, concept_fidelity(custom, spec, ctx, sampler, n)?)?);
        rows.push(row(
            METRIC_CONSISTENCY,
            behavior_consistency(custom, original, spec, ctx, sampler, n)?,
        )?);
    }
    Ok(EvalReport { rows })
}
