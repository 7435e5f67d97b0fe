//! Pipeline stages. Every stage reads its inputs from the run directory and
//! writes its own artifacts there under fixed names; nothing else is touched.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use flowcc_core::customization::{customize_observed, train_extractor, StepDiagnostics};
use flowcc_core::data::{make_custom_set, make_pretrain_set, CustomSet};
use flowcc_core::derive_seed;
use flowcc_core::eval::{self, EvalReport, ReportRow};
use flowcc_core::flow::{sample, train_flow, SamplerConfig};
use flowcc_core::io::{read_samples, write_samples};
use flowcc_core::net::checkpoint::{load_network, save_network};
use flowcc_core::{Error as CoreError, VelocityNetwork};

use crate::config::{ConfigError, RunConfig};

pub const PRETRAINED: &str = "pretrained.pcck";
pub const EXTRACTOR: &str = "extractor.pcck";
pub const CUSTOM: &str = "custom.pcck";
pub const CUSTOM_SET: &str = "custom_set.csv";
pub const PRETRAIN_LOSS: &str = "pretrain_loss.csv";
pub const EXTRACT_LOSS: &str = "extract_loss.csv";
pub const TRACE: &str = "trace.csv";
pub const DRIFT_PROBE: &str = "drift_probe.csv";
pub const EVAL: &str = "eval.csv";
pub const REPORT: &str = "report.csv";
pub const CURVES: &str = "curves.csv";
pub const RESOLVED: &str = "config.resolved";

pub const TRACE_HEADER: &str =
    "iter,loss_cc,loss_purecc,lambda_star,r_tar_norm,r_learned_norm,degenerate_flag";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing {}: run {stage} first", path.display())]
    Prerequisite { stage: &'static str, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Artifact {
        path: PathBuf,
        #[source]
        source: CoreError,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Prerequisite { .. } | PipelineError::Artifact { .. } => 3,
            PipelineError::Core(CoreError::Config(_)) => 2,
            PipelineError::Core(e) if e.is_divergence() => 4,
            PipelineError::Core(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Extract,
    Customize,
    Sample,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Pretrain,
        Stage::Extract,
        Stage::Customize,
        Stage::Sample,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Extract => "extract",
            Stage::Customize => "customize",
            Stage::Sample => "sample",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.run_dir).map_err(CoreError::from)?;
    fs::write(cfg.run_dir.join(RESOLVED), cfg.resolved().to_text()).map_err(CoreError::from)?;
    match stage {
        Stage::Pretrain => pretrain(cfg),
        Stage::Extract => extract(cfg),
        Stage::Customize => customize(cfg),
        Stage::Sample => sample_sets(cfg),
        Stage::Eval => evaluate(cfg),
        Stage::Report => report(cfg),
    }
}

/// Runs every stage in order.
pub fn run_all(cfg: &RunConfig) -> Result<()> {
    for stage in Stage::ALL {
        run_stage(cfg, stage)?;
    }
    Ok(())
}

fn input(cfg: &RunConfig, name: &str, stage: &'static str) -> Result<PathBuf> {
    let path = cfg.run_dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(PipelineError::Prerequisite { stage, path })
    }
}

fn load(cfg: &RunConfig, name: &str, stage: &'static str) -> Result<VelocityNetwork> {
    let path = input(cfg, name, stage)?;
    load_network(&path).map_err(|source| PipelineError::Artifact { path, source })
}

fn write(cfg: &RunConfig, name: &str, text: &str) -> Result<()> {
    fs::write(cfg.run_dir.join(name), text).map_err(CoreError::from)?;
    Ok(())
}

fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("iter,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{l:.16e}").unwrap();
    }
    out
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let data = make_pretrain_set(&cfg.scene, cfg.pretrain_samples, cfg.data_seed())?;
    let net = VelocityNetwork::new(cfg.network_config(), cfg.network_seed())?;
    let out = train_flow(&net, &data.samples, &data.conditions, &cfg.pretrain_config())?;
    save_network(&out.network.clone_frozen(), &cfg.run_dir.join(PRETRAINED))?;
    write(cfg, PRETRAIN_LOSS, &loss_csv(&out.losses))
}

fn custom_set(cfg: &RunConfig) -> Result<CustomSet> {
    let path = input(cfg, CUSTOM_SET, "extract")?;
    let samples =
        read_samples(&path).map_err(|source| PipelineError::Artifact { path, source })?;
    let ctx = cfg.scene.context_index(&cfg.custom_context)?;
    let vocab = cfg.scene.vocabulary()?;
    let n = samples.nrows();
    Ok(CustomSet::new(samples, vec![vocab.complete_condition(ctx); n], ctx)?)
}

fn extract(cfg: &RunConfig) -> Result<()> {
    let pretrained = load(cfg, PRETRAINED, "pretrain")?;
    let refs = make_custom_set(
        &cfg.scene,
        &cfg.custom_context,
        cfg.n_refs,
        derive_seed(cfg.data_seed(), 1),
    )?;
    let (extractor, losses) = train_extractor(&pretrained, &refs, &cfg.extract_config())?;
    write_samples(&cfg.run_dir.join(CUSTOM_SET), &refs.samples)?;
    save_network(&extractor, &cfg.run_dir.join(EXTRACTOR))?;
    write(cfg, EXTRACT_LOSS, &loss_csv(&losses))
}

pub fn trace_csv(trace: &[StepDiagnostics]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for d in trace {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            d.iteration,
            d.loss_cc,
            d.loss_pure,
            d.lambda_star,
            d.r_tar_norm,
            d.r_learned_norm,
            u8::from(d.degenerate)
        )
        .unwrap();
    }
    out
}

fn all_contexts(cfg: &RunConfig) -> Vec<usize> {
    (0..cfg.scene.contexts.len()).collect()
}

fn customize(cfg: &RunConfig) -> Result<()> {
    let pretrained = load(cfg, PRETRAINED, "pretrain")?;
    let extractor = load(cfg, EXTRACTOR, "extract")?;
    let refs = custom_set(cfg)?;
    let sampler = cfg.sampler_config();
    let contexts = all_contexts(cfg);
    let mut probe = String::from("iter");
    for c in &cfg.scene.contexts {
        write!(probe, ",{}", c.name).unwrap();
    }
    probe.push('\n');
    let out = customize_observed(
        &pretrained,
        &extractor,
        &refs,
        &cfg.customize_config(),
        cfg.probe_every,
        |iter, net| {
            let drift = eval::preservation_drift(
                net,
                &pretrained,
                &cfg.scene,
                &contexts,
                &sampler,
                cfg.probe_n,
                &cfg.grid,
            )?;
            write!(probe, "{iter}").unwrap();
            for d in drift {
                write!(probe, ",{d:.16e}").unwrap();
            }
            probe.push('\n');
            Ok(())
        },
    )?;
    save_network(&out.network.clone_frozen(), &cfg.run_dir.join(CUSTOM))?;
    write(cfg, TRACE, &trace_csv(&out.trace))?;
    if cfg.probe_every > 0 {
        write(cfg, DRIFT_PROBE, &probe)?;
    }
    Ok(())
}

/// Per-context sampler: the same derived seed for every model, so chains pair up.
fn context_sampler(base: &SamplerConfig, ctx: usize) -> SamplerConfig {
    SamplerConfig {
        seed: derive_seed(base.seed, ctx as u64),
        ..base.clone()
    }
}

fn sample_sets(cfg: &RunConfig) -> Result<()> {
    let original = load(cfg, PRETRAINED, "pretrain")?;
    let custom = load(cfg, CUSTOM, "customize")?;
    let vocab = cfg.scene.vocabulary()?;
    let base_sampler = cfg.sampler_config();
    for (ctx, c) in cfg.scene.contexts.iter().enumerate() {
        let s = context_sampler(&base_sampler, ctx);
        let base = vocab.base_condition(ctx);
        let complete = vocab.complete_condition(ctx);
        let sets = [
            ("original_base", sample(&original, &base, cfg.sample_n, &s)?),
            ("custom_base", sample(&custom, &base, cfg.sample_n, &s)?),
            ("custom_complete", sample(&custom, &complete, cfg.sample_n, &s)?),
        ];
        for (label, set) in sets {
            write_samples(&sample_path(&cfg.run_dir, &c.name, label), &set)?;
        }
    }
    Ok(())
}

/// Location of a sample set written by the sample stage.
pub fn sample_path(run_dir: &Path, context: &str, label: &str) -> PathBuf {
    run_dir.join(format!("samples_{context}_{label}.csv"))
}

fn evaluate(cfg: &RunConfig) -> Result<()> {
    let original = load(cfg, PRETRAINED, "pretrain")?;
    let custom = load(cfg, CUSTOM, "customize")?;
    let names: Vec<&str> = cfg.scene.contexts.iter().map(|c| c.name.as_str()).collect();
    let rep = eval::report(
        &custom,
        &original,
        &cfg.scene,
        &names,
        &cfg.sampler_config(),
        cfg.eval_n,
        &cfg.grid,
    )?;
    write(cfg, EVAL, &rep.to_csv())
}

fn read_text(cfg: &RunConfig, name: &str, stage: &'static str) -> Result<(PathBuf, String)> {
    let path = input(cfg, name, stage)?;
    let text = fs::read_to_string(&path).map_err(CoreError::from)?;
    Ok((path, text))
}

fn csv_table(path: &Path, text: &str, header: Option<&str>) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let bad = |line: usize, msg: String| PipelineError::Artifact {
        path: path.to_path_buf(),
        source: CoreError::Csv { line, msg },
    };
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
    if let Some(h) = header {
        if head != h {
            return Err(bad(1, format!("expected header `{h}`")));
        }
    }
    let cols: Vec<String> = head.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| bad(i + 2, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != cols.len() {
            return Err(bad(i + 2, format!("expected {} fields", cols.len())));
        }
        rows.push(row);
    }
    Ok((cols, rows))
}

fn report(cfg: &RunConfig) -> Result<()> {
    let (eval_path, eval_text) = read_text(cfg, EVAL, "eval")?;
    let mut rep = EvalReport::from_csv(&eval_text).map_err(|source| PipelineError::Artifact {
        path: eval_path,
        source,
    })?;
    let (trace_path, trace_text) = read_text(cfg, TRACE, "customize")?;
    let (_, trace) = csv_table(&trace_path, &trace_text, Some(TRACE_HEADER))?;

    let iterations = trace.len();
    let seed = cfg.customize_config().seed;
    let tail = &trace[iterations - (iterations / 10).max(1).min(iterations)..];
    let mean = |col: usize| -> f64 {
        if tail.is_empty() {
            0.0
        } else {
            tail.iter().map(|r| r[col]).sum::<f64>() / tail.len() as f64
        }
    };
    let summary = [
        ("final_loss_cc", mean(1)),
        ("final_loss_purecc", mean(2)),
        ("final_lambda_star", mean(3)),
        ("degenerate_steps", trace.iter().map(|r| r[6]).sum()),
    ];
    for (metric, value) in summary {
        rep.rows.push(ReportRow {
            context: "training".into(),
            metric: metric.into(),
            value,
            n: iterations,
            seed,
        });
    }
    write(cfg, REPORT, &rep.to_csv())?;

    let probe = match input(cfg, DRIFT_PROBE, "customize") {
        Ok(path) => {
            let text = fs::read_to_string(&path).map_err(CoreError::from)?;
            Some(csv_table(&path, &text, None)?)
        }
        Err(_) => None,
    };
    let mut curves = String::from("iter,loss_cc,loss_purecc,lambda_star");
    for c in &cfg.scene.contexts {
        write!(curves, ",drift_{}", c.name).unwrap();
    }
    curves.push('\n');
    let probe_at = |iter: usize| {
        probe.as_ref().and_then(|(_, rows)| {
            rows.iter()
                .find(|r| r[0] as usize == iter)
                .map(|r| r[1..].to_vec())
        })
    };
    // One extra row for the probe taken after the last update.
    for iter in 0..=iterations {
        let drift = probe_at(iter);
        let row = trace.get(iter);
        if row.is_none() && drift.is_none() {
            continue;
        }
        write!(curves, "{iter}").unwrap();
        for col in 1..=3 {
            match row {
                Some(r) => write!(curves, ",{:.16e}", r[col]).unwrap(),
                None => curves.push(','),
            }
        }
        for k in 0..cfg.scene.contexts.len() {
            match drift.as_ref().and_then(|d| d.get(k)) {
                Some(v) => write!(curves, ",{v:.16e}").unwrap(),
                None => curves.push(','),
            }
        }
        curves.push('\n');
    }
    write(cfg, CURVES, &curves)
}
