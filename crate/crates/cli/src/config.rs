//! Line-based `key = value` run configuration.
//!
//! Keys are dotted (`customize.eta`), `#` starts a comment, blank lines are
//! ignored. Absent keys take their defaults; unknown or repeated keys are
//! errors. [`RunConfig::to_text`] writes every key, and parsing that text
//! yields an equal config.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flowcc_core::customization::{
    ExtractorConfig, LambdaMode, OriginalMode, PureConfig,
};
use flowcc_core::data::{ConceptSpec, ContextSpec, SceneSpec, DEFAULT_CUSTOM_REFS};
use flowcc_core::derive_seed;
use flowcc_core::eval::HistogramGrid;
use flowcc_core::flow::{SamplerConfig, TrainConfig};
use flowcc_core::net::NetworkConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Stage seeds; unset entries derive from the run seed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageSeeds {
    pub data: Option<u64>,
    pub network: Option<u64>,
    pub pretrain: Option<u64>,
    pub extract: Option<u64>,
    pub customize: Option<u64>,
    pub eval: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub seed: u64,
    pub seeds: StageSeeds,
    pub scene: SceneSpec,
    pub custom_context: String,
    pub n_refs: usize,
    pub pretrain_samples: usize,
    pub net: NetworkConfig,
    pub pretrain: TrainConfig,
    pub extract: ExtractorConfig,
    pub customize: PureConfig,
    /// Drift probe interval during customization; 0 disables probing.
    pub probe_every: usize,
    pub probe_n: usize,
    pub sampler: SamplerConfig,
    pub sample_n: usize,
    pub eval_n: usize,
    pub grid: HistogramGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        let custom_context = scene.contexts[0].name.clone();
        RunConfig {
            run_dir: PathBuf::from("run"),
            seed: 0,
            seeds: StageSeeds::default(),
            scene,
            custom_context,
            n_refs: DEFAULT_CUSTOM_REFS,
            pretrain_samples: 4000,
            net: NetworkConfig::default(),
            pretrain: TrainConfig::default(),
            extract: ExtractorConfig::default(),
            customize: PureConfig::default(),
            probe_every: 0,
            probe_n: 500,
            sampler: SamplerConfig::default(),
            sample_n: 1000,
            eval_n: 2000,
            grid: HistogramGrid::default(),
        }
    }
}

pub const SEED_DATA: u64 = 11;
pub const SEED_NETWORK: u64 = 12;
pub const SEED_PRETRAIN: u64 = 13;
pub const SEED_EXTRACT: u64 = 14;
pub const SEED_CUSTOMIZE: u64 = 15;
pub const SEED_EVAL: u64 = 16;

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError::Line { line: line_no, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(err("empty key".into()));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "run_dir" => self.run_dir = PathBuf::from(v),
            "seed" => self.seed = num(v)?,
            "seed.data" => self.seeds.data = Some(num(v)?),
            "seed.network" => self.seeds.network = Some(num(v)?),
            "seed.pretrain" => self.seeds.pretrain = Some(num(v)?),
            "seed.extract" => self.seeds.extract = Some(num(v)?),
            "seed.customize" => self.seeds.customize = Some(num(v)?),
            "seed.eval" => self.seeds.eval = Some(num(v)?),

            "scene.dim" => self.scene.dim = num(v)?,
            "scene.contexts" => {
                let names = names(v)?;
                let old = std::mem::take(&mut self.scene.contexts);
                self.scene.contexts = names
                    .into_iter()
                    .enumerate()
                    .map(|(i, name)| {
                        let (center, std) = old
                            .get(i)
                            .map(|c| (c.center.clone(), c.std))
                            .unwrap_or((vec![0.0; self.scene.dim], self.scene.noise_std));
                        ContextSpec { name, center, std }
                    })
                    .collect();
            }
            "scene.centers" => {
                let points = points(v)?;
                if points.len() != self.scene.contexts.len() {
                    return Err(format!(
                        "{} centers given for {} contexts (set scene.contexts first)",
                        points.len(),
                        self.scene.contexts.len()
                    ));
                }
                for (c, p) in self.scene.contexts.iter_mut().zip(points) {
                    c.center = p;
                }
            }
            "scene.context_stds" => {
                let stds = floats(v)?;
                if stds.len() != self.scene.contexts.len() {
                    return Err(format!(
                        "{} stds given for {} contexts (set scene.contexts first)",
                        stds.len(),
                        self.scene.contexts.len()
                    ));
                }
                for (c, s) in self.scene.contexts.iter_mut().zip(stds) {
                    c.std = s;
                }
            }
            "scene.identifier" => self.scene.concept.identifier = word(v)?,
            "scene.class" => self.scene.concept.class_name = word(v)?,
            "scene.displacement" => self.scene.concept.displacement = floats(v)?,
            "scene.concept_std" => self.scene.concept.std = num(v)?,
            "scene.noise_std" => self.scene.noise_std = num(v)?,
            "scene.custom_context" => self.custom_context = word(v)?,
            "scene.refs" => self.n_refs = num(v)?,
            "scene.pretrain_samples" => self.pretrain_samples = num(v)?,

            "net.width" => self.net.hidden_width = num(v)?,
            "net.layers" => self.net.num_layers = num(v)?,
            "net.embed_dim" => self.net.embed_dim = num(v)?,
            "net.seq_len" => self.net.seq_len = num(v)?,

            "pretrain.iterations" => self.pretrain.iterations = num(v)?,
            "pretrain.learning_rate" => self.pretrain.learning_rate = num(v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = num(v)?,
            "pretrain.cond_dropout" => self.pretrain.cond_dropout_prob = num(v)?,

            "extract.iterations" => self.extract.iterations = num(v)?,
            "extract.learning_rate" => self.extract.learning_rate = num(v)?,
            "extract.batch_size" => self.extract.batch_size = num(v)?,
            "extract.rank" => self.extract.adapter_rank = num(v)?,

            "customize.iterations" => self.customize.iterations = num(v)?,
            "customize.learning_rate" => self.customize.learning_rate = num(v)?,
            "customize.batch_size" => self.customize.batch_size = num(v)?,
            "customize.rank" => self.customize.adapter_rank = num(v)?,
            "customize.eta" => self.customize.eta = num(v)?,
            "customize.lambda" => self.customize.lambda_mode = parse_lambda(v)?,
            "customize.original" => self.customize.original_mode = parse_original(v)?,
            "customize.eps_guard" => self.customize.eps_guard = num(v)?,
            "customize.detach_original" => self.customize.detach_original = flag(v)?,
            "customize.full_finetune" => self.customize.full_finetune = flag(v)?,
            "customize.probe_every" => self.probe_every = num(v)?,
            "customize.probe_n" => self.probe_n = num(v)?,

            "sample.steps" => self.sampler.steps = num(v)?,
            "sample.guidance" => self.sampler.guidance_w = num(v)?,
            "sample.n" => self.sample_n = num(v)?,

            "eval.n" => self.eval_n = num(v)?,
            "eval.bins" => self.grid.bins = num(v)?,
            "eval.lower" => self.grid.lower = num(v)?,
            "eval.upper" => self.grid.upper = num(v)?,
            "eval.alpha" => self.grid.alpha = num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: flowcc_core::Error| ConfigError::Invalid(e.to_string());
        self.scene.validate().map_err(bad)?;
        self.scene
            .context_index(&self.custom_context)
            .map_err(bad)?;
        self.network_config().validate().map_err(bad)?;
        self.pretrain.validate().map_err(bad)?;
        self.customize.validate().map_err(bad)?;
        self.sampler.validate().map_err(bad)?;
        self.grid.validate().map_err(bad)?;
        self.grid.num_cells(self.scene.dim).map_err(bad)?;
        let positive = [
            ("scene.refs", self.n_refs),
            ("scene.pretrain_samples", self.pretrain_samples),
            ("extract.batch_size", self.extract.batch_size),
            ("extract.rank", self.extract.adapter_rank),
            ("sample.n", self.sample_n),
            ("eval.n", self.eval_n),
            ("customize.probe_n", self.probe_n),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{key} must be at least 1")));
            }
        }
        if !(self.extract.learning_rate > 0.0 && self.extract.learning_rate.is_finite()) {
            return Err(ConfigError::Invalid(
                "extract.learning_rate must be positive".into(),
            ));
        }
        if self.n_refs > flowcc_core::data::MAX_CUSTOM_REFS {
            return Err(ConfigError::Invalid(format!(
                "scene.refs must be at most {}",
                flowcc_core::data::MAX_CUSTOM_REFS
            )));
        }
        Ok(())
    }

    /// Network architecture with the scene-derived input size and vocabulary.
    pub fn network_config(&self) -> NetworkConfig {
        let mut cfg = self.net.clone();
        cfg.input_dim = self.scene.dim;
        if let Ok(vocab) = self.scene.vocabulary() {
            cfg.vocab_size = vocab.size();
            cfg.concept_token = vocab.concept_token();
        }
        cfg
    }

    fn stage_seed(&self, explicit: Option<u64>, stream: u64) -> u64 {
        explicit.unwrap_or_else(|| derive_seed(self.seed, stream))
    }

    pub fn data_seed(&self) -> u64 {
        self.stage_seed(self.seeds.data, SEED_DATA)
    }
    pub fn network_seed(&self) -> u64 {
        self.stage_seed(self.seeds.network, SEED_NETWORK)
    }
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(self.seeds.pretrain, SEED_PRETRAIN),
            ..self.pretrain.clone()
        }
    }
    pub fn extract_config(&self) -> ExtractorConfig {
        ExtractorConfig {
            seed: self.stage_seed(self.seeds.extract, SEED_EXTRACT),
            ..self.extract.clone()
        }
    }
    pub fn customize_config(&self) -> PureConfig {
        PureConfig {
            seed: self.stage_seed(self.seeds.customize, SEED_CUSTOMIZE),
            ..self.customize.clone()
        }
    }
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.stage_seed(self.seeds.eval, SEED_EVAL),
            ..self.sampler.clone()
        }
    }

    /// Same config with every stage seed written out.
    pub fn resolved(&self) -> RunConfig {
        let mut out = self.clone();
        out.seeds = StageSeeds {
            data: Some(self.data_seed()),
            network: Some(self.network_seed()),
            pretrain: Some(self.pretrain_config().seed),
            extract: Some(self.extract_config().seed),
            customize: Some(self.customize_config().seed),
            eval: Some(self.sampler_config().seed),
        };
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(out, "{k} = {v}").expect("writing to a String cannot fail");
        };
        kv("run_dir", self.run_dir.display().to_string());
        kv("seed", self.seed.to_string());
        let s = &self.seeds;
        for (k, v) in [
            ("seed.data", s.data),
            ("seed.network", s.network),
            ("seed.pretrain", s.pretrain),
            ("seed.extract", s.extract),
            ("seed.customize", s.customize),
            ("seed.eval", s.eval),
        ] {
            if let Some(v) = v {
                kv(k, v.to_string());
            }
        }
        let sc = &self.scene;
        kv("scene.dim", sc.dim.to_string());
        kv("scene.noise_std", sc.noise_std.to_string());
        kv(
            "scene.contexts",
            sc.contexts.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", "),
        );
        kv(
            "scene.centers",
            sc.contexts
                .iter()
                .map(|c| join(&c.center, " "))
                .collect::<Vec<_>>()
                .join("; "),
        );
        kv(
            "scene.context_stds",
            join(&sc.contexts.iter().map(|c| c.std).collect::<Vec<_>>(), ", "),
        );
        let ConceptSpec {
            identifier,
            class_name,
            displacement,
            std,
        } = &sc.concept;
        kv("scene.identifier", identifier.clone());
        kv("scene.class", class_name.clone());
        kv("scene.displacement", join(displacement, " "));
        kv("scene.concept_std", std.to_string());
        kv("scene.custom_context", self.custom_context.clone());
        kv("scene.refs", self.n_refs.to_string());
        kv("scene.pretrain_samples", self.pretrain_samples.to_string());

        kv("net.width", self.net.hidden_width.to_string());
        kv("net.layers", self.net.num_layers.to_string());
        kv("net.embed_dim", self.net.embed_dim.to_string());
        kv("net.seq_len", self.net.seq_len.to_string());

        let p = &self.pretrain;
        kv("pretrain.iterations", p.iterations.to_string());
        kv("pretrain.learning_rate", p.learning_rate.to_string());
        kv("pretrain.batch_size", p.batch_size.to_string());
        kv("pretrain.cond_dropout", p.cond_dropout_prob.to_string());

        let e = &self.extract;
        kv("extract.iterations", e.iterations.to_string());
        kv("extract.learning_rate", e.learning_rate.to_string());
        kv("extract.batch_size", e.batch_size.to_string());
        kv("extract.rank", e.adapter_rank.to_string());

        let c = &self.customize;
        kv("customize.iterations", c.iterations.to_string());
        kv("customize.learning_rate", c.learning_rate.to_string());
        kv("customize.batch_size", c.batch_size.to_string());
        kv("customize.rank", c.adapter_rank.to_string());
        kv("customize.eta", c.eta.to_string());
        kv("customize.lambda", lambda_text(c.lambda_mode));
        kv("customize.original", original_text(c.original_mode).into());
        kv("customize.eps_guard", c.eps_guard.to_string());
        kv("customize.detach_original", c.detach_original.to_string());
        kv("customize.full_finetune", c.full_finetune.to_string());
        kv("customize.probe_every", self.probe_every.to_string());
        kv("customize.probe_n", self.probe_n.to_string());

        kv("sample.steps", self.sampler.steps.to_string());
        kv("sample.guidance", self.sampler.guidance_w.to_string());
        kv("sample.n", self.sample_n.to_string());

        kv("eval.n", self.eval_n.to_string());
        kv("eval.bins", self.grid.bins.to_string());
        kv("eval.lower", self.grid.lower.to_string());
        kv("eval.upper", self.grid.upper.to_string());
        kv("eval.alpha", self.grid.alpha.to_string());
        out
    }
}

fn join(v: &[f64], sep: &str) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("bad value `{v}`: {e}"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn word(v: &str) -> Result<String, String> {
    if v.is_empty() || v.contains([',', ';', ' ', '\t']) {
        return Err(format!("expected a single name, got `{v}`"));
    }
    Ok(v.to_string())
}

fn names(v: &str) -> Result<Vec<String>, String> {
    v.split(',').map(|s| word(s.trim())).collect()
}

fn floats(v: &str) -> Result<Vec<f64>, String> {
    let out: Vec<f64> = v
        .split([',', ' ', '\t'])
        .filter(|s| !s.is_empty())
        .map(num)
        .collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err("expected at least one number".into());
    }
    Ok(out)
}

fn points(v: &str) -> Result<Vec<Vec<f64>>, String> {
    v.split(';').map(|p| floats(p.trim())).collect()
}

pub fn parse_lambda(v: &str) -> Result<LambdaMode, String> {
    match v.trim() {
        "adaptive" => Ok(LambdaMode::Adaptive),
        other => match other.strip_prefix("fixed:") {
            Some(x) => Ok(LambdaMode::Fixed(num(x.trim())?)),
            None => Err(format!("expected `adaptive` or `fixed:<value>`, got `{v}`")),
        },
    }
}

pub fn lambda_text(mode: LambdaMode) -> String {
    match mode {
        LambdaMode::Adaptive => "adaptive".into(),
        LambdaMode::Fixed(x) => format!("fixed:{x}"),
    }
}

pub fn parse_original(v: &str) -> Result<OriginalMode, String> {
    match v.trim() {
        "theta2" => Ok(OriginalMode::TrainableTheta2),
        "theta3" => Ok(OriginalMode::FrozenTheta3),
        _ => Err(format!("expected `theta2` or `theta3`, got `{v}`")),
    }
}

pub fn original_text(mode: OriginalMode) -> &'static str {
    match mode {
        OriginalMode::TrainableTheta2 => "theta2",
        OriginalMode::FrozenTheta3 => "theta3",
    }
}
