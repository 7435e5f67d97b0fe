//! Small conditional velocity-field network with exact reverse-mode gradients.
//!
//! Each of the `L` blocks sees the previous activation concatenated with a
//! pooled conditioning vector for that layer, followed by `tanh`. The input
//! activation is `[x, t, sin 2πt, cos 2πt]`; the head is affine. Conditioning
//! is the mean of the token embeddings over a fixed-length, null-padded token
//! sequence, with the concept token's embedding swapped for the per-layer slot.

pub mod checkpoint;
mod params;

pub use params::{
    Affine, Gradients, LowRankAdapter, ParamClass, Params, TensorMut, TensorRef, TrainMask,
};

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::condition::{Condition, TokenId, NULL_TOKEN};
use crate::error::{Error, Result};

/// Number of time features appended to the sample: `t`, `sin 2πt`, `cos 2πt`.
pub const TIME_FEATURES: usize = 3;

/// Default adapter rank.
pub const DEFAULT_ADAPTER_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    /// Includes the null token at id 0.
    pub vocab_size: usize,
    /// Padded token-sequence length used by mean pooling.
    pub seq_len: usize,
    /// Token whose embedding is replaced by the per-layer concept slots.
    pub concept_token: TokenId,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_dim: 2,
            hidden_width: 64,
            num_layers: 3,
            embed_dim: 8,
            vocab_size: 5,
            seq_len: 4,
            concept_token: 4,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("hidden_width", self.hidden_width),
            ("num_layers", self.num_layers),
            ("embed_dim", self.embed_dim),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "vocab_size must be at least 2 (the null token plus one real token)".into(),
            ));
        }
        if self.concept_token == NULL_TOKEN || self.concept_token >= self.vocab_size {
            return Err(Error::Config(format!(
                "concept_token {} must be a non-null id below vocab_size {}",
                self.concept_token, self.vocab_size
            )));
        }
        Ok(())
    }

    fn block_in_dim(&self, layer: usize) -> usize {
        let prev = if layer == 0 {
            self.input_dim + TIME_FEATURES
        } else {
            self.hidden_width
        };
        prev + self.embed_dim
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    inputs: Vec<Array1<f64>>,
    projections: Vec<Array1<f64>>,
    activations: Vec<Array1<f64>>,
    output: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNetwork {
    cfg: NetworkConfig,
    params: Params,
    frozen: bool,
    mask: TrainMask,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..=scale))
}

fn uniform_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.random_range(-scale..=scale))
}

impl VelocityNetwork {
    /// Deterministic initialization: every weight and bias uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, token embeddings uniform in `[-1, 1]`
    /// with the null row zero, concept slots copied from the concept token's row.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut token_table = uniform_matrix(&mut rng, cfg.vocab_size, cfg.embed_dim, 1.0);
        token_table.row_mut(NULL_TOKEN).fill(0.0);
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let fan_in = cfg.block_in_dim(l);
            let s = 1.0 / (fan_in as f64).sqrt();
            blocks.push(Affine {
                weight: uniform_matrix(&mut rng, cfg.hidden_width, fan_in, s),
                bias: uniform_vector(&mut rng, cfg.hidden_width, s),
            });
        }
        let s = 1.0 / (cfg.hidden_width as f64).sqrt();
        let head = Affine {
            weight: uniform_matrix(&mut rng, cfg.input_dim, cfg.hidden_width, s),
            bias: uniform_vector(&mut rng, cfg.input_dim, s),
        };
        let concept_row = token_table.row(cfg.concept_token).to_owned();
        let mut concept_slots = Array2::zeros((cfg.num_layers, cfg.embed_dim));
        for mut row in concept_slots.rows_mut() {
            row.assign(&concept_row);
        }
        Ok(VelocityNetwork {
            cfg,
            params: Params {
                token_table,
                concept_slots,
                blocks,
                head,
                adapters: Vec::new(),
            },
            frozen: false,
            mask: TrainMask::FULL,
        })
    }

    /// Rebuilds a network from explicit parameters, checking every shape.
    pub fn from_params(cfg: NetworkConfig, params: Params, frozen: bool) -> Result<Self> {
        cfg.validate()?;
        let template = VelocityNetwork::new(cfg.clone(), 0)?;
        let shape_err = |name: String| Error::Checkpoint(format!("tensor {name} has wrong shape"));
        let reference = template.params.tensors();
        let got = params.tensors();
        let base_count = reference.len();
        if got.len() < base_count {
            return Err(Error::Checkpoint("missing tensors".into()));
        }
        for (r, g) in reference.iter().zip(&got) {
            if r.name != g.name || r.shape != g.shape {
                return Err(shape_err(g.name.clone()));
            }
        }
        if !params.adapters.is_empty() {
            if params.adapters.len() != cfg.num_layers {
                return Err(Error::Checkpoint("adapter count must equal num_layers".into()));
            }
            let rank = params.adapters[0].rank();
            for (l, a) in params.adapters.iter().enumerate() {
                let in_dim = cfg.block_in_dim(l);
                if a.down.shape() != [rank, in_dim] || a.up.shape() != [cfg.hidden_width, rank] {
                    return Err(shape_err(format!("adapters.{l}")));
                }
            }
        }
        if params.token_table.row(NULL_TOKEN).iter().any(|v| *v != 0.0) {
            return Err(Error::Checkpoint("null token embedding must be zero".into()));
        }
        let mask = if params.adapters.is_empty() {
            TrainMask::FULL
        } else {
            TrainMask::ADAPTER
        };
        Ok(VelocityNetwork {
            cfg,
            params,
            frozen,
            mask,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Mutable parameter access; refused on a frozen network.
    pub fn params_mut(&mut self) -> Result<&mut Params> {
        if self.frozen {
            return Err(Error::FreezeViolation(
                "parameters of a frozen network cannot be modified".into(),
            ));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn mask(&self) -> TrainMask {
        self.mask
    }

    pub fn set_mask(&mut self, mask: TrainMask) -> Result<()> {
        if mask.adapter && !self.is_adapted() {
            return Err(Error::State("cannot train adapter factors: no adapter attached".into()));
        }
        self.mask = mask;
        Ok(())
    }

    pub fn is_adapted(&self) -> bool {
        !self.params.adapters.is_empty()
    }

    pub fn adapter_rank(&self) -> Option<usize> {
        self.params.adapters.first().map(LowRankAdapter::rank)
    }

    /// Replaces the layer-wise concept slots (shape `L × embed_dim`).
    pub fn set_concept_slots(&mut self, slots: &Array2<f64>) -> Result<()> {
        let expected = self.params.concept_slots.raw_dim();
        if slots.raw_dim() != expected {
            return Err(Error::Shape {
                what: "concept slots",
                expected: expected[0] * expected[1],
                got: slots.len(),
            });
        }
        self.params_mut()?.concept_slots.assign(slots);
        Ok(())
    }

    fn check_condition(&self, y: &Condition) -> Result<()> {
        if y.tokens().len() > self.cfg.seq_len {
            return Err(Error::Index {
                what: "condition length",
                index: y.tokens().len(),
                limit: self.cfg.seq_len + 1,
            });
        }
        let max = y.max_token();
        if max >= self.cfg.vocab_size {
            return Err(Error::Index {
                what: "token id",
                index: max,
                limit: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Pooled conditioning vector fed to block `layer`.
    pub fn encode_condition(&self, y: &Condition, layer: usize) -> Result<Array1<f64>> {
        if layer >= self.cfg.num_layers {
            return Err(Error::Index {
                what: "layer",
                index: layer,
                limit: self.cfg.num_layers,
            });
        }
        self.check_condition(y)?;
        Ok(self.pool(y, layer))
    }

    fn pool(&self, y: &Condition, layer: usize) -> Array1<f64> {
        let mut acc = Array1::zeros(self.cfg.embed_dim);
        for &tok in y.tokens() {
            if tok == self.cfg.concept_token {
                acc += &self.params.concept_slots.row(layer);
            } else {
                acc += &self.params.token_table.row(tok);
            }
        }
        acc / self.cfg.seq_len as f64
    }

    fn check_inputs(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.cfg.input_dim {
            return Err(Error::Shape {
                what: "network input",
                expected: self.cfg.input_dim,
                got: x.len(),
            });
        }
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInput("forward"));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// Velocity `v(x, t | y)`.
    pub fn forward(&self, x: &[f64], t: f64, y: &Condition) -> Result<Vec<f64>> {
        Ok(self.forward_traced(x, t, y)?.output)
    }

    pub fn forward_traced(&self, x: &[f64], t: f64, y: &Condition) -> Result<ForwardTrace> {
        self.check_inputs(x, t)?;
        self.check_condition(y)?;
        let layers = self.cfg.num_layers;
        let mut inputs = Vec::with_capacity(layers);
        let mut projections = Vec::with_capacity(layers);
        let mut activations = Vec::with_capacity(layers);

        let mut h: Array1<f64> = x
            .iter()
            .copied()
            .chain([t, (2.0 * PI * t).sin(), (2.0 * PI * t).cos()])
            .collect();
        for (l, block) in self.params.blocks.iter().enumerate() {
            let cond = self.pool(y, l);
            let input: Array1<f64> = h.iter().chain(cond.iter()).copied().collect();
            let mut pre = block.weight.dot(&input) + &block.bias;
            if let Some(adapter) = self.params.adapters.get(l) {
                let proj = adapter.down.dot(&input);
                pre += &adapter.up.dot(&proj);
                projections.push(proj);
            }
            h = pre.mapv(f64::tanh);
            inputs.push(input);
            activations.push(h.clone());
        }
        let out = self.params.head.weight.dot(&h) + &self.params.head.bias;
        Ok(ForwardTrace {
            inputs,
            projections,
            activations,
            output: out.to_vec(),
        })
    }

    /// Gradients of `⟨upstream, v(x, t | y)⟩` with respect to every tensor
    /// allowed by the current mask.
    pub fn backward(
        &self,
        x: &[f64],
        t: f64,
        y: &Condition,
        upstream: &[f64],
    ) -> Result<Gradients> {
        let trace = self.forward_traced(x, t, y)?;
        let mut grads = self.zero_gradients()?;
        self.accumulate_backward(&trace, y, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Zero gradients shaped like this network under its current mask.
    pub fn zero_gradients(&self) -> Result<Gradients> {
        self.check_trainable()?;
        Ok(Gradients::zeros_for(&self.params, self.mask))
    }

    fn check_trainable(&self) -> Result<()> {
        if self.frozen && !self.mask.is_empty() {
            return Err(Error::FreezeViolation(
                "backward requested on a frozen network".into(),
            ));
        }
        Ok(())
    }

    /// Adds the gradient of `⟨upstream, output⟩` for a traced forward pass into `grads`.
    pub fn accumulate_backward(
        &self,
        trace: &ForwardTrace,
        y: &Condition,
        upstream: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        self.check_trainable()?;
        if upstream.len() != self.cfg.input_dim {
            return Err(Error::Shape {
                what: "upstream gradient",
                expected: self.cfg.input_dim,
                got: upstream.len(),
            });
        }
        let mask = grads.mask;
        let g = &mut grads.params;
        let upstream = ArrayView1::from(upstream);
        let last = trace.activations.last().expect("at least one layer");

        if mask.base_weights {
            for (i, u) in upstream.iter().enumerate() {
                g.head.bias[i] += u;
                g.head.weight.row_mut(i).scaled_add(*u, last);
            }
        }
        let mut dh = self.params.head.weight.t().dot(&upstream);
        let inv_len = 1.0 / self.cfg.seq_len as f64;

        for l in (0..self.cfg.num_layers).rev() {
            let act = &trace.activations[l];
            let input = &trace.inputs[l];
            let dpre: Array1<f64> = dh
                .iter()
                .zip(act.iter())
                .map(|(d, a)| d * (1.0 - a * a))
                .collect();
            let block = &self.params.blocks[l];
            if mask.base_weights {
                g.blocks[l].bias += &dpre;
                for (i, d) in dpre.iter().enumerate() {
                    g.blocks[l].weight.row_mut(i).scaled_add(*d, input);
                }
            }
            let mut dinput = block.weight.t().dot(&dpre);
            if let Some(adapter) = self.params.adapters.get(l) {
                let proj = &trace.projections[l];
                let dproj = adapter.up.t().dot(&dpre);
                if mask.adapter {
                    let ga = &mut g.adapters[l];
                    for (i, d) in dpre.iter().enumerate() {
                        ga.up.row_mut(i).scaled_add(*d, proj);
                    }
                    for (r, d) in dproj.iter().enumerate() {
                        ga.down.row_mut(r).scaled_add(*d, input);
                    }
                }
                dinput += &adapter.down.t().dot(&dproj);
            }
            let prev_dim = input.len() - self.cfg.embed_dim;
            let dcond = dinput.slice(ndarray::s![prev_dim..]);
            for &tok in y.tokens() {
                if tok == self.cfg.concept_token {
                    if mask.concept_slots {
                        g.concept_slots.row_mut(l).scaled_add(inv_len, &dcond);
                    }
                } else if tok != NULL_TOKEN && mask.token_table {
                    g.token_table.row_mut(tok).scaled_add(inv_len, &dcond);
                }
            }
            if l > 0 {
                dh = dinput.slice(ndarray::s![..prev_dim]).to_owned();
            }
        }
        Ok(())
    }

    /// One plain SGD step on the masked tensors: `θ ← θ − lr · g`.
    pub fn apply_sgd(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::FreezeViolation(
                "parameter update on a frozen network".into(),
            ));
        }
        let mask = self.mask;
        for (p, g) in self
            .params
            .tensors_mut()
            .into_iter()
            .zip(grads.params.tensors())
        {
            if p.shape != g.shape {
                return Err(Error::Shape {
                    what: "gradient tensor",
                    expected: p.data.len(),
                    got: g.data.len(),
                });
            }
            if !mask.allows(p.class) {
                continue;
            }
            for (w, d) in p.data.iter_mut().zip(g.data) {
                *w -= learning_rate * d;
            }
        }
        self.params.token_table.row_mut(NULL_TOKEN).fill(0.0);
        Ok(())
    }

    /// Attaches a fresh low-rank adapter to every block: `A` uniform with the
    /// block's fan-in scale, `B` zero. Base weights become frozen through the
    /// mask; adapter factors and concept slots are trainable.
    pub fn attach_adapter(&self, rank: usize, seed: u64) -> Result<VelocityNetwork> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if self.is_adapted() {
            return Err(Error::State("adapter already attached".into()));
        }
        if self.frozen {
            return Err(Error::FreezeViolation(
                "cannot attach an adapter to a frozen network".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = self.clone();
        net.params.adapters = (0..self.cfg.num_layers)
            .map(|l| {
                let fan_in = self.cfg.block_in_dim(l);
                let s = 1.0 / (fan_in as f64).sqrt();
                LowRankAdapter {
                    down: uniform_matrix(&mut rng, rank, fan_in, s),
                    up: Array2::zeros((self.cfg.hidden_width, rank)),
                }
            })
            .collect();
        net.mask = TrainMask::ADAPTER;
        Ok(net)
    }

    /// Folds the adapter into the block weights, `W' = W + B·A`.
    pub fn merge_adapter(&self) -> Result<VelocityNetwork> {
        if !self.is_adapted() {
            return Err(Error::State("no adapter to merge".into()));
        }
        let mut net = self.clone();
        for (block, adapter) in net.params.blocks.iter_mut().zip(&self.params.adapters) {
            block.weight += &adapter.up.dot(&adapter.down);
        }
        net.params.adapters.clear();
        net.mask = TrainMask::FULL;
        Ok(net)
    }

    /// Deep copy with the frozen flag set.
    pub fn clone_frozen(&self) -> VelocityNetwork {
        let mut net = self.clone();
        net.frozen = true;
        net
    }

    /// Deep copy with the frozen flag cleared.
    pub fn clone_unfrozen(&self) -> VelocityNetwork {
        let mut net = self.clone();
        net.frozen = false;
        net
    }
}
