//! Synthetic scenes: a mixture of context clusters for pretraining, and a
//! concept cluster displaced from one context for few-shot customization.
//!
//! Token ids are assigned as `0 = ∅`, `1..=C` contexts, `C + 1` the concept's
//! class token and `C + 2` the concept identifier. A context's base condition
//! is `[context, class]`; its complete condition inserts the identifier before
//! the class token; the target condition is `[identifier, class]`.

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::condition::{Condition, TokenId, NULL_TOKEN};
use crate::error::{Error, Result};

pub const DEFAULT_NOISE_STD: f64 = 0.15;
pub const DEFAULT_CUSTOM_REFS: usize = 4;
pub const MAX_CUSTOM_REFS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ContextSpec {
    pub name: String,
    pub center: Vec<f64>,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSpec {
    /// Identifier token name, the `[V]` of the prompt.
    pub identifier: String,
    /// Class token name, e.g. "dog".
    pub class_name: String,
    pub displacement: Vec<f64>,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub dim: usize,
    pub contexts: Vec<ContextSpec>,
    pub concept: ConceptSpec,
    pub noise_std: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            dim: 2,
            contexts: vec![
                ContextSpec {
                    name: "beach".into(),
                    center: vec![-2.0, -1.0],
                    std: 0.35,
                },
                ContextSpec {
                    name: "forest".into(),
                    center: vec![2.0, -1.0],
                    std: 0.35,
                },
            ],
            concept: ConceptSpec {
                identifier: "sks".into(),
                class_name: "dog".into(),
                displacement: vec![0.0, 2.5],
                std: 0.25,
            },
            noise_std: DEFAULT_NOISE_STD,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("scene dim must be at least 1".into()));
        }
        if self.contexts.len() < 2 {
            return Err(Error::Config("scene needs at least two contexts".into()));
        }
        for c in &self.contexts {
            if c.center.len() != self.dim {
                return Err(Error::Config(format!(
                    "context {} center has {} coordinates, expected {}",
                    c.name,
                    c.center.len(),
                    self.dim
                )));
            }
            if !(c.std > 0.0) || c.center.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "context {} needs a finite center and positive std",
                    c.name
                )));
            }
        }
        let k = &self.concept;
        if k.displacement.len() != self.dim {
            return Err(Error::Config("concept displacement has wrong dimension".into()));
        }
        if k.displacement.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("concept displacement must be nonzero".into()));
        }
        if !(k.std > 0.0) || !(self.noise_std > 0.0) {
            return Err(Error::Config("all standard deviations must be positive".into()));
        }
        self.vocabulary().map(|_| ())
    }

    pub fn context_index(&self, name: &str) -> Result<usize> {
        self.contexts
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownContext(name.to_string()))
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self)
    }

    /// Ground-truth center of the concept cluster placed in context `ctx`.
    pub fn concept_center(&self, ctx: usize) -> Vec<f64> {
        self.contexts[ctx]
            .center
            .iter()
            .zip(&self.concept.displacement)
            .map(|(c, d)| c + d)
            .collect()
    }

    /// Distance between a context center and its concept center, in units of
    /// the combined standard deviation of the two clusters.
    pub fn separation_in_stds(&self, ctx: usize) -> f64 {
        let combined = (self.contexts[ctx].std.powi(2) + self.concept.std.powi(2)).sqrt();
        norm(&self.concept.displacement) / combined
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Token names by id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
    num_contexts: usize,
}

pub const NULL_NAME: &str = "<null>";

impl Vocabulary {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        let mut names = vec![NULL_NAME.to_string()];
        names.extend(spec.contexts.iter().map(|c| c.name.clone()));
        names.push(spec.concept.class_name.clone());
        names.push(spec.concept.identifier.clone());
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::Vocabulary("empty token name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Vocabulary(format!("duplicate token name `{n}`")));
            }
        }
        Ok(Vocabulary {
            names,
            num_contexts: spec.contexts.len(),
        })
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: TokenId) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<TokenId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn null_token(&self) -> TokenId {
        NULL_TOKEN
    }

    pub fn context_token(&self, ctx: usize) -> TokenId {
        1 + ctx
    }

    pub fn class_token(&self) -> TokenId {
        self.num_contexts + 1
    }

    pub fn concept_token(&self) -> TokenId {
        self.num_contexts + 2
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    /// `[context, class]`.
    pub fn base_condition(&self, ctx: usize) -> Condition {
        Condition::base(vec![self.context_token(ctx), self.class_token()])
            .expect("vocabulary ids are non-null")
    }

    /// `[context, identifier, class]`.
    pub fn complete_condition(&self, ctx: usize) -> Condition {
        Condition::complete(&self.base_condition(ctx), self.concept_token(), 1)
            .expect("identifier is new to the base condition")
    }

    /// `[identifier, class]`.
    pub fn target_condition(&self) -> Condition {
        Condition::target(self.concept_token(), self.class_token())
            .expect("identifier and class differ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Array2<f64>,
    pub conditions: Vec<Condition>,
    /// Context index each sample was drawn from.
    pub contexts: Vec<usize>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }
}

fn gaussian_point<R: Rng>(rng: &mut R, center: &[f64], std: f64) -> Array1<f64> {
    center
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + std * z
        })
        .collect()
}

/// Pretraining corpus: contexts chosen uniformly, each sample labelled with
/// its context's base condition.
pub fn make_pretrain_set(spec: &SceneSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Empty("pretraining set size"));
    }
    let vocab = spec.vocabulary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array2::zeros((n, spec.dim));
    let mut conditions = Vec::with_capacity(n);
    let mut contexts = Vec::with_capacity(n);
    for i in 0..n {
        let ctx = rng.random_range(0..spec.contexts.len());
        let c = &spec.contexts[ctx];
        samples
            .row_mut(i)
            .assign(&gaussian_point(&mut rng, &c.center, c.std));
        conditions.push(vocab.base_condition(ctx));
        contexts.push(ctx);
    }
    Ok(Dataset {
        samples,
        conditions,
        contexts,
        seed,
    })
}

/// Few-shot reference set for one concept in one context.
#[derive(Clone, Debug, PartialEq)]
pub struct CustomSet {
    pub samples: Array2<f64>,
    /// Complete conditions, one per reference.
    pub conditions: Vec<Condition>,
    pub context: usize,
}

impl CustomSet {
    pub fn new(samples: Array2<f64>, conditions: Vec<Condition>, context: usize) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::Empty("custom set"));
        }
        if conditions.len() != samples.nrows() {
            return Err(Error::Shape {
                what: "custom set conditions",
                expected: samples.nrows(),
                got: conditions.len(),
            });
        }
        let concept = conditions[0].concept_token();
        if concept.is_none()
            || conditions
                .iter()
                .any(|c| c.concept_token() != concept || c.role() != crate::condition::Role::Complete)
        {
            return Err(Error::Contract(
                "custom set references must share one concept token in complete conditions".into(),
            ));
        }
        Ok(CustomSet {
            samples,
            conditions,
            context,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn concept_token(&self) -> TokenId {
        self.conditions[0]
            .concept_token()
            .expect("validated at construction")
    }

    /// Checks the reference count against an allowed range (3..=5 by convention).
    pub fn check_size(&self, min: usize, max: usize) -> Result<()> {
        if self.len() < min || self.len() > max {
            return Err(Error::Config(format!(
                "custom set has {} references, expected {min}..={max}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Draws `n_refs` samples from the concept cluster in `context_name`.
pub fn make_custom_set(
    spec: &SceneSpec,
    context_name: &str,
    n_refs: usize,
    seed: u64,
) -> Result<CustomSet> {
    spec.validate()?;
    let ctx = spec.context_index(context_name)?;
    if !(1..=MAX_CUSTOM_REFS).contains(&n_refs) {
        return Err(Error::Config(format!(
            "n_refs must lie in 1..={MAX_CUSTOM_REFS}, got {n_refs}"
        )));
    }
    let vocab = spec.vocabulary()?;
    let center = spec.concept_center(ctx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array2::zeros((n_refs, spec.dim));
    for i in 0..n_refs {
        samples
            .row_mut(i)
            .assign(&gaussian_point(&mut rng, &center, spec.concept.std));
    }
    CustomSet::new(samples, vec![vocab.complete_condition(ctx); n_refs], ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_layout() {
        let spec = SceneSpec::default();
        let v = spec.vocabulary().unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.null_token(), 0);
        assert_eq!(v.name(0), Some(NULL_NAME));
        assert_eq!(v.id("forest"), Some(2));
        assert_eq!(v.class_token(), 3);
        assert_eq!(v.concept_token(), 4);
        assert_eq!(spec.vocabulary().unwrap(), v);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut spec = SceneSpec::default();
        spec.concept.class_name = "beach".into();
        assert!(matches!(spec.vocabulary(), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn conditions_follow_roles() {
        let v = SceneSpec::default().vocabulary().unwrap();
        let complete = v.complete_condition(1);
        assert_eq!(complete.tokens(), &[2, 4, 3]);
        assert_eq!(complete.base_part().unwrap(), v.base_condition(1));
        assert_eq!(v.target_condition().tokens(), &[4, 3]);
        assert!(!v.base_condition(0).tokens().contains(&v.concept_token()));
    }

    #[test]
    fn pretrain_set_is_deterministic() {
        let spec = SceneSpec::default();
        let a = make_pretrain_set(&spec, 50, 9).unwrap();
        assert_eq!(a, make_pretrain_set(&spec, 50, 9).unwrap());
        assert_ne!(a.samples, make_pretrain_set(&spec, 50, 10).unwrap().samples);
        let one = make_pretrain_set(&spec, 1, 0).unwrap();
        assert_eq!((one.len(), one.conditions.len()), (1, 1));
        assert!(make_pretrain_set(&spec, 0, 0).is_err());
    }

    #[test]
    fn single_context_mean_matches_center() {
        // Law of large numbers: each coordinate's mean lies within 3σ/√n.
        let mut spec = SceneSpec::default();
        spec.contexts[1] = ContextSpec {
            name: "forest".into(),
            ..spec.contexts[0].clone()
        };
        let n = 100_000;
        let data = make_pretrain_set(&spec, n, 4).unwrap();
        let mean = data.samples.mean_axis(ndarray::Axis(0)).unwrap();
        let tol = 3.0 * spec.contexts[0].std / (n as f64).sqrt();
        for (m, c) in mean.iter().zip(&spec.contexts[0].center) {
            assert!((m - c).abs() < tol, "{m} vs {c} (tol {tol})");
        }
    }

    #[test]
    fn custom_set_moments_and_conditions() {
        let spec = SceneSpec::default();
        let set = make_custom_set(&spec, "forest", MAX_CUSTOM_REFS, 1).unwrap();
        let v = spec.vocabulary().unwrap();
        for c in &set.conditions {
            assert_eq!(c.base_part().unwrap(), v.base_condition(1));
        }
        let mean = set.samples.mean_axis(ndarray::Axis(0)).unwrap();
        let center = spec.concept_center(1);
        let tol = 4.0 * spec.concept.std / (MAX_CUSTOM_REFS as f64).sqrt();
        for (m, c) in mean.iter().zip(&center) {
            assert!((m - c).abs() < tol);
        }
        assert!((3..=5).contains(&DEFAULT_CUSTOM_REFS));
        assert!(make_custom_set(&spec, "desert", 4, 1).is_err());
        assert!(make_custom_set(&spec, "beach", 0, 1).is_err());
        assert!(make_custom_set(&spec, "beach", 17, 1).is_err());
    }

    #[test]
    fn default_concept_is_well_separated() {
        // Gaussian tail: nearest-center misclassification < 1e-3 needs the
        // midpoint at >= 3.1 stds of the wider cluster; 4 combined stds
        // between centers gives that with margin.
        let spec = SceneSpec::default();
        for ctx in 0..spec.contexts.len() {
            assert!(spec.separation_in_stds(ctx) >= 4.0);
        }
        let set = make_custom_set(&spec, "beach", MAX_CUSTOM_REFS, 2).unwrap();
        let pre = make_pretrain_set(&spec, 20_000, 3).unwrap();
        let concept = spec.concept_center(0);
        let ctx = &spec.contexts[0].center;
        let wrong_pre = pre
            .samples
            .rows()
            .into_iter()
            .zip(&pre.contexts)
            .filter(|(_, c)| **c == 0)
            .filter(|(r, _)| {
                crate::flow::squared_distance(r.as_slice().unwrap(), &concept)
                    < crate::flow::squared_distance(r.as_slice().unwrap(), ctx)
            })
            .count();
        assert!((wrong_pre as f64) < 1e-3 * 10_000.0);
        for r in set.samples.rows() {
            let r = r.as_slice().unwrap();
            assert!(
                crate::flow::squared_distance(r, &concept) < crate::flow::squared_distance(r, ctx)
            );
        }
    }
}
