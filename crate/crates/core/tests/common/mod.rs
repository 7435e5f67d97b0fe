#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use flowcc_core::data::{make_custom_set, CustomSet, SceneSpec};
use flowcc_core::flow::{draw_batch, FlowBatch};
use flowcc_core::net::{Gradients, TrainMask};
use flowcc_core::{NetworkConfig, VelocityNetwork};

pub fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn scene() -> SceneSpec {
    SceneSpec::default()
}

/// Network sized for the default scene.
pub fn scene_config(width: usize) -> NetworkConfig {
    let vocab = scene().vocabulary().unwrap();
    NetworkConfig {
        hidden_width: width,
        vocab_size: vocab.size(),
        concept_token: vocab.concept_token(),
        ..NetworkConfig::default()
    }
}

/// Overwrites every parameter with uniform noise (null row kept at zero).
pub fn randomize(net: &mut VelocityNetwork, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = net.params_mut().unwrap();
    for t in p.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    p.token_table.row_mut(0).fill(0.0);
}

pub const ALL: TrainMask = TrainMask {
    token_table: true,
    concept_slots: true,
    base_weights: true,
    adapter: true,
};

/// Random "pretrained" network and a random frozen extractor built on it.
pub fn pair(seed: u64, width: usize) -> (VelocityNetwork, VelocityNetwork) {
    let mut pretrained = VelocityNetwork::new(scene_config(width), seed).unwrap();
    randomize(&mut pretrained, seed + 100, 0.7);
    let mut extractor = pretrained.attach_adapter(4, seed + 1).unwrap();
    randomize(&mut extractor, seed + 200, 0.7);
    (pretrained.clone_frozen(), extractor.clone_frozen())
}

pub fn refs(seed: u64) -> CustomSet {
    make_custom_set(&scene(), "beach", 4, seed).unwrap()
}

pub fn batch(refs: &CustomSet, n: usize, seed: u64) -> FlowBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_batch(&mut rng, &refs.samples, &refs.conditions, n, 0.0).unwrap()
}

/// Worst relative disagreement between `grads` and central differences of
/// `loss` over every trainable scalar of `net`.
pub fn fd_check<F>(net: &VelocityNetwork, grads: &Gradients, h: f64, floor: f64, loss: F) -> f64
where
    F: Fn(&VelocityNetwork) -> f64,
{
    let mask = net.mask();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    let analytic = grads.params.tensors();
    for (k, g) in analytic.iter().enumerate() {
        if !mask.allows(g.class) {
            assert!(g.data.iter().all(|v| *v == 0.0), "{} is masked but has gradient", g.name);
            continue;
        }
        for i in 0..g.data.len() {
            if g.name == "token_table" && i < g.shape[1] {
                continue;
            }
            let orig = probe.params().tensors()[k].data[i];
            probe.params_mut().unwrap().tensors_mut()[k].data[i] = orig + h;
            let plus = loss(&probe);
            probe.params_mut().unwrap().tensors_mut()[k].data[i] = orig - h;
            let minus = loss(&probe);
            probe.params_mut().unwrap().tensors_mut()[k].data[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let err = (g.data[i] - fd).abs() / g.data[i].abs().max(fd.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn bitwise_equal(a: &VelocityNetwork, b: &VelocityNetwork) -> bool {
    a.params()
        .tensors()
        .iter()
        .zip(b.params().tensors())
        .all(|(x, y)| x.shape == y.shape && x.data.iter().zip(y.data).all(|(p, q)| p.to_bits() == q.to_bits()))
}
