use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::fusionnet::{ModalitySpec, NetworkConfig, TaskNetwork};
use crate::gradcore::Tensor;
use crate::oracle::{check_module, numeric_gradient, relative_error};
use crate::rng::seeded;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_attention() -> AttentionVaeConfig {
    AttentionVaeConfig {
        width: 16,
        layers: 2,
        heads: 4,
        ff_width: 32,
        ..AttentionVaeConfig::default()
    }
}

fn networks(dims: &[usize], seed: u64) -> Vec<AugmentationNetwork> {
    let mut rng = seeded(seed);
    vec![
        AugmentationNetwork::Mlp(MlpVae::new(dims, &MlpVaeConfig::default(), &mut rng).unwrap()),
        AugmentationNetwork::Attention(AttentionVae::new(dims, &small_attention(), &mut rng).unwrap()),
    ]
}

fn run(g: &AugmentationNetwork, inputs: &[Tensor], mode: Mode, seed: u64) -> (Vec<Tensor>, f64) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = g.augment(&mut tape, &vars, mode, &mut seeded(seed)).unwrap();
    (
        out.features.iter().map(|v| tape.value(*v).clone()).collect(),
        tape.value(out.kl).item(),
    )
}

#[test]
fn shapes_are_preserved() {
    for dims in [vec![16, 8], vec![5], vec![3, 4, 2]] {
        let inputs: Vec<Tensor> = dims.iter().enumerate().map(|(i, &d)| random(&[6, d], i as u64)).collect();
        for g in networks(&dims, 1) {
            for mode in [Mode::Train, Mode::Eval] {
                let (out, kl) = run(&g, &inputs, mode, 2);
                let shapes: Vec<_> = out.iter().map(|t| t.shape().to_vec()).collect();
                let want: Vec<_> = inputs.iter().map(|t| t.shape().to_vec()).collect();
                assert_eq!(shapes, want);
                assert!(kl >= -1e-10);
            }
        }
    }
}

#[test]
fn rejects_mismatched_features() {
    for g in networks(&[4, 3], 0) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 4]));
        let b = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(g.augment(&mut tape, &[a, b], Mode::Eval, &mut seeded(0)).is_err());
        assert!(g.augment(&mut tape, &[a], Mode::Eval, &mut seeded(0)).is_err());
    }
}

#[test]
fn kl_closed_form() {
    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::zeros(&[3, 8]));
    let lv = tape.constant(Tensor::zeros(&[3, 8]));
    let kl = gaussian_kl(&mut tape, mu, lv, 3).unwrap();
    assert_eq!(tape.value(kl).item(), 0.0);

    let mu = tape.constant(Tensor::full(&[3, 8], 1.0));
    let kl = gaussian_kl(&mut tape, mu, lv, 3).unwrap();
    assert!((tape.value(kl).item() - 4.0).abs() <= 1e-9);
}

#[test]
fn kl_gradient_matches_differences() {
    let mu0 = random(&[2, 3], 4);
    let lv0 = random(&[2, 3], 5);
    let mut tape = Tape::new();
    let mu = tape.leaf(mu0.clone(), true);
    let lv = tape.leaf(lv0.clone(), true);
    let kl = gaussian_kl(&mut tape, mu, lv, 2).unwrap();
    let g = tape.backward(kl).unwrap();
    let f = |m: &Tensor, l: &Tensor| {
        let mut t = Tape::new();
        let (m, l) = (t.constant(m.clone()), t.constant(l.clone()));
        let k = gaussian_kl(&mut t, m, l, 2).unwrap();
        t.value(k).item()
    };
    let nm = numeric_gradient(&mu0, |m| f(m, &lv0));
    let nl = numeric_gradient(&lv0, |l| f(&mu0, l));
    for (a, n) in g.wrt(mu).unwrap().data().iter().zip(nm.data()) {
        assert!(relative_error(*a, *n, 1e-6) < 1e-6);
    }
    for (a, n) in g.wrt(lv).unwrap().data().iter().zip(nl.data()) {
        assert!(relative_error(*a, *n, 1e-6) < 1e-6);
    }
}

#[test]
fn mlp_vae_parameter_count() {
    let cfg = MlpVaeConfig {
        latent_dim: 8,
        hidden: 32,
        dropout: 0.5,
    };
    let g = MlpVae::new(&[16, 8], &cfg, &mut seeded(0)).unwrap();
    let encoder = 24 * 32 + 32;
    let heads = 2 * (32 * 8 + 8);
    let decoder = (8 * 32 + 32) + (32 * 24 + 24);
    assert_eq!(g.num_parameters(), encoder + heads + decoder);
}

#[test]
fn parameter_sets_are_disjoint_from_task_network() {
    let specs = vec![ModalitySpec::continuous("a", 3, 16), ModalitySpec::continuous("b", 2, 8)];
    let f = TaskNetwork::new(NetworkConfig::new(specs, 2), &mut seeded(0)).unwrap();
    for g in networks(&[16, 8], 1) {
        let gs = vae_param_set(&g);
        assert_eq!(gs.len(), g.parameters().len());
        assert!(gs.is_disjoint(&f.param_set()));
    }
}

#[test]
fn eval_mode_is_deterministic() {
    let inputs = vec![random(&[4, 5], 1), random(&[4, 3], 2)];
    for g in networks(&[5, 3], 3) {
        assert_eq!(run(&g, &inputs, Mode::Eval, 1).0, run(&g, &inputs, Mode::Eval, 99).0);
        assert_ne!(run(&g, &inputs, Mode::Train, 1).0, run(&g, &inputs, Mode::Train, 2).0);
        assert_eq!(run(&g, &inputs, Mode::Train, 7).0, run(&g, &inputs, Mode::Train, 7).0);
    }
}

#[test]
fn gradients_reach_parameters_and_inputs() {
    let inputs = vec![random(&[4, 5], 1), random(&[4, 3], 2)];
    for g in networks(&[5, 3], 3) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = g.augment(&mut tape, &vars, Mode::Train, &mut seeded(4)).unwrap();
        let parts: Vec<Var> = out.features.iter().map(|&v| tape.sum(v)).collect();
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = tape.add(total, p).unwrap();
        }
        let grads = tape.backward(total).unwrap();
        for p in g.parameters() {
            assert!(grads.param(p.id()).is_some(), "{} unreached", p.name());
        }
        for v in vars {
            let gi = grads.wrt(v).unwrap();
            assert!(gi.data().iter().any(|&x| x != 0.0));
        }
    }
}

/// Loss used by the finite-difference checks: weighted sum of the augmented
/// features plus the KL term, with a fixed sampling seed.
fn probe_loss(g: &AugmentationNetwork, inputs: &[Tensor], weights: &[Tensor], seed: u64) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = g.augment(&mut tape, &vars, Mode::Train, &mut seeded(seed)).unwrap();
    let mut loss = out.kl;
    for (f, w) in out.features.iter().zip(weights) {
        let w = tape.constant(w.clone());
        let m = tape.mul(*f, w).unwrap();
        let s = tape.sum(m);
        loss = tape.add(loss, s).unwrap();
    }
    (tape, vars, loss)
}

pub(crate) fn gradcheck_network(mut g: AugmentationNetwork, seed: u64, per_param: usize) {
    let dims = g.feature_dims().to_vec();
    let inputs: Vec<Tensor> = dims.iter().enumerate().map(|(i, &d)| random(&[3, d], seed * 31 + i as u64)).collect();
    let weights: Vec<Tensor> = dims.iter().enumerate().map(|(i, &d)| random(&[3, d], seed * 37 + i as u64)).collect();
    let (tape, vars, loss) = probe_loss(&g, &inputs, &weights, seed);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = g.parameters().iter().map(|p| grads.param(p.id()).unwrap()).collect();
    let (checked, bad) = check_module(&mut g, &analytic, per_param, 1e-4, |g| {
        let (t, _, l) = probe_loss(g, &inputs, &weights, seed);
        t.value(l).item()
    });
    assert!(checked > 0);
    assert!(bad.is_empty(), "seed {seed}: {bad:?}");
    for (i, v) in vars.iter().enumerate() {
        let numeric = numeric_gradient(&inputs[i], |x| {
            let mut xs = inputs.clone();
            xs[i] = x.clone();
            let (t, _, l) = probe_loss(&g, &xs, &weights, seed);
            t.value(l).item()
        });
        for (a, n) in grads.wrt(*v).unwrap().data().iter().zip(numeric.data()) {
            assert!(relative_error(*a, *n, 1e-6) <= 1e-4, "seed {seed} input {i}: {a} vs {n}");
        }
    }
}

#[test]
fn mlp_vae_gradcheck() {
    for seed in 0..5 {
        let cfg = MlpVaeConfig {
            hidden: 12,
            ..MlpVaeConfig::default()
        };
        let g = MlpVae::new(&[4, 3], &cfg, &mut seeded(seed)).unwrap();
        gradcheck_network(AugmentationNetwork::Mlp(g), seed, 6);
    }
}

#[test]
fn attention_vae_gradcheck() {
    for seed in 0..3 {
        let cfg = AttentionVaeConfig {
            width: 8,
            layers: 1,
            heads: 2,
            ff_width: 8,
            latent_dim: 4,
            dropout: 0.1,
        };
        let g = AttentionVae::new(&[4, 3], &cfg, &mut seeded(seed)).unwrap();
        gradcheck_network(AugmentationNetwork::Attention(g), seed, 4);
    }
}

proptest! {
    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-5.0f64..5.0, 6), lv in prop::collection::vec(-10.0f64..10.0, 6)) {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(vec![2, 3], mu).unwrap());
        let l = tape.constant(Tensor::new(vec![2, 3], lv).unwrap());
        let kl = gaussian_kl(&mut tape, m, l, 2).unwrap();
        prop_assert!(tape.value(kl).item() >= -1e-10);
    }
}
