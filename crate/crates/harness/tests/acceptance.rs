//! Acceptance gate: twelve criteria, one PASS/FAIL line each. Runs as a
//! plain binary (`harness = false`) so the lines always reach the output.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;

use lemda_core::augnet::{gaussian_kl, AttentionVae, AttentionVaeConfig, AugmentationNetwork, MlpVae, MlpVaeConfig};
use lemda_core::baselines::{manifold_mixup_with, mixgen_style, mixup_apply, MixupDraws};
use lemda_core::batch::{ModalityData, MultimodalBatch};
use lemda_core::fusionnet::{ModalitySpec, NetworkConfig, TaskNetwork};
use lemda_core::gradcore::{Module, Optimizer, Tape, Tensor, Var};
use lemda_core::nn::{dropout, Mode};
use lemda_core::oracle::{check_module, logistic_probe, numeric_gradient, relative_error};
use lemda_core::rng::seeded;
use lemda_core::trainer::{
    augmented_task_loss, consistency_mask, train, update_augmenter, update_task, Augmentation, LemdaConfig, LossWeights,
    TrainConfig,
};
use lemda_harness::ablation::{ablation_suite, expand, Suite, CONFIDENCE_GRID};
use lemda_harness::config::{AugmentationChoice, ExperimentConfig};
use lemda_harness::figure3::render_figure3;
use lemda_harness::run::{build_dataset, evaluate, run, run_seed, summarize, SeedResult};
use lemda_harness::throughput::measure_throughput;

const FD_TOL: f64 = 1e-4;
const FD_SEEDS: u64 = 20;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(secs: f64, limit: f64) -> std::result::Result<(), String> {
    ensure(secs <= limit, || format!("took {secs:.1} s, limit {limit} s"))
}

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform in `[-1, 1]` but at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut impl Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
    let mut t = random(rng, shape, -1.0, 1.0);
    for x in t.data_mut() {
        while kinks.iter().any(|k| (*x - k).abs() < gap) {
            *x = rng.random_range(-1.0..1.0);
        }
    }
    t
}

// ---------------------------------------------------------------- criterion 1

/// Scalar probe `sum(out * w)` with a fixed random `w`.
fn probe(tape: &mut Tape, out: Var, w: &Tensor) -> Var {
    let wv = tape.constant(w.clone());
    let m = tape.mul(out, wv).unwrap();
    tape.sum(m)
}

fn check_op<F>(name: &str, seed: u64, inputs: &[Tensor], build: F) -> std::result::Result<usize, String>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, _, out) = eval(inputs);
    let w = random(&mut seeded(seed ^ 0xabcd), tape.value(out).shape(), -1.0, 1.0);
    let (mut tape, vars, out) = eval(inputs);
    let loss = probe(&mut tape, out, &w);
    let grads = tape.backward(loss).map_err(|e| format!("{name}: {e}"))?;
    let mut checked = 0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = numeric_gradient(&inputs[i], |x| {
            let mut xs = inputs.to_vec();
            xs[i] = x.clone();
            let (mut t, _, o) = eval(&xs);
            let l = probe(&mut t, o, &w);
            t.value(l).item()
        });
        for (k, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let err = relative_error(*a, *n, 1e-6);
            if err > FD_TOL {
                return Err(format!("{name} seed {seed} input {i}[{k}]: analytic {a} numeric {n} rel {err:.2e}"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

fn op_checks(seed: u64) -> std::result::Result<usize, String> {
    let r = &mut seeded(seed);
    let mut n = 0;
    let a34 = random(r, &[3, 4], -1.0, 1.0);
    let b34 = random(r, &[3, 4], -1.0, 1.0);
    let row = random(r, &[1, 4], -1.0, 1.0);
    let b42 = random(r, &[4, 2], -1.0, 1.0);
    n += check_op("matmul", seed, &[a34.clone(), b42], |t, v| t.matmul(v[0], v[1]).unwrap())?;
    n += check_op("add", seed, &[a34.clone(), b34.clone()], |t, v| t.add(v[0], v[1]).unwrap())?;
    n += check_op("add_row", seed, &[a34.clone(), row.clone()], |t, v| t.add(v[0], v[1]).unwrap())?;
    n += check_op("sub", seed, &[a34.clone(), b34.clone()], |t, v| t.sub(v[0], v[1]).unwrap())?;
    n += check_op("mul", seed, &[a34.clone(), b34.clone()], |t, v| t.mul(v[0], v[1]).unwrap())?;
    n += check_op("mul_row", seed, &[a34.clone(), row], |t, v| t.mul(v[0], v[1]).unwrap())?;
    let kinked = away_from(r, &[3, 4], &[0.0], 1e-3);
    n += check_op("relu", seed, &[kinked], |t, v| t.relu(v[0]))?;
    n += check_op("exp", seed, &[a34.clone()], |t, v| t.exp(v[0]))?;
    n += check_op("tanh", seed, &[a34.clone()], |t, v| t.tanh(v[0]))?;
    n += check_op("neg", seed, &[a34.clone()], |t, v| t.neg(v[0]))?;
    let positive = random(r, &[3, 4], 0.5, 2.0);
    n += check_op("log", seed, &[positive], |t, v| t.log(v[0]).unwrap())?;
    n += check_op("scale", seed, &[a34.clone()], |t, v| t.scale(v[0], -1.7))?;
    n += check_op("offset", seed, &[a34.clone()], |t, v| t.offset(v[0], 0.3))?;
    let clamped = away_from(r, &[3, 4], &[-0.5, 0.5], 1e-3);
    n += check_op("clamp", seed, &[clamped], |t, v| t.clamp(v[0], -0.5, 0.5))?;
    n += check_op("sum", seed, &[a34.clone()], |t, v| t.sum(v[0]))?;
    n += check_op("mean", seed, &[a34.clone()], |t, v| t.mean(v[0]))?;
    n += check_op("softmax", seed, &[a34.clone()], |t, v| t.softmax(v[0]).unwrap())?;
    n += check_op("log_softmax", seed, &[a34.clone()], |t, v| t.log_softmax(v[0]).unwrap())?;
    let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
    n += check_op("cross_entropy", seed, &[a34.clone()], |t, v| t.cross_entropy(v[0], &labels).unwrap())?;
    let soft = lemda_core::gradcore::softmax_rows(&random(r, &[3, 4], -2.0, 2.0));
    n += check_op("soft_cross_entropy", seed, &[a34.clone()], |t, v| t.soft_cross_entropy(v[0], &soft).unwrap())?;
    let p = b34.clone();
    n += check_op("kl_divergence", seed, &[a34.clone()], |t, v| {
        let pv = t.constant(p.clone());
        t.kl_divergence(pv, v[0], &[true, false, true]).unwrap()
    })?;
    let b32 = random(r, &[3, 2], -1.0, 1.0);
    n += check_op("concat_cols", seed, &[a34.clone(), b32], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap())?;
    n += check_op("slice_cols", seed, &[a34.clone()], |t, v| t.slice_cols(v[0], 1, 2).unwrap())?;
    n += check_op("reshape", seed, &[a34.clone()], |t, v| t.reshape(v[0], &[6, 2]).unwrap())?;
    let table = random(r, &[6, 3], -1.0, 1.0);
    let seqs = vec![vec![0, 2, 2], vec![5], vec![1, 4]];
    n += check_op("embedding_mean", seed, &[table], |t, v| t.embedding_mean(v[0], &seqs).unwrap())?;
    n += check_op("layer_norm", seed, &[a34.clone()], |t, v| t.layer_norm(v[0], 1e-5))?;
    let qkv: Vec<Tensor> = (0..3).map(|_| random(r, &[6, 4], -1.0, 1.0)).collect();
    n += check_op("attention", seed, &qkv, |t, v| t.attention(v[0], v[1], v[2], 3, 2).unwrap())?;
    let lv = random(r, &[3, 4], -1.0, 1.0);
    n += check_op("gaussian_sample", seed, &[a34.clone(), lv], |t, v| {
        t.gaussian_sample(v[0], v[1], &mut seeded(seed + 99)).unwrap()
    })?;
    n += check_op("dropout", seed, &[a34], |t, v| {
        dropout(t, v[0], 0.3, Mode::Train, &mut seeded(seed + 7)).unwrap()
    })?;
    Ok(n)
}

fn analytic_param_grads(module: &impl Module, grads: &lemda_core::gradcore::Gradients) -> Vec<Tensor> {
    module
        .parameters()
        .iter()
        .map(|p| grads.param(p.id()).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect()
}

fn task_batch(seed: u64) -> (Vec<ModalitySpec>, MultimodalBatch) {
    let r = &mut seeded(seed + 500);
    let specs = vec![
        ModalitySpec::continuous("x", 3, 4),
        ModalitySpec::tokens("t", 7, 4, 4),
        ModalitySpec::categorical("c", vec![3, 2], 4),
    ];
    let n = 4;
    let x = random(r, &[n, 3], -1.0, 1.0);
    let toks = (0..n)
        .map(|_| (0..r.random_range(1..=4)).map(|_| r.random_range(0..7)).collect())
        .collect();
    let cats = (0..n).map(|_| vec![r.random_range(0..3), r.random_range(0..2)]).collect();
    let labels = (0..n).map(|_| r.random_range(0..3)).collect();
    let batch = MultimodalBatch::new(
        vec![ModalityData::Continuous(x), ModalityData::Tokens(toks), ModalityData::Categorical(cats)],
        labels,
    );
    (specs, batch)
}

fn task_network_check(seed: u64) -> std::result::Result<usize, String> {
    let (specs, batch) = task_batch(seed);
    let cfg = NetworkConfig {
        encoder_hidden: 6,
        embed_dim: 3,
        head_hidden: 6,
        head_dropout: 0.2,
        ..NetworkConfig::new(specs, 3)
    };
    let mut f = TaskNetwork::new(cfg, &mut seeded(seed)).unwrap();
    let loss = |f: &TaskNetwork| {
        let mut tape = Tape::new();
        let y = f.forward(&mut tape, &batch, Mode::Train, &mut seeded(seed + 1)).unwrap();
        let l = tape.cross_entropy(y, &batch.labels).unwrap();
        (tape, l)
    };
    let (tape, l) = loss(&f);
    let analytic = analytic_param_grads(&f, &tape.backward(l).unwrap());
    let (checked, bad) = check_module(&mut f, &analytic, usize::MAX, FD_TOL, |f| {
        let (t, l) = loss(f);
        t.value(l).item()
    });
    ensure(bad.is_empty(), || format!("task network seed {seed}: {:?}", bad[0]))?;
    Ok(checked)
}

fn vae_check(g: AugmentationNetwork, seed: u64) -> std::result::Result<usize, String> {
    let mut g = g;
    let dims = g.feature_dims().to_vec();
    let r = &mut seeded(seed + 300);
    let inputs: Vec<Tensor> = dims.iter().map(|&d| random(r, &[3, d], -1.0, 1.0)).collect();
    let weights: Vec<Tensor> = dims.iter().map(|&d| random(r, &[3, d], -1.0, 1.0)).collect();
    let build = |g: &AugmentationNetwork, xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = g.augment(&mut tape, &vars, Mode::Train, &mut seeded(seed + 3)).unwrap();
        let mut loss = out.kl;
        for (f, w) in out.features.iter().zip(&weights) {
            let p = probe(&mut tape, *f, w);
            loss = tape.add(loss, p).unwrap();
        }
        (tape, vars, loss)
    };
    let (tape, vars, loss) = build(&g, &inputs);
    let grads = tape.backward(loss).unwrap();
    let analytic = analytic_param_grads(&g, &grads);
    let (mut checked, bad) = check_module(&mut g, &analytic, 6, FD_TOL, |g| {
        let (t, _, l) = build(g, &inputs);
        t.value(l).item()
    });
    ensure(bad.is_empty(), || format!("augmentation network seed {seed}: {:?}", bad[0]))?;
    for (i, v) in vars.iter().enumerate() {
        let numeric = numeric_gradient(&inputs[i], |x| {
            let mut xs = inputs.clone();
            xs[i] = x.clone();
            let (t, _, l) = build(&g, &xs);
            t.value(l).item()
        });
        for (a, n) in grads.wrt(*v).unwrap().data().iter().zip(numeric.data()) {
            let err = relative_error(*a, *n, 1e-6);
            ensure(err <= FD_TOL, || format!("augmentation input seed {seed}: {a} vs {n}"))?;
            checked += 1;
        }
    }
    Ok(checked)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let (mut ops, mut task, mut mlp, mut attn) = (0, 0, 0, 0);
    for seed in 0..FD_SEEDS {
        ops += op_checks(seed)?;
        task += task_network_check(seed)?;
        let mcfg = MlpVaeConfig {
            hidden: 12,
            latent_dim: 4,
            ..MlpVaeConfig::default()
        };
        mlp += vae_check(AugmentationNetwork::Mlp(MlpVae::new(&[4, 3], &mcfg, &mut seeded(seed)).unwrap()), seed)?;
        let acfg = AttentionVaeConfig {
            latent_dim: 4,
            width: 8,
            layers: 2,
            heads: 2,
            ff_width: 8,
            dropout: 0.1,
        };
        attn += vae_check(
            AugmentationNetwork::Attention(AttentionVae::new(&[4, 3], &acfg, &mut seeded(seed)).unwrap()),
            seed,
        )?;
    }
    let secs = start.elapsed().as_secs_f64();
    within(secs, 120.0)?;
    Ok(format!(
        "{FD_SEEDS} seeds; coordinates checked: ops {ops}, task {task}, mlp-vae {mlp}, attention-vae {attn}"
    ))
}

// ---------------------------------------------------------------- criterion 2

fn bits(m: &impl Module) -> Vec<Vec<u64>> {
    m.parameters().iter().map(|p| p.value.data().iter().map(|x| x.to_bits()).collect()).collect()
}

fn small_setup(seed: u64) -> (MultimodalBatch, TaskNetwork, AugmentationNetwork, AugmentationNetwork) {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.train = 64;
    cfg.dataset.val = 8;
    cfg.dataset.test = 8;
    let data = build_dataset(&cfg, seed).unwrap();
    let f = TaskNetwork::new(NetworkConfig::new(data.specs.clone(), 2), &mut seeded(seed)).unwrap();
    let dims = f.feature_dims();
    let mlp = MlpVae::new(&dims, &MlpVaeConfig::default(), &mut seeded(seed + 1)).unwrap();
    let small_attn = AttentionVaeConfig {
        width: 16,
        layers: 2,
        heads: 4,
        ff_width: 32,
        ..AttentionVaeConfig::default()
    };
    let attn = AttentionVae::new(&dims, &small_attn, &mut seeded(seed + 2)).unwrap();
    (
        data.train_batch(),
        f,
        AugmentationNetwork::Mlp(mlp),
        AugmentationNetwork::Attention(attn),
    )
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let (train, mut f, mlp, attn) = small_setup(3);
    let mut gs = [mlp, attn];
    let mut opt_f = Optimizer::adam(1e-3, f.param_set()).unwrap();
    let mut opt_g: Vec<Optimizer> = gs.iter().map(|g| Optimizer::adam(1e-3, g.param_set()).unwrap()).collect();
    let cfg = LemdaConfig::default();
    let rng = &mut seeded(11);
    for step in 0..100 {
        let k = step % 2;
        let idx: Vec<usize> = (0..16).map(|_| rng.random_range(0..train.len())).collect();
        let batch = train.select(&idx);
        let before_f = bits(&f);
        update_augmenter(&f, &mut gs[k], &batch, &cfg, &mut opt_g[k], rng, step).map_err(|e| e.to_string())?;
        ensure(bits(&f) == before_f, || format!("step {step}: augmenter update changed the task network"))?;
        let before_g = bits(&gs[k]);
        update_task(&mut f, &gs[k], &batch, &mut opt_f, rng, step).map_err(|e| e.to_string())?;
        ensure(bits(&gs[k]) == before_g, || format!("step {step}: task update changed the augmenter"))?;
    }
    let zero = LemdaConfig {
        weights: LossWeights {
            w1: 0.0,
            w2: 0.0,
            w3: 0.0,
            ..LossWeights::default()
        },
        ..LemdaConfig::default()
    };
    for (k, g) in gs.iter_mut().enumerate() {
        let mut opt = Optimizer::adam(1e-3, g.param_set()).unwrap();
        for step in 0..20 {
            let idx: Vec<usize> = (0..16).map(|_| rng.random_range(0..train.len())).collect();
            let before = bits(g);
            update_augmenter(&f, g, &train.select(&idx), &zero, &mut opt, rng, step).map_err(|e| e.to_string())?;
            ensure(bits(g) == before, || format!("augmenter {k} moved with zero loss weights at step {step}"))?;
        }
    }
    within(start.elapsed().as_secs_f64(), 60.0)?;
    Ok("100 alternating steps isolated (MLP-VAE and Attention-VAE); zero weights leave G fixed".into())
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Check {
    let cfg = LemdaConfig {
        weights: LossWeights {
            w2: 0.0,
            w3: 0.0,
            ..LossWeights::default()
        },
        ..LemdaConfig::default()
    };
    let mut held = 0;
    for trial in 0..20u64 {
        let (train, f, mut g, _) = small_setup(100 + trial);
        let batch = train.select(&(0..32).collect::<Vec<_>>());
        let mut opt = Optimizer::adam(1e-3, g.param_set()).unwrap();
        let before = augmented_task_loss(&f, &g, &batch, &mut seeded(trial)).map_err(|e| e.to_string())?;
        update_augmenter(&f, &mut g, &batch, &cfg, &mut opt, &mut seeded(trial), 0).map_err(|e| e.to_string())?;
        let after = augmented_task_loss(&f, &g, &batch, &mut seeded(trial)).map_err(|e| e.to_string())?;
        if after >= before {
            held += 1;
        }
    }
    ensure(held >= 18, || format!("augmented task loss did not decrease in only {held}/20 trials"))?;
    Ok(format!("augmented task loss did not decrease in {held}/20 trials"))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4(dir: &Path) -> Check {
    let start = Instant::now();
    let svg_path = dir.join("figure3.svg");
    let out = render_figure3(&svg_path, 0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let sc = &out.scenario;
    let dist = |p: [f64; 2]| ((p[0] - sc.src.position[0]).powi(2) + (p[1] - sc.src.position[1]).powi(2)).sqrt();
    let gap = (dist(sc.d1.position) - dist(sc.d2.position)).abs();
    ensure(gap <= 1e-9, || format!("|D1-src| and |D2-src| differ by {gap}"))?;
    let rel = (sc.d1.task_loss - sc.d2.task_loss).abs() / sc.d1.task_loss.max(sc.d2.task_loss);
    ensure(rel <= 0.05, || format!("task losses differ by {:.2}%", rel * 100.0))?;
    ensure(sc.d1.predicted == sc.label && sc.d2.predicted != sc.label, || {
        "probes are not on opposite sides of the boundary".into()
    })?;

    let csv = std::fs::read_to_string(&out.csv).map_err(|e| e.to_string())?;
    let consistency = |name: &str| -> f64 {
        csv.lines()
            .find(|l| l.starts_with(&format!("{name},")))
            .and_then(|l| l.rsplit(',').next())
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::NAN)
    };
    let (c1, c2) = (consistency("d1"), consistency("d2"));
    ensure(c2 > c1, || format!("sidecar consistency d2 {c2} <= d1 {c1}"))?;

    let text = std::fs::read_to_string(&out.svg).map_err(|e| e.to_string())?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| format!("SVG is not well-formed: {e}"))?;
    let probes = doc
        .descendants()
        .filter(|n| n.has_tag_name("circle") && n.attribute("class") == Some("probe"))
        .count();
    ensure(probes == 3, || format!("{probes} probe points in the SVG"))?;
    within(secs, 60.0)?;
    Ok(format!(
        "consistency D1 {c1:.4} < D2 {c2:.4}; distance gap {gap:.1e}; task losses within {:.2}%",
        rel * 100.0
    ))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Check {
    let rows = Tensor::from_rows(&[vec![0.4, 0.3, 0.3], vec![0.6, 0.2, 0.2], vec![0.5, 0.5, 0.0]]);
    let m = consistency_mask(&rows, 0.5);
    ensure(m == vec![false, true, false], || format!("alpha=0.5 mask {m:?}"))?;
    let m0 = consistency_mask(&rows, 0.0);
    ensure(m0 == vec![true; 3], || format!("alpha=0 mask {m0:?}"))?;

    let grid: Vec<f64> = expand(&ExperimentConfig::default(), Suite::Confidence)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|c| c.config.lemda.config.weights.alpha_conf)
        .collect();
    ensure(grid == CONFIDENCE_GRID, || format!("confidence grid {grid:?}"))?;

    let (data, mut f, g, _) = small_setup(5);
    let mut aug = Augmentation::Lemda {
        network: g,
        config: LemdaConfig {
            weights: LossWeights {
                alpha_conf: 0.0,
                ..LossWeights::default()
            },
            ..LemdaConfig::default()
        },
    };
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 16,
        verbose_steps: true,
        ..TrainConfig::default()
    };
    let h = train(&mut f, &mut aug, &data, &data.select(&[0, 1]), &tc, &mut seeded(6)).map_err(|e| e.to_string())?;
    let bad = h.steps.iter().filter(|s| s.mask_fraction != 1.0).count();
    ensure(bad == 0 && !h.steps.is_empty(), || format!("{bad} batches with mask_fraction != 1 at alpha=0"))?;
    Ok(format!(
        "alpha=0 masks every row on all {} batches; alpha=0.5 excludes the max-prob-0.4 row",
        h.steps.len()
    ))
}

// ---------------------------------------------------------------- criterion 6

struct Comparison {
    baseline: Vec<SeedResult>,
    lemda: Vec<SeedResult>,
}

fn comparison() -> std::result::Result<Comparison, String> {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = (0..5).collect();
    let (baseline, err) = evaluate(&cfg);
    if let Some(e) = err {
        return Err(e.to_string());
    }
    cfg.augmentation = AugmentationChoice::LemdaMlpVae;
    let (lemda, err) = evaluate(&cfg);
    if let Some(e) = err {
        return Err(e.to_string());
    }
    Ok(Comparison { baseline, lemda })
}

fn criterion_6(cmp: &Comparison, secs: f64) -> Check {
    let b = summarize(&cmp.baseline).mean_accuracy;
    let l = summarize(&cmp.lemda).mean_accuracy;
    let gains: Vec<f64> = cmp
        .baseline
        .iter()
        .zip(&cmp.lemda)
        .map(|(x, y)| y.test_accuracy - x.test_accuracy)
        .collect();
    let wins = gains.iter().filter(|&&d| d >= 0.01 - 1e-12).count();
    let detail = format!(
        "baseline mean {b:.4}, LeMDA mean {l:.4}, per-seed gains {:?}, seeds with >= +1 point: {wins}/5",
        gains.iter().map(|g| (g * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
    ensure((0.75..=0.90).contains(&b), || format!("baseline outside [0.75, 0.90]: {detail}"))?;
    ensure(l >= b, || format!("LeMDA below baseline: {detail}"))?;
    ensure(wins >= 3, || detail.clone())?;
    within(secs, 600.0)?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7(dir: &Path) -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = (0..5).collect();
    cfg.output_dir = dir.join("ablation");
    let rows = ablation_suite(&cfg, Suite::Regularizer).map_err(|e| e.to_string())?;
    let mean = |name: &str| rows.iter().find(|r| r.variant == name).map(|r| r.mean_accuracy).unwrap_or(f64::NAN);
    let cells = rows
        .iter()
        .map(|r| format!("{} {:.4}", r.variant, r.mean_accuracy))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(mean("consistency") >= mean("none"), || format!("consistency below none: {cells}"))?;
    Ok(cells)
}

// ---------------------------------------------------------------- criterion 8

fn bag_of_tokens(batch: &MultimodalBatch, vocab: usize) -> Tensor {
    let ModalityData::Tokens(seqs) = &batch.modalities[1] else { panic!("token modality expected") };
    let mut data = vec![0.0; seqs.len() * vocab];
    for (i, s) in seqs.iter().enumerate() {
        for &t in s {
            data[i * vocab + t] += 1.0;
        }
    }
    Tensor::new(vec![seqs.len(), vocab], data).unwrap()
}

fn criterion_8() -> Check {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let data = build_dataset(&cfg, 0).map_err(|e| e.to_string())?;
    let (tr, te) = (data.train_batch(), data.test_batch());
    let ModalityData::Continuous(xtr) = &tr.modalities[0] else { return Err("continuous modality expected".into()) };
    let ModalityData::Continuous(xte) = &te.modalities[0] else { return Err("continuous modality expected".into()) };
    let cont = logistic_probe(xtr, &tr.labels, xte, &te.labels);
    let toks = logistic_probe(&bag_of_tokens(&tr, 50), &tr.labels, &bag_of_tokens(&te, 50), &te.labels);
    let fused = run_seed(&cfg, 0).map_err(|e| e.to_string())?.test_accuracy;
    for (name, acc) in [("continuous", cont), ("tokens", toks)] {
        ensure((0.45..=0.55).contains(&acc), || format!("{name}-only probe {acc}"))?;
    }
    ensure(fused > 0.70, || format!("fusion model {fused}"))?;
    within(start.elapsed().as_secs_f64(), 120.0)?;
    Ok(format!("continuous-only probe {cont:.4}, tokens-only probe {toks:.4}, fusion {fused:.4}"))
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Check {
    let mut cfg = ExperimentConfig::default();
    let none = measure_throughput(&cfg, 5, 30).map_err(|e| e.to_string())?;
    cfg.augmentation = AugmentationChoice::LemdaMlpVae;
    let lemda = measure_throughput(&cfg, 5, 30).map_err(|e| e.to_string())?;
    let detail = format!(
        "none {:.1} steps/s, lemda_mlp_vae {:.1} steps/s",
        none.steps_per_second, lemda.steps_per_second
    );
    ensure(lemda.steps_per_second < none.steps_per_second && lemda.steps_per_second > 0.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 10

fn criterion_10(dir: &Path) -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.train = 60;
    cfg.dataset.val = 20;
    cfg.dataset.test = 100;
    cfg.train.epochs = 4;
    cfg.seeds = vec![1, 2];
    cfg.augmentation = AugmentationChoice::LemdaMlpVae;
    let mut read = Vec::new();
    for name in ["a", "b"] {
        cfg.output_dir = dir.join(name);
        run(&cfg).map_err(|e| e.to_string())?;
        read.push(std::fs::read(cfg.output_dir.join("metrics.csv")).map_err(|e| e.to_string())?);
    }
    ensure(read[0] == read[1], || "metrics.csv differs between identical runs".into())?;
    let echo = std::fs::read_to_string(dir.join("a").join("config.echo")).map_err(|e| e.to_string())?;
    let mut again = ExperimentConfig::parse(&echo).map_err(|e| e.to_string())?;
    again.output_dir = dir.join("c");
    run(&again).map_err(|e| e.to_string())?;
    let c = std::fs::read(dir.join("c").join("metrics.csv")).map_err(|e| e.to_string())?;
    ensure(c == read[0], || "re-running config.echo changed metrics.csv".into())?;
    Ok(format!("metrics.csv byte-identical across 3 runs ({} bytes)", c.len()))
}

// ---------------------------------------------------------------- criterion 11

fn kl_value(mu: f64, log_var: f64) -> f64 {
    let mut tape = Tape::new();
    let m = tape.leaf(Tensor::full(&[1, 8], mu), true);
    let lv = tape.leaf(Tensor::full(&[1, 8], log_var), true);
    let kl = gaussian_kl(&mut tape, m, lv, 1).unwrap();
    tape.value(kl).item()
}

fn criterion_11() -> Check {
    let (one, zero) = (kl_value(1.0, 0.0), kl_value(0.0, 0.0));
    ensure((one - 4.0).abs() <= 1e-9, || format!("KL(mu=1) = {one}"))?;
    ensure(zero.abs() <= 1e-9, || format!("KL(mu=0) = {zero}"))?;
    Ok(format!("KL(mu=1, log_var=0, dim 8) = {one}, KL(mu=0) = {zero}"))
}

// ---------------------------------------------------------------- criterion 12

fn pair_batches() -> (Vec<ModalitySpec>, MultimodalBatch, MultimodalBatch) {
    let specs = vec![
        ModalitySpec::continuous("x", 2, 4),
        ModalitySpec::tokens("t", 10, 5, 4),
        ModalitySpec::categorical("c", vec![4], 4),
    ];
    let a = MultimodalBatch::new(
        vec![
            ModalityData::Continuous(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])),
            ModalityData::Tokens(vec![vec![1, 2, 3], vec![4]]),
            ModalityData::Categorical(vec![vec![0], vec![1]]),
        ],
        vec![0, 1],
    );
    let b = MultimodalBatch::new(
        vec![
            ModalityData::Continuous(Tensor::from_rows(&[vec![-1.0, 0.5], vec![7.0, -2.0]])),
            ModalityData::Tokens(vec![vec![5, 6, 7], vec![8, 9]]),
            ModalityData::Categorical(vec![vec![2], vec![3]]),
        ],
        vec![2, 0],
    );
    (specs, a, b)
}

fn criterion_12() -> Check {
    let (specs, a, b) = pair_batches();
    let on = [true; 3];
    let draws = |l: f64, s: [f64; 2]| MixupDraws {
        lambda: vec![l, l],
        select: vec![vec![0.0, s[0], s[0]], vec![0.0, s[1], s[1]]],
    };
    let e = |x: lemda_core::Error| x.to_string();

    let at_one = mixup_apply(&a, &b, 0.5, 3, &on, &draws(1.0, [0.1, 0.1])).map_err(e)?;
    ensure(at_one.modalities[0] == a.modalities[0], || "lambda=1 does not return batch a".into())?;
    let soft = at_one.soft_labels.as_ref().unwrap();
    ensure(soft.data() == [1.0, 0.0, 0.0, 0.0, 1.0, 0.0], || format!("lambda=1 labels {:?}", soft.data()))?;
    let at_zero = mixup_apply(&a, &b, 0.5, 3, &on, &draws(0.0, [0.9, 0.9])).map_err(e)?;
    ensure(at_zero.modalities[0] == b.modalities[0], || "lambda=0 does not return batch b".into())?;
    let soft = at_zero.soft_labels.as_ref().unwrap();
    ensure(soft.data() == [0.0, 0.0, 1.0, 1.0, 0.0, 0.0], || format!("lambda=0 labels {:?}", soft.data()))?;

    // select draw below alpha keeps a, at or above alpha takes b
    let sel = mixup_apply(&a, &b, 0.5, 3, &on, &draws(0.3, [0.49, 0.5])).map_err(e)?;
    ensure(sel.modalities[1] == ModalityData::Tokens(vec![vec![1, 2, 3], vec![8, 9]]), || {
        format!("token selection {:?}", sel.modalities[1])
    })?;
    ensure(sel.modalities[2] == ModalityData::Categorical(vec![vec![0], vec![3]]), || {
        format!("categorical selection {:?}", sel.modalities[2])
    })?;

    let fa = [Tensor::from_rows(&[vec![1.0, -2.0]])];
    let fb = [Tensor::from_rows(&[vec![3.0, 6.0]])];
    let la = Tensor::from_rows(&[vec![1.0, 0.0]]);
    let lb = Tensor::from_rows(&[vec![0.0, 1.0]]);
    let (mixed, labels) = manifold_mixup_with(&fa, &fb, &la, &lb, 0.25).map_err(e)?;
    ensure(mixed[0].data() == [2.5, 4.0], || format!("manifold mixup features {:?}", mixed[0].data()))?;
    ensure(labels.data() == [0.25, 0.75], || format!("manifold mixup labels {:?}", labels.data()))?;

    let mg = mixgen_style(&a, &b, 0.5, &specs, &on).map_err(e)?;
    ensure(
        mg.modalities[0] == ModalityData::Continuous(Tensor::from_rows(&[vec![0.0, 1.25], vec![5.0, 1.0]])),
        || format!("mixgen continuous {:?}", mg.modalities[0]),
    )?;
    ensure(mg.modalities[1] == ModalityData::Tokens(vec![vec![1, 2, 3, 5, 6], vec![4, 8, 9]]), || {
        format!("mixgen tokens {:?}", mg.modalities[1])
    })?;
    ensure(mg.labels == a.labels, || "mixgen must keep batch a labels".into())?;
    Ok("mixup endpoints, select < alpha rule, manifold convexity, mixgen concat/truncate exact".into())
}

// ---------------------------------------------------------------- driver

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let dir = dir.path();
    let mut results: Vec<(u8, &str, Check, f64)> = Vec::new();
    let mut record = |id: u8, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let r = guarded(f);
        results.push((id, name, r, start.elapsed().as_secs_f64()));
    };
    record(1, "gradient oracle", &mut criterion_1);
    record(2, "min-max isolation", &mut criterion_2);
    record(3, "adversarial direction", &mut criterion_3);
    record(4, "figure-3 certificate", &mut || criterion_4(dir));
    record(5, "confidence masking", &mut criterion_5);
    record(6, "complementary-task gain", &mut || {
        let start = Instant::now();
        let cmp = comparison()?;
        criterion_6(&cmp, start.elapsed().as_secs_f64())
    });
    record(7, "regularizer ablation", &mut || criterion_7(dir));
    record(8, "single-modality insufficiency", &mut criterion_8);
    record(9, "throughput ordering", &mut criterion_9);
    record(10, "determinism", &mut || criterion_10(dir));
    record(11, "closed-form KL", &mut criterion_11);
    record(12, "baseline unit suite", &mut criterion_12);

    let mut failed = 0;
    println!();
    for (id, name, r, secs) in &results {
        match r {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail} ({secs:.1} s)");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
