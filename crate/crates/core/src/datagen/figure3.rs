//! A 2-D binary scenario with two probe points at equal distance from a
//! source point, one on each side of a trained model's decision boundary.
//!
//! Cross entropy of a binary classifier is monotone in the probability of the
//! reference class, so two points on opposite sides of the boundary cannot
//! have exactly equal task loss. The probes are placed on the level sets
//! `p = 0.5 + PROBE_MARGIN` and `p = 0.5 - PROBE_MARGIN`, which keeps their
//! task losses within about 3% of each other.

use rand::Rng;

use super::{contiguous_splits, split_sizes, DatasetHandle};
use crate::batch::{ModalityData, MultimodalBatch};
use crate::error::{Error, Result};
use crate::fusionnet::{ModalitySpec, NetworkConfig, TaskNetwork};
use crate::gradcore::{softmax_rows, Tensor};
use crate::rng::derive;
use crate::trainer::{train, Augmentation, TrainConfig};

pub const FIGURE3_MAX_ATTEMPTS: u64 = 100;
const PROBE_MARGIN: f64 = 0.005;
const POINTS: usize = 400;
const EXTENT: f64 = 2.0;
const ANGLE_STEPS: usize = 2048;

/// Model outputs at one probe location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbePoint {
    pub position: [f64; 2],
    /// Probability of class 1.
    pub prob_one: f64,
    pub predicted: usize,
    /// Cross entropy against the source point's label.
    pub task_loss: f64,
    /// `KL(p(src) || p(point))`.
    pub consistency: f64,
}

#[derive(Clone, Debug)]
pub struct Figure3Scenario {
    pub dataset: DatasetHandle,
    pub model: TaskNetwork,
    /// Ground-truth boundary `normal . x + offset = 0`; class 1 on the positive side.
    pub normal: [f64; 2],
    pub offset: f64,
    pub label: usize,
    pub radius: f64,
    pub src: ProbePoint,
    pub d1: ProbePoint,
    pub d2: ProbePoint,
    /// Seed that produced the accepted construction.
    pub accepted_seed: u64,
}

impl Figure3Scenario {
    /// Probability of class 1 at arbitrary points.
    pub fn prob_one(&self, points: &[[f64; 2]]) -> Result<Vec<f64>> {
        prob_one(&self.model, points)
    }

    /// Cross entropy against the source label at arbitrary points.
    pub fn task_loss(&self, points: &[[f64; 2]]) -> Result<Vec<f64>> {
        Ok(self
            .prob_one(points)?
            .into_iter()
            .map(|p| -(if self.label == 1 { p } else { 1.0 - p }).ln())
            .collect())
    }
}

fn batch_of(points: &[[f64; 2]]) -> Result<MultimodalBatch> {
    let data = points.iter().flat_map(|p| p.iter().copied()).collect();
    Ok(MultimodalBatch::new(
        vec![ModalityData::Continuous(Tensor::new(vec![points.len(), 2], data)?)],
        vec![0; points.len()],
    ))
}

fn prob_one(model: &TaskNetwork, points: &[[f64; 2]]) -> Result<Vec<f64>> {
    let probs = softmax_rows(&model.logits(&batch_of(points)?)?);
    Ok((0..points.len()).map(|i| probs.at(i, 1)).collect())
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

fn probe(model: &TaskNetwork, at: [f64; 2], label: usize, src_prob: f64) -> Result<ProbePoint> {
    let p = prob_one(model, &[at])?[0];
    let p_label = if label == 1 { p } else { 1.0 - p };
    Ok(ProbePoint {
        position: at,
        prob_one: p,
        predicted: usize::from(p > 0.5),
        task_loss: -p_label.ln(),
        consistency: bernoulli_kl(src_prob, p),
    })
}

fn on_circle(center: [f64; 2], r: f64, theta: f64) -> [f64; 2] {
    [center[0] + r * theta.cos(), center[1] + r * theta.sin()]
}

/// Angle on the circle where the label probability crosses `level`.
fn crossing(model: &TaskNetwork, center: [f64; 2], r: f64, label: usize, level: f64) -> Result<Option<f64>> {
    let thetas: Vec<f64> = (0..=ANGLE_STEPS)
        .map(|k| std::f64::consts::TAU * k as f64 / ANGLE_STEPS as f64)
        .collect();
    let pts: Vec<[f64; 2]> = thetas.iter().map(|&t| on_circle(center, r, t)).collect();
    let to_label = |p: f64| if label == 1 { p } else { 1.0 - p };
    let vals: Vec<f64> = prob_one(model, &pts)?.into_iter().map(to_label).collect();
    for k in 0..ANGLE_STEPS {
        if (vals[k] - level).signum() != (vals[k + 1] - level).signum() {
            let (mut lo, mut hi) = (thetas[k], thetas[k + 1]);
            let lo_above = vals[k] > level;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let v = to_label(prob_one(model, &[on_circle(center, r, mid)])?[0]);
                if (v > level) == lo_above {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Ok(Some(0.5 * (lo + hi)));
        }
    }
    Ok(None)
}

fn attempt(seed: u64) -> Result<Option<Figure3Scenario>> {
    let mut rng = derive(seed, 3);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let normal = [angle.cos(), angle.sin()];
    let offset: f64 = rng.random_range(-0.3..0.3);
    let mut xs = Vec::with_capacity(POINTS * 2);
    let mut labels = Vec::with_capacity(POINTS);
    for _ in 0..POINTS {
        let p = [rng.random_range(-EXTENT..EXTENT), rng.random_range(-EXTENT..EXTENT)];
        labels.push(usize::from(normal[0] * p[0] + normal[1] * p[1] + offset > 0.0));
        xs.extend_from_slice(&p);
    }
    let (tr, va, te) = split_sizes(POINTS);
    let (train_idx, val_idx, test_idx) = contiguous_splits(tr, va, te);
    let dataset = DatasetHandle {
        specs: vec![ModalitySpec::continuous("point", 2, 8)],
        num_classes: 2,
        data: MultimodalBatch::new(vec![ModalityData::Continuous(Tensor::new(vec![POINTS, 2], xs)?)], labels),
        train: train_idx,
        val: val_idx,
        test: test_idx,
        seed,
        description: format!("figure3 seed={seed}"),
    };

    let mut net_cfg = NetworkConfig::new(dataset.specs.clone(), 2);
    net_cfg.encoder_hidden = 16;
    net_cfg.head_hidden = 16;
    let mut model = TaskNetwork::new(net_cfg, &mut derive(seed, 4))?;
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 32,
        lr_f: 1e-2,
        ..TrainConfig::default()
    };
    train(
        &mut model,
        &mut Augmentation::none(),
        &dataset.train_batch(),
        &dataset.val_batch(),
        &cfg,
        &mut derive(seed, 5),
    )?;
    let (pred, _) = model.predict(&dataset.test_batch())?;
    let test_labels = dataset.test_batch().labels;
    let acc = pred.iter().zip(&test_labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64;
    if acc < 0.9 {
        return Ok(None);
    }

    // Source: first training point predicted correctly with moderate confidence.
    let train_batch = dataset.train_batch();
    let ModalityData::Continuous(points) = &train_batch.modalities[0] else { unreachable!() };
    let probs = prob_one(&model, &(0..points.rows()).map(|i| [points.at(i, 0), points.at(i, 1)]).collect::<Vec<_>>())?;
    let src_idx = (0..points.rows()).find(|&i| {
        let label = train_batch.labels[i];
        let p_label = if label == 1 { probs[i] } else { 1.0 - probs[i] };
        (0.8..0.97).contains(&p_label)
    });
    let Some(i) = src_idx else { return Ok(None) };
    let label = train_batch.labels[i];
    let center = [points.at(i, 0), points.at(i, 1)];
    let src_prob = probs[i];

    for radius in [0.25, 0.5, 0.75, 1.0, 1.5] {
        let Some(t1) = crossing(&model, center, radius, label, 0.5 + PROBE_MARGIN)? else { continue };
        let Some(t2) = crossing(&model, center, radius, label, 0.5 - PROBE_MARGIN)? else { continue };
        let src = probe(&model, center, label, src_prob)?;
        let d1 = probe(&model, on_circle(center, radius, t1), label, src_prob)?;
        let d2 = probe(&model, on_circle(center, radius, t2), label, src_prob)?;
        if d1.predicted != label || d2.predicted == label || d2.consistency <= d1.consistency {
            continue;
        }
        return Ok(Some(Figure3Scenario {
            dataset,
            model,
            normal,
            offset,
            label,
            radius,
            src,
            d1,
            d2,
            accepted_seed: seed,
        }));
    }
    Ok(None)
}

/// Builds the scenario, retrying derived seeds until the geometric
/// postconditions hold.
pub fn gen_figure3_scenario(seed: u64) -> Result<Figure3Scenario> {
    for k in 0..FIGURE3_MAX_ATTEMPTS {
        let s = if k == 0 { seed } else { crate::rng::splitmix64(seed ^ k) };
        if let Some(sc) = attempt(s)? {
            return Ok(sc);
        }
    }
    Err(Error::contract(format!(
        "figure-3 construction failed for seed {seed} after {FIGURE3_MAX_ATTEMPTS} attempts"
    )))
}
