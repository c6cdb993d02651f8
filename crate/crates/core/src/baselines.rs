//! Comparison augmentations: per-modality input augmentation, Mixup extended
//! to discrete modalities, Manifold Mixup on fusion-boundary features and a
//! MixGen-style interpolate-and-concatenate scheme.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::batch::{ModalityData, MultimodalBatch};
use crate::error::{Error, Result};
use crate::fusionnet::{ModalityKind, ModalitySpec};
use crate::gradcore::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum BaselineKind {
    None,
    InputAug,
    Mixup { alpha: f64 },
    ManifoldMixup { alpha: f64 },
    MixGen { lambda: f64 },
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::None => "none",
            BaselineKind::InputAug => "input_aug",
            BaselineKind::Mixup { .. } => "mixup",
            BaselineKind::ManifoldMixup { .. } => "manifold_mixup",
            BaselineKind::MixGen { .. } => "mixgen",
        }
    }
}

/// A baseline plus the modalities it may touch. `None` means all of them.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub modalities: Option<BTreeSet<String>>,
}

impl BaselineSpec {
    pub fn new(kind: BaselineKind) -> Result<Self> {
        let spec = Self { kind, modalities: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BaselineKind::Mixup { alpha } | BaselineKind::ManifoldMixup { alpha } if !(alpha > 0.0 && alpha <= 1.0) => {
                Err(Error::contract(format!("mixup alpha must lie in (0, 1], got {alpha}")))
            }
            BaselineKind::MixGen { lambda } if !(0.0..=1.0).contains(&lambda) => {
                Err(Error::contract(format!("mixgen lambda must lie in [0, 1], got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    /// Per-modality flags in spec order.
    pub fn toggles(&self, specs: &[ModalitySpec]) -> Vec<bool> {
        specs
            .iter()
            .map(|s| self.modalities.as_ref().is_none_or(|m| m.contains(&s.name)))
            .collect()
    }
}

fn check_toggles(batch: &MultimodalBatch, specs: &[ModalitySpec], toggles: &[bool]) -> Result<()> {
    if specs.len() != batch.modalities.len() || toggles.len() != specs.len() {
        return Err(Error::contract(format!(
            "{} modalities, {} specs, {} toggles",
            batch.modalities.len(),
            specs.len(),
            toggles.len()
        )));
    }
    Ok(())
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("one-hot shape")
}

/// Soft targets of a batch: its mixed labels if present, else one-hot.
pub fn targets(batch: &MultimodalBatch, classes: usize) -> Tensor {
    batch.soft_labels.clone().unwrap_or_else(|| one_hot(&batch.labels, classes))
}

/// One random transform of a continuous example.
#[derive(Clone, Debug, PartialEq)]
pub enum ContinuousTransform {
    /// Additive noise with per-feature standard deviation `sigma * feature_std`.
    Noise { sigma: f64 },
    Scale { factor: f64 },
    /// Zeroes the listed feature positions.
    Dropout { mask: Vec<bool> },
}

/// One random edit of a token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenEdit {
    Swap(usize, usize),
    Delete(usize),
    Duplicate(usize),
}

pub fn apply_continuous<R: Rng + ?Sized>(row: &mut [f64], feature_std: &[f64], t: &ContinuousTransform, rng: &mut R) {
    match t {
        ContinuousTransform::Noise { sigma } => {
            if *sigma == 0.0 {
                return;
            }
            for (x, s) in row.iter_mut().zip(feature_std) {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                *x += sigma * s * e;
            }
        }
        ContinuousTransform::Scale { factor } => row.iter_mut().for_each(|x| *x *= factor),
        ContinuousTransform::Dropout { mask } => {
            for (x, &drop) in row.iter_mut().zip(mask) {
                if drop {
                    *x = 0.0;
                }
            }
        }
    }
}

/// Applies a token edit. Deletion never empties a sequence and duplication
/// never grows it past `max_len`.
pub fn apply_token_edit(seq: &mut Vec<usize>, edit: TokenEdit, max_len: usize) {
    match edit {
        TokenEdit::Swap(i, j) if i < seq.len() && j < seq.len() => seq.swap(i, j),
        TokenEdit::Delete(i) if seq.len() > 1 && i < seq.len() => {
            seq.remove(i);
        }
        TokenEdit::Duplicate(i) if i < seq.len() && seq.len() < max_len => seq.insert(i + 1, seq[i]),
        _ => {}
    }
}

fn column_std(t: &Tensor) -> Vec<f64> {
    let (n, w) = (t.rows() as f64, t.row_len());
    (0..w)
        .map(|j| {
            let mean = (0..t.rows()).map(|i| t.at(i, j)).sum::<f64>() / n;
            ((0..t.rows()).map(|i| (t.at(i, j) - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Independent per-modality input augmentation, one random transform per
/// example. Categorical modalities are never changed.
pub fn input_augment<R: Rng + ?Sized>(
    batch: &MultimodalBatch,
    specs: &[ModalitySpec],
    toggles: &[bool],
    rng: &mut R,
) -> Result<MultimodalBatch> {
    check_toggles(batch, specs, toggles)?;
    let mut out = batch.clone();
    for ((data, spec), &on) in out.modalities.iter_mut().zip(specs).zip(toggles) {
        if !on {
            continue;
        }
        match data {
            ModalityData::Continuous(t) => {
                let std = column_std(t);
                let w = t.row_len();
                for i in 0..t.rows() {
                    let transform = match rng.random_range(0..3) {
                        0 => ContinuousTransform::Noise {
                            sigma: rng.random_range(0.0..=0.1),
                        },
                        1 => ContinuousTransform::Scale {
                            factor: rng.random_range(0.9..=1.1),
                        },
                        _ => ContinuousTransform::Dropout {
                            mask: (0..w).map(|_| rng.random::<f64>() < 0.1).collect(),
                        },
                    };
                    apply_continuous(&mut t.data_mut()[i * w..(i + 1) * w], &std, &transform, rng);
                }
            }
            ModalityData::Tokens(seqs) => {
                let ModalityKind::Tokens { max_len, .. } = spec.kind else {
                    return Err(Error::contract(format!("modality `{}` is not a token modality", spec.name)));
                };
                for s in seqs.iter_mut() {
                    if s.is_empty() {
                        continue;
                    }
                    let n = s.len();
                    let edit = match rng.random_range(0..3) {
                        0 => TokenEdit::Swap(rng.random_range(0..n), rng.random_range(0..n)),
                        1 => TokenEdit::Delete(rng.random_range(0..n)),
                        _ => TokenEdit::Duplicate(rng.random_range(0..n)),
                    };
                    apply_token_edit(s, edit, max_len);
                }
            }
            ModalityData::Categorical(_) => {}
        }
    }
    Ok(out)
}

/// Random draws behind one Mixup call.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupDraws {
    /// Interpolation weight of `batch_a`, per example.
    pub lambda: Vec<f64>,
    /// Selection draw per example and modality; `< alpha` keeps `batch_a`.
    pub select: Vec<Vec<f64>>,
}

impl MixupDraws {
    pub fn sample<R: Rng + ?Sized>(batch: usize, modalities: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::contract(format!("Beta({alpha}, {alpha}): {e}")))?;
        let lambda = (0..batch).map(|_| beta.sample(rng)).collect();
        let select = (0..batch)
            .map(|_| (0..modalities).map(|_| rng.random::<f64>()).collect())
            .collect();
        Ok(Self { lambda, select })
    }
}

/// Mixup with explicit draws. Continuous modalities and labels are convex
/// combinations; token and categorical modalities take example `i` from
/// `batch_a` when `select[i][m] < alpha`, otherwise from `batch_b`.
pub fn mixup_apply(
    a: &MultimodalBatch,
    b: &MultimodalBatch,
    alpha: f64,
    classes: usize,
    toggles: &[bool],
    draws: &MixupDraws,
) -> Result<MultimodalBatch> {
    let n = a.len();
    if b.len() != n || draws.lambda.len() != n || draws.select.len() != n {
        return Err(Error::contract(format!("mixup batch sizes differ: {n} vs {}", b.len())));
    }
    if a.modalities.len() != b.modalities.len() || toggles.len() != a.modalities.len() {
        return Err(Error::contract("mixup batches have different modality counts"));
    }
    let mut modalities = Vec::with_capacity(a.modalities.len());
    for (m, ((da, db), &on)) in a.modalities.iter().zip(&b.modalities).zip(toggles).enumerate() {
        if !on {
            modalities.push(da.clone());
            continue;
        }
        let pick = |i: usize| draws.select[i][m] < alpha;
        let mixed = match (da, db) {
            (ModalityData::Continuous(x), ModalityData::Continuous(y)) => {
                if x.shape() != y.shape() {
                    return Err(Error::dim("mixup", x.shape(), y.shape()));
                }
                let w = x.row_len();
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .enumerate()
                    .map(|(k, (p, q))| {
                        let l = draws.lambda[k / w];
                        l * p + (1.0 - l) * q
                    })
                    .collect();
                ModalityData::Continuous(Tensor::new(x.shape().to_vec(), data)?)
            }
            (ModalityData::Tokens(x), ModalityData::Tokens(y)) => {
                ModalityData::Tokens((0..n).map(|i| if pick(i) { x[i].clone() } else { y[i].clone() }).collect())
            }
            (ModalityData::Categorical(x), ModalityData::Categorical(y)) => {
                ModalityData::Categorical((0..n).map(|i| if pick(i) { x[i].clone() } else { y[i].clone() }).collect())
            }
            _ => return Err(Error::contract("mixup batches have different modality kinds")),
        };
        modalities.push(mixed);
    }
    let ta = targets(a, classes);
    let tb = targets(b, classes);
    let soft = ta
        .data()
        .iter()
        .zip(tb.data())
        .enumerate()
        .map(|(k, (p, q))| {
            let l = draws.lambda[k / classes];
            l * p + (1.0 - l) * q
        })
        .collect();
    Ok(MultimodalBatch {
        modalities,
        labels: a.labels.clone(),
        soft_labels: Some(Tensor::new(vec![n, classes], soft)?),
    })
}

pub fn mixup_extended<R: Rng + ?Sized>(
    a: &MultimodalBatch,
    b: &MultimodalBatch,
    alpha: f64,
    classes: usize,
    toggles: &[bool],
    rng: &mut R,
) -> Result<MultimodalBatch> {
    let draws = MixupDraws::sample(a.len(), a.modalities.len(), alpha, rng)?;
    mixup_apply(a, b, alpha, classes, toggles, &draws)
}

/// Convex combination `lambda * a + (1 - lambda) * b` of features and soft labels.
pub fn manifold_mixup_with(
    features_a: &[Tensor],
    features_b: &[Tensor],
    labels_a: &Tensor,
    labels_b: &Tensor,
    lambda: f64,
) -> Result<(Vec<Tensor>, Tensor)> {
    if features_a.len() != features_b.len() {
        return Err(Error::contract("manifold mixup: modality counts differ"));
    }
    let mix = |x: &Tensor, y: &Tensor| -> Result<Tensor> {
        if x.shape() != y.shape() {
            return Err(Error::dim("manifold mixup", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect();
        Tensor::new(x.shape().to_vec(), data)
    };
    let feats = features_a
        .iter()
        .zip(features_b)
        .map(|(x, y)| mix(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok((feats, mix(labels_a, labels_b)?))
}

/// Draws `lambda ~ Beta(alpha, alpha)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::contract(format!("Beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

pub fn manifold_mixup<R: Rng + ?Sized>(
    features_a: &[Tensor],
    features_b: &[Tensor],
    labels_a: &Tensor,
    labels_b: &Tensor,
    alpha: f64,
    rng: &mut R,
) -> Result<(Vec<Tensor>, Tensor)> {
    let lambda = sample_lambda(alpha, rng)?;
    manifold_mixup_with(features_a, features_b, labels_a, labels_b, lambda)
}

/// Interpolates continuous modalities, concatenates token sequences (cut at
/// `max_len`) and keeps `batch_a`'s labels. The batch must hold at least one
/// continuous and one token modality; toggles only limit which are changed.
pub fn mixgen_style(
    a: &MultimodalBatch,
    b: &MultimodalBatch,
    lambda: f64,
    specs: &[ModalitySpec],
    toggles: &[bool],
) -> Result<MultimodalBatch> {
    check_toggles(a, specs, toggles)?;
    if b.len() != a.len() || b.modalities.len() != a.modalities.len() {
        return Err(Error::contract("mixgen batches differ in size"));
    }
    let has_cont = specs.iter().any(|s| matches!(s.kind, ModalityKind::Continuous { .. }));
    let has_text = specs.iter().any(|s| matches!(s.kind, ModalityKind::Tokens { .. }));
    if !(has_cont && has_text) {
        return Err(Error::Applicability {
            method: "mixgen",
            reason: "needs at least one continuous and one token-sequence modality".into(),
        });
    }
    let mut modalities = Vec::with_capacity(a.modalities.len());
    for (((da, db), spec), &on) in a.modalities.iter().zip(&b.modalities).zip(specs).zip(toggles) {
        if !on {
            modalities.push(da.clone());
            continue;
        }
        modalities.push(match (da, db, &spec.kind) {
            (ModalityData::Continuous(x), ModalityData::Continuous(y), _) => {
                if x.shape() != y.shape() {
                    return Err(Error::dim("mixgen", x.shape(), y.shape()));
                }
                let data = x.data().iter().zip(y.data()).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect();
                ModalityData::Continuous(Tensor::new(x.shape().to_vec(), data)?)
            }
            (ModalityData::Tokens(x), ModalityData::Tokens(y), ModalityKind::Tokens { max_len, .. }) => {
                ModalityData::Tokens(
                    x.iter()
                        .zip(y)
                        .map(|(p, q)| p.iter().chain(q).copied().take(*max_len).collect())
                        .collect(),
                )
            }
            (ModalityData::Categorical(_), ModalityData::Categorical(_), _) => da.clone(),
            _ => return Err(Error::contract("mixgen batches have mismatched modality kinds")),
        });
    }
    Ok(MultimodalBatch {
        modalities,
        labels: a.labels.clone(),
        soft_labels: a.soft_labels.clone(),
    })
}

/// Random within-batch partner permutation for pairing.
pub fn partner_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
