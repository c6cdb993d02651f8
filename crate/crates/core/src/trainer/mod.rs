//! Joint min-max training of the task network and the augmentation network,
//! plus the plain and baseline-augmented training paths.

mod history;

use rand::seq::SliceRandom;
use rand::Rng;

pub use history::{EpochRecord, TrainingHistory, EPOCH_COLUMNS, STEP_COLUMNS};

use crate::augnet::AugmentationNetwork;
use crate::baselines::{
    input_augment, mixgen_style, mixup_extended, partner_permutation, sample_lambda, targets, BaselineKind,
    BaselineSpec,
};
use crate::batch::MultimodalBatch;
use crate::error::{Error, Result};
use crate::fusionnet::TaskNetwork;
use crate::gradcore::{softmax_rows, Module, Optimizer, OptimizerKind, Tape, Tensor, Var};
use crate::nn::Mode;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the (negated) task loss on augmented features.
    pub w1: f64,
    /// Weight of the consistency / L2 regularizer.
    pub w2: f64,
    /// Weight of the encoder KL term.
    pub w3: f64,
    /// Rows whose original-branch max probability is not above this are
    /// excluded from the consistency term.
    pub alpha_conf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w1: 1e-4,
            w2: 0.1,
            w3: 0.1,
            alpha_conf: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w1, self.w2, self.w3];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::contract(format!("loss weights must be finite and >= 0, got {w:?}")));
        }
        if !(0.0..=1.0).contains(&self.alpha_conf) {
            return Err(Error::contract(format!("alpha_conf {} outside [0, 1]", self.alpha_conf)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    None,
    Consistency,
    L2,
    ConsistencyL2,
}

impl Regularizer {
    pub fn name(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Consistency => "consistency",
            Regularizer::L2 => "l2",
            Regularizer::ConsistencyL2 => "consistency_l2",
        }
    }

    fn uses_consistency(self) -> bool {
        matches!(self, Regularizer::Consistency | Regularizer::ConsistencyL2)
    }

    fn uses_l2(self) -> bool {
        matches!(self, Regularizer::L2 | Regularizer::ConsistencyL2)
    }
}

/// Which distribution is the fixed reference in the consistency KL.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(original || augmented)`.
    OriginalFirst,
    /// `KL(augmented || original)`.
    AugmentedFirst,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemdaConfig {
    pub weights: LossWeights,
    pub regularizer: Regularizer,
    pub kl_direction: KlDirection,
    /// Update the augmentation network every this many steps.
    pub g_update_every: usize,
}

impl Default for LemdaConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            regularizer: Regularizer::Consistency,
            kl_direction: KlDirection::OriginalFirst,
            g_update_every: 1,
        }
    }
}

impl LemdaConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.g_update_every == 0 {
            return Err(Error::contract("g_update_every must be >= 1"));
        }
        Ok(())
    }
}

/// Scalars observed during one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    pub step_index: usize,
    pub task_loss_orig: f64,
    pub task_loss_aug: f64,
    pub consistency_loss: f64,
    pub vae_kl: f64,
    pub mask_fraction: f64,
}

impl StepReport {
    fn check_finite(&self) -> Result<()> {
        let vals = [
            ("task_loss_orig", self.task_loss_orig),
            ("task_loss_aug", self.task_loss_aug),
            ("consistency", self.consistency_loss),
            ("vae_kl", self.vae_kl),
        ];
        match vals.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite {
                step: self.step_index,
                detail: format!("{name} is not finite; report {self:?}"),
            }),
            None => Ok(()),
        }
    }
}

/// `mask[i] = max_j probs[i, j] > alpha` (strict).
pub fn consistency_mask(probs: &Tensor, alpha: f64) -> Vec<bool> {
    (0..probs.rows())
        .map(|i| probs.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max) > alpha)
        .collect()
}

/// Mean over the batch of the squared L2 distance between the concatenated
/// original and augmented features. Originals are detached.
pub fn l2_regularizer_variant(tape: &mut Tape, z: &[Var], augmented: &[Var]) -> Result<Var> {
    if z.len() != augmented.len() || z.is_empty() {
        return Err(Error::dim("l2 regularizer", &[z.len()], &[augmented.len()]));
    }
    for (a, b) in z.iter().zip(augmented) {
        if tape.value(*a).shape() != tape.value(*b).shape() {
            return Err(Error::dim("l2 regularizer", tape.value(*a).shape(), tape.value(*b).shape()));
        }
    }
    let rows = tape.value(z[0]).rows();
    let zc = tape.concat_cols(z)?;
    let zc = tape.detach(zc);
    let ac = tape.concat_cols(augmented)?;
    let d = tape.sub(ac, zc)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / rows as f64))
}

/// Consistency KL between the original-branch logits (treated as constants)
/// and the augmented-branch logits, averaged over masked rows.
pub fn consistency_loss(tape: &mut Tape, original: Var, augmented: Var, mask: &[bool], direction: KlDirection) -> Result<Var> {
    match direction {
        KlDirection::OriginalFirst => tape.kl_divergence(original, augmented, mask),
        KlDirection::AugmentedFirst => {
            let count = mask.iter().filter(|&&m| m).count();
            let shape = tape.value(augmented).shape().to_vec();
            if count == 0 {
                return Ok(tape.constant(Tensor::scalar(0.0)));
            }
            let fixed = tape.detach(original);
            let log_ref = tape.log_softmax(fixed)?;
            let log_aug = tape.log_softmax(augmented)?;
            let p_aug = tape.softmax(augmented)?;
            let diff = tape.sub(log_aug, log_ref)?;
            let terms = tape.mul(p_aug, diff)?;
            let cols = shape[1];
            let m: Vec<f64> = mask.iter().flat_map(|&b| std::iter::repeat_n(if b { 1.0 } else { 0.0 }, cols)).collect();
            let m = tape.constant(Tensor::new(shape, m)?);
            let masked = tape.mul(terms, m)?;
            let s = tape.sum(masked);
            Ok(tape.scale(s, 1.0 / count as f64))
        }
    }
}

fn task_loss(tape: &mut Tape, logits: Var, batch: &MultimodalBatch) -> Result<Var> {
    match &batch.soft_labels {
        Some(t) => tape.soft_cross_entropy(logits, t),
        None => tape.cross_entropy(logits, &batch.labels),
    }
}

struct Branches {
    z: Vec<Var>,
    original: Var,
    augmented_features: Vec<Var>,
    augmented: Var,
    kl: Var,
}

/// Original and augmented forward branches on one tape, in the order
/// `z`, `ŷ`, `G(z)`, `ŷ_G`.
fn branches<R: Rng + ?Sized>(
    tape: &mut Tape,
    f: &TaskNetwork,
    g: &AugmentationNetwork,
    batch: &MultimodalBatch,
    rng: &mut R,
) -> Result<Branches> {
    let z = f.forward_before(tape, batch)?;
    let original = f.forward_after(tape, &z, Mode::Train, rng)?;
    let aug = g.augment(tape, &z, Mode::Train, rng)?;
    let augmented = f.forward_after(tape, &aug.features, Mode::Train, rng)?;
    Ok(Branches {
        z,
        original,
        augmented_features: aug.features,
        augmented,
        kl: aug.kl,
    })
}

/// Task loss on augmented features using the same forward sequence (and
/// therefore the same random draws for a given rng state) as the
/// augmentation update.
pub fn augmented_task_loss<R: Rng + ?Sized>(
    f: &TaskNetwork,
    g: &AugmentationNetwork,
    batch: &MultimodalBatch,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let br = branches(&mut tape, f, g, batch, rng)?;
    let l = task_loss(&mut tape, br.augmented, batch)?;
    Ok(tape.value(l).item())
}

/// Augmentation-network update: ascend the task loss on augmented features
/// while staying consistent with confident original predictions. Only G's
/// parameters receive gradients or updates.
pub fn update_augmenter<R: Rng + ?Sized>(
    f: &TaskNetwork,
    g: &mut AugmentationNetwork,
    batch: &MultimodalBatch,
    config: &LemdaConfig,
    opt_g: &mut Optimizer,
    rng: &mut R,
    step_index: usize,
) -> Result<StepReport> {
    let w = config.weights;
    let mut tape = Tape::new();
    let br = branches(&mut tape, f, g, batch, rng)?;
    let probs = softmax_rows(tape.value(br.original));
    let mask = consistency_mask(&probs, w.alpha_conf);
    let mask_fraction = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;

    let loss_orig = task_loss(&mut tape, br.original, batch)?;
    let loss_aug = task_loss(&mut tape, br.augmented, batch)?;
    let cons = consistency_loss(&mut tape, br.original, br.augmented, &mask, config.kl_direction)?;
    let l2 = l2_regularizer_variant(&mut tape, &br.z, &br.augmented_features)?;

    let adv = tape.scale(loss_aug, -w.w1);
    let kl = tape.scale(br.kl, w.w3);
    let mut loss = tape.add(adv, kl)?;
    if config.regularizer.uses_consistency() {
        let c = tape.scale(cons, w.w2);
        loss = tape.add(loss, c)?;
    }
    if config.regularizer.uses_l2() {
        let c = tape.scale(l2, w.w2);
        loss = tape.add(loss, c)?;
    }

    let report = StepReport {
        step_index,
        task_loss_orig: tape.value(loss_orig).item(),
        task_loss_aug: tape.value(loss_aug).item(),
        consistency_loss: tape.value(if config.regularizer == Regularizer::L2 { l2 } else { cons }).item(),
        vae_kl: tape.value(br.kl).item(),
        mask_fraction,
    };
    report.check_finite()?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite {
            step: step_index,
            detail: "augmentation loss".into(),
        });
    }
    let grads = tape.backward(loss)?;
    let mut params = g.parameters_mut();
    grads.accumulate_into(params.iter_mut().map(|p| &mut **p));
    opt_g.step(&mut params)?;
    Ok(report)
}

/// Task-network update on a fresh forward pass:
/// `CE(ŷ) + CE(ŷ_G)`, with G held constant but differentiated through so
/// the encoders also learn from the augmented branch. Returns the two losses.
pub fn update_task<R: Rng + ?Sized>(
    f: &mut TaskNetwork,
    g: &AugmentationNetwork,
    batch: &MultimodalBatch,
    opt_f: &mut Optimizer,
    rng: &mut R,
    step_index: usize,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let br = branches(&mut tape, f, g, batch, rng)?;
    let lo = task_loss(&mut tape, br.original, batch)?;
    let la = task_loss(&mut tape, br.augmented, batch)?;
    let loss = tape.add(lo, la)?;
    let (vo, va) = (tape.value(lo).item(), tape.value(la).item());
    if !(vo.is_finite() && va.is_finite()) {
        return Err(Error::NonFinite {
            step: step_index,
            detail: format!("task update losses {vo} / {va}"),
        });
    }
    let grads = tape.backward(loss)?;
    let mut params = f.parameters_mut();
    grads.accumulate_into(params.iter_mut().map(|p| &mut **p));
    opt_f.step(&mut params)?;
    Ok((vo, va))
}

/// One iteration: augmentation update first (unless skipped by
/// `g_update_every`), then the task update.
#[allow(clippy::too_many_arguments)]
pub fn lemda_step<R: Rng + ?Sized>(
    f: &mut TaskNetwork,
    g: &mut AugmentationNetwork,
    batch: &MultimodalBatch,
    config: &LemdaConfig,
    opt_f: &mut Optimizer,
    opt_g: &mut Optimizer,
    rng: &mut R,
    step_index: usize,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let report = if step_index % config.g_update_every == 0 {
        Some(update_augmenter(f, g, batch, config, opt_g, rng, step_index)?)
    } else {
        None
    };
    let (orig, aug) = update_task(f, g, batch, opt_f, rng, step_index)?;
    Ok(report.unwrap_or(StepReport {
        step_index,
        task_loss_orig: orig,
        task_loss_aug: aug,
        ..StepReport::default()
    }))
}

/// Plain or baseline-augmented supervised step. Baselines replace the batch
/// (or the fusion-boundary features) with their augmented version.
pub fn baseline_step<R: Rng + ?Sized>(
    f: &mut TaskNetwork,
    spec: &BaselineSpec,
    batch: &MultimodalBatch,
    opt_f: &mut Optimizer,
    rng: &mut R,
    step_index: usize,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let specs = f.specs().to_vec();
    let toggles = spec.toggles(&specs);
    let classes = f.num_classes();
    let mut tape = Tape::new();
    let loss = match &spec.kind {
        BaselineKind::None => {
            let y = f.forward(&mut tape, batch, Mode::Train, rng)?;
            task_loss(&mut tape, y, batch)?
        }
        BaselineKind::InputAug => {
            let aug = input_augment(batch, &specs, &toggles, rng)?;
            let y = f.forward(&mut tape, &aug, Mode::Train, rng)?;
            task_loss(&mut tape, y, &aug)?
        }
        BaselineKind::Mixup { alpha } => {
            let partner = batch.select(&partner_permutation(batch.len(), rng));
            let aug = mixup_extended(batch, &partner, *alpha, classes, &toggles, rng)?;
            let y = f.forward(&mut tape, &aug, Mode::Train, rng)?;
            task_loss(&mut tape, y, &aug)?
        }
        BaselineKind::MixGen { lambda } => {
            let partner = batch.select(&partner_permutation(batch.len(), rng));
            let aug = mixgen_style(batch, &partner, *lambda, &specs, &toggles)?;
            let y = f.forward(&mut tape, &aug, Mode::Train, rng)?;
            task_loss(&mut tape, y, &aug)?
        }
        BaselineKind::ManifoldMixup { alpha } => {
            let partner = batch.select(&partner_permutation(batch.len(), rng));
            let lambda = sample_lambda(*alpha, rng)?;
            let za = f.forward_before(&mut tape, batch)?;
            let zb = f.forward_before(&mut tape, &partner)?;
            let mut mixed = Vec::with_capacity(za.len());
            for ((a, b), &on) in za.iter().zip(&zb).zip(&toggles) {
                if on {
                    let sa = tape.scale(*a, lambda);
                    let sb = tape.scale(*b, 1.0 - lambda);
                    mixed.push(tape.add(sa, sb)?);
                } else {
                    mixed.push(*a);
                }
            }
            let ta = targets(batch, classes);
            let tb = targets(&partner, classes);
            let soft = Tensor::new(
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect(),
            )?;
            let y = f.forward_after(&mut tape, &mixed, Mode::Train, rng)?;
            tape.soft_cross_entropy(y, &soft)?
        }
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            step: step_index,
            detail: format!("{} task loss {value}", spec.kind.name()),
        });
    }
    let grads = tape.backward(loss)?;
    let mut params = f.parameters_mut();
    grads.accumulate_into(params.iter_mut().map(|p| &mut **p));
    opt_f.step(&mut params)?;
    Ok(StepReport {
        step_index,
        task_loss_orig: value,
        ..StepReport::default()
    })
}

/// What, if anything, augments training.
#[derive(Clone, Debug)]
pub enum Augmentation {
    Baseline(BaselineSpec),
    Lemda {
        network: AugmentationNetwork,
        config: LemdaConfig,
    },
}

impl Augmentation {
    pub fn none() -> Self {
        Augmentation::Baseline(BaselineSpec {
            kind: BaselineKind::None,
            modalities: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr_f: f64,
    pub lr_g: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Restore the parameters of the best validation epoch at the end.
    pub restore_best: bool,
    /// Keep per-step reports in the history.
    pub verbose_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            optimizer: OptimizerKind::adam(),
            lr_f: 1e-3,
            lr_g: 1e-3,
            patience: None,
            restore_best: false,
            verbose_steps: false,
        }
    }
}

/// Fraction of rows predicted correctly in eval mode.
pub fn accuracy(f: &TaskNetwork, data: &MultimodalBatch) -> Result<f64> {
    let (pred, _) = f.predict(data)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Trains `f` on `train` for `config.epochs`, validating after every epoch
/// without augmentation.
pub fn train<R: Rng + ?Sized>(
    f: &mut TaskNetwork,
    augmentation: &mut Augmentation,
    train: &MultimodalBatch,
    val: &MultimodalBatch,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingHistory> {
    if train.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    if config.batch_size == 0 {
        return Err(Error::contract("batch_size must be >= 1"));
    }
    train.validate(f.specs())?;
    if !val.is_empty() {
        val.validate(f.specs())?;
    }
    let mut history = TrainingHistory::default();
    if config.epochs == 0 {
        return Ok(history);
    }
    let mut opt_f = Optimizer::new(config.optimizer, config.lr_f, f.param_set())?;
    let mut opt_g = match augmentation {
        Augmentation::Lemda { network, config: lc } => {
            lc.validate()?;
            if !network.param_set().is_disjoint(&f.param_set()) {
                return Err(Error::contract("augmentation and task networks share parameters"));
            }
            Some(Optimizer::new(config.optimizer, config.lr_g, network.param_set())?)
        }
        Augmentation::Baseline(spec) => {
            spec.validate()?;
            None
        }
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut since_best = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut sums = [0.0f64; 5];
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = train.select(chunk);
            let report = match augmentation {
                Augmentation::Baseline(spec) => baseline_step(f, spec, &batch, &mut opt_f, rng, step)?,
                Augmentation::Lemda { network, config: lc } => lemda_step(
                    f,
                    network,
                    &batch,
                    lc,
                    &mut opt_f,
                    opt_g.as_mut().expect("created above"),
                    rng,
                    step,
                )?,
            };
            for (s, v) in sums.iter_mut().zip([
                report.task_loss_orig,
                report.task_loss_aug,
                report.consistency_loss,
                report.vae_kl,
                report.mask_fraction,
            ]) {
                *s += v;
            }
            count += 1;
            if config.verbose_steps {
                history.steps.push(report);
            }
            step += 1;
        }
        let val_accuracy = if val.is_empty() { f64::NAN } else { accuracy(f, val)? };
        let n = count as f64;
        history.epochs.push(EpochRecord {
            epoch,
            train_task_loss: sums[0] / n,
            task_loss_aug: sums[1] / n,
            consistency: sums[2] / n,
            vae_kl: sums[3] / n,
            mask_fraction: sums[4] / n,
            val_accuracy,
        });
        let improved = best.as_ref().is_none_or(|(b, _)| val_accuracy > *b);
        if improved {
            let snapshot = if config.restore_best {
                f.parameters().iter().map(|p| p.value.clone()).collect()
            } else {
                Vec::new()
            };
            best = Some((val_accuracy, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if config.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    if let Some((acc, snapshot)) = best {
        history.best_val_accuracy = acc;
        if config.restore_best && !val.is_empty() {
            for (p, v) in f.parameters_mut().into_iter().zip(snapshot) {
                p.value = v;
            }
        }
    }
    Ok(history)
}
