//! Seed sweeps and their output files.
//!
//! Files written to `output_dir`:
//!
//! | file | columns |
//! |------|---------|
//! | `metrics.csv` | `seed,augmentation,test_accuracy,test_roc_auc,best_val_accuracy,final_val_accuracy,epochs_run` |
//! | `curves.csv` | `seed,epoch,train_task_loss,task_loss_aug,consistency,vae_kl,mask_fraction,val_accuracy` |
//! | `summary.csv` | `augmentation,runs,mean_accuracy,std_accuracy,mean_roc_auc,std_roc_auc` |
//! | `timing.csv` | `seed,steps,seconds,steps_per_second` |
//! | `config.echo` | the resolved config |
//!
//! `test_roc_auc` is empty for tasks with more than two classes. Each seed
//! also gets `seed_<n>/curves.csv`. Everything except `timing.csv` is a pure
//! function of the config.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use lemda_core::augnet::{AttentionVae, AugmentationNetwork, MlpVae};
use lemda_core::datagen::{gen_complementary_split, gen_perfect_correlation, ingest_tabular_text, ComplementaryParams, DatasetHandle, Schema};
use lemda_core::fusionnet::{NetworkConfig, TaskNetwork};
use lemda_core::rng::derive;
use lemda_core::trainer::{accuracy, train, Augmentation, TrainingHistory, EPOCH_COLUMNS};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::error::{HarnessError, Result};

/// RNG stream ids derived from each seed.
pub(crate) const TASK_INIT_STREAM: u64 = 10;
pub(crate) const AUGMENTER_INIT_STREAM: u64 = 11;
pub(crate) const TRAIN_STREAM: u64 = 12;

pub const METRIC_COLUMNS: [&str; 7] = [
    "seed",
    "augmentation",
    "test_accuracy",
    "test_roc_auc",
    "best_val_accuracy",
    "final_val_accuracy",
    "epochs_run",
];

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_roc_auc: Option<f64>,
    pub best_val_accuracy: f64,
    pub final_val_accuracy: f64,
    pub epochs_run: usize,
    pub steps: usize,
    pub seconds: f64,
    pub history: TrainingHistory,
}

impl SeedResult {
    pub fn steps_per_second(&self) -> f64 {
        self.steps as f64 / self.seconds.max(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_roc_auc: Option<f64>,
    pub std_roc_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub augmentation: String,
    pub seeds: Vec<SeedResult>,
    pub summary: Summary,
    /// Mean over seeds of steps / wall-clock seconds.
    pub steps_per_second: f64,
    pub wall_clock_seconds: f64,
}

impl fmt::Display for RunResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>5} {:>18} {:>18}", "augmentation", "runs", "accuracy", "roc_auc")?;
        let s = &self.summary;
        let auc = match (s.mean_roc_auc, s.std_roc_auc) {
            (Some(m), Some(d)) => format!("{m:.4} ± {d:.4}"),
            _ => "-".into(),
        };
        write!(
            f,
            "{:<22} {:>5} {:>18} {:>18}",
            self.augmentation,
            s.runs,
            format!("{:.4} ± {:.4}", s.mean_accuracy, s.std_accuracy),
            auc
        )
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(results: &[SeedResult]) -> Summary {
    let acc: Vec<f64> = results.iter().map(|r| r.test_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&acc);
    let aucs: Option<Vec<f64>> = results.iter().map(|r| r.test_roc_auc).collect();
    let auc = aucs.filter(|a| !a.is_empty()).map(|a| mean_std(&a));
    Summary {
        runs: results.len(),
        mean_accuracy,
        std_accuracy,
        mean_roc_auc: auc.map(|a| a.0),
        std_roc_auc: auc.map(|a| a.1),
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic with tied scores
/// given their average rank. `None` when either class is absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn build_dataset(config: &ExperimentConfig, seed: u64) -> Result<DatasetHandle> {
    let d = &config.dataset;
    let handle = match d.kind {
        DatasetKind::Complementary => gen_complementary_split(
            ComplementaryParams {
                train: d.train,
                val: d.val,
                test: d.test,
                noise: d.noise,
            },
            seed,
        )?,
        DatasetKind::PerfectCorrelation => gen_perfect_correlation(d.n, d.num_classes, d.noise, seed)?,
        DatasetKind::Ingest => {
            let path = d.path.as_ref().ok_or_else(|| HarnessError::Invalid("missing ingest.path".into()))?;
            let schema = Schema {
                numeric: d.numeric.clone(),
                categorical: d.categorical.clone(),
                text: d.text.clone(),
                max_len: d.max_len,
                format: d.format,
                ..Schema::new(d.label.clone())
            };
            ingest_tabular_text(path, &schema, seed)?
        }
    };
    Ok(handle.with_feature_dim(d.feature_dim))
}

pub fn build_task_network(config: &ExperimentConfig, dataset: &DatasetHandle, seed: u64) -> Result<TaskNetwork> {
    let n = &config.network;
    let net = NetworkConfig {
        encoder_hidden: n.encoder_hidden,
        embed_dim: n.embed_dim,
        head_hidden: n.head_hidden,
        head_dropout: n.head_dropout,
        ..NetworkConfig::new(dataset.specs.clone(), dataset.num_classes)
    };
    Ok(TaskNetwork::new(net, &mut derive(seed, TASK_INIT_STREAM))?)
}

pub fn build_augmentation(config: &ExperimentConfig, f: &TaskNetwork, seed: u64) -> Result<Augmentation> {
    if let Some(spec) = config.baseline_spec() {
        return Ok(Augmentation::Baseline(spec));
    }
    let dims = f.feature_dims();
    let mut rng = derive(seed, AUGMENTER_INIT_STREAM);
    let network = match config.augmentation {
        crate::config::AugmentationChoice::LemdaAttentionVae => {
            AugmentationNetwork::Attention(AttentionVae::new(&dims, &config.lemda.attention, &mut rng)?)
        }
        _ => AugmentationNetwork::Mlp(MlpVae::new(&dims, &config.lemda.mlp, &mut rng)?),
    };
    Ok(Augmentation::Lemda {
        network,
        config: config.lemda.config.clone(),
    })
}

fn classify(seed: u64, err: lemda_core::Error) -> HarnessError {
    match err {
        lemda_core::Error::NonFinite { .. } => HarnessError::Divergence { seed, source: err },
        lemda_core::Error::Applicability { .. } => HarnessError::Invalid(err.to_string()),
        other => HarnessError::Core(other),
    }
}

/// Trains and evaluates one seed. Writes nothing.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let dataset = build_dataset(config, seed)?;
    let (train_set, val_set, test_set) = (dataset.train_batch(), dataset.val_batch(), dataset.test_batch());
    if test_set.is_empty() {
        return Err(HarnessError::Invalid("the test split is empty".into()));
    }
    let mut f = build_task_network(config, &dataset, seed)?;
    let mut augmentation = build_augmentation(config, &f, seed)?;
    let start = Instant::now();
    let history = train(
        &mut f,
        &mut augmentation,
        &train_set,
        &val_set,
        &config.train,
        &mut derive(seed, TRAIN_STREAM),
    )
    .map_err(|e| classify(seed, e))?;
    let seconds = start.elapsed().as_secs_f64();
    let steps = history.epochs.len() * train_set.len().div_ceil(config.train.batch_size);

    let test_accuracy = accuracy(&f, &test_set)?;
    let test_roc_auc = if dataset.num_classes == 2 {
        let probs = f.probabilities(&test_set)?;
        let scores: Vec<f64> = (0..test_set.len()).map(|i| probs.at(i, 1)).collect();
        let positive: Vec<bool> = test_set.labels.iter().map(|&l| l == 1).collect();
        roc_auc(&scores, &positive)
    } else {
        None
    };
    Ok(SeedResult {
        seed,
        test_accuracy,
        test_roc_auc,
        best_val_accuracy: history.best_val_accuracy,
        final_val_accuracy: history.final_val_accuracy().unwrap_or(f64::NAN),
        epochs_run: history.epochs.len(),
        steps,
        seconds,
        history,
    })
}

/// Runs every seed, `config.threads` at a time, and returns results in seed
/// order. A failing seed does not stop the others; the first error (in seed
/// order) is returned alongside the successful results.
pub fn evaluate(config: &ExperimentConfig) -> (Vec<SeedResult>, Option<HarnessError>) {
    let mut slots: Vec<Option<Result<SeedResult>>> = config.seeds.iter().map(|_| None).collect();
    for chunk in slots.chunks_mut(config.threads).zip(config.seeds.chunks(config.threads)) {
        let (out, seeds) = chunk;
        std::thread::scope(|s| {
            let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || run_seed(config, seed))).collect();
            for (slot, h) in out.iter_mut().zip(handles) {
                *slot = Some(h.join().unwrap_or_else(|_| Err(HarnessError::Invalid("seed worker panicked".into()))));
            }
        });
    }
    let mut results = Vec::new();
    let mut first_err = None;
    for slot in slots.into_iter().flatten() {
        match slot {
            Ok(r) => results.push(r),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    (results, first_err)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| HarnessError::io(path, e))
}

fn curves_rows(r: &SeedResult, with_seed: bool) -> String {
    let mut out = String::new();
    for e in &r.history.epochs {
        if with_seed {
            out.push_str(&format!("{},", r.seed));
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch, e.train_task_loss, e.task_loss_aug, e.consistency, e.vae_kl, e.mask_fraction, e.val_accuracy
        ));
    }
    out
}

fn write_outputs(config: &ExperimentConfig, results: &[SeedResult], summary: Option<&Summary>) -> Result<()> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write(&dir.join("config.echo"), &config.echo())?;

    let aug = config.augmentation.name();
    let mut metrics = METRIC_COLUMNS.join(",") + "\n";
    let mut curves = format!("seed,{}\n", EPOCH_COLUMNS.join(","));
    let mut timing = String::from("seed,steps,seconds,steps_per_second\n");
    for r in results {
        metrics.push_str(&format!(
            "{},{aug},{},{},{},{},{}\n",
            r.seed,
            r.test_accuracy,
            fmt_opt(r.test_roc_auc),
            r.best_val_accuracy,
            r.final_val_accuracy,
            r.epochs_run
        ));
        curves.push_str(&curves_rows(r, true));
        timing.push_str(&format!("{},{},{},{}\n", r.seed, r.steps, r.seconds, r.steps_per_second()));

        let seed_dir = dir.join(format!("seed_{}", r.seed));
        fs::create_dir_all(&seed_dir).map_err(|e| HarnessError::io(&seed_dir, e))?;
        write(
            &seed_dir.join("curves.csv"),
            &(EPOCH_COLUMNS.join(",") + "\n" + &curves_rows(r, false)),
        )?;
    }
    write(&dir.join("metrics.csv"), &metrics)?;
    write(&dir.join("curves.csv"), &curves)?;
    write(&dir.join("timing.csv"), &timing)?;
    if let Some(s) = summary {
        write(
            &dir.join("summary.csv"),
            &format!(
                "augmentation,runs,mean_accuracy,std_accuracy,mean_roc_auc,std_roc_auc\n{aug},{},{},{},{},{}\n",
                s.runs,
                s.mean_accuracy,
                s.std_accuracy,
                fmt_opt(s.mean_roc_auc),
                fmt_opt(s.std_roc_auc)
            ),
        )?;
    }
    Ok(())
}

/// Runs the seed sweep and writes its output files. On divergence the
/// completed seeds are still written before the error is returned.
pub fn run(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let start = Instant::now();
    let (results, err) = evaluate(config);
    if let Some(e) = err {
        if matches!(e, HarnessError::Divergence { .. }) {
            write_outputs(config, &results, None)?;
        }
        return Err(e);
    }
    let summary = summarize(&results);
    write_outputs(config, &results, Some(&summary))?;
    let steps_per_second = results.iter().map(SeedResult::steps_per_second).sum::<f64>() / results.len() as f64;
    Ok(RunResult {
        augmentation: config.augmentation.name().to_string(),
        seeds: results,
        summary,
        steps_per_second,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}
