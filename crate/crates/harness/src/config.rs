//! Flat `key = value` experiment configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' <anything>          (only as the first non-blank character)
//! entry   := key '=' value
//! value   := scalar | scalar (',' scalar)*   (lists: seeds, modality names, columns)
//! ```
//!
//! Values may be wrapped in double quotes. Unknown or repeated keys are
//! errors. `baseline` is accepted as an alias of `augmentation`, with
//! `lemda` meaning `lemda_mlp_vae`. [`ExperimentConfig::echo`] prints every
//! key in canonical order and parses back to an identical config.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lemda_core::augnet::{AttentionVaeConfig, MlpVaeConfig};
use lemda_core::baselines::{BaselineKind, BaselineSpec};
use lemda_core::datagen::FileFormat;
use lemda_core::gradcore::OptimizerKind;
use lemda_core::trainer::{KlDirection, LemdaConfig, LossWeights, Regularizer, TrainConfig};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Complementary,
    PerfectCorrelation,
    Ingest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentationChoice {
    None,
    InputAug,
    Mixup,
    ManifoldMixup,
    MixGen,
    LemdaMlpVae,
    LemdaAttentionVae,
}

impl AugmentationChoice {
    pub const ALL: [AugmentationChoice; 7] = [
        AugmentationChoice::None,
        AugmentationChoice::InputAug,
        AugmentationChoice::Mixup,
        AugmentationChoice::ManifoldMixup,
        AugmentationChoice::MixGen,
        AugmentationChoice::LemdaMlpVae,
        AugmentationChoice::LemdaAttentionVae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentationChoice::None => "none",
            AugmentationChoice::InputAug => "input_aug",
            AugmentationChoice::Mixup => "mixup",
            AugmentationChoice::ManifoldMixup => "manifold_mixup",
            AugmentationChoice::MixGen => "mixgen",
            AugmentationChoice::LemdaMlpVae => "lemda_mlp_vae",
            AugmentationChoice::LemdaAttentionVae => "lemda_attention_vae",
        }
    }

    pub fn is_lemda(self) -> bool {
        matches!(self, AugmentationChoice::LemdaMlpVae | AugmentationChoice::LemdaAttentionVae)
    }
}

impl fmt::Display for AugmentationChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentationChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "lemda" {
            return Ok(AugmentationChoice::LemdaMlpVae);
        }
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown augmentation `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Split sizes of the complementary generator.
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Size and class count of the perfect-correlation generator.
    pub n: usize,
    pub num_classes: usize,
    pub noise: f64,
    pub feature_dim: usize,
    pub path: Option<PathBuf>,
    pub format: Option<FileFormat>,
    pub label: String,
    pub numeric: Vec<String>,
    pub categorical: Vec<String>,
    pub text: Vec<String>,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWidths {
    pub encoder_hidden: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineParams {
    pub alpha: f64,
    pub lambda: f64,
    /// `None` augments every modality.
    pub modalities: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemdaParams {
    pub config: LemdaConfig,
    pub mlp: MlpVaeConfig,
    pub attention: AttentionVaeConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub network: NetworkWidths,
    pub augmentation: AugmentationChoice,
    pub baseline: BaselineParams,
    pub lemda: LemdaParams,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Seeds trained concurrently.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig {
                kind: DatasetKind::Complementary,
                train: 200,
                val: 100,
                test: 2000,
                n: 1000,
                num_classes: 4,
                noise: 0.7,
                feature_dim: lemda_core::datagen::DEFAULT_FEATURE_DIM,
                path: None,
                format: None,
                label: "label".into(),
                numeric: Vec::new(),
                categorical: Vec::new(),
                text: Vec::new(),
                max_len: 32,
            },
            network: NetworkWidths {
                encoder_hidden: 64,
                embed_dim: 16,
                head_hidden: 64,
                head_dropout: 0.0,
            },
            augmentation: AugmentationChoice::None,
            baseline: BaselineParams {
                alpha: 0.8,
                lambda: 0.5,
                modalities: None,
            },
            lemda: LemdaParams {
                config: LemdaConfig::default(),
                mlp: MlpVaeConfig::default(),
                attention: AttentionVaeConfig::default(),
            },
            train: TrainConfig {
                epochs: 100,
                ..TrainConfig::default()
            },
            seeds: vec![0],
            output_dir: PathBuf::from("lemda_out"),
            threads: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` expects a {}, got `{value}`", std::any::type_name::<T>()))
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn join(items: &[String]) -> String {
    items.join(", ")
}

fn optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn regularizer(s: &str) -> std::result::Result<Regularizer, String> {
    [
        Regularizer::None,
        Regularizer::Consistency,
        Regularizer::L2,
        Regularizer::ConsistencyL2,
    ]
    .into_iter()
    .find(|r| r.name() == s)
    .ok_or_else(|| format!("unknown regularizer `{s}`"))
}

fn kl_direction_name(d: KlDirection) -> &'static str {
    match d {
        KlDirection::OriginalFirst => "original_first",
        KlDirection::AugmentedFirst => "augmented_first",
    }
}

fn format_name(f: Option<FileFormat>) -> &'static str {
    match f {
        None => "auto",
        Some(FileFormat::Csv) => "csv",
        Some(FileFormat::JsonLines) => "jsonl",
    }
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| HarnessError::Config { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = match key.trim() {
                "baseline" => "augmentation",
                k => k,
            };
            let value = value.trim();
            let value = value
                .strip_prefix('"')
                .and_then(|v| v.strip_suffix('"'))
                .unwrap_or(value);
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            config.set(key, value).map_err(err)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let d = &mut self.dataset;
        let w = &mut self.lemda.config.weights;
        match key {
            "dataset" => {
                d.kind = match value {
                    "complementary" => DatasetKind::Complementary,
                    "perfect_correlation" => DatasetKind::PerfectCorrelation,
                    "ingest" => DatasetKind::Ingest,
                    _ => return Err(format!("unknown dataset `{value}`")),
                }
            }
            "dataset.train" => d.train = parse(key, value)?,
            "dataset.val" => d.val = parse(key, value)?,
            "dataset.test" => d.test = parse(key, value)?,
            "dataset.n" => d.n = parse(key, value)?,
            "dataset.num_classes" => d.num_classes = parse(key, value)?,
            "dataset.noise" => d.noise = parse(key, value)?,
            "dataset.feature_dim" => d.feature_dim = parse(key, value)?,
            "ingest.path" => d.path = (value != "none").then(|| PathBuf::from(value)),
            "ingest.format" => {
                d.format = match value {
                    "auto" => None,
                    "csv" => Some(FileFormat::Csv),
                    "jsonl" => Some(FileFormat::JsonLines),
                    _ => return Err(format!("unknown ingest format `{value}`")),
                }
            }
            "ingest.label" => d.label = value.to_string(),
            "ingest.numeric" => d.numeric = list(value),
            "ingest.categorical" => d.categorical = list(value),
            "ingest.text" => d.text = list(value),
            "ingest.max_len" => d.max_len = parse(key, value)?,
            "net.encoder_hidden" => self.network.encoder_hidden = parse(key, value)?,
            "net.embed_dim" => self.network.embed_dim = parse(key, value)?,
            "net.head_hidden" => self.network.head_hidden = parse(key, value)?,
            "net.head_dropout" => self.network.head_dropout = parse(key, value)?,
            "augmentation" => self.augmentation = value.parse()?,
            "baseline.alpha" => self.baseline.alpha = parse(key, value)?,
            "baseline.lambda" => self.baseline.lambda = parse(key, value)?,
            "baseline.modalities" => self.baseline.modalities = (value != "all").then(|| list(value)),
            "lemda.w1" => w.w1 = parse(key, value)?,
            "lemda.w2" => w.w2 = parse(key, value)?,
            "lemda.w3" => w.w3 = parse(key, value)?,
            "lemda.alpha_conf" => w.alpha_conf = parse(key, value)?,
            "lemda.regularizer" => self.lemda.config.regularizer = regularizer(value)?,
            "lemda.kl_direction" => {
                self.lemda.config.kl_direction = match value {
                    "original_first" => KlDirection::OriginalFirst,
                    "augmented_first" => KlDirection::AugmentedFirst,
                    _ => return Err(format!("unknown kl_direction `{value}`")),
                }
            }
            "lemda.g_update_every" => self.lemda.config.g_update_every = parse(key, value)?,
            "lemda.latent_dim" => {
                let v = parse(key, value)?;
                self.lemda.mlp.latent_dim = v;
                self.lemda.attention.latent_dim = v;
            }
            "lemda.hidden" => self.lemda.mlp.hidden = parse(key, value)?,
            "lemda.dropout" => self.lemda.mlp.dropout = parse(key, value)?,
            "lemda.attn_width" => self.lemda.attention.width = parse(key, value)?,
            "lemda.attn_layers" => self.lemda.attention.layers = parse(key, value)?,
            "lemda.attn_heads" => self.lemda.attention.heads = parse(key, value)?,
            "lemda.attn_ff" => self.lemda.attention.ff_width = parse(key, value)?,
            "lemda.attn_dropout" => self.lemda.attention.dropout = parse(key, value)?,
            "optim.kind" => {
                self.train.optimizer = match value {
                    "adam" => OptimizerKind::adam(),
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(format!("unknown optimizer `{value}`")),
                }
            }
            "optim.lr_f" => self.train.lr_f = parse(key, value)?,
            "optim.lr_g" => self.train.lr_g = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.patience" => {
                self.train.patience = if value == "none" { None } else { Some(parse(key, value)?) }
            }
            "train.restore_best" => self.train.restore_best = parse(key, value)?,
            "seeds" => {
                self.seeds = list(value)
                    .iter()
                    .map(|s| parse(key, s))
                    .collect::<std::result::Result<_, _>>()?
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            "threads" => self.threads = parse(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.dataset;
        let w = &self.lemda.config.weights;
        let m = &self.lemda.mlp;
        let a = &self.lemda.attention;
        let t = &self.train;
        vec![
            (
                "dataset",
                match d.kind {
                    DatasetKind::Complementary => "complementary",
                    DatasetKind::PerfectCorrelation => "perfect_correlation",
                    DatasetKind::Ingest => "ingest",
                }
                .to_string(),
            ),
            ("dataset.train", d.train.to_string()),
            ("dataset.val", d.val.to_string()),
            ("dataset.test", d.test.to_string()),
            ("dataset.n", d.n.to_string()),
            ("dataset.num_classes", d.num_classes.to_string()),
            ("dataset.noise", d.noise.to_string()),
            ("dataset.feature_dim", d.feature_dim.to_string()),
            ("ingest.path", optional(&d.path.as_ref().map(|p| p.display().to_string()))),
            ("ingest.format", format_name(d.format).to_string()),
            ("ingest.label", d.label.clone()),
            ("ingest.numeric", join(&d.numeric)),
            ("ingest.categorical", join(&d.categorical)),
            ("ingest.text", join(&d.text)),
            ("ingest.max_len", d.max_len.to_string()),
            ("net.encoder_hidden", self.network.encoder_hidden.to_string()),
            ("net.embed_dim", self.network.embed_dim.to_string()),
            ("net.head_hidden", self.network.head_hidden.to_string()),
            ("net.head_dropout", self.network.head_dropout.to_string()),
            ("augmentation", self.augmentation.to_string()),
            ("baseline.alpha", self.baseline.alpha.to_string()),
            ("baseline.lambda", self.baseline.lambda.to_string()),
            (
                "baseline.modalities",
                self.baseline.modalities.as_deref().map_or_else(|| "all".to_string(), join),
            ),
            ("lemda.w1", w.w1.to_string()),
            ("lemda.w2", w.w2.to_string()),
            ("lemda.w3", w.w3.to_string()),
            ("lemda.alpha_conf", w.alpha_conf.to_string()),
            ("lemda.regularizer", self.lemda.config.regularizer.name().to_string()),
            ("lemda.kl_direction", kl_direction_name(self.lemda.config.kl_direction).to_string()),
            ("lemda.g_update_every", self.lemda.config.g_update_every.to_string()),
            ("lemda.latent_dim", m.latent_dim.to_string()),
            ("lemda.hidden", m.hidden.to_string()),
            ("lemda.dropout", m.dropout.to_string()),
            ("lemda.attn_width", a.width.to_string()),
            ("lemda.attn_layers", a.layers.to_string()),
            ("lemda.attn_heads", a.heads.to_string()),
            ("lemda.attn_ff", a.ff_width.to_string()),
            ("lemda.attn_dropout", a.dropout.to_string()),
            (
                "optim.kind",
                match t.optimizer {
                    OptimizerKind::Sgd => "sgd",
                    OptimizerKind::Adam { .. } => "adam",
                }
                .to_string(),
            ),
            ("optim.lr_f", t.lr_f.to_string()),
            ("optim.lr_g", t.lr_g.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.patience", optional(&t.patience)),
            ("train.restore_best", t.restore_best.to_string()),
            (
                "seeds",
                self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", "),
            ),
            ("output_dir", self.output_dir.display().to_string()),
            ("threads", self.threads.to_string()),
        ]
    }

    /// The fully resolved config in the input grammar.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        let d = &self.dataset;
        if self.seeds.is_empty() {
            return bad("`seeds` must list at least one seed".into());
        }
        if self.threads == 0 {
            return bad("`threads` must be >= 1".into());
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return bad("`train.epochs` and `train.batch_size` must be >= 1".into());
        }
        for (name, lr) in [("optim.lr_f", self.train.lr_f), ("optim.lr_g", self.train.lr_g)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("`{name}` must be finite and > 0, got {lr}"));
            }
        }
        if !(d.noise.is_finite() && d.noise >= 0.0) {
            return bad(format!("`dataset.noise` must be finite and >= 0, got {}", d.noise));
        }
        if d.feature_dim == 0 {
            return bad("`dataset.feature_dim` must be >= 1".into());
        }
        match d.kind {
            DatasetKind::Complementary if d.train == 0 || d.test == 0 => {
                return bad("complementary dataset needs non-empty train and test splits".into())
            }
            DatasetKind::PerfectCorrelation if d.num_classes < 2 || d.n < 10 => {
                return bad("perfect_correlation needs num_classes >= 2 and n >= 10".into())
            }
            DatasetKind::Ingest if d.path.is_none() => return bad("dataset = ingest requires `ingest.path`".into()),
            _ => {}
        }
        if !(0.0..1.0).contains(&self.network.head_dropout) || !(0.0..1.0).contains(&self.lemda.mlp.dropout) {
            return bad("dropout probabilities must lie in [0, 1)".into());
        }
        let a = &self.lemda.attention;
        if a.heads == 0 || a.width % a.heads != 0 {
            return bad(format!("`lemda.attn_heads` ({}) must divide `lemda.attn_width` ({})", a.heads, a.width));
        }
        self.lemda.config.validate().map_err(|e| HarnessError::Invalid(e.to_string()))?;
        if let Some(spec) = self.baseline_spec() {
            spec.validate().map_err(|e| HarnessError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// The baseline to run, or `None` for LeMDA.
    pub fn baseline_spec(&self) -> Option<BaselineSpec> {
        let kind = match self.augmentation {
            AugmentationChoice::None => BaselineKind::None,
            AugmentationChoice::InputAug => BaselineKind::InputAug,
            AugmentationChoice::Mixup => BaselineKind::Mixup { alpha: self.baseline.alpha },
            AugmentationChoice::ManifoldMixup => BaselineKind::ManifoldMixup { alpha: self.baseline.alpha },
            AugmentationChoice::MixGen => BaselineKind::MixGen {
                lambda: self.baseline.lambda,
            },
            AugmentationChoice::LemdaMlpVae | AugmentationChoice::LemdaAttentionVae => return None,
        };
        Some(BaselineSpec {
            kind,
            modalities: self.baseline.modalities.as_ref().map(|m| m.iter().cloned().collect()),
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.lemda.config.weights
    }
}
