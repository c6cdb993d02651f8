//! Ablation grids expanded from a base config.
//!
//! Every suite writes `ablation_<suite>.csv` into the base `output_dir` with
//! columns [`ABLATION_COLUMNS`], one row per cell.

use std::fmt;
use std::fs;
use std::str::FromStr;

use lemda_core::trainer::Regularizer;

use crate::config::{AugmentationChoice, DatasetKind, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::run::{build_dataset, evaluate, summarize};

pub const ABLATION_COLUMNS: [&str; 13] = [
    "suite",
    "dataset",
    "variant",
    "augmentation",
    "regularizer",
    "modalities",
    "w1",
    "w2",
    "w3",
    "alpha_conf",
    "mean_accuracy",
    "std_accuracy",
    "seeds",
];

/// `(w1, w2, w3)` combinations of the loss-weight grid.
pub const WEIGHT_GRID: [(f64, f64, f64); 6] = [
    (1e-4, 0.1, 0.1),
    (1e-4, 0.01, 0.01),
    (5e-3, 0.1, 0.1),
    (5e-3, 0.01, 0.01),
    (1e-3, 0.1, 0.1),
    (1e-3, 0.01, 0.01),
];

pub const CONFIDENCE_GRID: [f64; 4] = [0.0, 0.3, 0.5, 0.8];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Regularizer,
    Architecture,
    Confidence,
    Weights,
    SingleModality,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Regularizer,
        Suite::Architecture,
        Suite::Confidence,
        Suite::Weights,
        Suite::SingleModality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Regularizer => "regularizer",
            Suite::Architecture => "architecture",
            Suite::Confidence => "confidence",
            Suite::Weights => "weights",
            Suite::SingleModality => "single_modality",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| HarnessError::Invalid(format!("unknown ablation suite `{s}`")))
    }
}

/// One grid cell: a label and the config that produces it.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub variant: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub suite: Suite,
    pub dataset: String,
    pub variant: String,
    pub augmentation: AugmentationChoice,
    pub regularizer: Regularizer,
    pub modalities: String,
    pub weights: (f64, f64, f64),
    pub alpha_conf: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub seeds: usize,
}

fn lemda_base(base: &ExperimentConfig) -> ExperimentConfig {
    let mut c = base.clone();
    if !c.augmentation.is_lemda() {
        c.augmentation = AugmentationChoice::LemdaMlpVae;
    }
    c
}

fn dataset_name(c: &ExperimentConfig) -> &'static str {
    match c.dataset.kind {
        DatasetKind::Complementary => "complementary",
        DatasetKind::PerfectCorrelation => "perfect_correlation",
        DatasetKind::Ingest => "ingest",
    }
}

/// Expands the base config into the suite's cells.
pub fn expand(base: &ExperimentConfig, suite: Suite) -> Result<Vec<Cell>> {
    let cell = |variant: String, config: ExperimentConfig| Cell { variant, config };
    let cells = match suite {
        Suite::Regularizer => [
            Regularizer::None,
            Regularizer::Consistency,
            Regularizer::L2,
            Regularizer::ConsistencyL2,
        ]
        .into_iter()
        .map(|r| {
            let mut c = lemda_base(base);
            c.lemda.config.regularizer = r;
            cell(r.name().to_string(), c)
        })
        .collect(),
        Suite::Architecture => [
            AugmentationChoice::None,
            AugmentationChoice::LemdaMlpVae,
            AugmentationChoice::LemdaAttentionVae,
        ]
        .into_iter()
        .map(|a| {
            let mut c = base.clone();
            c.augmentation = a;
            cell(a.name().to_string(), c)
        })
        .collect(),
        Suite::Confidence => CONFIDENCE_GRID
            .into_iter()
            .map(|alpha| {
                let mut c = lemda_base(base);
                c.lemda.config.weights.alpha_conf = alpha;
                cell(format!("alpha={alpha}"), c)
            })
            .collect(),
        Suite::Weights => WEIGHT_GRID
            .into_iter()
            .map(|(w1, w2, w3)| {
                let mut c = lemda_base(base);
                let w = &mut c.lemda.config.weights;
                (w.w1, w.w2, w.w3) = (w1, w2, w3);
                cell(format!("w=({w1},{w2},{w3})"), c)
            })
            .collect(),
        Suite::SingleModality => {
            let seed = base.seeds.first().copied().unwrap_or(0);
            let names: Vec<String> = build_dataset(base, seed)?.specs.into_iter().map(|s| s.name).collect();
            let mut cells = Vec::new();
            for method in [
                AugmentationChoice::InputAug,
                AugmentationChoice::Mixup,
                AugmentationChoice::ManifoldMixup,
                AugmentationChoice::MixGen,
            ] {
                for target in names.iter().map(|n| Some(vec![n.clone()])).chain([None]) {
                    let mut c = base.clone();
                    c.augmentation = method;
                    let label = target.as_ref().map_or_else(|| "all".to_string(), |t| t.join("+"));
                    c.baseline.modalities = target;
                    cells.push(cell(format!("{}:{label}", method.name()), c));
                }
            }
            cells
        }
    };
    Ok(cells)
}

/// Runs every cell of the suite and writes the combined CSV.
pub fn ablation_suite(base: &ExperimentConfig, suite: Suite) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let mut rows = Vec::new();
    for Cell { variant, config } in expand(base, suite)? {
        let (results, err) = evaluate(&config);
        if let Some(e) = err {
            return Err(e);
        }
        let s = summarize(&results);
        let w = config.lemda.config.weights;
        rows.push(AblationRow {
            suite,
            dataset: dataset_name(&config).to_string(),
            variant,
            augmentation: config.augmentation,
            regularizer: config.lemda.config.regularizer,
            modalities: config.baseline.modalities.as_ref().map_or_else(|| "all".into(), |m| m.join("+")),
            weights: (w.w1, w.w2, w.w3),
            alpha_conf: w.alpha_conf,
            mean_accuracy: s.mean_accuracy,
            std_accuracy: s.std_accuracy,
            seeds: s.runs,
        });
    }
    let dir = &base.output_dir;
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let path = dir.join(format!("ablation_{}.csv", suite.name()));
    fs::write(&path, to_csv(&rows)).map_err(|e| HarnessError::io(&path, e))?;
    Ok(rows)
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = ABLATION_COLUMNS.join(",") + "\n";
    for r in rows {
        out.push_str(&format!(
            "{},{},\"{}\",{},{},{},{},{},{},{},{},{},{}\n",
            r.suite,
            r.dataset,
            r.variant,
            r.augmentation,
            r.regularizer.name(),
            r.modalities,
            r.weights.0,
            r.weights.1,
            r.weights.2,
            r.alpha_conf,
            r.mean_accuracy,
            r.std_accuracy,
            r.seeds
        ));
    }
    out
}
