//! CSV / JSON-lines ingestion and CSV export.
//!
//! CSV dialect: comma separator, header in the first row, UTF-8, fields may be
//! double-quoted with `""` as an escaped quote.
//!
//! Modalities produced, in order: one continuous modality `numeric` holding
//! every numeric column (z-scored with train statistics), one categorical
//! modality `categorical` holding every categorical column (id 0 is the
//! unknown bucket, train values map to 1.. in sorted order), and one token
//! modality per text column (lowercased whitespace tokens, id 0 is
//! out-of-vocabulary, train vocabulary maps to 1.. in sorted order).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::{split_sizes, DatasetHandle, DEFAULT_FEATURE_DIM};
use crate::batch::{ModalityData, MultimodalBatch};
use crate::error::{Error, Result};
use crate::fusionnet::{ModalityKind, ModalitySpec};
use crate::gradcore::Tensor;
use crate::rng::splitmix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    JsonLines,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(FileFormat::Csv),
            Some("jsonl") | Some("json") | Some("ndjson") => Ok(FileFormat::JsonLines),
            _ => Err(Error::Schema(format!("cannot infer format of {}", path.display()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schema {
    pub label: String,
    pub numeric: Vec<String>,
    pub categorical: Vec<String>,
    pub text: Vec<String>,
    /// Text sequences are truncated to this many tokens.
    pub max_len: usize,
    /// Inferred from the file extension when `None`.
    pub format: Option<FileFormat>,
}

impl Schema {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            numeric: Vec::new(),
            categorical: Vec::new(),
            text: Vec::new(),
            max_len: 32,
            format: None,
        }
    }

    fn columns(&self) -> impl Iterator<Item = &String> {
        std::iter::once(&self.label)
            .chain(&self.numeric)
            .chain(&self.categorical)
            .chain(&self.text)
    }
}

/// Raw string cells of the schema columns, one `Vec` per row in
/// `Schema::columns` order.
fn read_rows(path: &Path, schema: &Schema) -> Result<Vec<Vec<String>>> {
    let format = match schema.format {
        Some(f) => f,
        None => FileFormat::from_path(path)?,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let wanted: Vec<&String> = schema.columns().collect();
    match format {
        FileFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
            let headers = reader.headers()?.clone();
            let positions = wanted
                .iter()
                .map(|c| {
                    headers
                        .iter()
                        .position(|h| h == c.as_str())
                        .ok_or_else(|| Error::Schema(format!("missing column `{c}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            for record in reader.records() {
                let record = record?;
                rows.push(positions.iter().map(|&p| record.get(p).unwrap_or("").to_string()).collect());
            }
            Ok(rows)
        }
        FileFormat::JsonLines => {
            let mut rows = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value = serde_json::from_str(&line)?;
                let obj = value
                    .as_object()
                    .ok_or_else(|| Error::Schema(format!("line {} is not a JSON object", i + 1)))?;
                let row = wanted
                    .iter()
                    .map(|c| match obj.get(c.as_str()) {
                        Some(serde_json::Value::String(s)) => Ok(s.clone()),
                        Some(serde_json::Value::Null) => Ok(String::new()),
                        Some(v) => Ok(v.to_string()),
                        None => Err(Error::Schema(format!("missing column `{c}` on line {}", i + 1))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                rows.push(row);
            }
            Ok(rows)
        }
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Reads a CSV or JSON-lines file into a dataset. Rows are split 80/10/10 by
/// sorting on a hash of `(seed, row index)`; normalization statistics,
/// category codes and vocabularies come from the train split only.
pub fn ingest_tabular_text(path: &Path, schema: &Schema, seed: u64) -> Result<DatasetHandle> {
    if schema.numeric.is_empty() && schema.categorical.is_empty() && schema.text.is_empty() {
        return Err(Error::Schema("schema names no feature columns".into()));
    }
    if schema.max_len == 0 {
        return Err(Error::Schema("max_len must be >= 1".into()));
    }
    let rows = read_rows(path, schema)?;
    let n = rows.len();
    if n == 0 {
        return Err(Error::contract(format!("{} has no data rows", path.display())));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (splitmix64(seed ^ i as u64), i));
    let (tr, va, _) = split_sizes(n);
    let train: Vec<usize> = {
        let mut v = order[..tr].to_vec();
        v.sort_unstable();
        v
    };
    let val: Vec<usize> = {
        let mut v = order[tr..tr + va].to_vec();
        v.sort_unstable();
        v
    };
    let test: Vec<usize> = {
        let mut v = order[tr + va..].to_vec();
        v.sort_unstable();
        v
    };
    if train.is_empty() {
        return Err(Error::contract("too few rows for a non-empty train split"));
    }

    let label_values: BTreeSet<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    if label_values.len() < 2 {
        return Err(Error::contract("the label column needs at least two distinct values"));
    }
    let label_ids: HashMap<&str, usize> = label_values.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let labels: Vec<usize> = rows.iter().map(|r| label_ids[r[0].as_str()]).collect();

    let mut specs = Vec::new();
    let mut modalities = Vec::new();
    let mut col = 1;

    if !schema.numeric.is_empty() {
        let k = schema.numeric.len();
        let mut values = vec![0.0; n * k];
        for (i, row) in rows.iter().enumerate() {
            for j in 0..k {
                let cell = row[col + j].trim();
                values[i * k + j] = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    row: i + 1,
                    column: schema.numeric[j].clone(),
                    value: cell.to_string(),
                })?;
            }
        }
        for j in 0..k {
            let m = train.len() as f64;
            let mean = train.iter().map(|&i| values[i * k + j]).sum::<f64>() / m;
            let var = train.iter().map(|&i| (values[i * k + j] - mean).powi(2)).sum::<f64>() / m;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..n {
                values[i * k + j] = (values[i * k + j] - mean) / std;
            }
        }
        specs.push(ModalitySpec::continuous("numeric", k, DEFAULT_FEATURE_DIM));
        modalities.push(ModalityData::Continuous(Tensor::new(vec![n, k], values)?));
        col += k;
    }

    if !schema.categorical.is_empty() {
        let k = schema.categorical.len();
        let mut cardinalities = Vec::with_capacity(k);
        let mut codes = vec![vec![0usize; k]; n];
        for j in 0..k {
            let seen: BTreeSet<&str> = train.iter().map(|&i| rows[i][col + j].as_str()).collect();
            let ids: HashMap<&str, usize> = seen.iter().enumerate().map(|(c, v)| (*v, c + 1)).collect();
            for (i, row) in rows.iter().enumerate() {
                codes[i][j] = ids.get(row[col + j].as_str()).copied().unwrap_or(0);
            }
            cardinalities.push(seen.len() + 1);
        }
        specs.push(ModalitySpec::categorical("categorical", cardinalities, DEFAULT_FEATURE_DIM));
        modalities.push(ModalityData::Categorical(codes));
        col += k;
    }

    for (j, name) in schema.text.iter().enumerate() {
        let tokens: Vec<Vec<String>> = rows.iter().map(|r| tokenize(&r[col + j])).collect();
        let vocab: BTreeSet<&str> = train.iter().flat_map(|&i| tokens[i].iter().map(String::as_str)).collect();
        let ids: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(c, v)| (*v, c + 1)).collect();
        let seqs = tokens
            .iter()
            .map(|t| t.iter().take(schema.max_len).map(|w| ids.get(w.as_str()).copied().unwrap_or(0)).collect())
            .collect();
        specs.push(ModalitySpec::tokens(name.clone(), vocab.len() + 1, schema.max_len, DEFAULT_FEATURE_DIM));
        modalities.push(ModalityData::Tokens(seqs));
    }

    let handle = DatasetHandle {
        specs,
        num_classes: label_values.len(),
        data: MultimodalBatch::new(modalities, labels),
        train,
        val,
        test,
        seed,
        description: format!("ingested {}", path.display()),
    };
    handle.validate()?;
    Ok(handle)
}

fn split_name(handle: &DatasetHandle) -> Vec<&'static str> {
    let mut names = vec![""; handle.len()];
    for (split, idx) in [("train", &handle.train), ("val", &handle.val), ("test", &handle.test)] {
        for &i in idx {
            names[i] = split;
        }
    }
    names
}

/// Writes a dataset as CSV with columns `split,label`, then per modality:
/// `<name>_<k>` for each continuous or categorical component, or `<name>` for
/// a token modality (space-separated token ids).
pub fn export_csv(handle: &DatasetHandle, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["split".to_string(), "label".to_string()];
    for spec in &handle.specs {
        match &spec.kind {
            ModalityKind::Continuous { dim } => header.extend((0..*dim).map(|k| format!("{}_{k}", spec.name))),
            ModalityKind::Categorical { cardinalities } => {
                header.extend((0..cardinalities.len()).map(|k| format!("{}_{k}", spec.name)))
            }
            ModalityKind::Tokens { .. } => header.push(spec.name.clone()),
        }
    }
    w.write_record(&header)?;
    let splits = split_name(handle);
    for i in 0..handle.len() {
        let mut rec = vec![splits[i].to_string(), handle.data.labels[i].to_string()];
        for m in &handle.data.modalities {
            match m {
                ModalityData::Continuous(t) => rec.extend(t.row(i).iter().map(|v| v.to_string())),
                ModalityData::Categorical(c) => rec.extend(c[i].iter().map(|v| v.to_string())),
                ModalityData::Tokens(s) => {
                    rec.push(s[i].iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "))
                }
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
