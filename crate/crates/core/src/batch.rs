use crate::error::{Error, Result};
use crate::fusionnet::{ModalityKind, ModalitySpec};
use crate::gradcore::Tensor;

/// Raw inputs of one modality for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum ModalityData {
    /// `[batch, dim]`.
    Continuous(Tensor),
    /// One token-id sequence per example.
    Tokens(Vec<Vec<usize>>),
    /// One code per categorical column per example.
    Categorical(Vec<Vec<usize>>),
}

impl ModalityData {
    pub fn len(&self) -> usize {
        match self {
            ModalityData::Continuous(t) => t.rows(),
            ModalityData::Tokens(s) | ModalityData::Categorical(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        match self {
            ModalityData::Continuous(t) => {
                let w = t.row_len();
                let mut data = Vec::with_capacity(indices.len() * w);
                for &i in indices {
                    data.extend_from_slice(t.row(i));
                }
                ModalityData::Continuous(Tensor::new(vec![indices.len(), w], data).expect("row select"))
            }
            ModalityData::Tokens(s) => ModalityData::Tokens(indices.iter().map(|&i| s[i].clone()).collect()),
            ModalityData::Categorical(s) => {
                ModalityData::Categorical(indices.iter().map(|&i| s[i].clone()).collect())
            }
        }
    }
}

/// Per-modality inputs plus labels for a mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalBatch {
    pub modalities: Vec<ModalityData>,
    pub labels: Vec<usize>,
    /// Mixed targets `[batch, classes]`; when present they replace `labels`
    /// in the task loss.
    pub soft_labels: Option<Tensor>,
}

impl MultimodalBatch {
    pub fn new(modalities: Vec<ModalityData>, labels: Vec<usize>) -> Self {
        Self {
            modalities,
            labels,
            soft_labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            modalities: self.modalities.iter().map(|m| m.select(indices)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            soft_labels: self.soft_labels.as_ref().map(|t| {
                let w = t.row_len();
                let data = indices.iter().flat_map(|&i| t.row(i).to_vec()).collect();
                Tensor::new(vec![indices.len(), w], data).expect("row select")
            }),
        }
    }

    /// Checks the batch against modality specs.
    pub fn validate(&self, specs: &[ModalitySpec]) -> Result<()> {
        if self.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if self.modalities.len() != specs.len() {
            return Err(Error::contract(format!(
                "batch has {} modalities, network expects {}",
                self.modalities.len(),
                specs.len()
            )));
        }
        for (data, spec) in self.modalities.iter().zip(specs) {
            if data.len() != self.len() {
                return Err(Error::contract(format!(
                    "modality `{}` has {} rows, batch has {} labels",
                    spec.name,
                    data.len(),
                    self.len()
                )));
            }
            match (data, &spec.kind) {
                (ModalityData::Continuous(t), ModalityKind::Continuous { dim }) => {
                    if t.shape().len() != 2 || t.shape()[1] != *dim {
                        return Err(Error::dim("modality input", t.shape(), &[self.len(), *dim]));
                    }
                }
                (ModalityData::Tokens(seqs), ModalityKind::Tokens { vocab_size, max_len }) => {
                    for s in seqs {
                        if s.len() > *max_len {
                            return Err(Error::contract(format!(
                                "modality `{}`: sequence of length {} exceeds max_len {max_len}",
                                spec.name,
                                s.len()
                            )));
                        }
                        if let Some(&t) = s.iter().find(|&&t| t >= *vocab_size) {
                            return Err(Error::Index {
                                op: "token id",
                                index: t,
                                bound: *vocab_size,
                            });
                        }
                    }
                }
                (ModalityData::Categorical(rows), ModalityKind::Categorical { cardinalities }) => {
                    for r in rows {
                        if r.len() != cardinalities.len() {
                            return Err(Error::dim("categorical row", &[r.len()], &[cardinalities.len()]));
                        }
                        for (&code, &card) in r.iter().zip(cardinalities) {
                            if code >= card {
                                return Err(Error::Index {
                                    op: "categorical code",
                                    index: code,
                                    bound: card,
                                });
                            }
                        }
                    }
                }
                _ => {
                    return Err(Error::contract(format!(
                        "modality `{}` data kind does not match its spec",
                        spec.name
                    )))
                }
            }
        }
        if let Some(s) = &self.soft_labels {
            if s.rows() != self.len() {
                return Err(Error::dim("soft labels", s.shape(), &[self.len()]));
            }
        }
        Ok(())
    }
}
