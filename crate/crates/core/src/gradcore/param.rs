use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A trainable tensor together with its accumulated gradient.
///
/// Cloning keeps the id: a clone is a snapshot of the same logical parameter.
#[derive(Clone, Debug)]
pub struct Parameter {
    id: ParamId,
    name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(Tensor::zeros(self.value.shape()));
    }
}

/// Anything that owns trainable parameters.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn param_set(&self) -> ParamSet {
        ParamSet(self.parameters().iter().map(|p| p.id()).collect())
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.value.numel()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }
}

/// A set of parameter identities, used for optimizer registration.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamSet(pub BTreeSet<ParamId>);

impl ParamSet {
    pub fn contains(&self, id: ParamId) -> bool {
        self.0.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_disjoint(&self, other: &ParamSet) -> bool {
        self.0.is_disjoint(&other.0)
    }
}

impl FromIterator<ParamId> for ParamSet {
    fn from_iter<I: IntoIterator<Item = ParamId>>(iter: I) -> Self {
        ParamSet(iter.into_iter().collect())
    }
}
