//! Named parameter storage with per-entry constraint tags.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::Real;

/// How an entry is kept feasible during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    Free,
    /// All values clamped at 0 after every optimizer step.
    NonNegative,
    /// The entry stores raw logits `r_k`; consumers map them through
    /// [`simplex_sub_one`], whose outputs always satisfy `w_k >= 0` and
    /// `sum w_k <= 1`. No projection is needed.
    SimplexSubOne,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<F: Real> {
    pub value: ArrayD<F>,
    pub constraint: Constraint,
}

/// Ordered name → tensor map. Iteration order is the lexicographic name
/// order, which keeps optimizer sweeps and serialization deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Real> {
    entries: BTreeMap<String, ParamEntry<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<F>, constraint: Constraint) {
        let previous = self
            .entries
            .insert(name.to_owned(), ParamEntry { value, constraint });
        assert!(previous.is_none(), "duplicate parameter '{name}'");
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<F>> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Re-establishes every entry's constraint after an optimizer step.
    pub fn apply_constraints(&mut self) {
        for entry in self.entries.values_mut() {
            if entry.constraint == Constraint::NonNegative {
                entry.value.mapv_inplace(|v| v.max(F::zero()));
            }
        }
    }
}

/// Maps raw logits to weights on the open sub-one simplex:
/// `w_k = exp(r_k) / (1 + sum_j exp(r_j))`, so `w_k > 0` and `sum w_k < 1`
/// for every finite input. A stabilizing shift keeps the exponentials
/// bounded.
pub fn simplex_sub_one<F: Real>(raw: &[F]) -> Vec<F> {
    let top = raw
        .iter()
        .fold(F::zero(), |acc, &r| acc.max(r))
        .max(F::zero());
    let scaled: Vec<F> = raw.iter().map(|&r| (r - top).exp()).collect();
    let denom = (-top).exp() + scaled.iter().copied().sum::<F>();
    scaled.into_iter().map(|e| e / denom).collect()
}
