//! Tri-state label storage.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelState {
    Positive,
    Negative,
    Missing,
}

impl LabelState {
    pub fn is_observed(self) -> bool {
        self != LabelState::Missing
    }

    /// Binary code used in the labels file: 1 positive, 0 negative.
    pub fn code(self) -> Option<u8> {
        match self {
            LabelState::Positive => Some(1),
            LabelState::Negative => Some(0),
            LabelState::Missing => None,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(LabelState::Positive),
            0 => Some(LabelState::Negative),
            _ => None,
        }
    }
}

/// Rounds half away from zero. Every count derived from a fraction goes
/// through here.
pub fn round_count(x: f64) -> usize {
    x.round().max(0.0) as usize
}

/// N×C matrix of [`LabelState`].
///
/// Real datasets guarantee at least one observed label per row. Matrices
/// produced by ablation may break that guarantee and carry
/// `allow_unlabeled_rows`. The flag is a validation policy, not data, so it
/// does not take part in equality.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartialLabelMatrix {
    entries: Array2<LabelState>,
    allow_unlabeled_rows: bool,
}

impl PartialEq for PartialLabelMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl PartialLabelMatrix {
    pub fn new(entries: Array2<LabelState>, allow_unlabeled_rows: bool) -> Result<Self> {
        let m = Self {
            entries,
            allow_unlabeled_rows,
        };
        if !allow_unlabeled_rows {
            if let Some(row) = m.first_unlabeled_row() {
                return Err(Error::UnlabeledRow(row));
            }
        }
        Ok(m)
    }

    /// Builds a matrix, setting `allow_unlabeled_rows` only if some row needs it.
    pub fn new_permissive(entries: Array2<LabelState>) -> Self {
        let mut m = Self {
            entries,
            allow_unlabeled_rows: true,
        };
        m.allow_unlabeled_rows = m.first_unlabeled_row().is_some();
        m
    }

    pub fn filled(num_clips: usize, num_classes: usize, state: LabelState) -> Self {
        Self::new_permissive(Array2::from_elem((num_clips, num_classes), state))
    }

    pub fn num_clips(&self) -> usize {
        self.entries.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.entries.ncols()
    }

    pub fn allow_unlabeled_rows(&self) -> bool {
        self.allow_unlabeled_rows
    }

    pub fn get(&self, clip: usize, class: usize) -> LabelState {
        self.entries[[clip, class]]
    }

    pub fn view(&self) -> ArrayView2<'_, LabelState> {
        self.entries.view()
    }

    pub fn into_entries(self) -> Array2<LabelState> {
        self.entries
    }

    pub fn observed_count(&self) -> usize {
        self.entries.iter().filter(|s| s.is_observed()).count()
    }

    pub fn first_unlabeled_row(&self) -> Option<usize> {
        self.entries
            .axis_iter(Axis(0))
            .position(|row| !row.iter().any(|s| s.is_observed()))
    }

    /// Rows selected by `rows`, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            entries: self.entries.select(Axis(0), rows),
            allow_unlabeled_rows: self.allow_unlabeled_rows,
        }
    }
}

/// Fraction of the N·C entries that are observed.
pub fn label_coverage(labels: &PartialLabelMatrix) -> Result<f64> {
    let total = labels.num_clips() * labels.num_classes();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok(labels.observed_count() as f64 / total as f64)
}

/// Turns `round(fraction · observed_count)` observed entries, sampled
/// uniformly over all observed entries of the matrix, into `Missing`.
pub fn drop_labels(
    labels: &PartialLabelMatrix,
    fraction: f64,
    seed_value: u64,
) -> Result<PartialLabelMatrix> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidFraction(fraction, "[0, 1]"));
    }
    let observed: Vec<(usize, usize)> = labels
        .entries
        .indexed_iter()
        .filter(|(_, s)| s.is_observed())
        .map(|(ix, _)| ix)
        .collect();
    let k = round_count(fraction * observed.len() as f64).min(observed.len());
    let mut rng = seed::rng(seed::derive(seed_value, &[seed::TAG_DROP_LABELS]));
    let mut entries = labels.entries.clone();
    for i in index::sample(&mut rng, observed.len(), k) {
        entries[observed[i]] = LabelState::Missing;
    }
    Ok(PartialLabelMatrix {
        entries,
        allow_unlabeled_rows: true,
    })
}
