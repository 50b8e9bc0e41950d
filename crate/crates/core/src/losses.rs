//! Training objectives over batch×C clip probabilities.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelState, PartialLabelMatrix};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Binary indicators of which label entries enter the supervised loss.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask(Array2<bool>);

impl LossMask {
    pub fn new(mask: Array2<bool>) -> Self {
        Self(mask)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self(Array2::from_elem((rows, cols), true))
    }

    pub fn view(&self) -> ArrayView2<'_, bool> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.0[[row, col]]
    }

    pub fn count_active(&self) -> usize {
        self.0.iter().filter(|m| **m).count()
    }

    pub fn density(&self) -> f64 {
        self.count_active() as f64 / self.0.len().max(1) as f64
    }

    /// Number of zeros in each column.
    pub fn zeros_per_class(&self) -> Vec<usize> {
        self.0
            .axis_iter(Axis(1))
            .map(|col| col.iter().filter(|m| !**m).count())
            .collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self(self.0.select(Axis(0), rows))
    }
}

/// Scalar loss and its gradient with respect to the probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn target(state: LabelState) -> f64 {
    if state == LabelState::Positive {
        1.0
    } else {
        0.0
    }
}

fn bce_term(p: f64, y: f64) -> f64 {
    if y > 0.5 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn check_shapes(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean BCE over every entry, Missing treated as negative.
pub fn bce_full(probs: ArrayView2<f64>, labels: ArrayView2<LabelState>) -> Result<LossOutput> {
    check_shapes("probabilities vs labels", probs.dim(), labels.dim())?;
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scale = 1.0 / probs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(probs.dim());
    Zip::from(&mut grad)
        .and(&probs)
        .and(&labels)
        .for_each(|g, &p, &s| {
            let (p, y) = (clamp(p), target(s));
            loss += bce_term(p, y);
            *g = (p - y) / (p * (1.0 - p)) * scale;
        });
    Ok(LossOutput {
        loss: loss * scale,
        grad,
    })
}

/// BCE averaged over entries where `mask` is set; Missing targets are 0.
/// An empty mask gives zero loss and zero gradient.
pub fn bce_masked(
    probs: ArrayView2<f64>,
    labels: ArrayView2<LabelState>,
    mask: &LossMask,
) -> Result<LossOutput> {
    check_shapes("probabilities vs labels", probs.dim(), labels.dim())?;
    check_shapes("probabilities vs mask", probs.dim(), mask.dim())?;
    let count = mask.count_active();
    let mut grad = Array2::zeros(probs.dim());
    if count == 0 {
        return Ok(LossOutput { loss: 0.0, grad });
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    Zip::from(&mut grad)
        .and(&probs)
        .and(&labels)
        .and(&mask.0)
        .for_each(|g, &p, &s, &m| {
            if m {
                let (p, y) = (clamp(p), target(s));
                loss += bce_term(p, y);
                *g = (p - y) / (p * (1.0 - p)) * scale;
            }
        });
    Ok(LossOutput {
        loss: loss * scale,
        grad,
    })
}

/// Observed entries only.
pub fn default_mask(labels: &PartialLabelMatrix) -> LossMask {
    LossMask(labels.view().mapv(LabelState::is_observed))
}

/// Mean squared difference; the teacher side is a constant.
pub fn consistency_mse(student: ArrayView2<f64>, teacher: ArrayView2<f64>) -> Result<LossOutput> {
    check_shapes("student vs teacher", student.dim(), teacher.dim())?;
    if student.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scale = 1.0 / student.len() as f64;
    let diff = &student - &teacher;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale;
    Ok(LossOutput {
        loss,
        grad: diff * (2.0 * scale),
    })
}

pub fn combined_loss(supervised: f64, consistency: f64, beta: f64) -> f64 {
    supervised + beta * consistency
}

/// `supervised + beta · consistency`, values and gradients alike.
pub fn combine(supervised: LossOutput, consistency: &LossOutput, beta: f64) -> LossOutput {
    let mut grad = supervised.grad;
    Zip::from(&mut grad)
        .and(&consistency.grad)
        .for_each(|g, c| *g += beta * c);
    LossOutput {
        loss: combined_loss(supervised.loss, consistency.loss, beta),
        grad,
    }
}
