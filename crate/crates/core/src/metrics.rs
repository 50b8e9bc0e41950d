//! Macro F1 and micro/macro average precision, scored on observed labels only.

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelState;

/// Scores paired with tri-state labels of the same shape.
#[derive(Clone, Copy, Debug)]
pub struct EvalTable<'a> {
    scores: ArrayView2<'a, f64>,
    labels: ArrayView2<'a, LabelState>,
}

impl<'a> EvalTable<'a> {
    pub fn new(scores: ArrayView2<'a, f64>, labels: ArrayView2<'a, LabelState>) -> Result<Self> {
        if scores.dim() != labels.dim() {
            return Err(Error::ShapeMismatch(format!(
                "scores {:?} vs labels {:?}",
                scores.dim(),
                labels.dim()
            )));
        }
        Ok(Self { scores, labels })
    }

    pub fn num_classes(&self) -> usize {
        self.scores.ncols()
    }

    /// Observed `(score, is_positive)` pairs of one class.
    fn class_pairs(&self, class: usize) -> Vec<(f64, bool)> {
        self.scores
            .column(class)
            .iter()
            .zip(self.labels.column(class))
            .filter(|(_, s)| s.is_observed())
            .map(|(p, s)| (*p, *s == LabelState::Positive))
            .collect()
    }

    fn all_pairs(&self) -> Vec<(f64, bool)> {
        (0..self.num_classes())
            .flat_map(|c| self.class_pairs(c))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Result {
    pub macro_f1: f64,
    /// `None` for classes without any observed entry.
    pub per_class: Vec<Option<f64>>,
}

pub fn macro_f1(table: &EvalTable<'_>, threshold: f64) -> Result<F1Result> {
    let per_class: Vec<Option<f64>> = (0..table.num_classes())
        .map(|c| {
            let pairs = table.class_pairs(c);
            if pairs.is_empty() {
                return None;
            }
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (score, pos) in pairs {
                match (score >= threshold, pos) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
            let precision = if tp + fp > 0 {
                tp as f64 / (tp + fp) as f64
            } else {
                0.0
            };
            let recall = if tp + fneg > 0 {
                tp as f64 / (tp + fneg) as f64
            } else {
                0.0
            };
            Some(if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            })
        })
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::NoObservedLabels);
    }
    Ok(F1Result {
        macro_f1: scored.iter().sum::<f64>() / scored.len() as f64,
        per_class,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Micro,
    Macro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuprcResult {
    pub value: f64,
    /// Classes left out of the macro average for lacking a positive or a negative.
    pub skipped_classes: Vec<usize>,
}

/// Step-wise average precision `Σ (R_k − R_{k−1})·P_k` over the list ranked
/// by descending score. Tied scores form one group evaluated at its end.
/// `None` unless the list has at least one positive and one negative.
pub fn average_precision(pairs: &mut [(f64, bool)]) -> Option<f64> {
    let positives = pairs.iter().filter(|p| p.1).count();
    if positives == 0 || positives == pairs.len() {
        return None;
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let npos = positives as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let score = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == score {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / npos;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

pub fn auprc(table: &EvalTable<'_>, mode: Averaging) -> Result<AuprcResult> {
    match mode {
        Averaging::Micro => {
            let mut pairs = table.all_pairs();
            average_precision(&mut pairs)
                .map(|value| AuprcResult {
                    value,
                    skipped_classes: Vec::new(),
                })
                .ok_or(Error::NoScoreableClass)
        }
        Averaging::Macro => {
            let mut skipped = Vec::new();
            let mut aps = Vec::new();
            for c in 0..table.num_classes() {
                match average_precision(&mut table.class_pairs(c)) {
                    Some(ap) => aps.push(ap),
                    None => skipped.push(c),
                }
            }
            if aps.is_empty() {
                return Err(Error::NoScoreableClass);
            }
            if !skipped.is_empty() {
                log::warn!("AUPRC skipped classes {skipped:?} lacking a positive or a negative");
            }
            Ok(AuprcResult {
                value: aps.iter().sum::<f64>() / aps.len() as f64,
                skipped_classes: skipped,
            })
        }
    }
}

/// Number of observed entries in `labels` per class.
pub fn observed_per_class(labels: ArrayView2<LabelState>) -> Vec<usize> {
    labels
        .axis_iter(Axis(1))
        .map(|c| c.iter().filter(|s| s.is_observed()).count())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use LabelState::*;

    fn col(labels: &[LabelState], scores: &[f64]) -> (Array2<f64>, Array2<LabelState>) {
        let n = labels.len();
        (
            Array2::from_shape_vec((n, 1), scores.to_vec()).unwrap(),
            Array2::from_shape_vec((n, 1), labels.to_vec()).unwrap(),
        )
    }

    #[test]
    fn perfect_f1() {
        let labels = array![
            [Positive, Negative],
            [Negative, Positive],
            [Positive, Missing]
        ];
        let scores = labels.mapv(|s| if s == Positive { 1.0 } else { 0.0 });
        let t = EvalTable::new(scores.view(), labels.view()).unwrap();
        assert_eq!(macro_f1(&t, 0.5).unwrap().macro_f1, 1.0);
    }

    #[test]
    fn zero_recall_class() {
        let (s, l) = col(&[Positive, Negative], &[0.1, 0.2]);
        let t = EvalTable::new(s.view(), l.view()).unwrap();
        assert_eq!(macro_f1(&t, 0.5).unwrap().per_class, vec![Some(0.0)]);
    }

    #[test]
    fn hand_confusion_matrix() {
        let (s, l) = col(
            &[Positive, Positive, Negative, Negative],
            &[0.9, 0.4, 0.6, 0.1],
        );
        let t = EvalTable::new(s.view(), l.view()).unwrap();
        assert!((macro_f1(&t, 0.5).unwrap().macro_f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn f1_needs_observed_entries() {
        let (s, l) = col(&[Missing, Missing], &[0.9, 0.4]);
        let t = EvalTable::new(s.view(), l.view()).unwrap();
        assert!(matches!(macro_f1(&t, 0.5), Err(Error::NoObservedLabels)));
    }

    #[test]
    fn ap_examples() {
        let mut perfect = vec![(0.9, true), (0.8, true), (0.3, false)];
        assert_eq!(average_precision(&mut perfect), Some(1.0));

        let mut mixed = vec![(0.9, true), (0.7, false), (0.5, true), (0.2, false)];
        let ap = average_precision(&mut mixed).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);

        let mut constant = vec![(0.5, true), (0.5, false), (0.5, false), (0.5, false)];
        assert_eq!(average_precision(&mut constant), Some(0.25));
    }

    #[test]
    fn micro_equals_macro_for_one_class() {
        let (s, l) = col(
            &[Positive, Negative, Positive, Missing, Negative],
            &[0.3, 0.8, 0.6, 0.99, 0.1],
        );
        let t = EvalTable::new(s.view(), l.view()).unwrap();
        assert_eq!(
            auprc(&t, Averaging::Micro).unwrap().value,
            auprc(&t, Averaging::Macro).unwrap().value
        );
    }

    #[test]
    fn unscoreable_classes() {
        let labels = array![[Positive, Negative], [Negative, Negative]];
        let scores = array![[0.9, 0.1], [0.2, 0.3]];
        let t = EvalTable::new(scores.view(), labels.view()).unwrap();
        let r = auprc(&t, Averaging::Macro).unwrap();
        assert_eq!(r.skipped_classes, vec![1]);
        assert_eq!(r.value, 1.0);

        let labels = array![[Negative], [Negative]];
        let scores = array![[0.9], [0.1]];
        let t = EvalTable::new(scores.view(), labels.view()).unwrap();
        assert!(matches!(
            auprc(&t, Averaging::Macro),
            Err(Error::NoScoreableClass)
        ));
        assert!(matches!(
            auprc(&t, Averaging::Micro),
            Err(Error::NoScoreableClass)
        ));
    }

    #[test]
    fn monotone_transform_invariance() {
        let labels = array![
            [Positive, Negative],
            [Negative, Positive],
            [Positive, Positive],
            [Negative, Negative]
        ];
        let scores = array![[0.9, 0.2], [0.4, 0.7], [0.4, 0.1], [0.05, 0.3]];
        let squashed = scores.mapv(|v: f64| v.powi(3) * 0.5 + 0.1);
        for mode in [Averaging::Micro, Averaging::Macro] {
            let a = auprc(&EvalTable::new(scores.view(), labels.view()).unwrap(), mode).unwrap();
            let b = auprc(
                &EvalTable::new(squashed.view(), labels.view()).unwrap(),
                mode,
            )
            .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn random_ranking_concentrates_at_prevalence() {
        use rand::Rng;
        let mut rng = crate::seed::rng(3);
        let mut pairs: Vec<(f64, bool)> = (0..20000)
            .map(|_| (rng.random::<f64>(), rng.random::<f64>() < 0.2))
            .collect();
        let ap = average_precision(&mut pairs).unwrap();
        assert!((ap - 0.2).abs() < 0.03, "{ap}");
    }
}
