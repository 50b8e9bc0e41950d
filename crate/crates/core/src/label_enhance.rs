//! Two-stage label enhancing.
//!
//! A teacher trained with missing labels as negatives scores the training
//! set. Per class, the γ-th percentile of the teacher's scores on missing
//! entries becomes a threshold τ, and every missing entry scoring at or
//! above τ is masked out of the loss (a suspected missing positive). A
//! fresh student then trains on the remaining entries, surviving missing
//! entries counting as negatives.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::labels::LabelState;
use crate::losses::LossMask;
use crate::network::{write_checkpoint, AttentionMILParams};
use crate::seed;
use crate::trainers::{
    predict_all, train_baseline, train_masked, Method, TrainConfig, TrainReport,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LEConfig {
    pub gamma: f64,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
}

impl LEConfig {
    /// Teacher and student share hyperparameters; the student gets its own
    /// derived seed.
    pub fn from_train_config(config: &TrainConfig) -> Self {
        Self {
            gamma: config.gamma,
            teacher: TrainConfig {
                method: Method::B0,
                ..config.clone()
            },
            student: TrainConfig {
                method: Method::LE,
                seed: seed::derive(config.seed, &[seed::TAG_LE_STUDENT]),
                ..config.clone()
            },
        }
    }
}

/// Nearest-rank γ-percentile of each class's scores on missing entries.
/// Classes without missing entries get `+∞`, which masks nothing.
pub fn class_thresholds(
    teacher_scores: ArrayView2<f64>,
    labels: ArrayView2<LabelState>,
    gamma: f64,
) -> Result<Vec<f64>> {
    if teacher_scores.dim() != labels.dim() {
        return Err(Error::ShapeMismatch(format!(
            "scores {:?} vs labels {:?}",
            teacher_scores.dim(),
            labels.dim()
        )));
    }
    if !(0.0..=100.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "gamma {gamma} outside [0, 100]"
        )));
    }
    if teacher_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("teacher scores".into()));
    }
    let tau = teacher_scores
        .columns()
        .into_iter()
        .zip(labels.columns())
        .map(|(scores, states)| {
            let mut missing: Vec<f64> = scores
                .iter()
                .zip(states)
                .filter(|(_, s)| **s == LabelState::Missing)
                .map(|(v, _)| *v)
                .collect();
            if missing.is_empty() {
                return f64::INFINITY;
            }
            missing.sort_by(f64::total_cmp);
            let n = missing.len();
            let rank = ((gamma * n as f64) / 100.0).ceil() as usize;
            missing[rank.clamp(1, n) - 1]
        })
        .collect();
    Ok(tau)
}

/// Zero exactly where the label is missing and the score is at least τ.
pub fn enhance_mask(
    labels: ArrayView2<LabelState>,
    teacher_scores: ArrayView2<f64>,
    tau: &[f64],
) -> Result<LossMask> {
    if teacher_scores.dim() != labels.dim() || tau.len() != labels.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "labels {:?}, scores {:?}, {} thresholds",
            labels.dim(),
            teacher_scores.dim(),
            tau.len()
        )));
    }
    let mut mask = Array2::from_elem(labels.dim(), true);
    Zip::indexed(&mut mask)
        .and(&labels)
        .and(&teacher_scores)
        .for_each(|(_, c), m, &state, &score| {
            if state == LabelState::Missing && score >= tau[c] {
                *m = false;
            }
        });
    Ok(LossMask::new(mask))
}

#[derive(Clone, Debug)]
pub struct LeOutcome {
    pub student: AttentionMILParams,
    pub student_report: TrainReport,
    pub teacher: AttentionMILParams,
    pub teacher_report: TrainReport,
    /// Inference-mode teacher scores on the training set.
    pub teacher_scores: Array2<f64>,
    pub tau: Vec<f64>,
    pub mask: LossMask,
}

pub fn run_label_enhancing(config: &LEConfig, train: &Dataset, val: &Dataset) -> Result<LeOutcome> {
    let (teacher, teacher_report) = train_baseline(&config.teacher, train, val)?;
    let teacher_scores = predict_all(&teacher, train, config.teacher.execution)?;
    let labels = train.labels().view();
    let tau = class_thresholds(teacher_scores.view(), labels, config.gamma)?;
    let mask = enhance_mask(labels, teacher_scores.view(), &tau)?;
    log::debug!(
        "label enhancing: tau {tau:?}, masked per class {:?}",
        mask.zeros_per_class()
    );
    let (student, student_report) = train_masked(&config.student, train, val, &mask)?;
    Ok(LeOutcome {
        student,
        student_report,
        teacher,
        teacher_report,
        teacher_scores,
        tau,
        mask,
    })
}

impl LeOutcome {
    /// Writes `teacher.pllnet`, `tau.csv` and `mask.csv` into `dir`.
    pub fn write_artifacts(&self, dir: &Path, train: &Dataset) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("teacher.pllnet"))?);
        write_checkpoint(&mut w, &self.teacher)?;

        let mut w = csv::Writer::from_path(dir.join("tau.csv"))?;
        w.write_record(["class_index", "tau"])?;
        for (c, t) in self.tau.iter().enumerate() {
            w.write_record([c.to_string(), t.to_string()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("mask.csv"))?;
        w.write_record(["clip_id", "class_index", "mask"])?;
        let (_, classes) = self.mask.dim();
        for (i, id) in train.clip_ids().enumerate() {
            for c in 0..classes {
                w.write_record([
                    id,
                    &c.to_string(),
                    if self.mask.get(i, c) { "1" } else { "0" },
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
