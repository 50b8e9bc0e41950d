//! Training loops for the baselines and Mean Teacher, plus evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::{
    bce_full, bce_masked, combine, consistency_mse, default_mask, LossMask, LossOutput,
};
use crate::metrics::{auprc, macro_f1, Averaging, EvalTable};
use crate::network::{
    backward, forward, init_params, predict, AttentionMILParams, ForwardTrace, NoiseSpec,
};
use crate::optimizer::{adam_step, ema_update, AdamState};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Missing labels treated as negatives.
    B0,
    /// Missing labels masked out of the loss.
    B1,
    /// Two-stage label enhancing.
    LE,
    /// Mean Teacher.
    MT,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::B0, Method::B1, Method::LE, Method::MT];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "B0" => Ok(Method::B0),
            "B1" => Ok(Method::B1),
            "LE" => Ok(Method::LE),
            "MT" => Ok(Method::MT),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

/// Which Mean Teacher model is validated, selected and returned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModel {
    Student,
    #[default]
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub layers: usize,
    pub hidden: usize,
    pub seed: u64,
    /// EMA weight (MT).
    pub alpha: f64,
    /// Consistency weight (MT).
    pub beta: f64,
    /// Epochs of sigmoid ramp-up for beta; 0 keeps beta constant.
    pub beta_rampup_epochs: usize,
    /// Percentile for label enhancing thresholds (LE).
    pub gamma: f64,
    pub eval_model: EvalModel,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: Option<usize>,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::B1,
            epochs: 100,
            batch_size: 64,
            lr: 0.001,
            weight_decay: 1e-5,
            dropout_rate: 0.6,
            layers: 3,
            hidden: 128,
            seed: 0,
            alpha: 0.999,
            beta: 3.0,
            beta_rampup_epochs: 0,
            gamma: 10.0,
            eval_model: EvalModel::Teacher,
            patience: Some(20),
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    /// Instrument tagging hyperparameters: L 3, H 128, dropout 0.6,
    /// γ 10, α 0.999, β 3.
    pub fn openmic() -> Self {
        Self::default()
    }

    /// Urban sound tagging hyperparameters: L 1, H 512, dropout 0.6,
    /// γ 95, α 0.99, β 3.
    pub fn sonyc() -> Self {
        Self {
            layers: 1,
            hidden: 512,
            gamma: 95.0,
            alpha: 0.99,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.layers > 0 && self.hidden == 0 {
            return bad("hidden size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be nonnegative");
        }
        if !(0.0..=100.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 100]");
        }
        Ok(())
    }

    fn beta_at(&self, epoch: usize) -> f64 {
        if self.beta_rampup_epochs == 0 {
            return self.beta;
        }
        let x = (epoch as f64 / self.beta_rampup_epochs as f64).min(1.0);
        self.beta * (-5.0 * (1.0 - x) * (1.0 - x)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation loss of the model used for selection.
    pub val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss_student: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss_teacher: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the first minimum validation loss.
    pub selected: usize,
    pub wall_ms: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_metrics: Option<EvalResult>,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.selected].val_loss
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// State after one optimizer step, handed to a [`StepObserver`].
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub global_step: usize,
    pub loss: f64,
    pub student: &'a AttentionMILParams,
    pub teacher: Option<&'a AttentionMILParams>,
}

pub trait StepObserver {
    fn on_step(&mut self, info: &StepInfo<'_>);
}

impl<F: FnMut(&StepInfo<'_>)> StepObserver for F {
    fn on_step(&mut self, info: &StepInfo<'_>) {
        self(info)
    }
}

struct NoObserver;

impl StepObserver for NoObserver {
    fn on_step(&mut self, _: &StepInfo<'_>) {}
}

/// Supervised term of the training objective.
#[derive(Clone, Copy)]
pub(crate) enum Supervision<'a> {
    /// Every entry counts, Missing as negative.
    AllNegative,
    /// Only entries set in the mask count; Missing targets are negative.
    Masked(&'a LossMask),
}

impl Supervision<'_> {
    fn loss(&self, probs: &Array2<f64>, data: &Dataset, rows: &[usize]) -> Result<LossOutput> {
        let labels = data.labels().select_rows(rows);
        match self {
            Supervision::AllNegative => bce_full(probs.view(), labels.view()),
            Supervision::Masked(mask) => {
                bce_masked(probs.view(), labels.view(), &mask.select_rows(rows))
            }
        }
    }
}

pub(crate) struct Objective<'a> {
    pub supervision: Supervision<'a>,
    /// Validation uses the B0 policy instead of observed-only BCE.
    pub val_all_negative: bool,
    pub mean_teacher: bool,
}

pub(crate) struct Fit {
    pub student: AttentionMILParams,
    pub teacher: Option<AttentionMILParams>,
    pub report: TrainReport,
}

fn check_data(train: &Dataset, val: &Dataset) -> Result<usize> {
    let d = train
        .embed_dim()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    if val.embed_dim() != Some(d) || val.num_classes() != train.num_classes() {
        return Err(Error::DimensionMismatch(
            "train and validation sets differ in D or C".into(),
        ));
    }
    Ok(d)
}

fn stack_probs(traces: &[ForwardTrace], classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((traces.len(), classes));
    for (mut row, tr) in out.rows_mut().into_iter().zip(traces) {
        row.assign(&tr.clip_probs);
    }
    out
}

/// Clip probabilities for every clip, inference mode.
pub fn predict_all(
    params: &AttentionMILParams,
    data: &Dataset,
    execution: Execution,
) -> Result<Array2<f64>> {
    let rows = execution.map(data.embeddings(), |_, e| predict(params, e));
    let mut out = Array2::zeros((data.len(), data.num_classes()));
    for (mut row, p) in out.rows_mut().into_iter().zip(rows) {
        row.assign(&p?);
    }
    Ok(out)
}

fn validation_loss(
    params: &AttentionMILParams,
    val: &Dataset,
    all_negative: bool,
    execution: Execution,
) -> Result<f64> {
    let probs = predict_all(params, val, execution)?;
    let labels = val.labels().view();
    let out = if all_negative {
        bce_full(probs.view(), labels)?
    } else {
        bce_masked(probs.view(), labels, &default_mask(val.labels()))?
    };
    Ok(out.loss)
}

pub(crate) fn fit(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    objective: Objective<'_>,
    observer: &mut dyn StepObserver,
) -> Result<Fit> {
    config.validate()?;
    let embed_dim = check_data(train, val)?;
    if let Supervision::Masked(mask) = objective.supervision {
        if mask.dim() != (train.len(), train.num_classes()) {
            return Err(Error::ShapeMismatch(
                "loss mask does not match the training labels".into(),
            ));
        }
    }
    let started = Instant::now();
    let classes = train.num_classes();
    let exec = config.execution;

    let mut student = init_params(
        embed_dim,
        classes,
        config.layers,
        config.hidden,
        config.seed,
    )?;
    let mut teacher = objective.mean_teacher.then(|| student.clone());
    let mut adam = AdamState::new(&student, config.lr, config.weight_decay);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, AttentionMILParams, Option<AttentionMILParams>)> = None;
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let mut rng = seed::rng(seed::derive(
            config.seed,
            &[seed::TAG_SHUFFLE, epoch as u64],
        ));
        order.shuffle(&mut rng);
        let beta = config.beta_at(epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;

        for (batch, rows) in order.chunks(config.batch_size).enumerate() {
            let step_tag = global_step as u64;
            let noise = |stream: u64, pos: usize| NoiseSpec {
                dropout_rate: config.dropout_rate,
                seed: seed::derive(config.seed, &[stream, step_tag, pos as u64]),
            };
            let student_traces = exec
                .map(rows, |pos, &i| {
                    forward(
                        &student,
                        &train.embeddings()[i],
                        &noise(seed::TAG_DROPOUT_STUDENT, pos),
                        true,
                    )
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let student_probs = stack_probs(&student_traces, classes);
            let mut out = objective.supervision.loss(&student_probs, train, rows)?;

            if let Some(teacher) = &teacher {
                let teacher_probs = exec
                    .map(rows, |pos, &i| {
                        forward(
                            teacher,
                            &train.embeddings()[i],
                            &noise(seed::TAG_DROPOUT_TEACHER, pos),
                            true,
                        )
                        .map(|t| t.clip_probs)
                    })
                    .into_iter()
                    .collect::<Result<Vec<Array1<f64>>>>()?;
                let mut t = Array2::zeros(student_probs.dim());
                for (mut row, p) in t.rows_mut().into_iter().zip(&teacher_probs) {
                    row.assign(p);
                }
                let consistency = consistency_mse(student_probs.view(), t.view())?;
                out = combine(out, &consistency, beta);
            }
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }

            let grads = exec.map(&student_traces, |k, tr| {
                backward(&student, tr, &out.grad.row(k).to_owned())
            });
            let mut total = student.zeros_like();
            for g in grads {
                total.add_assign(&g?);
            }
            adam_step(&mut student, &total, &mut adam).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { epoch, batch },
                other => other,
            })?;
            if let Some(teacher) = &mut teacher {
                ema_update(teacher, &student, config.alpha)?;
            }

            observer.on_step(&StepInfo {
                epoch,
                batch,
                global_step,
                loss: out.loss,
                student: &student,
                teacher: teacher.as_ref(),
            });
            loss_sum += out.loss;
            batches += 1;
            global_step += 1;
        }

        let student_val = validation_loss(&student, val, objective.val_all_negative, exec)?;
        let teacher_val = teacher
            .as_ref()
            .map(|t| validation_loss(t, val, objective.val_all_negative, exec))
            .transpose()?;
        let val_loss = match (teacher_val, config.eval_model) {
            (Some(t), EvalModel::Teacher) => t,
            _ => student_val,
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            val_loss_student: teacher.as_ref().map(|_| student_val),
            val_loss_teacher: teacher_val,
        });
        log::debug!(
            "epoch {epoch}: train {:.5} val {val_loss:.5}",
            loss_sum / batches as f64
        );

        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, student.clone(), teacher.clone()));
        } else if let Some(patience) = config.patience {
            let since = epoch - best.as_ref().map_or(0, |b| b.1);
            if since >= patience {
                break;
            }
        }
    }

    let (_, selected, student, teacher) = best.expect("at least one epoch ran");
    Ok(Fit {
        student,
        teacher,
        report: TrainReport {
            method: config.method,
            epochs,
            selected,
            wall_ms: started.elapsed().as_millis() as u64,
            batch_size: config.batch_size,
            max_epochs: config.epochs,
            patience: config.patience,
            final_metrics: None,
        },
    })
}

/// B0 or B1 training. Returns the parameters of the best validation epoch.
pub fn train_baseline(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<(AttentionMILParams, TrainReport)> {
    train_baseline_observed(config, train, val, &mut NoObserver)
}

pub fn train_baseline_observed(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    observer: &mut dyn StepObserver,
) -> Result<(AttentionMILParams, TrainReport)> {
    let mask;
    let objective = match config.method {
        Method::B0 => Objective {
            supervision: Supervision::AllNegative,
            val_all_negative: true,
            mean_teacher: false,
        },
        Method::B1 => {
            mask = default_mask(train.labels());
            Objective {
                supervision: Supervision::Masked(&mask),
                val_all_negative: false,
                mean_teacher: false,
            }
        }
        other => {
            return Err(Error::Config(format!(
                "train_baseline needs B0 or B1, got {other}"
            )))
        }
    };
    let fit = fit(config, train, val, objective, observer)?;
    Ok((fit.student, fit.report))
}

#[derive(Clone, Debug)]
pub struct MeanTeacherOutcome {
    pub student: AttentionMILParams,
    pub teacher: AttentionMILParams,
    pub report: TrainReport,
}

impl MeanTeacherOutcome {
    /// The model named by `eval_model`.
    pub fn selected(&self, which: EvalModel) -> &AttentionMILParams {
        match which {
            EvalModel::Student => &self.student,
            EvalModel::Teacher => &self.teacher,
        }
    }
}

pub fn train_mean_teacher(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<MeanTeacherOutcome> {
    train_mean_teacher_observed(config, train, val, &mut NoObserver)
}

pub fn train_mean_teacher_observed(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    observer: &mut dyn StepObserver,
) -> Result<MeanTeacherOutcome> {
    if config.method != Method::MT {
        return Err(Error::Config(format!(
            "train_mean_teacher needs MT, got {}",
            config.method
        )));
    }
    let mask = default_mask(train.labels());
    let objective = Objective {
        supervision: Supervision::Masked(&mask),
        val_all_negative: false,
        mean_teacher: true,
    };
    let fit = fit(config, train, val, objective, observer)?;
    Ok(MeanTeacherOutcome {
        student: fit.student,
        teacher: fit.teacher.expect("mean teacher fit keeps a teacher"),
        report: fit.report,
    })
}

/// Trains a fresh model with observed-only BCE restricted to `mask`.
pub fn train_masked(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    mask: &LossMask,
) -> Result<(AttentionMILParams, TrainReport)> {
    let objective = Objective {
        supervision: Supervision::Masked(mask),
        val_all_negative: false,
        mean_teacher: false,
    };
    let fit = fit(config, train, val, objective, &mut NoObserver)?;
    Ok((fit.student, fit.report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSpec {
    pub f1_threshold: f64,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self { f1_threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub macro_f1: f64,
    pub per_class_f1: Vec<Option<f64>>,
    /// `None` when no class has both an observed positive and negative.
    pub auprc_micro: Option<f64>,
    pub auprc_macro: Option<f64>,
    pub auprc_skipped_classes: Vec<usize>,
}

impl EvalResult {
    /// `(name, value)` for the scalar metrics, in a fixed order.
    pub fn scalars(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("macro_f1", Some(self.macro_f1)),
            ("auprc_micro", self.auprc_micro),
            ("auprc_macro", self.auprc_macro),
        ]
    }
}

pub fn evaluate_scores(
    scores: &Array2<f64>,
    data: &Dataset,
    spec: &MetricsSpec,
) -> Result<EvalResult> {
    if data.labels().observed_count() == 0 {
        return Err(Error::NoObservedLabels);
    }
    let table = EvalTable::new(scores.view(), data.labels().view())?;
    let f1 = macro_f1(&table, spec.f1_threshold)?;
    let micro = auprc(&table, Averaging::Micro).ok();
    let macro_ = auprc(&table, Averaging::Macro).ok();
    Ok(EvalResult {
        macro_f1: f1.macro_f1,
        per_class_f1: f1.per_class,
        auprc_micro: micro.map(|r| r.value),
        auprc_skipped_classes: macro_.as_ref().map_or_else(
            || (0..data.num_classes()).collect(),
            |r| r.skipped_classes.clone(),
        ),
        auprc_macro: macro_.map(|r| r.value),
    })
}

/// Scores every clip and computes metrics over observed labels only.
pub fn evaluate(
    params: &AttentionMILParams,
    data: &Dataset,
    spec: &MetricsSpec,
) -> Result<EvalResult> {
    if data.labels().observed_count() == 0 {
        return Err(Error::NoObservedLabels);
    }
    let scores = predict_all(params, data, Execution::Parallel)?;
    evaluate_scores(&scores, data, spec)
}
