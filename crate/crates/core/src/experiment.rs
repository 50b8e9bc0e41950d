//! Replicated experiments and the missing-label ablation.
//!
//! Every (method, drop fraction, replicate) triple is one independent run
//! with seed `seed_base + replicate`. Runs execute in parallel; their rows
//! are written in job order by a single writer, so `results.csv` depends
//! only on the spec.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{split_fixed_validation, split_train_val, Dataset, Split};
use crate::error::{Error, Result};
use crate::exec::{with_workers, Execution};
use crate::io::{read_clip_list, read_dataset, DatasetPaths};
use crate::label_enhance::{run_label_enhancing, LEConfig};
use crate::labels::{drop_labels, PartialLabelMatrix};
use crate::network::{write_checkpoint, AttentionMILParams};
use crate::synthetic::{generate_synthetic, SyntheticSpec};
use crate::trainers::{
    evaluate, train_baseline, train_mean_teacher, EvalResult, Method, MetricsSpec, TrainConfig,
    TrainReport,
};

pub const RESULTS_HEADER: [&str; 8] = [
    "run_id",
    "method",
    "drop_fraction",
    "replicate",
    "seed",
    "metric",
    "value",
    "status",
];

pub const SUMMARY_HEADER: [&str; 9] = [
    "method",
    "drop_fraction",
    "metric",
    "count",
    "mean",
    "std",
    "min",
    "median",
    "max",
];

const METRIC_NAMES: [&str; 3] = ["macro_f1", "auprc_micro", "auprc_macro"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Files {
        #[serde(flatten)]
        paths: DatasetPaths,
        /// Fixed validation clip list; defaults to `fixed_validation.csv`
        /// next to the splits file when that exists.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixed_validation: Option<PathBuf>,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: DatasetSource,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_replicates")]
    pub replicate_count: usize,
    #[serde(default)]
    pub seed_base: u64,
    /// Fractions of training labels removed; empty means no ablation.
    #[serde(default)]
    pub drop_fractions: Vec<f64>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub metrics: MetricsSpec,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Concurrent run slots; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_true")]
    pub save_artifacts: bool,
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_replicates() -> usize {
    5
}

fn default_val_fraction() -> f64 {
    0.15
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_true() -> bool {
    true
}

impl ExperimentSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_reader(File::open(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicate_count == 0 {
            return Err(Error::Config("replicate_count must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if let Some(f) = self
            .drop_fractions
            .iter()
            .find(|f| !(0.0..=1.0).contains(*f))
        {
            return Err(Error::Config(format!("drop fraction {f} outside [0, 1]")));
        }
        self.train.validate()
    }

    pub fn drop_grid(&self) -> Vec<f64> {
        if self.drop_fractions.is_empty() {
            vec![0.0]
        } else {
            self.drop_fractions.clone()
        }
    }

    /// SHA-256 over everything that affects results (not the output
    /// directory or worker count).
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.workers = 0;
        canonical.save_artifacts = false;
        canonical.train.execution = Execution::Parallel;
        let json = serde_json::to_vec(&canonical).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub method: Method,
    pub drop_fraction: f64,
    pub replicate: usize,
    pub seed: u64,
    pub metric: String,
    pub value: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub drop_fraction: String,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    #[serde(skip)]
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub failed_runs: usize,
}

impl ExperimentOutcome {
    pub fn success(&self) -> bool {
        self.failed_runs == 0
    }

    /// Mean of `metric` over successful replicates of one group.
    pub fn mean(&self, method: Method, drop_fraction: f64, metric: &str) -> Option<f64> {
        let method = method.to_string();
        let drop = drop_fraction.to_string();
        self.summary
            .iter()
            .find(|s| s.method == method && s.drop_fraction == drop && s.metric == metric)
            .map(|s| s.mean)
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    config_hash: &'a str,
    input_hashes: Vec<(String, String)>,
    test_labels_checksum: String,
    runs: usize,
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut f = File::open(path)?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Order-sensitive checksum of a label matrix.
pub fn labels_checksum(labels: &PartialLabelMatrix) -> String {
    let mut hasher = Sha256::new();
    hasher.update((labels.num_clips() as u64).to_le_bytes());
    hasher.update((labels.num_classes() as u64).to_le_bytes());
    for s in labels.view().iter() {
        hasher.update([s.code().unwrap_or(2)]);
    }
    hex::encode(hasher.finalize())
}

struct Loaded {
    dataset: Dataset,
    fixed_validation: Option<std::collections::HashSet<String>>,
    input_hashes: Vec<(String, String)>,
}

fn load(source: &DatasetSource) -> Result<Loaded> {
    match source {
        DatasetSource::Synthetic(spec) => {
            let (dataset, _) = generate_synthetic(spec)?;
            let digest = hex::encode(Sha256::digest(serde_json::to_vec(spec)?));
            Ok(Loaded {
                dataset,
                fixed_validation: None,
                input_hashes: vec![("synthetic".into(), digest)],
            })
        }
        DatasetSource::Files {
            paths,
            fixed_validation,
        } => {
            let dataset = read_dataset(paths)?;
            let sidecar = fixed_validation.clone().or_else(|| {
                let p = paths.splits.with_file_name("fixed_validation.csv");
                p.exists().then_some(p)
            });
            let mut input_hashes = paths
                .all()
                .iter()
                .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let fixed_validation = match &sidecar {
                Some(p) => {
                    input_hashes.push((p.display().to_string(), sha256_file(p)?));
                    Some(read_clip_list(p)?)
                }
                None => None,
            };
            Ok(Loaded {
                dataset,
                fixed_validation,
                input_hashes,
            })
        }
    }
}

#[derive(Clone, Copy)]
struct Job {
    method: Method,
    drop_fraction: f64,
    replicate: usize,
}

struct RunOutput {
    eval: EvalResult,
    params: AttentionMILParams,
    reports: Vec<(&'static str, TrainReport)>,
}

fn run_one(
    spec: &ExperimentSpec,
    loaded: &Loaded,
    test: &Dataset,
    job: Job,
    seed_value: u64,
    artifact_dir: Option<&Path>,
) -> Result<RunOutput> {
    let (train, val) = match &loaded.fixed_validation {
        Some(ids) => split_fixed_validation(&loaded.dataset, ids)?,
        None => split_train_val(&loaded.dataset, spec.val_fraction, seed_value)?,
    };
    let train = if job.drop_fraction > 0.0 {
        train.with_labels(drop_labels(train.labels(), job.drop_fraction, seed_value)?)?
    } else {
        train
    };
    let config = TrainConfig {
        method: job.method,
        seed: seed_value,
        ..spec.train.clone()
    };
    let (params, reports) = match job.method {
        Method::B0 | Method::B1 => {
            let (p, r) = train_baseline(&config, &train, &val)?;
            (p, vec![("model", r)])
        }
        Method::MT => {
            let out = train_mean_teacher(&config, &train, &val)?;
            let p = out.selected(config.eval_model).clone();
            (p, vec![("model", out.report)])
        }
        Method::LE => {
            let out = run_label_enhancing(&LEConfig::from_train_config(&config), &train, &val)?;
            if let Some(dir) = artifact_dir {
                out.write_artifacts(dir, &train)?;
            }
            (
                out.student,
                vec![
                    ("teacher", out.teacher_report),
                    ("model", out.student_report),
                ],
            )
        }
    };
    let eval = evaluate(&params, test, &spec.metrics)?;
    Ok(RunOutput {
        eval,
        params,
        reports,
    })
}

fn format_fraction(f: f64) -> String {
    f.to_string()
}

/// Runs the full method × drop fraction × replicate grid and writes
/// `results.csv`, `summary.csv`, `plot_data.json` and `provenance.json`
/// into the output directory.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let loaded = load(&spec.dataset)?;
    let test = loaded.dataset.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Config("dataset has no test clips".into()));
    }
    let test_checksum = labels_checksum(test.labels());
    let config_hash = spec.config_hash();

    let mut jobs = Vec::new();
    for &method in &spec.methods {
        for drop_fraction in spec.drop_grid() {
            for replicate in 0..spec.replicate_count {
                jobs.push(Job {
                    method,
                    drop_fraction,
                    replicate,
                });
            }
        }
    }

    fs::create_dir_all(&spec.out_dir)?;
    let run_id = |job: &Job| {
        format!(
            "{}-{}-d{}-r{}",
            &config_hash[..12],
            job.method,
            format_fraction(job.drop_fraction),
            job.replicate
        )
    };

    let outputs = with_workers(spec.workers, || {
        Execution::Parallel.map(&jobs, |_, job| {
            let seed_value = spec.seed_base + job.replicate as u64;
            let id = run_id(job);
            let artifact_dir = spec
                .save_artifacts
                .then(|| spec.out_dir.join("artifacts").join(&id));
            let out = run_one(
                spec,
                &loaded,
                &test,
                *job,
                seed_value,
                artifact_dir.as_deref(),
            );
            if let Err(e) = &out {
                log::error!("run {id} failed: {e}");
            }
            out
        })
    });
    if labels_checksum(test.labels()) != test_checksum {
        return Err(Error::Config(
            "test labels changed during the experiment".into(),
        ));
    }

    let mut rows = Vec::new();
    let mut failed_runs = 0;
    for (job, out) in jobs.iter().zip(&outputs) {
        let id = run_id(job);
        let seed_value = spec.seed_base + job.replicate as u64;
        let row = |metric: &str, value: Option<f64>, status: String| ResultRow {
            run_id: id.clone(),
            method: job.method,
            drop_fraction: job.drop_fraction,
            replicate: job.replicate,
            seed: seed_value,
            metric: metric.to_owned(),
            value,
            status,
        };
        match out {
            Ok(out) => {
                for (metric, value) in out.eval.scalars() {
                    let status = if value.is_some() { "ok" } else { "undefined" };
                    rows.push(row(metric, value, status.into()));
                }
                if spec.save_artifacts {
                    save_run_artifacts(&spec.out_dir, &id, out)?;
                }
            }
            Err(e) => {
                failed_runs += 1;
                for metric in METRIC_NAMES {
                    rows.push(row(metric, None, format!("failed: {e}")));
                }
            }
        }
    }

    let results_path = spec.out_dir.join("results.csv");
    write_results(&results_path, &rows)?;
    let summary = summarize_rows(&rows);
    write_summary(&spec.out_dir.join("summary.csv"), &summary)?;
    write_plot_data(&spec.out_dir.join("plot_data.json"), &summary)?;
    let provenance = Provenance {
        config_hash: &config_hash,
        input_hashes: loaded.input_hashes.clone(),
        test_labels_checksum: test_checksum,
        runs: jobs.len(),
    };
    fs::write(
        spec.out_dir.join("provenance.json"),
        serde_json::to_string_pretty(&provenance)?,
    )?;
    Ok(ExperimentOutcome {
        rows,
        summary,
        failed_runs,
    })
}

fn save_run_artifacts(out_dir: &Path, id: &str, out: &RunOutput) -> Result<()> {
    let reports = out_dir.join("reports");
    let checkpoints = out_dir.join("checkpoints");
    fs::create_dir_all(&reports)?;
    fs::create_dir_all(&checkpoints)?;
    for (stage, report) in &out.reports {
        let mut report = report.clone();
        if *stage == "model" {
            report.final_metrics = Some(out.eval.clone());
        }
        let name = if *stage == "model" {
            format!("{id}.json")
        } else {
            format!("{id}.{stage}.json")
        };
        fs::write(reports.join(name), report.to_json()?)?;
    }
    let mut w = BufWriter::new(File::create(checkpoints.join(format!("{id}.pllnet")))?);
    write_checkpoint(&mut w, &out.params)
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.method.to_string(),
            format_fraction(r.drop_fraction),
            r.replicate.to_string(),
            r.seed.to_string(),
            r.metric.clone(),
            r.value.map(|v| v.to_string()).unwrap_or_default(),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(RESULTS_HEADER) {
        return Err(Error::Malformed {
            line: 1,
            reason: format!("expected header {:?}", RESULTS_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let malformed = |what: &str| Error::Malformed {
            line,
            reason: format!("bad {what}"),
        };
        rows.push(ResultRow {
            run_id: rec[0].to_owned(),
            method: rec[1].parse()?,
            drop_fraction: rec[2].parse().map_err(|_| malformed("drop_fraction"))?,
            replicate: rec[3].parse().map_err(|_| malformed("replicate"))?,
            seed: rec[4].parse().map_err(|_| malformed("seed"))?,
            metric: rec[5].to_owned(),
            value: if rec[6].is_empty() {
                None
            } else {
                Some(rec[6].parse().map_err(|_| malformed("value"))?)
            },
            status: rec[7].to_owned(),
        });
    }
    Ok(rows)
}

fn stats(group: (String, String, String), mut values: Vec<f64>) -> SummaryRow {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    // Sample standard deviation; a single value has none.
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    values.shrink_to_fit();
    SummaryRow {
        method: group.0,
        drop_fraction: group.1,
        metric: group.2,
        count: n,
        mean,
        std,
        min: sorted[0],
        median,
        max: sorted[n - 1],
        values,
    }
}

/// Groups successful rows by (method, drop fraction, metric), in order of
/// first appearance.
pub fn summarize_rows(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: HashMap<(String, String, String), Vec<f64>> = HashMap::new();
    for r in rows {
        let Some(v) = r.value.filter(|_| r.status == "ok") else {
            continue;
        };
        let key = (
            r.method.to_string(),
            format_fraction(r.drop_fraction),
            r.metric.clone(),
        );
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(v);
    }
    order
        .into_iter()
        .map(|k| {
            let values = groups.remove(&k).expect("group recorded");
            stats(k, values)
        })
        .collect()
}

pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for s in summary {
        w.write_record([
            s.method.clone(),
            s.drop_fraction.clone(),
            s.metric.clone(),
            s.count.to_string(),
            s.mean.to_string(),
            s.std.to_string(),
            s.min.to_string(),
            s.median.to_string(),
            s.max.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PlotGroup<'a> {
    method: &'a str,
    drop_fraction: &'a str,
    metric: &'a str,
    values: &'a [f64],
}

pub fn write_plot_data(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let groups: Vec<PlotGroup<'_>> = summary
        .iter()
        .map(|s| PlotGroup {
            method: &s.method,
            drop_fraction: &s.drop_fraction,
            metric: &s.metric,
            values: &s.values,
        })
        .collect();
    fs::write(
        path,
        serde_json::to_string_pretty(&serde_json::json!({ "groups": groups }))?,
    )?;
    Ok(())
}

/// Reads `results.csv`, writes the grouped summary and optional plot data.
pub fn summarize(
    results_csv: &Path,
    summary_csv: &Path,
    plot_json: Option<&Path>,
) -> Result<Vec<SummaryRow>> {
    let rows = read_results(results_csv)?;
    let summary = summarize_rows(&rows);
    write_summary(summary_csv, &summary)?;
    if let Some(p) = plot_json {
        write_plot_data(p, &summary)?;
    }
    Ok(summary)
}
