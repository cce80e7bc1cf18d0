//! The evaluation protocol: held-out dataset suites, per-dataset ROC AUC and
//! average precision over off-diagonal entries, per-size and per-family
//! aggregates, and flat exports for plotting.
//!
//! Evaluation seeds live in their own namespace (`eval/dataset`), disjoint
//! from the training batch stream by construction.

pub mod ablate;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scm::{generate_dataset_profiled, serialize_dataset, DataProfile, GraphFamily};
use crate::seeds::{derive_seed, NS_EVAL};

pub use ablate::{
    ablate_decoder_variants, ablate_encoder_variants, ablate_layers, AblationArm,
    AblationConfig, AblationReport,
};
pub use metrics::{average_precision, edge_lists, roc_auc};

/// The held-out evaluation suite: which datasets to generate and how big.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Feature sizes, evaluated in order.
    pub sizes: Vec<usize>,
    /// Datasets generated per size.
    pub datasets_per_size: usize,
    pub n_obs: usize,
    pub n_int: usize,
    /// Base seed of the `eval/dataset` namespace.
    pub seed: u64,
    /// Graph-family / mechanism / noise filter.
    pub profile: DataProfile,
}

impl EvalConfig {
    /// Desk-scale suite: 50 datasets at f=5 on linear-Gaussian Erdős–Rényi
    /// data, mirroring the desk training profile.
    pub fn desk(seed: u64) -> Self {
        Self {
            sizes: vec![5],
            datasets_per_size: 50,
            n_obs: 150,
            n_int: 150,
            seed,
            profile: DataProfile::linear_gaussian_er(),
        }
    }

    /// Paper-scale suite: 500 datasets split evenly over f ∈ {5, 7, 10, 15,
    /// 20}, 300 observational + 300 interventional samples each.
    pub fn paper(seed: u64) -> Self {
        Self {
            sizes: vec![5, 7, 10, 15, 20],
            datasets_per_size: 100,
            n_obs: 300,
            n_int: 300,
            seed,
            profile: DataProfile::full(),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.sizes.is_empty() || self.datasets_per_size == 0 {
            return Err(Error::Config("empty evaluation suite".into()));
        }
        for &f in &self.sizes {
            if f < 2 || f > model.decoder.f_max {
                return Err(Error::Config(format!(
                    "eval size {f} outside [2, {}]",
                    model.decoder.f_max
                )));
            }
        }
        if self.n_obs + self.n_int == 0 {
            return Err(Error::Config("eval datasets need at least one row".into()));
        }
        self.profile.validate()
    }
}

/// Per-dataset evaluation record. `None` metrics mean the dataset was
/// excluded as undefined (single-class ground truth) and counted, not
/// silently dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub seed: u64,
    pub f: usize,
    pub family: GraphFamily,
    pub roc_auc: Option<f64>,
    pub ap: Option<f64>,
}

/// Mean and standard error over the defined values of one metric.
/// `stderr` needs at least two values; `mean` at least one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
}

impl MetricSummary {
    fn over(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                n,
                mean: None,
                stderr: None,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = (n >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        });
        Self {
            n,
            mean: Some(mean),
            stderr,
        }
    }
}

/// Aggregates for one slice of the suite (a feature size, a graph family,
/// or everything).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub key: String,
    /// Records in the group, defined or not.
    pub records: usize,
    /// Records whose ROC AUC was undefined (single-class ground truth).
    pub excluded_roc_auc: usize,
    /// Records whose AP was undefined (edgeless ground truth).
    pub excluded_ap: usize,
    pub roc_auc: MetricSummary,
    pub ap: MetricSummary,
}

fn summarize_group(key: String, records: &[&DatasetRecord]) -> GroupSummary {
    let rocs: Vec<f64> = records.iter().filter_map(|r| r.roc_auc).collect();
    let aps: Vec<f64> = records.iter().filter_map(|r| r.ap).collect();
    GroupSummary {
        key,
        records: records.len(),
        excluded_roc_auc: records.len() - rocs.len(),
        excluded_ap: records.len() - aps.len(),
        roc_auc: MetricSummary::over(&rocs),
        ap: MetricSummary::over(&aps),
    }
}

/// Group records by size (in suite order), by family (in name order), and
/// overall.
pub(crate) fn summarize(
    sizes: &[usize],
    records: &[DatasetRecord],
) -> (Vec<GroupSummary>, Vec<GroupSummary>, GroupSummary) {
    let per_f = sizes
        .iter()
        .map(|&f| {
            let group: Vec<&DatasetRecord> = records.iter().filter(|r| r.f == f).collect();
            summarize_group(format!("f={f}"), &group)
        })
        .collect();
    let mut by_family: BTreeMap<&'static str, Vec<&DatasetRecord>> = BTreeMap::new();
    for record in records {
        by_family.entry(record.family.name()).or_default().push(record);
    }
    let per_family = by_family
        .into_iter()
        .map(|(name, group)| summarize_group(name.to_string(), &group))
        .collect();
    let all: Vec<&DatasetRecord> = records.iter().collect();
    let overall = summarize_group("overall".to_string(), &all);
    (per_f, per_family, overall)
}

/// The full evaluation result: per-dataset records plus their aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    /// SHA-256 over the serialized (dataset, graph) pairs, in suite order.
    /// Two reports with equal digests were computed on identical data.
    pub data_digest: String,
    pub records: Vec<DatasetRecord>,
    pub per_f: Vec<GroupSummary>,
    pub per_family: Vec<GroupSummary>,
    pub overall: GroupSummary,
}

/// One x/y series with symmetric error bars, the flat form plots consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub yerr: Vec<f64>,
}

impl EvalReport {
    /// Metric-versus-feature-size series (the suite-level comparison plot).
    /// Sizes whose group has no defined values are left out of the series.
    pub fn metric_vs_f(&self) -> Vec<PlotSeries> {
        let series = |name: &str, pick: fn(&GroupSummary) -> MetricSummary| {
            let mut x = Vec::new();
            let mut y = Vec::new();
            let mut yerr = Vec::new();
            for (size, group) in self.config.sizes.iter().zip(&self.per_f) {
                if let Some(mean) = pick(group).mean {
                    x.push(*size as f64);
                    y.push(mean);
                    yerr.push(pick(group).stderr.unwrap_or(0.0));
                }
            }
            PlotSeries {
                name: name.to_string(),
                x,
                y,
                yerr,
            }
        };
        vec![
            series("roc_auc", |g| g.roc_auc),
            series("ap", |g| g.ap),
        ]
    }

    /// Flat CSV, one row per scored dataset; a metric that is undefined for a
    /// row is an empty field. Datasets with no defined metric at all carry no
    /// row — they stay listed (as nulls) in the JSON records and are counted
    /// in every group's exclusion tallies.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,f,family,roc_auc,ap\n");
        for r in &self.records {
            if r.roc_auc.is_none() && r.ap.is_none() {
                continue;
            }
            let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.seed,
                r.f,
                r.family.name(),
                fmt(r.roc_auc),
                fmt(r.ap)
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Write `{stem}.json` and `{stem}.csv` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

/// Run the suite: generate each held-out dataset from its namespaced seed,
/// predict, score the off-diagonal entries, and aggregate.
pub fn evaluate(model: &Model, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate(model.config())?;
    let mut records = Vec::with_capacity(cfg.sizes.len() * cfg.datasets_per_size);
    let mut hasher = Sha256::new();
    for (si, &f) in cfg.sizes.iter().enumerate() {
        for di in 0..cfg.datasets_per_size {
            let index = (si * cfg.datasets_per_size + di) as u64;
            let seed = derive_seed(cfg.seed, NS_EVAL, index);
            let (dataset, dag, _) =
                generate_dataset_profiled(seed, f, cfg.n_obs, cfg.n_int, &cfg.profile)?;
            hasher.update(serialize_dataset(&dataset, &dag)?);

            let pred = model.predict(&dataset)?;
            let (scores, labels) = edge_lists(&pred.probs, &dag)?;
            let roc = match roc_auc(&scores, &labels) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            let ap = match average_precision(&scores, &labels) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            records.push(DatasetRecord {
                seed,
                f,
                family: dataset.meta.family,
                roc_auc: roc,
                ap,
            });
        }
    }
    let digest = hasher.finalize();
    let mut data_digest = String::with_capacity(64);
    for byte in digest {
        let _ = write!(data_digest, "{byte:02x}");
    }
    let (per_f, per_family, overall) = summarize(&cfg.sizes, &records);
    Ok(EvalReport {
        config: cfg.clone(),
        data_digest,
        records,
        per_f,
        per_family,
        overall,
    })
}
