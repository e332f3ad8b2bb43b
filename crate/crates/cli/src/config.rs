//! Experiment configuration files.

use std::path::{Path, PathBuf};

use nvqr_core::conformal::{methods, EvaluationSettings};
use nvqr_core::datasets::{generators, GeneratorOptions};
use nvqr_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const METRICS: [&str; 7] = ["w2", "sliced-w2", "kde-l1", "kde-kl", "l2-uv", "l2-uv-rank", "inference-ms"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub conformal: ConformalSpec,
    pub metrics: MetricsSpec,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            seeds: vec![0],
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            conformal: ConformalSpec::default(),
            metrics: MetricsSpec::default(),
            sweep: SweepSpec::default(),
        }
    }
}

/// A registered generator, or `csv` together with `path` and column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub name: String,
    pub n: usize,
    /// Train, calibration and test shares.
    pub splits: [f64; 3],
    pub path: Option<PathBuf>,
    pub x_columns: Vec<String>,
    pub y_columns: Vec<String>,
    pub options: GeneratorOptions,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            name: "banana".into(),
            n: 20_000,
            splits: [0.8, 0.1, 0.1],
            path: None,
            x_columns: Vec::new(),
            y_columns: Vec::new(),
            options: GeneratorOptions::default(),
        }
    }
}

impl DatasetSpec {
    pub fn is_csv(&self) -> bool {
        self.name.eq_ignore_ascii_case("csv")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConformalSpec {
    pub methods: Vec<String>,
    pub alphas: Vec<f64>,
    pub fit_fraction: f64,
    pub evaluation: EvaluationSettings,
}

impl Default for ConformalSpec {
    fn default() -> Self {
        Self {
            methods: vec!["pb".into(), "rpb".into(), "hpd".into(), "quantile".into()],
            alphas: vec![0.05, 0.1, 0.2],
            fit_fraction: 0.5,
            evaluation: EvaluationSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSpec {
    pub names: Vec<String>,
    /// Conditioning points at which model and truth samples are compared.
    pub conditions: usize,
    /// Samples per side at each conditioning point.
    pub samples: usize,
    pub projections: usize,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            names: vec!["sliced-w2".into()],
            conditions: 10,
            samples: 1000,
            projections: 256,
        }
    }
}

/// Sweep axes; an empty axis keeps the value from the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub datasets: Vec<String>,
    pub methods: Vec<String>,
    /// Funnel response dimensions.
    pub dimensions: Vec<usize>,
}

pub fn load(path: &Path) -> Result<ExperimentConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("cannot read config {}: {e}", path.display())])?;
    toml::from_str(&text).map_err(|e| vec![format!("{}: {e}", path.display())])
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("configuration serializes")
}

impl ExperimentConfig {
    /// Every problem found, in a stable order; empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.seeds.is_empty() {
            p.push("seeds must not be empty".into());
        }
        self.validate_dataset(&self.dataset, &mut p);
        match self.train.validate() {
            Ok(v) => p.extend(v.into_iter().map(|s| format!("train: {s}"))),
            Err(e) => p.push(format!("train: {e}")),
        }
        let registry = methods();
        for m in &self.conformal.methods {
            if !registry.contains(m) {
                p.push(format!(
                    "conformal: unknown method `{m}` (available: {})",
                    registry.names().join(", ")
                ));
            }
        }
        for a in &self.conformal.alphas {
            if !(*a > 0.0 && *a < 1.0) {
                p.push(format!("conformal: alpha {a} is outside (0, 1)"));
            }
        }
        if !(self.conformal.fit_fraction > 0.0 && self.conformal.fit_fraction < 1.0) {
            p.push("conformal: fit_fraction must lie in (0, 1)".into());
        }
        for m in &self.metrics.names {
            if !METRICS.contains(&m.as_str()) {
                p.push(format!("metrics: unknown metric `{m}` (available: {})", METRICS.join(", ")));
            } else if self.dataset.is_csv() && m != "inference-ms" {
                p.push(format!("metrics: `{m}` needs a synthetic dataset with a known conditional law"));
            } else if m.starts_with("l2-uv") && !self.dataset.name.starts_with("convex-") {
                p.push(format!("metrics: `{m}` needs a convex-* dataset with a ground-truth map"));
            }
        }
        if self.metrics.names.iter().any(|m| m == "w2") && self.metrics.samples > nvqr_core::metrics::MAX_EXACT_W2 {
            p.push(format!(
                "metrics: exact w2 supports at most {} samples",
                nvqr_core::metrics::MAX_EXACT_W2
            ));
        }
        if self.metrics.samples < 10 || self.metrics.conditions < 1 || self.metrics.projections < 1 {
            p.push("metrics: need samples ≥ 10, conditions ≥ 1 and projections ≥ 1".into());
        }
        for d in &self.sweep.datasets {
            let mut spec = self.dataset.clone();
            spec.name = d.clone();
            self.validate_dataset(&spec, &mut p);
        }
        let trainers = nvqr_core::training::trainers();
        for m in &self.sweep.methods {
            if !trainers.contains(m) {
                p.push(format!("sweep: unknown method `{m}`"));
            }
        }
        if !self.sweep.dimensions.is_empty() {
            let names = if self.sweep.datasets.is_empty() {
                vec![self.dataset.name.clone()]
            } else {
                self.sweep.datasets.clone()
            };
            if names.iter().any(|n| n != "funnel") {
                p.push("sweep: the dimension axis applies only to the funnel dataset".into());
            }
            let m = self.dataset.options.funnel_block_size.max(1);
            for d in &self.sweep.dimensions {
                if *d == 0 || d % m != 0 {
                    p.push(format!("sweep: dimension {d} is not a multiple of the funnel block size {m}"));
                }
            }
        }
        p
    }

    fn validate_dataset(&self, spec: &DatasetSpec, p: &mut Vec<String>) {
        let s: f64 = spec.splits.iter().sum();
        if spec.splits.iter().any(|r| *r < 0.0) || (s - 1.0).abs() > 1e-9 {
            p.push(format!("dataset: splits {:?} must be non-negative and sum to 1", spec.splits));
        }
        if spec.is_csv() {
            match &spec.path {
                None => p.push("dataset: csv datasets need `path`".into()),
                Some(path) if !path.is_file() => {
                    p.push(format!("dataset: file {} does not exist", path.display()))
                }
                _ => {}
            }
            if spec.y_columns.is_empty() {
                p.push("dataset: csv datasets need `y_columns`".into());
            }
            return;
        }
        if spec.n < 10 {
            p.push(format!("dataset: n = {} is too small", spec.n));
        }
        if !generators().contains(&spec.name) {
            p.push(format!(
                "dataset: unknown dataset `{}` (available: csv, {})",
                spec.name,
                generators().names().join(", ")
            ));
        } else if spec.name.starts_with("convex-") {
            match &spec.options.ground_truth {
                None => p.push(format!(
                    "dataset: {} needs options.ground_truth; create it with `nvqr gen-data --dataset {} --fit-reference <path>`",
                    spec.name, spec.name
                )),
                Some(path) if !path.is_file() => p.push(format!(
                    "dataset: ground truth {} does not exist; create it with `nvqr gen-data --dataset {} --fit-reference {}`",
                    path.display(),
                    spec.name,
                    path.display()
                )),
                _ => {}
            }
        }
    }
}
