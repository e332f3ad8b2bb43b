//! Implementations of the CLI verbs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nvqr_core::conformal::{evaluate_sets, methods, ConformalMethod, RerankedPullBack};
use nvqr_core::datasets::{generators, GeneratorOptions, GroundTruthMap, RawUnitMap, CONVEX_BASES};
use nvqr_core::metrics::{kde_kl, kde_l1, l2_unexplained_variance, sliced_w2, wasserstein2_exact, MetricReport};
use nvqr_core::points::Points;
use nvqr_core::rank::RankMap;
use nvqr_core::reference::Reference;
use nvqr_core::training::{fit_ground_truth, train, write_log_csv, EpochLog};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::config::{self, ExperimentConfig, MetricsSpec};
use crate::data::{self, calibration_and_test, prepare, repeat_row, stream_seed, ModelArtifact, MODEL_FORMAT};
use crate::manifest::{is_complete, RunManifest};

#[derive(Debug)]
pub enum CliError {
    Validation(Vec<String>),
    Runtime(String),
    PartialSweep { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::PartialSweep { .. } => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(p) => {
                writeln!(f, "configuration is invalid:")?;
                for line in p {
                    writeln!(f, "  - {line}")?;
                }
                Ok(())
            }
            CliError::Runtime(m) => write!(f, "{m}"),
            CliError::PartialSweep { failed, total } => write!(f, "{failed} of {total} sweep cells failed"),
        }
    }
}

impl From<nvqr_core::Error> for CliError {
    fn from(e: nvqr_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Loads a config and applies command-line overrides.
pub fn load_config(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => config::load(p).map_err(CliError::Validation)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = out {
        cfg.out = o.to_path_buf();
    }
    Ok(cfg)
}

fn validated(cfg: &ExperimentConfig) -> CliResult {
    let p = cfg.validate();
    if p.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(p))
    }
}

fn fresh_run_dir(dir: &Path, resume: bool) -> CliResult<bool> {
    if is_complete(dir) {
        if resume {
            return Ok(false);
        }
        return Err(CliError::Validation(vec![format!(
            "{} already holds a finished run; choose another --out or pass --resume",
            dir.display()
        )]));
    }
    std::fs::create_dir_all(dir)?;
    Ok(true)
}

pub struct TrainOutcome {
    pub artifact: ModelArtifact,
    pub log: Vec<EpochLog>,
}

/// Trains one model and writes its artifact and log into `dir`. On failure
/// the epochs finished so far are still written.
fn train_into(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> CliResult<TrainOutcome> {
    let prepared = prepare(&cfg.dataset, seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let mut log = Vec::new();
    let result = train(&prepared.train, &tc, &mut log);
    write_log_csv(&dir.join("train_log.csv"), &log)?;
    let model = result.map_err(|e| {
        CliError::Runtime(format!(
            "training stopped: {e} ({} finished epochs logged to {})",
            log.len(),
            dir.join("train_log.csv").display()
        ))
    })?;
    let artifact = ModelArtifact {
        format: MODEL_FORMAT.into(),
        method: tc.method.clone(),
        seed,
        dataset: cfg.dataset.clone(),
        standardization: prepared.standardization,
        model: model.to_record(),
    };
    artifact.save(&dir.join("model.json"))?;
    Ok(TrainOutcome { artifact, log })
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> CliResult {
    validated(cfg)?;
    let dir = cfg.out.clone();
    if !fresh_run_dir(&dir, resume)? {
        println!("{} is complete; skipping", dir.display());
        return Ok(());
    }
    let text = config::to_toml(cfg);
    std::fs::write(dir.join("config.toml"), &text)?;
    let seed = cfg.seeds[0];
    let mut manifest = RunManifest::new("train", &text, vec![seed]);
    let out = manifest.time("train", || train_into(cfg, seed, &dir))?;
    manifest.artifacts = vec!["config.toml".into(), "model.json".into(), "train_log.csv".into()];
    manifest.write(&dir)?;
    if let Some(last) = out.log.last() {
        println!(
            "trained {} on {} for {} epochs; final objective {:.6}",
            cfg.train.method,
            cfg.dataset.name,
            out.log.len(),
            last.objective
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> CliResult<ModelArtifact> {
    if !path.is_file() {
        return Err(CliError::Validation(vec![format!(
            "model artifact {} does not exist; create it with `nvqr train`",
            path.display()
        )]));
    }
    Ok(ModelArtifact::load(path)?)
}

fn default_subdir(model: &Path, name: &str) -> PathBuf {
    model.parent().unwrap_or(Path::new(".")).join(name)
}

/// One row of the conformal evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub seed: u64,
    pub method: String,
    pub alpha: f64,
    pub n_cal: usize,
    pub n_test: usize,
    pub threshold: Option<f64>,
    pub coverage: f64,
    pub worst_slab_coverage: f64,
    pub log_volume_per_dim: Option<f64>,
    pub unknown: usize,
    pub calibration_failures: usize,
}

pub fn cmd_conformal(cfg: &ExperimentConfig, model_path: &Path, out: Option<&Path>) -> CliResult {
    let artifact = load_model(model_path)?;
    let mut problems = cfg.validate();
    let map = artifact.raw_map()?;
    if cfg.conformal.methods.iter().any(|m| m.eq_ignore_ascii_case("quantile")) && map.reference() != Reference::Gaussian {
        problems.push("conformal: the quantile baseline needs a model with a Gaussian reference".into());
    }
    if !problems.is_empty() {
        return Err(CliError::Validation(problems));
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| default_subdir(model_path, "conformal"));
    fresh_run_dir(&dir, false)?;
    let text = config::to_toml(cfg);
    std::fs::write(dir.join("config.toml"), &text)?;
    let mut manifest = RunManifest::new("conformal", &text, cfg.seeds.clone());
    let registry = methods();
    let mut rows = Vec::new();
    let mut artifacts = vec![PathBuf::from("config.toml"), PathBuf::from("evaluation.csv")];
    std::fs::create_dir_all(dir.join("calibration"))?;
    for &seed in &cfg.seeds {
        let (cal, test) = calibration_and_test(&artifact.dataset, seed)?;
        for name in &cfg.conformal.methods {
            let method: Box<dyn ConformalMethod> = if name.eq_ignore_ascii_case("rpb") {
                Box::new(RerankedPullBack {
                    fit_fraction: cfg.conformal.fit_fraction,
                })
            } else {
                registry.get(name)?()
            };
            for &alpha in &cfg.conformal.alphas {
                let stage = format!("{}-a{alpha}-s{seed}", method.name());
                let (art, ev) = manifest.time(&stage, || -> CliResult<_> {
                    let art = method.calibrate(&map, &cal.y, &cal.x, alpha, seed)?;
                    let mut settings = cfg.conformal.evaluation.clone();
                    settings.seed = stream_seed(seed, 5);
                    let ev = evaluate_sets(method.as_ref(), &map, &art, &test.y, &test.x, &settings)?;
                    Ok((art, ev))
                })?;
                let rel = PathBuf::from("calibration").join(format!("{stage}.json"));
                art.save(&dir.join(&rel))?;
                artifacts.push(rel);
                rows.push(EvaluationRow {
                    seed,
                    method: method.name().into(),
                    alpha,
                    n_cal: cal.len(),
                    n_test: test.len(),
                    threshold: art.threshold,
                    coverage: ev.coverage,
                    worst_slab_coverage: ev.worst_slab_coverage,
                    log_volume_per_dim: ev.log_volume_per_dim,
                    unknown: ev.unknown,
                    calibration_failures: art.failed,
                });
            }
        }
    }
    write_csv(&dir.join("evaluation.csv"), &rows)?;
    manifest.artifacts = artifacts;
    manifest.write(&dir)?;
    println!("wrote {} evaluation rows to {}", rows.len(), dir.join("evaluation.csv").display());
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Model-versus-truth metrics at random conditioning points, in raw units.
pub fn compute_metrics(
    spec: &MetricsSpec,
    dataset: &config::DatasetSpec,
    map: &RawUnitMap,
    seed: u64,
) -> CliResult<Vec<MetricReport>> {
    let g = data::generator(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 4));
    let conditions: Vec<Vec<f64>> = (0..spec.conditions).map(|_| g.sample_condition(&mut rng)).collect();
    let xs = Points::from_rows(g.condition_dim(), &conditions)?;
    let d = g.response_dim();
    let n = spec.samples;
    let reference = map.reference();
    let wants = |m: &str| spec.names.iter().any(|s| s == m);

    struct PerCondition {
        truth: Points,
        model: Points,
        eval: Points,
        us: Points,
    }
    let per: Vec<PerCondition> = conditions
        .iter()
        .enumerate()
        .map(|(c, x)| -> CliResult<PerCondition> {
            let c = c as u64;
            let mut r = ChaCha8Rng::seed_from_u64(stream_seed(seed, 1000 + c));
            let us = reference.sample_points(&mut r, n, d);
            Ok(PerCondition {
                truth: g.conditional_sample(x, n, stream_seed(seed, 2000 + c))?,
                model: map.quantile_batch(&us, &repeat_row(x, n)?)?,
                eval: g.conditional_sample(x, n, stream_seed(seed, 3000 + c))?,
                us,
            })
        })
        .collect::<CliResult<_>>()?;

    let settings = format!("conditions={} samples={n} projections={}", spec.conditions, spec.projections);
    let report = |metric: &str, value: f64| MetricReport {
        metric: metric.into(),
        value,
        settings: settings.clone(),
        seed: Some(seed),
    };
    let mut out = Vec::new();
    if wants("w2") {
        let v: Vec<f64> = per.iter().map(|p| wasserstein2_exact(&p.model, &p.truth)).collect::<Result<_, _>>()?;
        out.push(report("w2", mean(&v)));
    }
    if wants("sliced-w2") {
        let v: Vec<f64> = per
            .iter()
            .enumerate()
            .map(|(c, p)| sliced_w2(&p.model, &p.truth, spec.projections, stream_seed(seed, 4000 + c as u64)))
            .collect::<Result<_, _>>()?;
        out.push(report("sliced-w2", mean(&v)));
    }
    if wants("kde-l1") {
        let v: Vec<f64> = per.iter().map(|p| kde_l1(&p.model, &p.truth, &p.eval)).collect::<Result<_, _>>()?;
        out.push(report("kde-l1", mean(&v)));
    }
    if wants("kde-kl") {
        let v: Vec<f64> = per
            .iter()
            .map(|p| kde_kl(&p.model, &p.truth, &p.eval).map(|k| k.raw))
            .collect::<Result<_, _>>()?;
        out.push(report("kde-kl", mean(&v)));
        out.push(report("kde-kl-clipped", mean(&v).max(0.0)));
    }
    if wants("l2-uv") || wants("l2-uv-rank") {
        let base = dataset.name.trim_start_matches("convex-");
        let path = dataset.options.ground_truth.as_deref().ok_or_else(|| {
            CliError::Validation(vec![format!("{} needs options.ground_truth", dataset.name)])
        })?;
        let truth = GroundTruthMap::load(path)?;
        if truth.base != base {
            return Err(CliError::Validation(vec![format!("ground truth is for `{}`", truth.base)]));
        }
        if wants("l2-uv") {
            let inputs: Vec<Points> = per.iter().map(|p| p.us.clone()).collect();
            let v = l2_unexplained_variance(|u, x| truth.quantile(u, x), |u, x| map.quantile(u, x), &xs, &inputs)?;
            out.push(report("l2-uv", v));
        }
        if wants("l2-uv-rank") {
            let inputs: Vec<Points> = per.iter().map(|p| p.truth.clone()).collect();
            let v = l2_unexplained_variance(|y, x| truth.rank(y, x), |y, x| map.rank(y, x), &xs, &inputs)?;
            out.push(report("l2-uv-rank", v));
        }
    }
    if wants("inference-ms") {
        let t = g.generate(8192, stream_seed(seed, 6))?;
        let mut times: Vec<f64> = (0..3)
            .map(|_| {
                let s = Instant::now();
                let r = map.rank_batch(&t.y, &t.x);
                std::hint::black_box(r);
                s.elapsed().as_secs_f64() * 1e3
            })
            .collect();
        times.sort_by(f64::total_cmp);
        out.push(report("inference-ms", times[1]));
    }
    Ok(out)
}

pub fn cmd_metrics(cfg: &ExperimentConfig, model_path: &Path, out: Option<&Path>) -> CliResult {
    let artifact = load_model(model_path)?;
    let mut check = cfg.clone();
    check.dataset = artifact.dataset.clone();
    validated(&check)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| default_subdir(model_path, "metrics"));
    fresh_run_dir(&dir, false)?;
    let text = config::to_toml(cfg);
    let mut manifest = RunManifest::new("metrics", &text, cfg.seeds.clone());
    let map = artifact.raw_map()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let r = manifest.time(&format!("seed-{seed}"), || compute_metrics(&cfg.metrics, &artifact.dataset, &map, seed))?;
        rows.extend(r);
    }
    write_csv(&dir.join("metrics.csv"), &rows)?;
    manifest.artifacts = vec!["metrics.csv".into()];
    manifest.write(&dir)?;
    for r in &rows {
        println!("{}\t{}\t{:.6}", r.seed.unwrap_or_default(), r.metric, r.value);
    }
    Ok(())
}

pub struct GenDataArgs<'a> {
    pub dataset: Option<&'a str>,
    pub n: Option<usize>,
    pub out: Option<&'a Path>,
    pub fit_reference: Option<&'a Path>,
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, args: GenDataArgs) -> CliResult {
    let mut spec = cfg.dataset.clone();
    if let Some(d) = args.dataset {
        spec.name = d.into();
    }
    if let Some(n) = args.n {
        spec.n = n;
    }
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let mut problems = Vec::new();
    if spec.is_csv() || !generators().contains(&spec.name) {
        problems.push(format!(
            "unknown dataset `{}` (available: {})",
            spec.name,
            generators().names().join(", ")
        ));
    }
    if args.out.is_none() && args.fit_reference.is_none() {
        problems.push("nothing to do: pass --out and/or --fit-reference".into());
    }
    if let Some(fr) = args.fit_reference {
        let base = spec.name.trim_start_matches("convex-");
        if !CONVEX_BASES.contains(&base) || !spec.name.starts_with("convex-") {
            problems.push(format!("--fit-reference applies to convex-{{{}}}", CONVEX_BASES.join(",")));
        }
        spec.options.ground_truth = Some(fr.to_path_buf());
    } else if spec.name.starts_with("convex-") && spec.options.ground_truth.as_ref().is_none_or(|p| !p.is_file()) {
        problems.push(format!(
            "{} needs a reference potential; run `nvqr gen-data --dataset {} --fit-reference <path>` first",
            spec.name, spec.name
        ));
    }
    if !problems.is_empty() {
        return Err(CliError::Validation(problems));
    }
    if let Some(fr) = args.fit_reference {
        let base = spec.name.trim_start_matches("convex-");
        let truth = fit_ground_truth(base, spec.n, seed, &cfg.train)?;
        truth.save(fr)?;
        println!("wrote reference potential for {base} to {}", fr.display());
    }
    if let Some(out) = args.out {
        let g = generators().get(&spec.name)?(&GeneratorOptions {
            ground_truth: spec.options.ground_truth.clone(),
            ..spec.options.clone()
        })?;
        let table = g.generate(spec.n, seed)?;
        table.write(out)?;
        println!("wrote {} rows of {} to {}", table.len(), spec.name, out.display());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    pub method: String,
    pub dimension: Option<usize>,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        let dim = self.dimension.map_or("base".to_string(), |d| d.to_string());
        format!("{}-{}-d{dim}-s{}", self.dataset, self.method, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub error: Option<String>,
    pub values: BTreeMap<String, f64>,
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let or = |v: &[String], d: &str| if v.is_empty() { vec![d.to_string()] } else { v.to_vec() };
    let datasets = or(&cfg.sweep.datasets, &cfg.dataset.name);
    let methods = or(&cfg.sweep.methods, &cfg.train.method);
    let dims: Vec<Option<usize>> = if cfg.sweep.dimensions.is_empty() {
        vec![None]
    } else {
        cfg.sweep.dimensions.iter().map(|d| Some(*d)).collect()
    };
    let mut cells = Vec::new();
    for d in &datasets {
        for m in &methods {
            for dim in &dims {
                for &seed in &cfg.seeds {
                    cells.push(Cell {
                        dataset: d.clone(),
                        method: m.clone(),
                        dimension: *dim,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell, dir: &Path) -> CliResult<BTreeMap<String, f64>> {
    let mut c = cfg.clone();
    c.dataset.name = cell.dataset.clone();
    c.train.method = cell.method.clone();
    if let Some(d) = cell.dimension {
        c.dataset.options.funnel_blocks = d / c.dataset.options.funnel_block_size;
    }
    std::fs::create_dir_all(dir)?;
    let out = train_into(&c, cell.seed, dir)?;
    let mut values = BTreeMap::new();
    let mut epoch_ms: Vec<f64> = out.log.iter().map(|e| e.wall_ms).collect();
    values.insert("epoch-ms".into(), Data::new(epoch_ms.as_mut_slice()).median());
    if let Some(last) = out.log.last() {
        values.insert("objective".into(), last.objective);
        values.insert("inner-iterations".into(), last.mean_inner_iterations);
    }
    let map = out.artifact.raw_map()?;
    for r in compute_metrics(&c.metrics, &c.dataset, &map, cell.seed)? {
        values.insert(r.metric, r.value);
    }
    Ok(values)
}

#[derive(Debug, Clone, Serialize)]
struct TidyRow<'a> {
    dataset: &'a str,
    method: &'a str,
    dimension: Option<usize>,
    seed: u64,
    metric: &'a str,
    value: f64,
}

#[derive(Debug, Clone, Serialize)]
struct AggregateRow {
    dataset: String,
    method: String,
    dimension: Option<usize>,
    metric: String,
    median: f64,
    q25: f64,
    q75: f64,
    runs: usize,
    failed: usize,
}

pub fn cmd_sweep(cfg: &ExperimentConfig, resume: bool, workers: usize) -> CliResult {
    validated(cfg)?;
    let dir = cfg.out.clone();
    if is_complete(&dir) && !resume {
        return Err(CliError::Validation(vec![format!(
            "{} already holds a finished sweep; pass --resume to reuse finished cells",
            dir.display()
        )]));
    }
    std::fs::create_dir_all(dir.join("cells"))?;
    let text = config::to_toml(cfg);
    std::fs::write(dir.join("config.toml"), &text)?;
    let cells = sweep_cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut manifest = RunManifest::new("sweep", &text, cfg.seeds.clone());
    let results: Vec<CellResult> = manifest.time("cells", || {
        pool.install(|| {
            cells
                .par_iter()
                .map(|cell| {
                    let cdir = dir.join("cells").join(cell.id());
                    let done = cdir.join("result.json");
                    if resume {
                        if let Some(r) = std::fs::read_to_string(&done)
                            .ok()
                            .and_then(|s| serde_json::from_str::<CellResult>(&s).ok())
                            .filter(|r| r.error.is_none())
                        {
                            return r;
                        }
                    }
                    let r = match run_cell(cfg, cell, &cdir) {
                        Ok(values) => CellResult {
                            cell: cell.clone(),
                            error: None,
                            values,
                        },
                        Err(e) => CellResult {
                            cell: cell.clone(),
                            error: Some(e.to_string()),
                            values: BTreeMap::new(),
                        },
                    };
                    if let Ok(s) = serde_json::to_string_pretty(&r) {
                        let tmp = cdir.join(".result.json.tmp");
                        if std::fs::create_dir_all(&cdir).is_ok() && std::fs::write(&tmp, s).is_ok() {
                            let _ = std::fs::rename(tmp, done);
                        }
                    }
                    r
                })
                .collect()
        })
    });

    let mut tidy = Vec::new();
    for r in &results {
        for (m, v) in &r.values {
            tidy.push(TidyRow {
                dataset: &r.cell.dataset,
                method: &r.cell.method,
                dimension: r.cell.dimension,
                seed: r.cell.seed,
                metric: m,
                value: *v,
            });
        }
    }
    write_csv(&dir.join("cells.csv"), &tidy)?;
    write_csv(&dir.join("aggregate.csv"), &aggregate(&results))?;
    let failed: Vec<&CellResult> = results.iter().filter(|r| r.error.is_some()).collect();
    for r in &failed {
        eprintln!("cell {} failed: {}", r.cell.id(), r.error.as_deref().unwrap_or(""));
    }
    manifest.artifacts = vec!["config.toml".into(), "cells.csv".into(), "aggregate.csv".into(), "cells".into()];
    if failed.is_empty() {
        manifest.write(&dir)?;
        println!("sweep of {} cells finished; aggregate in {}", results.len(), dir.join("aggregate.csv").display());
        Ok(())
    } else {
        Err(CliError::PartialSweep {
            failed: failed.len(),
            total: results.len(),
        })
    }
}

fn aggregate(results: &[CellResult]) -> Vec<AggregateRow> {
    type Key = (String, String, Option<usize>);
    let mut groups: BTreeMap<Key, (Vec<&CellResult>, usize)> = BTreeMap::new();
    for r in results {
        let e = groups
            .entry((r.cell.dataset.clone(), r.cell.method.clone(), r.cell.dimension))
            .or_default();
        if r.error.is_some() {
            e.1 += 1;
        } else {
            e.0.push(r);
        }
    }
    let mut rows = Vec::new();
    for ((dataset, method, dimension), (ok, failed)) in groups {
        let mut metrics: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &ok {
            for (m, v) in &r.values {
                metrics.entry(m).or_default().push(*v);
            }
        }
        if metrics.is_empty() {
            rows.push(AggregateRow {
                dataset: dataset.clone(),
                method: method.clone(),
                dimension,
                metric: String::new(),
                median: f64::NAN,
                q25: f64::NAN,
                q75: f64::NAN,
                runs: 0,
                failed,
            });
        }
        for (m, mut v) in metrics {
            let runs = v.len();
            let mut d = Data::new(v.as_mut_slice());
            rows.push(AggregateRow {
                dataset: dataset.clone(),
                method: method.clone(),
                dimension,
                metric: m.into(),
                median: d.median(),
                q25: d.lower_quartile(),
                q75: d.upper_quartile(),
                runs,
                failed,
            });
        }
    }
    rows
}
