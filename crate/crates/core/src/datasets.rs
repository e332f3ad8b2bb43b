//! Synthetic conditional benchmarks and tabular ingestion.
//!
//! Generators are registered by name in [`generators`] and produce
//! [`SampleTable`]s of paired `(x, y)` draws. Every generator is a pure
//! function of its options and the seed.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::Points;
use crate::rank::{ModelRecord, QuantileModel, RankMap, Variant};
use crate::reference::Reference;
use crate::registry::Registry;

/// A conditional law `Y | X` together with the marginal of `X`.
pub trait Generator: Send + Sync {
    fn name(&self) -> String;
    fn condition_dim(&self) -> usize;
    fn response_dim(&self) -> usize;
    fn sample_condition(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn sample_response(&self, x: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>>;

    fn generate(&self, n: usize, seed: u64) -> Result<SampleTable> {
        if n == 0 {
            return Err(Error::Config("a sample table needs n ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = if self.condition_dim() == 0 {
            Points::empty_rows(0)
        } else {
            Points::with_capacity(self.condition_dim(), n)
        };
        let mut y = Points::with_capacity(self.response_dim(), n);
        for _ in 0..n {
            let xi = self.sample_condition(&mut rng);
            y.push(&self.sample_response(&xi, &mut rng)?)?;
            if self.condition_dim() == 0 {
                x = Points::empty_rows(x.len() + 1);
            } else {
                x.push(&xi)?;
            }
        }
        Ok(SampleTable {
            x,
            y,
            generator: self.name(),
            seed: Some(seed),
            standardization: None,
        })
    }

    /// `n` draws of `Y | X = x`.
    fn conditional_sample(&self, x: &[f64], n: usize, seed: u64) -> Result<Points> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = Points::with_capacity(self.response_dim(), n);
        for _ in 0..n {
            y.push(&self.sample_response(x, &mut rng)?)?;
        }
        Ok(y)
    }
}

fn gauss(rng: &mut dyn RngCore) -> f64 {
    StandardNormal.sample(rng)
}

/// Knobs read by the registered constructors; unused fields are ignored by
/// generators that do not need them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorOptions {
    /// Funnel: number of blocks `k`.
    pub funnel_blocks: usize,
    /// Funnel: block size `m`.
    pub funnel_block_size: usize,
    /// Funnel: standard deviation of the block scales.
    pub funnel_sigma: f64,
    /// Glasses: emit both branches `(Y₁, Y₂)` instead of the mixture.
    pub glasses_two_dim: bool,
    /// Convex variants: path of the ground-truth artifact.
    pub ground_truth: Option<PathBuf>,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            funnel_blocks: 1,
            funnel_block_size: 2,
            funnel_sigma: 1.0,
            glasses_two_dim: false,
            ground_truth: None,
        }
    }
}

pub type GeneratorCtor = dyn Fn(&GeneratorOptions) -> Result<Box<dyn Generator>> + Send + Sync;

/// Registry with every built-in generator.
pub fn generators() -> Registry<GeneratorCtor> {
    let mut r: Registry<GeneratorCtor> = Registry::new("dataset");
    r.register("banana", Box::new(|_| Ok(Box::new(Banana))));
    r.register("star", Box::new(|_| Ok(Box::new(Star))));
    r.register(
        "glasses",
        Box::new(|o| {
            Ok(Box::new(Glasses {
                two_dim: o.glasses_two_dim,
            }))
        }),
    );
    r.register(
        "funnel",
        Box::new(|o| Ok(Box::new(Funnel::new(o.funnel_blocks, o.funnel_block_size, o.funnel_sigma)?))),
    );
    for base in CONVEX_BASES {
        r.register(
            &format!("convex-{base}"),
            Box::new(move |o| {
                let truth = GroundTruthMap::load_required(base, o.ground_truth.as_deref())?;
                Ok(Box::new(ConvexVariant::new(truth)?))
            }),
        );
    }
    r
}

pub const CONVEX_BASES: [&str; 3] = ["banana", "star", "glasses"];

/// Banana-shaped response whose position and bend depend on `x`. The
/// coefficient vector has a single entry, so `β = 1`.
#[derive(Debug, Clone, Copy)]
pub struct Banana;

impl Generator for Banana {
    fn name(&self) -> String {
        "banana".into()
    }
    fn condition_dim(&self) -> usize {
        1
    }
    fn response_dim(&self) -> usize {
        2
    }
    fn sample_condition(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(0.8..=3.2)]
    }
    fn sample_response(&self, x: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let x = x[0];
        let z = rng.random_range(-PI..=PI);
        let phi = rng.random_range(0.0..=2.0 * PI);
        let r = rng.random_range(-0.1..=0.1);
        let beta = 1.0;
        Ok(vec![
            0.5 * (1.0 - z.cos()) + r * phi.sin() + x.sin(),
            z / (beta * x) + r * phi.cos(),
        ])
    }
}

/// Three-pointed star rotated by `2πx`.
#[derive(Debug, Clone, Copy)]
pub struct Star;

impl Star {
    /// Unrotated star point for a Gaussian draw `(u₀, u₁)`.
    pub fn shape(u0: f64, u1: f64) -> [f64; 2] {
        let theta = u1.atan2(u0);
        let s = 1.0 + 3.0 * (3.0 * theta).cos();
        [s * u0, s * u1]
    }

    pub fn rotate(angle: f64, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = angle.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }
}

impl Generator for Star {
    fn name(&self) -> String {
        "star".into()
    }
    fn condition_dim(&self) -> usize {
        1
    }
    fn response_dim(&self) -> usize {
        2
    }
    fn sample_condition(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(0.0..=2.0 / 3.0)]
    }
    fn sample_response(&self, x: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let (u0, u1) = (gauss(rng), gauss(rng));
        Ok(Star::rotate(2.0 * PI * x[0], Star::shape(u0, u1)).to_vec())
    }
}

/// Two sinusoidal branches with Beta(1/2, 1) offsets, mixed by a fair coin.
#[derive(Debug, Clone, Copy, Default)]
pub struct Glasses {
    pub two_dim: bool,
}

impl Glasses {
    /// Branch values `(Y₁, Y₂)` at `x` for offset `eps`.
    pub fn branches(x: f64, eps: f64) -> (f64, f64) {
        let z1 = 3.0 * PI * x;
        let z2 = PI * (1.0 + 3.0 * x);
        (5.0 * z1.sin() + 2.5 + eps, 5.0 * z2.sin() + 2.5 - eps)
    }
}

impl Generator for Glasses {
    fn name(&self) -> String {
        if self.two_dim {
            "glasses-2d".into()
        } else {
            "glasses".into()
        }
    }
    fn condition_dim(&self) -> usize {
        1
    }
    fn response_dim(&self) -> usize {
        if self.two_dim {
            2
        } else {
            1
        }
    }
    fn sample_condition(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(0.0..=1.0)]
    }
    fn sample_response(&self, x: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        // Beta(1/2, 1) has CDF √t, so V² with V uniform
        let v: f64 = rng.random_range(0.0..=1.0);
        let (y1, y2) = Glasses::branches(x[0], v * v);
        let upper = rng.random_bool(0.5);
        Ok(if self.two_dim {
            vec![y1, y2]
        } else if upper {
            vec![y2]
        } else {
            vec![y1]
        })
    }
}

/// Block funnel: `k` scales `v_j ~ N(0, σ²)` are the condition and each
/// controls `m` response coordinates `~ N(0, e^{v_j})`.
#[derive(Debug, Clone, Copy)]
pub struct Funnel {
    pub blocks: usize,
    pub block_size: usize,
    pub sigma: f64,
}

impl Funnel {
    pub fn new(blocks: usize, block_size: usize, sigma: f64) -> Result<Self> {
        if blocks < 1 || block_size < 1 || !(sigma >= 0.0) {
            return Err(Error::Config(format!(
                "funnel needs k ≥ 1, m ≥ 1, σ ≥ 0 (got k={blocks}, m={block_size}, σ={sigma})"
            )));
        }
        Ok(Self {
            blocks,
            block_size,
            sigma,
        })
    }

    /// Log joint density of `(v, x)` for a single block.
    pub fn log_density(&self, v: f64, xs: &[f64]) -> f64 {
        let ln2pi = (2.0 * PI).ln();
        let mut lp = -0.5 * (ln2pi + 2.0 * self.sigma.ln()) - v * v / (2.0 * self.sigma * self.sigma);
        for x in xs {
            lp += -0.5 * (ln2pi + v) - x * x / (2.0 * v.exp());
        }
        lp
    }
}

impl Generator for Funnel {
    fn name(&self) -> String {
        format!("funnel-k{}-m{}", self.blocks, self.block_size)
    }
    fn condition_dim(&self) -> usize {
        self.blocks
    }
    fn response_dim(&self) -> usize {
        self.blocks * self.block_size
    }
    fn sample_condition(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.blocks)
            .map(|_| self.sigma * gauss(rng))
            .collect()
    }
    fn sample_response(&self, x: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let mut y = Vec::with_capacity(self.response_dim());
        for &v in x {
            let sd = (0.5 * v).exp();
            for _ in 0..self.block_size {
                y.push(sd * gauss(rng));
            }
        }
        Ok(y)
    }
}

/// Frozen strongly convex potential defining `Q(u, x) = ∇_u φ̄(u, x)` in the
/// standardized coordinates of a base dataset.
#[derive(Debug, Clone)]
pub struct GroundTruthMap {
    pub base: String,
    pub model: QuantileModel,
    /// Standardization of the base condition, applied to fresh base draws.
    pub condition_stats: ColumnStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroundTruthRecord {
    format: String,
    base: String,
    condition_stats: ColumnStats,
    model: ModelRecord,
}

const GROUND_TRUTH_FORMAT: &str = "nvqr-ground-truth";

impl GroundTruthMap {
    pub fn new(base: &str, model: QuantileModel, condition_stats: ColumnStats) -> Result<Self> {
        if !CONVEX_BASES.contains(&base) {
            return Err(Error::Config(format!("no convex variant of `{base}`")));
        }
        if model.variant != Variant::U || model.reference != Reference::Gaussian {
            return Err(Error::Config("ground truth needs a U-variant potential with a Gaussian reference".into()));
        }
        if !model.potential.config().strong_convexity {
            return Err(Error::Config("ground-truth potential must be strongly convex".into()));
        }
        Ok(Self {
            base: base.into(),
            model,
            condition_stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rec = GroundTruthRecord {
            format: GROUND_TRUTH_FORMAT.into(),
            base: self.base.clone(),
            condition_stats: self.condition_stats.clone(),
            model: self.model.to_record(),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&rec)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rec: GroundTruthRecord = serde_json::from_slice(&std::fs::read(path)?)?;
        if rec.format != GROUND_TRUTH_FORMAT {
            return Err(Error::Data(format!("{} is not a ground-truth artifact", path.display())));
        }
        Self::new(&rec.base, QuantileModel::from_record(&rec.model)?, rec.condition_stats)
    }

    fn load_required(base: &str, path: Option<&Path>) -> Result<Self> {
        let path = path.ok_or_else(|| {
            Error::Config(format!(
                "convex-{base} needs a reference potential: fit one with `nvqr gen-data --dataset convex-{base} --fit-reference <out>` \
                 and pass its path as `ground_truth`"
            ))
        })?;
        let truth = Self::load(path)?;
        if truth.base != base {
            return Err(Error::Config(format!(
                "{} holds a reference potential for `{}`, not `{base}`",
                path.display(),
                truth.base
            )));
        }
        Ok(truth)
    }

    pub fn quantile(&self, u: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.model.quantile(u, x)
    }

    pub fn rank(&self, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.model.rank(y, x)
    }
}

/// Data synthesized from a ground-truth map: base condition law, Gaussian
/// ranks, `y = ∇_u φ̄(u, x)`.
pub struct ConvexVariant {
    base: Box<dyn Generator>,
    truth: GroundTruthMap,
}

impl ConvexVariant {
    pub fn new(truth: GroundTruthMap) -> Result<Self> {
        let base = generators().get(&truth.base)?(&GeneratorOptions::default())?;
        if base.condition_dim() != truth.model.condition_dim() || base.response_dim() != truth.model.response_dim() {
            return Err(Error::Shape(format!(
                "reference potential for `{}` has the wrong dimensions",
                truth.base
            )));
        }
        Ok(Self { base, truth })
    }

    pub fn truth(&self) -> &GroundTruthMap {
        &self.truth
    }
}

impl Generator for ConvexVariant {
    fn name(&self) -> String {
        format!("convex-{}", self.truth.base)
    }
    fn condition_dim(&self) -> usize {
        self.base.condition_dim()
    }
    fn response_dim(&self) -> usize {
        self.base.response_dim()
    }
    fn sample_condition(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut x = self.base.sample_condition(rng);
        self.truth.condition_stats.apply(&mut x);
        x
    }
    fn sample_response(&self, x: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let u = Reference::Gaussian.sample(rng, self.response_dim());
        self.truth.quantile(&u, x)
    }
}

/// Generates a convex-variant table; the ground truth must already exist.
pub fn gen_convex_variant(truth: Option<GroundTruthMap>, n: usize, seed: u64) -> Result<(SampleTable, GroundTruthMap)> {
    let truth = truth.ok_or_else(|| {
        Error::Config(
            "a convex variant needs a reference potential fitted to its base dataset; \
             fit one with `nvqr gen-data --fit-reference` first"
                .into(),
        )
    })?;
    let g = ConvexVariant::new(truth)?;
    let table = g.generate(n, seed)?;
    Ok((table, g.truth))
}

/// A model fitted on standardized data, evaluated in raw units.
pub struct RawUnitMap {
    pub model: QuantileModel,
    pub standardization: Standardization,
}

impl RawUnitMap {
    fn scaled_x(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        self.standardization.x.apply(&mut v);
        v
    }
}

impl RankMap for RawUnitMap {
    fn response_dim(&self) -> usize {
        self.model.response_dim()
    }

    fn condition_dim(&self) -> usize {
        self.model.condition_dim()
    }

    fn reference(&self) -> Reference {
        self.model.reference()
    }

    fn rank(&self, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut v = y.to_vec();
        self.standardization.y.apply(&mut v);
        self.model.rank(&v, &self.scaled_x(x))
    }

    fn quantile(&self, u: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.model.quantile(u, &self.scaled_x(x))?;
        self.standardization.y.invert(&mut y);
        Ok(y)
    }
}

/// Per-column affine standardization `(v − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    /// Mean and population standard deviation of every column. Constant
    /// columns are rejected.
    pub fn fit(p: &Points, label: &str) -> Result<Self> {
        let n = p.len() as f64;
        if p.is_empty() {
            return Err(Error::Data("cannot standardize an empty table".into()));
        }
        let mut stats = Self::default();
        for j in 0..p.dim() {
            let col = p.column(j);
            let m = col.iter().sum::<f64>() / n;
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            if !(s > 1e-12) {
                return Err(Error::Data(format!("{label} column {j} is constant and cannot be standardized")));
            }
            stats.mean.push(m);
            stats.std.push(s);
        }
        Ok(stats)
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, v: &mut [f64]) {
        for ((x, m), s) in v.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
    }

    pub fn invert(&self, v: &mut [f64]) {
        for ((x, m), s) in v.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = *x * s + m;
        }
    }

    pub fn apply_points(&self, p: &mut Points) {
        for i in 0..p.len() {
            self.apply(p.row_mut(i));
        }
    }

    pub fn invert_points(&self, p: &mut Points) {
        for i in 0..p.len() {
            self.invert(p.row_mut(i));
        }
    }

    /// `log |det|` of the standardization Jacobian.
    pub fn log_det(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x: ColumnStats,
    pub y: ColumnStats,
}

/// Paired `(x, y)` rows with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    pub x: Points,
    pub y: Points,
    pub generator: String,
    pub seed: Option<u64>,
    pub standardization: Option<Standardization>,
}

/// Disjoint row-index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and cuts it by `ratios` (train, cal, test).
pub fn split_indices(n: usize, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_cal = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_cal);
    let cal = idx.split_off(n_train);
    Ok(Splits { train: idx, cal, test })
}

impl SampleTable {
    pub fn new(x: Points, y: Points, generator: &str) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Shape(format!("{} conditions for {} responses", x.len(), y.len())));
        }
        Ok(Self {
            x,
            y,
            generator: generator.into(),
            seed: None,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: if self.x.dim() == 0 {
                Points::empty_rows(idx.len())
            } else {
                self.x.select(idx)
            },
            y: self.y.select(idx),
            generator: self.generator.clone(),
            seed: self.seed,
            standardization: self.standardization.clone(),
        }
    }

    /// Standardizes every row with statistics of the rows in `train`.
    pub fn standardize(&mut self, train: &[usize]) -> Result<Standardization> {
        if self.standardization.is_some() {
            return Err(Error::Data("table is already standardized".into()));
        }
        let sub = self.subset(train);
        let s = Standardization {
            x: if self.x.dim() == 0 {
                ColumnStats::default()
            } else {
                ColumnStats::fit(&sub.x, "condition")?
            },
            y: ColumnStats::fit(&sub.y, "response")?,
        };
        s.x.apply_points(&mut self.x);
        s.y.apply_points(&mut self.y);
        self.standardization = Some(s.clone());
        Ok(s)
    }

    /// Raw-unit copy of a standardized table.
    pub fn destandardized(&self) -> Self {
        let mut t = self.clone();
        if let Some(s) = t.standardization.take() {
            s.x.invert_points(&mut t.x);
            s.y.invert_points(&mut t.y);
        }
        t
    }

    /// Replaces responses by residuals `y − prediction` from an external
    /// base predictor.
    pub fn residuals(&self, predictions: &Points) -> Result<Self> {
        if predictions.len() != self.len() || predictions.dim() != self.y.dim() {
            return Err(Error::Shape("prediction table does not match the responses".into()));
        }
        let mut t = self.clone();
        for i in 0..t.len() {
            let p = predictions.row(i);
            t.y.row_mut(i).iter_mut().zip(p).for_each(|(a, b)| *a -= b);
        }
        Ok(t)
    }

    /// Writes `path` (CSV with `x0.., y0..` columns) and `path.json`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<String> = (0..self.x.dim())
            .map(|j| format!("x{j}"))
            .chain((0..self.y.dim()).map(|j| format!("y{j}")))
            .collect();
        w.write_record(&header)?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .x
                .row(i)
                .iter()
                .chain(self.y.row(i))
                .map(|v| format!("{v:?}"))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        let meta = TableMeta {
            generator: self.generator.clone(),
            seed: self.seed,
            rows: self.len(),
            condition_dim: self.x.dim(),
            response_dim: self.y.dim(),
            standardization: self.standardization.clone(),
        };
        std::fs::write(sidecar(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let meta: TableMeta = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
        let mut r = csv::Reader::from_path(path)?;
        let (dx, dy) = (meta.condition_dim, meta.response_dim);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != dx + dy {
                return Err(Error::Data(format!("{}: row {} has {} fields", path.display(), k + 2, rec.len())));
            }
            for (j, f) in rec.iter().enumerate() {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("{}: row {}: `{f}` is not a number", path.display(), k + 2)))?;
                if j < dx {
                    x.push(v);
                } else {
                    y.push(v);
                }
            }
        }
        let y = Points::new(dy, y)?;
        let x = if dx == 0 {
            Points::empty_rows(y.len())
        } else {
            Points::new(dx, x)?
        };
        if y.len() != meta.rows {
            return Err(Error::Data(format!(
                "{} has {} rows, sidecar says {}",
                path.display(),
                y.len(),
                meta.rows
            )));
        }
        Ok(Self {
            x,
            y,
            generator: meta.generator,
            seed: meta.seed,
            standardization: meta.standardization,
        })
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableMeta {
    generator: String,
    seed: Option<u64>,
    rows: usize,
    condition_dim: usize,
    response_dim: usize,
    standardization: Option<Standardization>,
}

/// Reads the named columns of a headed CSV file, splits the rows with
/// `seed`, and standardizes everything with train-split statistics.
pub fn load_csv(
    path: &Path,
    x_columns: &[String],
    y_columns: &[String],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(SampleTable, Splits)> {
    if y_columns.is_empty() {
        return Err(Error::Config("at least one response column is required".into()));
    }
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = r.headers()?.clone();
    let find = |name: &String| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Data(format!(
                "{}: no column `{name}` (header: {})",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })
    };
    let xi: Vec<usize> = x_columns.iter().map(find).collect::<Result<_>>()?;
    let yi: Vec<usize> = y_columns.iter().map(find).collect::<Result<_>>()?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut bad = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse = |cols: &[usize], out: &mut Vec<f64>| -> bool {
            for &c in cols {
                match rec.get(c).and_then(|f| f.parse::<f64>().ok()).filter(|v| v.is_finite()) {
                    Some(v) => out.push(v),
                    None => return false,
                }
            }
            true
        };
        let (mut rx, mut ry) = (Vec::new(), Vec::new());
        if parse(&xi, &mut rx) && parse(&yi, &mut ry) {
            xs.extend(rx);
            ys.extend(ry);
            rows += 1;
        } else {
            bad.push(line);
        }
    }
    if !bad.is_empty() {
        let shown: Vec<String> = bad.iter().take(10).map(|l| l.to_string()).collect();
        return Err(Error::Data(format!(
            "{}: {} unparseable row(s) at line(s) {}{}",
            path.display(),
            bad.len(),
            shown.join(", "),
            if bad.len() > 10 { ", ..." } else { "" }
        )));
    }
    let y = Points::new(y_columns.len(), ys)?;
    let x = if x_columns.is_empty() {
        Points::empty_rows(rows)
    } else {
        Points::new(x_columns.len(), xs)?
    };
    let mut table = SampleTable::new(x, y, &format!("csv:{}", path.display()))?;
    table.seed = Some(seed);
    let splits = split_indices(rows, ratios, seed)?;
    table.standardize(&splits.train)?;
    Ok((table, splits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(name: &str, n: usize, seed: u64) -> SampleTable {
        generators().get(name).unwrap()(&GeneratorOptions::default())
            .unwrap()
            .generate(n, seed)
            .unwrap()
    }

    #[test]
    fn banana_ranges_and_determinism() {
        let t = gen("banana", 2000, 3);
        assert_eq!(t, gen("banana", 2000, 3));
        assert!(t.x.data().iter().all(|&x| (0.8..=3.2).contains(&x)));
        // Y₀ − sin X lies in [0, 1] up to the ±0.1 ring noise
        for (x, y) in t.x.rows().zip(t.y.rows()) {
            let core = y[0] - x[0].sin();
            assert!((-0.1..=1.1).contains(&core));
        }
    }

    #[test]
    fn banana_core_term_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let z: f64 = rng.random_range(-PI..=PI);
            let v = 0.5 * (1.0 - z.cos());
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn star_geometry() {
        assert_eq!(Star::shape(1.0, 0.0), [4.0, 0.0]);
        let v = [0.3, -1.7];
        let r = Star::rotate(1.234, v);
        assert!(((r[0] * r[0] + r[1] * r[1]) - (v[0] * v[0] + v[1] * v[1])).abs() < 1e-14);
        let t = gen("star", 500, 1);
        assert!(t.x.data().iter().all(|&x| (0.0..=2.0 / 3.0).contains(&x)));
    }

    #[test]
    fn glasses_plug_in_bounds_and_mixture() {
        let e = 0.37;
        assert_eq!(Glasses::branches(0.0, e).0, 2.5 + e);
        let t = gen("glasses", 10_000, 2);
        assert_eq!(t.y.dim(), 1);
        // the second branch subtracts the offset, so its floor is −3.5
        assert!(t.y.data().iter().all(|&y| (-3.5..=8.5).contains(&y)));
        // which branch each row came from, recovered by regenerating
        let mut upper = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Glasses::default();
        for _ in 0..10_000 {
            g.sample_condition(&mut rng);
            let _: f64 = rng.random_range(0.0..=1.0);
            if rng.random_bool(0.5) {
                upper += 1;
            }
        }
        let sd = (10_000.0_f64 * 0.25).sqrt();
        assert!((upper as f64 - 5000.0).abs() < 3.0 * sd);
        let two = generators().get("glasses").unwrap()(&GeneratorOptions {
            glasses_two_dim: true,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(two.response_dim(), 2);
    }

    #[test]
    fn funnel_scales() {
        let f = Funnel::new(2, 3, 0.0).unwrap();
        let t = f.generate(100, 4).unwrap();
        assert!(t.x.data().iter().all(|&v| v == 0.0));
        assert_eq!(t.y.dim(), 6);
        let f = Funnel::new(1, 1, 3.0).unwrap();
        let y = f.conditional_sample(&[2.0], 100_000, 5).unwrap();
        let var = y.data().iter().map(|v| v * v).sum::<f64>() / 1e5;
        let e2 = 2.0_f64.exp();
        // Var of the sample variance is 2σ⁴/n
        assert!((var - e2).abs() < 3.0 * (2.0 * e2 * e2 / 1e5).sqrt(), "{var}");
        assert!(Funnel::new(0, 1, 1.0).is_err());
    }

    #[test]
    fn funnel_density_integrates() {
        let f = Funnel::new(1, 1, 3.0).unwrap();
        let h = 0.05;
        let mut mass = 0.0;
        for i in -300..300 {
            for j in -800..800 {
                mass += f.log_density(i as f64 * h, &[j as f64 * h]).exp() * h * h;
            }
        }
        // truncated at |v| ≤ 15, |x| ≤ 40
        assert!((mass - 1.0).abs() < 2e-2, "{mass}");
    }

    #[test]
    fn splits_and_standardization() {
        let s = split_indices(1000, [0.6, 0.2, 0.2], 7).unwrap();
        assert_eq!((s.train.len(), s.cal.len(), s.test.len()), (600, 200, 200));
        assert_eq!(s, split_indices(1000, [0.6, 0.2, 0.2], 7).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.cal).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());

        let raw = gen("banana", 1000, 8);
        let mut t = raw.clone();
        t.standardize(&s.train).unwrap();
        let tr = t.subset(&s.train);
        for j in 0..2 {
            let c = tr.y.column(j);
            let m = c.iter().sum::<f64>() / 600.0;
            let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 600.0).sqrt();
            assert!(m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
        }
        let back = t.destandardized();
        for (a, b) in back.y.data().iter().zip(raw.y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let t = gen("banana", 50, 9);
        let p = dir.path().join("banana.csv");
        t.write(&p).unwrap();
        assert_eq!(SampleTable::read(&p).unwrap(), t);

        let (loaded, splits) =
            load_csv(&p, &["x0".into()], &["y0".into(), "y1".into()], [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!(splits.train.len(), 30);
        let back = loaded.destandardized();
        for (a, b) in back.y.data().iter().zip(t.y.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "a,b\n1,2\n3,oops\n5,6\n7,\n").unwrap();
        let err = load_csv(&bad, &["a".into()], &["b".into()], [1.0, 0.0, 0.0], 0).unwrap_err().to_string();
        assert!(err.contains("line(s) 3, 5"), "{err}");
        let missing = load_csv(&bad, &["zz".into()], &["b".into()], [1.0, 0.0, 0.0], 0).unwrap_err();
        assert!(missing.to_string().contains("zz"));
        let flat = dir.path().join("flat.csv");
        std::fs::write(&flat, "a,b\n1,2\n1,3\n1,4\n").unwrap();
        assert!(load_csv(&flat, &["a".into()], &["b".into()], [1.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn convex_variant_requires_reference() {
        assert!(gen_convex_variant(None, 10, 0).is_err());
        let err = generators().get("convex-banana").unwrap()(&GeneratorOptions::default()).err().unwrap();
        assert!(err.to_string().contains("reference potential"));
    }

    #[test]
    fn convex_variant_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut pot = crate::picnn::Picnn::new(crate::picnn::PicnnConfig::new(2, 1, 6, 2), &mut rng).unwrap();
        let us = Reference::Gaussian.sample_points(&mut rng, 64, 2);
        let xs = Reference::Gaussian.sample_points(&mut rng, 64, 1);
        pot.actnorm_init(&us, &xs).unwrap();
        let model = QuantileModel::new(pot, Variant::U, Reference::Gaussian);
        let stats = ColumnStats {
            mean: vec![2.0],
            std: vec![0.7],
        };
        let truth = GroundTruthMap::new("banana", model, stats).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("truth.json");
        truth.save(&p).unwrap();
        let truth = GroundTruthMap::load(&p).unwrap();
        let (t, truth) = gen_convex_variant(Some(truth), 200, 11).unwrap();
        for (x, y) in t.x.rows().zip(t.y.rows()) {
            let u = truth.rank(y, x).unwrap();
            let back = truth.quantile(&u, x).unwrap();
            assert!(back.iter().zip(y).all(|(a, b)| (a - b).abs() < 1e-4));
        }
    }
}
