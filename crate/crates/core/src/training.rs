//! Semi-dual training of convex potentials.
//!
//! Three loops are registered in [`trainers`]:
//!
//! * `c-nqr`: exact conjugates by L-BFGS from a cold start,
//! * `ac-nqr`: the same with an amortizer warm-starting every solve,
//! * `ec-nqr`: the entropic semi-dual, where a log-sum-exp over reference
//!   samples replaces the conjugate.
//!
//! Parameter gradients hold the conjugate maximizers fixed, so no solver
//! step is ever differentiated.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amortizer::{Amortizer, AmortizerConfig, AmortizerLoss};
use crate::autodiff::logsumexp;
use crate::conjugate::{solve_conjugate, ConjugateProblem, ConjugateSolution};
use crate::datasets::{generators, GeneratorOptions, GroundTruthMap, CONVEX_BASES};
use crate::error::{Error, Result};
use crate::lbfgs::SolverSettings;
use crate::picnn::{Picnn, PicnnConfig};
use crate::points::{dot, Points};
use crate::rank::{QuantileModel, Variant};
use crate::reference::{Domain, Reference};
use crate::registry::Registry;

/// Examples per deterministic reduction chunk.
const REDUCE_CHUNK: usize = 16;
/// Reference samples per streaming chunk of the entropic objective.
pub const ENTROPIC_CHUNK: usize = 128;
/// Gibbs weights below this are dropped from the gradient.
pub const GIBBS_WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Registered trainer name.
    pub method: String,
    pub variant: Variant,
    pub width: usize,
    pub depth: usize,
    pub strong_convexity: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epsilon: f64,
    pub mc_samples: usize,
    pub reference: Reference,
    pub seed: u64,
    pub amortizer_lr: f64,
    /// Steps between learning-rate restarts of the amortizer.
    pub restart_period: usize,
    pub amortizer_loss: AmortizerLoss,
    /// Inner-solver settings; `None` picks the training defaults.
    pub solver: Option<SolverSettings>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: "ac-nqr".into(),
            variant: Variant::U,
            width: 18,
            depth: 8,
            strong_convexity: true,
            batch_size: 256,
            epochs: 20,
            lr: 1e-2,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            epsilon: 1e-3,
            mc_samples: 1024,
            reference: Reference::Gaussian,
            seed: 0,
            amortizer_lr: 1e-2,
            restart_period: 5000,
            amortizer_loss: AmortizerLoss::Regression,
            solver: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut problems = Vec::new();
        if !trainers().contains(&self.method) {
            problems.push(format!(
                "unknown training method `{}` (available: {})",
                self.method,
                trainers().names().join(", ")
            ));
        }
        if !(self.lr >= 0.0) {
            problems.push(format!("lr must be ≥ 0, got {}", self.lr));
        }
        if !(self.amortizer_lr >= 0.0) {
            problems.push(format!("amortizer_lr must be ≥ 0, got {}", self.amortizer_lr));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push("weight_decay must be ≥ 0".into());
        }
        if self.batch_size < 1 {
            problems.push("batch_size must be ≥ 1".into());
        }
        if self.width < 1 || self.depth < 1 {
            problems.push("width and depth must be ≥ 1".into());
        }
        if !(self.clip_norm > 0.0) {
            problems.push("clip_norm must be > 0".into());
        }
        if !(self.epsilon > 0.0) {
            problems.push("epsilon must be > 0".into());
        }
        if self.mc_samples < 2 {
            problems.push("mc_samples must be ≥ 2".into());
        }
        if self.restart_period < 1 {
            problems.push("restart_period must be ≥ 1".into());
        }
        if self.method.eq_ignore_ascii_case("ec-nqr") && self.variant == Variant::Y {
            problems.push("ec-nqr supports only the U variant".into());
        }
        if let Some(s) = &self.solver {
            if let Err(e) = s.validate() {
                problems.push(e.to_string());
            }
        }
        Ok(problems)
    }

    fn check(&self) -> Result<()> {
        let p = self.validate()?;
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    fn solver_settings(&self, warm: bool) -> SolverSettings {
        self.solver.clone().unwrap_or_else(|| SolverSettings::training(warm))
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Epoch mean of the mini-batch semi-dual estimate.
    pub objective: f64,
    /// Mean of `φ(u, x)` over fresh reference points (data points in the Y variant).
    pub potential_term: f64,
    /// Mean conjugate (hard or soft) term.
    pub conjugate_term: f64,
    pub mean_inner_iterations: f64,
    pub nonconverged: usize,
    pub amortizer_loss: f64,
    pub wall_ms: f64,
}

pub fn write_log_csv(path: &std::path::Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * weight_decay * params[i];
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// `lr₀ · ½(1 + cos(π t / T))`, reaching 0 at `t = T`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Cosine schedule restarted every `period` steps.
pub fn cosine_restart_lr(base: f64, step: usize, period: usize) -> f64 {
    cosine_lr(base, step % period, period)
}

/// Scales `grads` to global norm `max_norm` when it is larger; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [f64], max_norm: f64) -> f64 {
    let n = dot(grads, grads).sqrt();
    if n > max_norm {
        let s = max_norm / n;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    n
}

/// `Σ_k w_k ∇_θ φ(u_k, x_k)` summed in fixed chunks so that the result does
/// not depend on thread scheduling.
pub fn weighted_param_grad(pot: &Picnn, us: &Points, xs: &Points, weights: &[f64]) -> Result<Vec<f64>> {
    let n = us.len();
    let partials: Vec<Result<Vec<f64>>> = (0..n.div_ceil(REDUCE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = vec![0.0; pot.num_params()];
            for k in c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(n) {
                if weights[k] != 0.0 {
                    pot.eval_with_grads(us.row(k), xs.row(k), weights[k], None, Some(&mut g))?;
                }
            }
            Ok(g)
        })
        .collect();
    sum_in_order(partials, pot.num_params())
}

fn sum_in_order(parts: Vec<Result<Vec<f64>>>, n: usize) -> Result<Vec<f64>> {
    let mut g = vec![0.0; n];
    for p in parts {
        for (a, b) in g.iter_mut().zip(p?) {
            *a += b;
        }
    }
    Ok(g)
}

/// Mini-batch semi-dual estimate split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualEstimate {
    pub value: f64,
    pub potential_term: f64,
    pub conjugate_term: f64,
}

impl DualEstimate {
    fn new(potential_term: f64, conjugate_term: f64) -> Self {
        Self {
            value: potential_term + conjugate_term,
            potential_term,
            conjugate_term,
        }
    }
}

/// Which points enter the potential term and which get conjugated.
///
/// U variant: the potential sees fresh reference draws and the conjugate is
/// taken at the data responses. Y variant: the roles swap.
struct BatchRoles {
    potential_points: Points,
    conjugate_targets: Points,
    xs: Points,
}

fn batch_roles(variant: Variant, ys: Points, xs: Points, fresh: Points) -> BatchRoles {
    match variant {
        Variant::U => BatchRoles {
            potential_points: fresh,
            conjugate_targets: ys,
            xs,
        },
        Variant::Y => BatchRoles {
            potential_points: ys,
            conjugate_targets: fresh,
            xs,
        },
    }
}

/// Value and Danskin gradient of the hard semi-dual for given maximizers.
pub fn exact_dual_and_grad(
    pot: &Picnn,
    potential_points: &Points,
    xs_potential: &Points,
    solutions: &[ConjugateSolution],
    xs_conjugate: &Points,
) -> Result<(DualEstimate, Vec<f64>)> {
    let n = potential_points.len();
    let m = solutions.len();
    if n == 0 || m == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let phis: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| pot.forward(potential_points.row(i), xs_potential.row(i)))
        .collect::<Result<_>>()?;
    let est = DualEstimate::new(
        phis.iter().sum::<f64>() / n as f64,
        solutions.iter().map(|s| s.value).sum::<f64>() / m as f64,
    );
    let mut us = potential_points.clone();
    let mut xs = xs_potential.clone();
    if xs.dim() == 0 {
        xs = Points::empty_rows(n + m);
    }
    let mut weights = vec![1.0 / n as f64; n];
    for (s, i) in solutions.iter().zip(0..) {
        us.push(&s.u_hat)?;
        if xs_conjugate.dim() > 0 {
            xs.push(xs_conjugate.row(i))?;
        }
        weights.push(-1.0 / m as f64);
    }
    let g = weighted_param_grad(pot, &us, &xs, &weights)?;
    Ok((est, g))
}

/// Hard semi-dual estimate with freshly solved conjugates.
pub fn exact_dual(
    pot: &Picnn,
    potential_points: &Points,
    xs_potential: &Points,
    targets: &Points,
    xs_conjugate: &Points,
    domain: &Domain,
    settings: &SolverSettings,
) -> Result<DualEstimate> {
    let sols = solve_all(pot, targets, xs_conjugate, domain, settings, None)?;
    let n = potential_points.len();
    let phi: f64 = (0..n)
        .map(|i| pot.forward(potential_points.row(i), xs_potential.row(i)))
        .sum::<Result<f64>>()?;
    Ok(DualEstimate::new(
        phi / n as f64,
        sols.iter().map(|s| s.value).sum::<f64>() / sols.len() as f64,
    ))
}

fn solve_all(
    pot: &Picnn,
    targets: &Points,
    xs: &Points,
    domain: &Domain,
    settings: &SolverSettings,
    inits: Option<&Points>,
) -> Result<Vec<ConjugateSolution>> {
    let zero = vec![0.0; targets.dim()];
    (0..targets.len())
        .into_par_iter()
        .map(|i| {
            let p = ConjugateProblem::new(pot, targets.row(i), xs.row(i), domain.clone())?;
            let init = inits.map_or(zero.as_slice(), |p| p.row(i));
            solve_conjugate(&p, settings, init)
        })
        .collect()
}

/// `ε log Σ_j exp(s_j / ε)` with the max shift.
pub fn soft_max(values: &[f64], eps: f64) -> f64 {
    let scaled: Vec<f64> = values.iter().map(|v| v / eps).collect();
    eps * logsumexp(&scaled)
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Soft conjugate of one example with its Gibbs weights.
pub struct SoftConjugate {
    pub value: f64,
    pub samples: Points,
    pub weights: Vec<f64>,
}

fn soft_conjugate(
    pot: &Picnn,
    y: &[f64],
    x: &[f64],
    reference: Reference,
    eps: f64,
    m: usize,
    seed: u64,
) -> Result<SoftConjugate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    soft_conjugate_over(pot, y, x, reference.sample_points(&mut rng, m, y.len()), eps)
}

/// `eps * log sum_j exp((<u_j, y> - phi(u_j, x)) / eps)` over the given
/// reference samples, accumulated in chunks.
pub fn soft_conjugate_over(pot: &Picnn, y: &[f64], x: &[f64], samples: Points, eps: f64) -> Result<SoftConjugate> {
    let m = samples.len();
    let mut scores = Vec::with_capacity(m);
    let mut run_max = f64::NEG_INFINITY;
    let mut run_sum = 0.0;
    for start in (0..m).step_by(ENTROPIC_CHUNK) {
        let end = (start + ENTROPIC_CHUNK).min(m);
        let chunk: Vec<f64> = (start..end)
            .map(|j| {
                let u = samples.row(j);
                Ok((dot(u, y) - pot.forward(u, x)?) / eps)
            })
            .collect::<Result<_>>()?;
        let cmax = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if cmax > run_max {
            run_sum *= (run_max - cmax).exp();
            run_max = cmax;
        }
        run_sum += chunk.iter().map(|s| (s - run_max).exp()).sum::<f64>();
        scores.extend(chunk);
    }
    let lse = run_max + run_sum.ln();
    if !lse.is_finite() {
        return Err(Error::NonFinite(format!("soft conjugate at y={y:?}")));
    }
    let weights = scores.iter().map(|s| (s - lse).exp()).collect();
    Ok(SoftConjugate {
        value: eps * lse,
        samples,
        weights,
    })
}

/// Entropic semi-dual estimate and its gradient. Example `i` draws its `m`
/// reference samples from a generator seeded by `(seed, i)`.
pub fn entropic_dual_and_grad(
    pot: &Picnn,
    potential_points: &Points,
    ys: &Points,
    xs: &Points,
    reference: Reference,
    eps: f64,
    m: usize,
    seed: u64,
) -> Result<(DualEstimate, Vec<f64>)> {
    let b = ys.len();
    if b == 0 || potential_points.len() != b {
        return Err(Error::Data("entropic batch is empty or ragged".into()));
    }
    let inv = 1.0 / b as f64;
    let parts: Vec<Result<(f64, f64, Vec<f64>)>> = (0..b.div_ceil(REDUCE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = vec![0.0; pot.num_params()];
            let (mut phi_sum, mut soft_sum) = (0.0, 0.0);
            for i in c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(b) {
                let x = xs.row(i);
                phi_sum += pot.eval_with_grads(potential_points.row(i), x, inv, None, Some(&mut g))?;
                let sc = soft_conjugate(pot, ys.row(i), x, reference, eps, m, mix_seed(seed, i as u64))?;
                soft_sum += sc.value;
                // negative phase: −E_Gibbs ∇_θ φ
                for (j, &w) in sc.weights.iter().enumerate() {
                    if w >= GIBBS_WEIGHT_FLOOR {
                        pot.eval_with_grads(sc.samples.row(j), x, -w * inv, None, Some(&mut g))?;
                    }
                }
            }
            Ok((phi_sum, soft_sum, g))
        })
        .collect();
    let mut g = vec![0.0; pot.num_params()];
    let (mut phi, mut soft) = (0.0, 0.0);
    for p in parts {
        let (a, s, gp) = p?;
        phi += a;
        soft += s;
        g.iter_mut().zip(gp).for_each(|(x, y)| *x += y);
    }
    Ok((DualEstimate::new(phi * inv, soft * inv), g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropicRank {
    pub rank: Vec<f64>,
    /// Effective sample size `1 / Σ w²` of the self-normalized weights.
    pub effective_sample_size: f64,
    /// Set when the effective sample size is below 2.
    pub degenerate: bool,
}

/// Self-normalized importance estimate of the Gibbs mean
/// `E[U | y, x] ∝ exp((uᵀy − φ(u, x)) / ε)` under reference draws.
pub fn entropic_rank(
    pot: &Picnn,
    y: &[f64],
    x: &[f64],
    reference: Reference,
    eps: f64,
    m: usize,
    seed: u64,
) -> Result<EntropicRank> {
    if !(eps > 0.0) || m < 2 {
        return Err(Error::Config("entropic rank needs ε > 0 and m ≥ 2".into()));
    }
    let sc = soft_conjugate(pot, y, x, reference, eps, m, seed)?;
    let mut rank = vec![0.0; y.len()];
    for (j, &w) in sc.weights.iter().enumerate() {
        rank.iter_mut().zip(sc.samples.row(j)).for_each(|(r, u)| *r += w * u);
    }
    let ess = 1.0 / sc.weights.iter().map(|w| w * w).sum::<f64>();
    Ok(EntropicRank {
        rank,
        effective_sample_size: ess,
        degenerate: ess < 2.0,
    })
}

/// Conditional data for training; both tables have one row per example.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub x: Points,
    pub y: Points,
}

impl TrainData {
    pub fn new(x: Points, y: Points) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Shape("conditions and responses differ in length".into()));
        }
        if y.len() < 2 {
            return Err(Error::Data("training needs at least two examples".into()));
        }
        Ok(Self { x, y })
    }

    fn rows(&self, idx: &[usize]) -> (Points, Points) {
        let xs = if self.x.dim() == 0 {
            Points::empty_rows(idx.len())
        } else {
            self.x.select(idx)
        };
        (self.y.select(idx), xs)
    }
}

pub trait Trainer: Send + Sync {
    fn name(&self) -> &'static str;

    /// Builds the initial model for `data`.
    fn init_model(&self, data: &TrainData, config: &TrainConfig) -> Result<QuantileModel> {
        let mut cfg = PicnnConfig::new(data.y.dim(), data.x.dim(), config.width, config.depth);
        cfg.strong_convexity = config.strong_convexity;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x5eed));
        let pot = Picnn::new(cfg, &mut rng)?;
        Ok(QuantileModel::new(pot, config.variant, config.reference))
    }

    /// Trains `model` in place, appending one record per finished epoch to
    /// `log`. On failure `log` keeps the epochs completed so far.
    fn train_model(
        &self,
        model: &mut QuantileModel,
        data: &TrainData,
        config: &TrainConfig,
        log: &mut Vec<EpochLog>,
    ) -> Result<()>;

    fn train(&self, data: &TrainData, config: &TrainConfig, log: &mut Vec<EpochLog>) -> Result<QuantileModel> {
        config.check()?;
        let mut model = self.init_model(data, config)?;
        self.train_model(&mut model, data, config, log)?;
        Ok(model)
    }
}

pub type TrainerCtor = dyn Fn() -> Box<dyn Trainer> + Send + Sync;

/// Registry with the three built-in training loops.
pub fn trainers() -> Registry<TrainerCtor> {
    let mut r: Registry<TrainerCtor> = Registry::new("training method");
    r.register("c-nqr", Box::new(|| Box::new(ExactTrainer { amortized: false })));
    r.register("ac-nqr", Box::new(|| Box::new(ExactTrainer { amortized: true })));
    r.register("ec-nqr", Box::new(|| Box::new(EntropicTrainer)));
    r
}

/// Looks up `config.method` and trains.
pub fn train(data: &TrainData, config: &TrainConfig, log: &mut Vec<EpochLog>) -> Result<QuantileModel> {
    config.check()?;
    trainers().get(&config.method)?().train(data, config, log)
}

struct EpochPlan {
    batches: Vec<Vec<usize>>,
}

fn plan_epoch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> EpochPlan {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    EpochPlan {
        batches: idx.chunks(batch).map(|c| c.to_vec()).collect(),
    }
}

fn ensure_actnorm(pot: &mut Picnn, us: &Points, xs: &Points) -> Result<()> {
    if !pot.is_initialized() {
        pot.actnorm_init(us, xs)?;
    }
    Ok(())
}

fn nan_guard(value: f64, epoch: usize, batch: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training objective is {value} at epoch {epoch}, batch {batch}"
        )));
    }
    Ok(())
}

#[derive(Default)]
struct EpochAccumulator {
    objective: f64,
    potential: f64,
    conjugate: f64,
    iterations: f64,
    solves: usize,
    nonconverged: usize,
    amortizer: f64,
    batches: usize,
}

impl EpochAccumulator {
    fn finish(self, epoch: usize, started: Instant) -> EpochLog {
        let b = self.batches.max(1) as f64;
        EpochLog {
            epoch,
            objective: self.objective / b,
            potential_term: self.potential / b,
            conjugate_term: self.conjugate / b,
            mean_inner_iterations: if self.solves > 0 {
                self.iterations / self.solves as f64
            } else {
                0.0
            },
            nonconverged: self.nonconverged,
            amortizer_loss: self.amortizer / b,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        }
    }
}

/// C-NQR and AC-NQR.
pub struct ExactTrainer {
    pub amortized: bool,
}

impl Trainer for ExactTrainer {
    fn name(&self) -> &'static str {
        if self.amortized {
            "ac-nqr"
        } else {
            "c-nqr"
        }
    }

    fn init_model(&self, data: &TrainData, config: &TrainConfig) -> Result<QuantileModel> {
        let mut cfg = PicnnConfig::new(data.y.dim(), data.x.dim(), config.width, config.depth);
        cfg.strong_convexity = config.strong_convexity;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x5eed));
        let pot = Picnn::new(cfg.clone(), &mut rng)?;
        let mut model = QuantileModel::new(pot, config.variant, config.reference);
        if self.amortized {
            model.amortizer = Some(Amortizer::new(AmortizerConfig::mirroring(&cfg), &mut rng)?);
        }
        Ok(model)
    }

    fn train_model(
        &self,
        model: &mut QuantileModel,
        data: &TrainData,
        config: &TrainConfig,
        log: &mut Vec<EpochLog>,
    ) -> Result<()> {
        config.check()?;
        if self.amortized && model.amortizer.is_none() {
            return Err(Error::Config("ac-nqr needs a model with an amortizer".into()));
        }
        let d = data.y.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let settings = config.solver_settings(self.amortized);
        let domain = model.conjugate_domain();
        let steps_per_epoch = data.y.len().div_ceil(config.batch_size);
        let total = steps_per_epoch * config.epochs;
        let mut opt = AdamW::new(model.potential.num_params());
        let mut opt_a = model.amortizer.as_ref().map(|a| AdamW::new(a.num_params()));
        let mut step = 0;
        for epoch in 1..=config.epochs {
            let started = Instant::now();
            let mut acc = EpochAccumulator::default();
            for (b, idx) in plan_epoch(&mut rng, data.y.len(), config.batch_size).batches.iter().enumerate() {
                let (ys, xs) = data.rows(idx);
                let fresh = config.reference.sample_points(&mut rng, idx.len(), d);
                let roles = batch_roles(config.variant, ys, xs, fresh);
                ensure_actnorm(&mut model.potential, &roles.potential_points, &roles.xs)?;
                let inits = match (&model.amortizer, self.amortized) {
                    (Some(a), true) => {
                        let mut p = a.predict_batch(&roles.conjugate_targets, &roles.xs)?;
                        for i in 0..p.len() {
                            domain.project(p.row_mut(i));
                        }
                        Some(p)
                    }
                    _ => None,
                };
                let sols = solve_all(
                    &model.potential,
                    &roles.conjugate_targets,
                    &roles.xs,
                    &domain,
                    &settings,
                    inits.as_ref(),
                )
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
                let (est, mut grad) =
                    exact_dual_and_grad(&model.potential, &roles.potential_points, &roles.xs, &sols, &roles.xs)?;
                nan_guard(est.value, epoch, b)?;

                // amortizer regresses onto this step's maximizers before θ moves
                if let (Some(a), Some(oa)) = (model.amortizer.as_mut(), opt_a.as_mut()) {
                    let targets = Points::from_rows(d, sols.iter().map(|s| &s.u_hat))?;
                    let (loss, mut ga) = a.loss_and_grad(
                        config.amortizer_loss,
                        &roles.conjugate_targets,
                        &roles.xs,
                        Some(&targets),
                        Some(&model.potential),
                    )?;
                    clip_gradients(&mut ga, config.clip_norm);
                    let lr_a = cosine_restart_lr(config.amortizer_lr, step, config.restart_period);
                    oa.update(a.params_mut(), &ga, lr_a, config.weight_decay);
                    acc.amortizer += loss;
                }

                clip_gradients(&mut grad, config.clip_norm);
                let lr = cosine_lr(config.lr, step, total);
                model
                    .potential
                    .update_params(|p| opt.update(p, &grad, lr, config.weight_decay));
                step += 1;

                acc.objective += est.value;
                acc.potential += est.potential_term;
                acc.conjugate += est.conjugate_term;
                acc.iterations += sols.iter().map(|s| s.iterations as f64).sum::<f64>();
                acc.solves += sols.len();
                acc.nonconverged += sols.iter().filter(|s| !s.converged).count();
                acc.batches += 1;
            }
            log.push(acc.finish(epoch, started));
        }
        Ok(())
    }
}

/// EC-NQR.
pub struct EntropicTrainer;

impl Trainer for EntropicTrainer {
    fn name(&self) -> &'static str {
        "ec-nqr"
    }

    fn train_model(
        &self,
        model: &mut QuantileModel,
        data: &TrainData,
        config: &TrainConfig,
        log: &mut Vec<EpochLog>,
    ) -> Result<()> {
        config.check()?;
        if model.variant != Variant::U {
            return Err(Error::Config("ec-nqr supports only the U variant".into()));
        }
        let d = data.y.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let steps_per_epoch = data.y.len().div_ceil(config.batch_size);
        let total = steps_per_epoch * config.epochs;
        let mut opt = AdamW::new(model.potential.num_params());
        let mut step = 0;
        for epoch in 1..=config.epochs {
            let started = Instant::now();
            let mut acc = EpochAccumulator::default();
            for (b, idx) in plan_epoch(&mut rng, data.y.len(), config.batch_size).batches.iter().enumerate() {
                let (ys, xs) = data.rows(idx);
                let fresh = config.reference.sample_points(&mut rng, idx.len(), d);
                ensure_actnorm(&mut model.potential, &fresh, &xs)?;
                let step_seed: u64 = rng.random();
                let (est, mut grad) = entropic_dual_and_grad(
                    &model.potential,
                    &fresh,
                    &ys,
                    &xs,
                    config.reference,
                    config.epsilon,
                    config.mc_samples,
                    step_seed,
                )
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
                nan_guard(est.value, epoch, b)?;
                clip_gradients(&mut grad, config.clip_norm);
                let lr = cosine_lr(config.lr, step, total);
                model
                    .potential
                    .update_params(|p| opt.update(p, &grad, lr, config.weight_decay));
                step += 1;
                acc.objective += est.value;
                acc.potential += est.potential_term;
                acc.conjugate += est.conjugate_term;
                acc.batches += 1;
            }
            log.push(acc.finish(epoch, started));
        }
        Ok(())
    }
}

/// Fits a strongly convex reference potential to a base dataset (in its
/// standardized coordinates) for use as ground truth of a convex variant.
pub fn fit_ground_truth(base: &str, n: usize, seed: u64, config: &TrainConfig) -> Result<GroundTruthMap> {
    if !CONVEX_BASES.contains(&base) {
        return Err(Error::Config(format!(
            "convex variants exist for {}, not `{base}`",
            CONVEX_BASES.join(", ")
        )));
    }
    let mut table = generators().get(base)?(&GeneratorOptions::default())?.generate(n, seed)?;
    let all: Vec<usize> = (0..table.len()).collect();
    let stats = table.standardize(&all)?;
    let mut cfg = config.clone();
    cfg.variant = Variant::U;
    cfg.reference = Reference::Gaussian;
    cfg.strong_convexity = true;
    let mut log = Vec::new();
    let mut model = train(&TrainData::new(table.x, table.y)?, &cfg, &mut log)?;
    model.solver = SolverSettings::default();
    GroundTruthMap::new(base, model, stats.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn adamw_cases() {
        let mut p = vec![1.5, -2.0];
        AdamW::new(2).update(&mut p, &[0.0, 0.0], 0.1, 0.0);
        assert_eq!(p, vec![1.5, -2.0]);

        let mut p = vec![1.0];
        AdamW::new(1).update(&mut p, &[1.0], 0.1, 0.0);
        assert!(p[0].abs() < 1.0);

        let mut p = vec![2.0, -3.0];
        AdamW::new(2).update(&mut p, &[0.0, 0.0], 0.1, 0.1);
        assert!((p[0] - 2.0 * 0.99).abs() < 1e-15 && (p[1] + 3.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn clipping_cases() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_gradients(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        let mut g = vec![12.0, 16.0];
        clip_gradients(&mut g, 10.0);
        assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] - 8.0).abs() < 1e-12);
        let mut z = vec![0.0; 3];
        clip_gradients(&mut z, 10.0);
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn schedules() {
        assert_eq!(cosine_lr(0.01, 0, 100), 0.01);
        assert!(cosine_lr(0.01, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(0.01, 50, 100) - 0.005).abs() < 1e-15);
        assert_eq!(cosine_restart_lr(0.01, 5000, 5000), 0.01);
    }

    #[test]
    fn soft_max_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = randn(&mut rng, 64);
            let eps = rng.random_range(1e-3..1.0);
            let hard = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let soft = soft_max(&v, eps);
            assert!(soft >= hard - 1e-12 && soft <= hard + eps * 64f64.ln() + 1e-12);
        }
    }

    #[test]
    fn entropic_rank_of_constant_potential_is_sample_mean() {
        let pot = Picnn::quadratic(2, 0, 1e-300).unwrap();
        let r = entropic_rank(&pot, &[0.0, 0.0], &[], Reference::Gaussian, 1e6, 2000, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Reference::Gaussian.sample_points(&mut rng, 2000, 2);
        let mean0 = s.column(0).iter().sum::<f64>() / 2000.0;
        assert!((r.rank[0] - mean0).abs() < 1e-6);
        assert!(r.effective_sample_size > 1999.0);
    }

    #[test]
    fn training_with_zero_lr_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = TrainData::new(
            Points::new(1, randn(&mut rng, 64)).unwrap(),
            Points::new(2, randn(&mut rng, 128)).unwrap(),
        )
        .unwrap();
        for method in ["c-nqr", "ac-nqr", "ec-nqr"] {
            let cfg = TrainConfig {
                method: method.into(),
                width: 4,
                depth: 2,
                batch_size: 16,
                epochs: 2,
                lr: 0.0,
                amortizer_lr: 0.0,
                mc_samples: 32,
                epsilon: 0.1,
                ..Default::default()
            };
            let t = trainers().get(method).unwrap()();
            let mut model = t.init_model(&data, &cfg).unwrap();
            let (_, xs) = data.rows(&(0..16).collect::<Vec<_>>());
            let fresh = Reference::Gaussian.sample_points(&mut rng, 16, 2);
            model.potential.actnorm_init(&fresh, &xs).unwrap();
            let before = model.potential.params().to_vec();
            let mut log = Vec::new();
            t.train_model(&mut model, &data, &cfg, &mut log).unwrap();
            assert_eq!(model.potential.params(), &before[..], "{method}");
            assert_eq!(log.len(), 2);
        }
    }

    #[test]
    fn seeded_runs_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = TrainData::new(
            Points::new(1, randn(&mut rng, 64)).unwrap(),
            Points::new(2, randn(&mut rng, 128)).unwrap(),
        )
        .unwrap();
        for method in ["ac-nqr", "ec-nqr"] {
            let cfg = TrainConfig {
                method: method.into(),
                width: 4,
                depth: 2,
                batch_size: 16,
                epochs: 2,
                mc_samples: 32,
                epsilon: 0.1,
                ..Default::default()
            };
            let (mut l1, mut l2) = (Vec::new(), Vec::new());
            let m1 = train(&data, &cfg, &mut l1).unwrap();
            let m2 = train(&data, &cfg, &mut l2).unwrap();
            assert_eq!(m1.potential.params(), m2.potential.params());
            let strip = |l: &[EpochLog]| l.iter().map(|e| (e.objective, e.mean_inner_iterations)).collect::<Vec<_>>();
            assert_eq!(strip(&l1), strip(&l2));
        }
    }

    #[test]
    fn config_validation_lists_problems() {
        let cfg = TrainConfig {
            method: "nope".into(),
            batch_size: 0,
            epsilon: 0.0,
            mc_samples: 1,
            ..Default::default()
        };
        let p = cfg.validate().unwrap();
        assert_eq!(p.len(), 4, "{p:?}");
        let ec_y = TrainConfig {
            method: "ec-nqr".into(),
            variant: Variant::Y,
            ..Default::default()
        };
        assert_eq!(ec_y.validate().unwrap().len(), 1);
    }

    #[test]
    fn entropic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pot = Picnn::new(PicnnConfig::new(2, 1, 4, 2), &mut rng).unwrap();
        let us = Points::new(2, randn(&mut rng, 16)).unwrap();
        let xs = Points::new(1, randn(&mut rng, 8)).unwrap();
        let ys = Points::new(2, randn(&mut rng, 16)).unwrap();
        pot.actnorm_init(&us, &xs).unwrap();
        let eps = 0.3;
        let f = |p: &Picnn| {
            entropic_dual_and_grad(p, &us, &ys, &xs, Reference::Gaussian, eps, 64, 9)
                .unwrap()
                .0
                .value
        };
        let (_, g) = entropic_dual_and_grad(&pot, &us, &ys, &xs, Reference::Gaussian, eps, 64, 9).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let picks: Vec<usize> = (0..20).map(|_| rng.random_range(0..pot.num_params())).collect();
        for &i in &picks {
            let mut p = pot.clone();
            p.update_params(|v| v[i] += h);
            let mut m = pot.clone();
            m.update_params(|v| v[i] -= h);
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "{worst}");
    }
}
