//! Split-conformal prediction sets built on rank maps.
//!
//! Registered methods (see [`methods`]):
//!
//! * `pb`: pull-back of a reference ball, radius from calibration rank norms,
//! * `rpb`: the same after a discrete OT re-ranking onto the uniform ball,
//! * `hpd`: density level set of the change-of-variables density,
//! * `quantile`: uncalibrated chi radius for a Gaussian reference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::assignment;
use crate::error::{Error, Result};
use crate::points::{norm, sq_dist, Points};
use crate::rank::{rank_jacobian, symmetric_eigenvalues, RankMap};
use crate::reference::{sample_unit_ball, Reference};
use crate::registry::Registry;

/// Scores kept in a serialized artifact; larger calibration sets store only
/// the threshold.
pub const MAX_STORED_SCORES: usize = 10_000;
/// Eigenvalues of the symmetrized rank Jacobian below `-PSD_TOLERANCE`
/// mark a density score as unreliable.
pub const PSD_TOLERANCE: f64 = 1e-3;
const INDEX_GUARD: f64 = 1e-9;

/// `⌈(n+1)(1−α)⌉`, the 1-based order statistic giving the radius.
pub fn upper_index(n: usize, alpha: f64) -> usize {
    ((n as f64 + 1.0) * (1.0 - alpha) - INDEX_GUARD).ceil() as usize
}

/// `⌊(n+1)α⌋`, the 1-based order statistic giving a density threshold.
pub fn lower_index(n: usize, alpha: f64) -> usize {
    ((n as f64 + 1.0) * alpha + INDEX_GUARD).floor() as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("miscoverage level must lie in (0, 1), got {alpha}")))
    }
}

/// Stable ascending sort; `+∞` sorts last.
fn sorted(mut s: Vec<f64>) -> Vec<f64> {
    s.sort_by(|a, b| a.total_cmp(b));
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub method: String,
    pub alpha: f64,
    /// Size of the split used for the order statistic.
    pub n: usize,
    /// Radius (norm scores) or density level (`hpd`). `None` means the set is
    /// the whole response space.
    pub threshold: Option<f64>,
    /// Sorted finite scores; omitted for large calibration sets.
    pub scores: Option<Vec<f64>>,
    /// Calibration points whose score could not be computed and were scored
    /// conservatively.
    pub failed: usize,
    /// Set when `n` is too small for the requested level.
    pub trivial: bool,
    pub rerank: Option<RerankMap>,
    /// `(fit, conformalize)` sizes for `rpb`.
    pub split: Option<(usize, usize)>,
}

impl CalibrationArtifact {
    fn from_upper(method: &str, alpha: f64, scores: Vec<f64>, failed: usize) -> Self {
        let n = scores.len();
        let s = sorted(scores);
        let k = upper_index(n, alpha);
        let threshold = if k >= 1 && k <= n && s[k - 1].is_finite() {
            Some(s[k - 1])
        } else {
            None
        };
        Self::finish(method, alpha, s, failed, threshold, k > n)
    }

    fn from_lower(method: &str, alpha: f64, scores: Vec<f64>, failed: usize) -> Self {
        let n = scores.len();
        let s = sorted(scores);
        let k = lower_index(n, alpha);
        let threshold = if k == 0 { 0.0 } else { s[k - 1] };
        Self::finish(method, alpha, s, failed, Some(threshold), k == 0)
    }

    fn finish(method: &str, alpha: f64, s: Vec<f64>, failed: usize, threshold: Option<f64>, trivial: bool) -> Self {
        let n = s.len();
        let finite: Vec<f64> = s.into_iter().filter(|v| v.is_finite()).collect();
        Self {
            method: method.into(),
            alpha,
            n,
            threshold,
            scores: (finite.len() <= MAX_STORED_SCORES).then_some(finite),
            failed,
            trivial,
            rerank: None,
            split: None,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Discrete OT pairing of empirical ranks with uniform-ball draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankMap {
    pub sources: Points,
    pub references: Points,
    /// `sources[i]` is paired with `references[sigma[i]]`.
    pub sigma: Vec<usize>,
}

impl RerankMap {
    pub fn fit(ranks: &Points, seed: u64) -> Result<Self> {
        let n = ranks.len();
        if n == 0 {
            return Err(Error::Data("re-ranking needs at least one rank".into()));
        }
        let d = ranks.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut references = Points::with_capacity(d, n);
        let mut buf = vec![0.0; d];
        for _ in 0..n {
            sample_unit_ball(&mut rng, &mut buf);
            references.push(&buf)?;
        }
        let a = assignment::solve(n, &assignment::squared_cost(ranks, &references))?;
        Ok(Self {
            sources: ranks.clone(),
            references,
            sigma: a.row_to_col,
        })
    }

    /// Pairing given explicitly.
    pub fn from_pairs(sources: Points, references: Points, sigma: Vec<usize>) -> Result<Self> {
        let n = sources.len();
        let mut seen = vec![false; n];
        if references.len() != n || sigma.len() != n || sources.dim() != references.dim() {
            return Err(Error::Shape("re-ranking pairs differ in size".into()));
        }
        for &j in &sigma {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(Error::Config("re-ranking pairing is not a permutation".into()));
            }
        }
        Ok(Self {
            sources,
            references,
            sigma,
        })
    }

    /// Index of the nearest source, ties to the lowest index.
    pub fn nearest(&self, u: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, s) in self.sources.rows().enumerate() {
            let d = sq_dist(s, u);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    pub fn apply(&self, u: &[f64]) -> &[f64] {
        self.references.row(self.sigma[self.nearest(u)])
    }

    /// Mean squared displacement of the pairing.
    pub fn mean_displacement(&self) -> f64 {
        let n = self.sources.len();
        (0..n)
            .map(|i| sq_dist(self.sources.row(i), self.references.row(self.sigma[i])))
            .sum::<f64>()
            / n as f64
    }
}

/// Three-valued set membership; `Unknown` arises when the rank map cannot be
/// evaluated at the candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Membership {
    In,
    Out,
    Unknown,
}

pub trait ConformalMethod: Send + Sync {
    fn name(&self) -> &'static str;

    fn calibrate(&self, map: &dyn RankMap, ys: &Points, xs: &Points, alpha: f64, seed: u64) -> Result<CalibrationArtifact>;

    fn score(&self, map: &dyn RankMap, artifact: &CalibrationArtifact, y: &[f64], x: &[f64]) -> Result<f64>;

    /// Whether `score` lies inside the calibrated set.
    fn admits(&self, score: f64, threshold: Option<f64>) -> bool;

    fn membership(&self, map: &dyn RankMap, artifact: &CalibrationArtifact, y: &[f64], x: &[f64]) -> Membership {
        if artifact.threshold.is_none() {
            return Membership::In;
        }
        match self.score(map, artifact, y, x) {
            Ok(s) if self.admits(s, artifact.threshold) => Membership::In,
            Ok(_) => Membership::Out,
            Err(_) => Membership::Unknown,
        }
    }
}

fn norm_admits(score: f64, threshold: Option<f64>) -> bool {
    threshold.is_none_or(|t| score <= t)
}

fn rank_norm_scores(map: &dyn RankMap, ys: &Points, xs: &Points) -> (Vec<f64>, usize) {
    let mut failed = 0;
    let scores = map
        .rank_batch(ys, xs)
        .into_iter()
        .map(|r| match r {
            Ok(u) => norm(&u),
            Err(_) => {
                failed += 1;
                f64::INFINITY
            }
        })
        .collect();
    (scores, failed)
}

fn check_set(map: &dyn RankMap, ys: &Points, xs: &Points) -> Result<()> {
    if ys.len() != xs.len() {
        return Err(Error::Shape("calibration responses and conditions differ in length".into()));
    }
    if ys.dim() != map.response_dim() || xs.dim() != map.condition_dim() {
        return Err(Error::Shape("calibration data does not match the model dimensions".into()));
    }
    Ok(())
}

pub struct PullBack;

impl ConformalMethod for PullBack {
    fn name(&self) -> &'static str {
        "pb"
    }

    fn calibrate(&self, map: &dyn RankMap, ys: &Points, xs: &Points, alpha: f64, _seed: u64) -> Result<CalibrationArtifact> {
        check_alpha(alpha)?;
        check_set(map, ys, xs)?;
        let (scores, failed) = rank_norm_scores(map, ys, xs);
        Ok(CalibrationArtifact::from_upper(self.name(), alpha, scores, failed))
    }

    fn score(&self, map: &dyn RankMap, _: &CalibrationArtifact, y: &[f64], x: &[f64]) -> Result<f64> {
        Ok(norm(&map.rank(y, x)?))
    }

    fn admits(&self, score: f64, threshold: Option<f64>) -> bool {
        norm_admits(score, threshold)
    }
}

pub struct RerankedPullBack {
    /// Share of the calibration set used to fit the re-ranking.
    pub fit_fraction: f64,
}

impl RerankedPullBack {
    /// Calibrates on `(ys, xs)` with an already fitted re-ranking.
    pub fn calibrate_with(
        &self,
        map: &dyn RankMap,
        rerank: RerankMap,
        ys: &Points,
        xs: &Points,
        alpha: f64,
    ) -> Result<CalibrationArtifact> {
        check_alpha(alpha)?;
        check_set(map, ys, xs)?;
        let mut failed = 0;
        let scores = map
            .rank_batch(ys, xs)
            .into_iter()
            .map(|r| match r {
                Ok(u) => norm(rerank.apply(&u)),
                Err(_) => {
                    failed += 1;
                    f64::INFINITY
                }
            })
            .collect();
        let mut art = CalibrationArtifact::from_upper(self.name(), alpha, scores, failed);
        art.split = Some((rerank.sources.len(), ys.len()));
        art.rerank = Some(rerank);
        Ok(art)
    }
}

impl ConformalMethod for RerankedPullBack {
    fn name(&self) -> &'static str {
        "rpb"
    }

    fn calibrate(&self, map: &dyn RankMap, ys: &Points, xs: &Points, alpha: f64, seed: u64) -> Result<CalibrationArtifact> {
        check_alpha(alpha)?;
        check_set(map, ys, xs)?;
        let n = ys.len();
        let n_fit = ((n as f64) * self.fit_fraction).round() as usize;
        if n_fit < 2 || n_fit >= n {
            return Err(Error::Data(format!(
                "calibration set of {n} cannot be split with fraction {}",
                self.fit_fraction
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let (fit_idx, conf_idx) = idx.split_at(n_fit);
        let ranks: Vec<Vec<f64>> = map
            .rank_batch(&ys.select(fit_idx), &xs.select(fit_idx))
            .into_iter()
            .filter_map(|r| r.ok())
            .collect();
        let ranks = Points::from_rows(ys.dim(), &ranks)?;
        let rerank = RerankMap::fit(&ranks, rng.random())?;
        let mut art = self.calibrate_with(map, rerank, &ys.select(conf_idx), &xs.select(conf_idx), alpha)?;
        art.failed += n_fit - ranks.len();
        art.split = Some((n_fit, n - n_fit));
        Ok(art)
    }

    fn score(&self, map: &dyn RankMap, artifact: &CalibrationArtifact, y: &[f64], x: &[f64]) -> Result<f64> {
        let rr = artifact
            .rerank
            .as_ref()
            .ok_or_else(|| Error::Config("rpb artifact carries no re-ranking".into()))?;
        Ok(norm(rr.apply(&map.rank(y, x)?)))
    }

    fn admits(&self, score: f64, threshold: Option<f64>) -> bool {
        norm_admits(score, threshold)
    }
}

/// Change-of-variables density `f_U(Q⁻¹(y, x)) · det ∇_y Q⁻¹(y, x)` with a
/// finite-difference Jacobian. Fails when the symmetrized Jacobian is
/// indefinite beyond [`PSD_TOLERANCE`].
pub fn model_density(map: &dyn RankMap, y: &[f64], x: &[f64]) -> Result<f64> {
    let d = y.len();
    let u = map.rank(y, x)?;
    let jac = rank_jacobian(map, y, x, None)?;
    let eig = symmetric_eigenvalues(d, &jac);
    if eig[0] < -PSD_TOLERANCE {
        return Err(Error::NonFinite(format!(
            "rank Jacobian has eigenvalue {} at y={y:?}",
            eig[0]
        )));
    }
    let det: f64 = eig.iter().map(|e| e.max(0.0)).product();
    Ok(map.reference().density(&u) * det)
}

pub struct HighestDensity;

impl ConformalMethod for HighestDensity {
    fn name(&self) -> &'static str {
        "hpd"
    }

    fn calibrate(&self, map: &dyn RankMap, ys: &Points, xs: &Points, alpha: f64, _seed: u64) -> Result<CalibrationArtifact> {
        check_alpha(alpha)?;
        check_set(map, ys, xs)?;
        let scores: Vec<Option<f64>> = (0..ys.len())
            .into_par_iter()
            .map(|i| model_density(map, ys.row(i), xs.row(i)).ok())
            .collect();
        let failed = scores.iter().filter(|s| s.is_none()).count();
        let scores = scores.into_iter().map(|s| s.unwrap_or(0.0)).collect();
        Ok(CalibrationArtifact::from_lower(self.name(), alpha, scores, failed))
    }

    fn score(&self, map: &dyn RankMap, _: &CalibrationArtifact, y: &[f64], x: &[f64]) -> Result<f64> {
        model_density(map, y, x)
    }

    fn admits(&self, score: f64, threshold: Option<f64>) -> bool {
        threshold.is_some_and(|t| score >= t)
    }
}

/// Radius of the reference ball holding `1 − α` of a standard Gaussian.
pub fn chi_radius(d: usize, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let chi = ChiSquared::new(d as f64).map_err(|e| Error::Config(e.to_string()))?;
    Ok(chi.inverse_cdf(1.0 - alpha).sqrt())
}

pub struct GaussianQuantile;

impl ConformalMethod for GaussianQuantile {
    fn name(&self) -> &'static str {
        "quantile"
    }

    fn calibrate(&self, map: &dyn RankMap, _: &Points, _: &Points, alpha: f64, _seed: u64) -> Result<CalibrationArtifact> {
        if map.reference() != Reference::Gaussian {
            return Err(Error::Config("the quantile baseline needs a Gaussian reference".into()));
        }
        let r = chi_radius(map.response_dim(), alpha)?;
        Ok(CalibrationArtifact {
            method: self.name().into(),
            alpha,
            n: 0,
            threshold: Some(r),
            scores: None,
            failed: 0,
            trivial: false,
            rerank: None,
            split: None,
        })
    }

    fn score(&self, map: &dyn RankMap, _: &CalibrationArtifact, y: &[f64], x: &[f64]) -> Result<f64> {
        Ok(norm(&map.rank(y, x)?))
    }

    fn admits(&self, score: f64, threshold: Option<f64>) -> bool {
        norm_admits(score, threshold)
    }
}

pub type MethodCtor = dyn Fn() -> Box<dyn ConformalMethod> + Send + Sync;

pub fn methods() -> Registry<MethodCtor> {
    let mut r: Registry<MethodCtor> = Registry::new("conformal method");
    r.register("pb", Box::new(|| Box::new(PullBack)));
    r.register("rpb", Box::new(|| Box::new(RerankedPullBack { fit_fraction: 0.5 })));
    r.register("hpd", Box::new(|| Box::new(HighestDensity)));
    r.register("quantile", Box::new(|| Box::new(GaussianQuantile)));
    r
}

/// The calibrated set at one conditioning point.
pub struct PredictionSet<'a> {
    pub method: &'a dyn ConformalMethod,
    pub map: &'a dyn RankMap,
    pub artifact: &'a CalibrationArtifact,
    pub x: Vec<f64>,
}

impl PredictionSet<'_> {
    pub fn contains(&self, y: &[f64]) -> Membership {
        self.method.membership(self.map, self.artifact, y, &self.x)
    }
}

/// Monte Carlo volume of `{z in box : member(z)}`.
pub fn mc_volume<F: Fn(&[f64]) -> bool + Sync>(member: F, lo: &[f64], hi: &[f64], n: usize, seed: u64) -> Result<f64> {
    let box_vol = box_volume(lo, hi)?;
    Ok(box_vol * mc_hits(&member, lo, hi, n, seed) as f64 / n as f64)
}

fn box_volume(lo: &[f64], hi: &[f64]) -> Result<f64> {
    if lo.len() != hi.len() || lo.is_empty() || lo.iter().zip(hi).any(|(a, b)| !(b > a)) {
        return Err(Error::Config("degenerate bounding box".into()));
    }
    Ok(lo.iter().zip(hi).map(|(a, b)| b - a).product())
}

fn mc_hits<F: Fn(&[f64]) -> bool + Sync>(member: &F, lo: &[f64], hi: &[f64], n: usize, seed: u64) -> usize {
    const CHUNK: usize = 4096;
    (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut z = vec![0.0; lo.len()];
            let mut hits = 0;
            for _ in c * CHUNK..((c + 1) * CHUNK).min(n) {
                for (k, v) in z.iter_mut().enumerate() {
                    *v = rng.random_range(lo[k]..hi[k]);
                }
                hits += member(&z) as usize;
            }
            hits
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSettings {
    /// Monte Carlo points per volume estimate; 0 skips volumes.
    pub volume_points: usize,
    /// Test conditions whose set volume is estimated.
    pub volume_conditions: usize,
    /// Relative inflation of the test-response bounding box.
    pub box_inflation: f64,
    pub slab_directions: usize,
    /// Minimum test mass of a slab.
    pub slab_mass: f64,
    pub seed: u64,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            volume_points: 100_000,
            volume_conditions: 10,
            box_inflation: 0.25,
            slab_directions: 1000,
            slab_mass: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetEvaluation {
    pub coverage: f64,
    pub worst_slab_coverage: f64,
    /// Mean over the evaluated conditions of `ln(volume) / d_y`.
    pub log_volume_per_dim: Option<f64>,
    pub unknown: usize,
}

/// Coverage, worst-slab coverage and mean normalized log-volume on a test
/// set. Unknown memberships count as misses for coverage and as members for
/// volume.
pub fn evaluate_sets(
    method: &dyn ConformalMethod,
    map: &dyn RankMap,
    artifact: &CalibrationArtifact,
    ys: &Points,
    xs: &Points,
    settings: &EvaluationSettings,
) -> Result<SetEvaluation> {
    let n = ys.len();
    if n == 0 {
        return Err(Error::Data("empty test set".into()));
    }
    check_set(map, ys, xs)?;
    let members: Vec<Membership> = (0..n)
        .into_par_iter()
        .map(|i| method.membership(map, artifact, ys.row(i), xs.row(i)))
        .collect();
    let covered: Vec<bool> = members.iter().map(|m| *m == Membership::In).collect();
    let coverage = covered.iter().filter(|c| **c).count() as f64 / n as f64;
    let worst = worst_slab_coverage(xs, &covered, settings.slab_directions, settings.slab_mass, settings.seed)?;

    let log_volume_per_dim = if settings.volume_points > 0 && settings.volume_conditions > 0 {
        let d = ys.dim() as f64;
        let (lo, hi): (Vec<f64>, Vec<f64>) = ys
            .bounds()
            .into_iter()
            .map(|(a, b)| {
                let pad = settings.box_inflation * (b - a) / 2.0;
                (a - pad, b + pad)
            })
            .unzip();
        let box_vol = box_volume(&lo, &hi)?;
        let m = settings.volume_conditions.min(n);
        let mut total = 0.0;
        for i in 0..m {
            let x = xs.row(i);
            let hits = mc_hits(
                &|z: &[f64]| method.membership(map, artifact, z, x) != Membership::Out,
                &lo,
                &hi,
                settings.volume_points,
                settings.seed.wrapping_add(i as u64),
            );
            // an empty estimate is floored at half a hit
            let frac = (hits as f64).max(0.5) / settings.volume_points as f64;
            total += (box_vol * frac).ln() / d;
        }
        Some(total / m as f64)
    } else {
        None
    };
    Ok(SetEvaluation {
        coverage,
        worst_slab_coverage: worst,
        log_volume_per_dim,
        unknown: members.iter().filter(|m| **m == Membership::Unknown).count(),
    })
}

/// Minimum coverage over slabs `{x : a ≤ vᵀx ≤ b}` holding at least a
/// `mass` share of the test points, over random unit directions `v`. Slab
/// endpoints run over projection quantiles spaced `mass / 2` apart.
pub fn worst_slab_coverage(xs: &Points, covered: &[bool], directions: usize, mass: f64, seed: u64) -> Result<f64> {
    let n = covered.len();
    if n == 0 || xs.len() != n {
        return Err(Error::Shape("slab coverage needs one flag per test point".into()));
    }
    let overall = covered.iter().filter(|c| **c).count() as f64 / n as f64;
    let dx = xs.dim();
    if dx == 0 || directions == 0 {
        return Ok(overall);
    }
    let min_count = ((mass * n as f64).ceil() as usize).max(1);
    let step = ((mass / 2.0 * n as f64).floor() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..directions)
        .map(|_| {
            let mut v = vec![0.0; dx];
            Reference::Gaussian.sample_into(&mut rng, &mut v);
            let s = norm(&v).max(1e-300);
            v.iter_mut().for_each(|c| *c /= s);
            v
        })
        .collect();
    let worst = dirs
        .par_iter()
        .map(|v| {
            let mut order: Vec<(f64, bool)> = (0..n).map(|i| (crate::points::dot(v, xs.row(i)), covered[i])).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut prefix = vec![0usize; n + 1];
            for (i, (_, c)) in order.iter().enumerate() {
                prefix[i + 1] = prefix[i] + *c as usize;
            }
            let mut cuts: Vec<usize> = (0..n).step_by(step).collect();
            cuts.push(n);
            let mut w = 1.0f64;
            for (ai, &a) in cuts.iter().enumerate() {
                for &b in &cuts[ai + 1..] {
                    if b - a >= min_count {
                        w = w.min((prefix[b] - prefix[a]) as f64 / (b - a) as f64);
                    }
                }
            }
            w
        })
        .reduce(|| 1.0, f64::min);
    Ok(worst.min(overall))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rank::AffineGaussianMap;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Points {
        Points::new(d, (0..n * d).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    #[test]
    fn order_indices() {
        for (n, a, k) in [(99, 0.1, 90), (199, 0.05, 190), (9, 0.5, 5), (19, 0.05, 19), (4, 0.1, 5)] {
            assert_eq!(upper_index(n, a), k, "n={n} α={a}");
        }
        for (n, a, k) in [(99, 0.1, 10), (199, 0.05, 10), (8, 0.1, 0)] {
            assert_eq!(lower_index(n, a), k, "n={n} α={a}");
        }
    }

    #[test]
    fn constant_scores_and_small_sets() {
        let art = CalibrationArtifact::from_upper("pb", 0.1, vec![0.7; 50], 0);
        assert_eq!(art.threshold, Some(0.7));
        let art = CalibrationArtifact::from_upper("pb", 0.1, vec![0.7; 5], 0);
        assert!(art.trivial && art.threshold.is_none());
    }

    #[test]
    fn pullback_boundary_is_closed() {
        let map = AffineGaussianMap::identity(2);
        let mut art = CalibrationArtifact::from_upper("pb", 0.1, vec![1.0; 20], 0);
        assert_eq!(PullBack.membership(&map, &art, &[0.6, 0.8], &[]), Membership::In);
        assert_eq!(PullBack.membership(&map, &art, &[0.6, 0.81], &[]), Membership::Out);
        art.threshold = Some(0.0);
        assert_eq!(PullBack.membership(&map, &art, &[0.0, 0.0], &[]), Membership::In);
        assert_eq!(PullBack.membership(&map, &art, &[1e-12, 0.0], &[]), Membership::Out);
        art.threshold = None;
        assert_eq!(PullBack.membership(&map, &art, &[1e9, 0.0], &[]), Membership::In);
    }

    #[test]
    fn identity_map_radius_and_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = AffineGaussianMap::identity(2);
        let ys = gauss_points(&mut rng, 5000, 2);
        let art = PullBack.calibrate(&map, &ys, &Points::empty_rows(5000), 0.1, 0).unwrap();
        let rho = art.threshold.unwrap();
        assert!((rho - (-2.0 * 0.1f64.ln()).sqrt()).abs() < 0.05, "{rho}");
        let vol = mc_volume(
            |z| PullBack.membership(&map, &art, z, &[]) == Membership::In,
            &[-3.0, -3.0],
            &[3.0, 3.0],
            200_000,
            2,
        )
        .unwrap();
        let exact = std::f64::consts::PI * rho * rho;
        assert!((vol / exact - 1.0).abs() < 0.02, "{vol} vs {exact}");
    }

    #[test]
    fn mc_volume_of_unit_disc() {
        let v = mc_volume(|z| norm(z) <= 1.0, &[-2.0, -2.0], &[2.0, 2.0], 1_000_000, 3).unwrap();
        assert!((v / std::f64::consts::PI - 1.0).abs() < 0.01, "{v}");
        assert!(mc_volume(|_| true, &[0.0], &[0.0], 10, 0).is_err());
    }

    #[test]
    fn rerank_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let single = RerankMap::fit(&gauss_points(&mut rng, 1, 2), 0).unwrap();
        assert_eq!(single.sigma, vec![0]);
        for t in 0..10 {
            let src = gauss_points(&mut rng, 7, 2);
            let r = RerankMap::fit(&src, t).unwrap();
            let cost = assignment::squared_cost(&r.sources, &r.references);
            let got: f64 = (0..7).map(|i| cost[i * 7 + r.sigma[i]]).sum();
            assert!((got - assignment::brute_force(7, &cost)).abs() < 1e-10);
        }
    }

    #[test]
    fn rerank_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = gauss_points(&mut rng, 40, 3);
        let r = RerankMap::fit(&src, 6).unwrap();
        for i in 0..40 {
            assert_eq!(r.apply(src.row(i)), r.references.row(r.sigma[i]));
        }
        for _ in 0..200 {
            let u: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            assert!(norm(r.apply(&u)) <= 1.0 + 1e-12);
            let mut d: Vec<(f64, usize)> = src.rows().enumerate().map(|(i, s)| (sq_dist(s, &u).sqrt(), i)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let gap = (d[1].0 - d[0].0) / 2.0;
            let mut w = u.clone();
            w[0] += 0.9 * gap;
            assert_eq!(r.apply(&w), r.apply(&u));
        }
    }

    #[test]
    fn rerank_displacement_shrinks_for_uniform_sources() {
        let mean = |n: usize| {
            (0..3)
                .map(|s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
                    let mut p = Points::with_capacity(2, n);
                    let mut b = [0.0; 2];
                    for _ in 0..n {
                        sample_unit_ball(&mut rng, &mut b);
                        p.push(&b).unwrap();
                    }
                    RerankMap::fit(&p, 200 + s).unwrap().mean_displacement()
                })
                .sum::<f64>()
                / 3.0
        };
        let (a, b, c) = (mean(50), mean(200), mean(800));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn identity_rerank_reduces_to_pullback() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = AffineGaussianMap::identity(2);
        let mut ys = Points::with_capacity(2, 60);
        let mut b = [0.0; 2];
        for _ in 0..60 {
            sample_unit_ball(&mut rng, &mut b);
            ys.push(&b).unwrap();
        }
        let rr = RerankMap::from_pairs(ys.clone(), ys.clone(), (0..60).collect()).unwrap();
        let xs = Points::empty_rows(60);
        let a = RerankedPullBack { fit_fraction: 0.5 }.calibrate_with(&map, rr, &ys, &xs, 0.1).unwrap();
        let b = PullBack.calibrate(&map, &ys, &xs, 0.1, 0).unwrap();
        assert_eq!(a.threshold, b.threshold);
    }

    #[test]
    fn rpb_covers_anisotropic_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let map = AffineGaussianMap::new(2, &[2.0, 0.0, 0.0, 0.5], &[0.0, 0.0], 0, &[]).unwrap();
        let cal = gauss_points(&mut rng, 4000, 2);
        let test = gauss_points(&mut rng, 5000, 2);
        let rpb = RerankedPullBack { fit_fraction: 0.5 };
        let art = rpb.calibrate(&map, &cal, &Points::empty_rows(4000), 0.1, 9).unwrap();
        assert_eq!(art.split, Some((2000, 2000)));
        let settings = EvaluationSettings {
            volume_points: 0,
            ..Default::default()
        };
        let ev = evaluate_sets(&rpb, &map, &art, &test, &Points::empty_rows(5000), &settings).unwrap();
        assert!((0.88..=0.92).contains(&ev.coverage), "{}", ev.coverage);
    }

    #[test]
    fn hpd_of_affine_map_is_gaussian_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let map = AffineGaussianMap::new(2, &[1.5, 0.3, 0.3, 0.8], &[0.5, -1.0], 0, &[]).unwrap();
        for _ in 0..100 {
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = model_density(&map, &y, &[]).unwrap();
            assert!((got / map.density(&y, &[]) - 1.0).abs() < 1e-6);
        }
        let art = HighestDensity
            .calibrate(&map, &gauss_points(&mut rng, 99, 2), &Points::empty_rows(99), 0.1, 0)
            .unwrap();
        assert_eq!(art.threshold, Some(art.scores.as_ref().unwrap()[9]));
    }

    #[test]
    fn quantile_baseline_radii() {
        assert!((chi_radius(1, 0.05).unwrap() - 1.959963984540054).abs() < 1e-7);
        assert!((chi_radius(2, 0.1).unwrap() - (-2.0 * 0.1f64.ln()).sqrt()).abs() < 1e-7);
    }

    #[test]
    fn quantile_baseline_undercovers_a_miscalibrated_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // ranks twice as spread as the reference
        let map = AffineGaussianMap::new(2, &[2.0, 0.0, 0.0, 2.0], &[0.0, 0.0], 0, &[]).unwrap();
        let test = gauss_points(&mut rng, 2000, 2);
        let xs = Points::empty_rows(2000);
        let art = GaussianQuantile.calibrate(&map, &test, &xs, 0.1, 0).unwrap();
        let s = EvaluationSettings {
            volume_points: 0,
            ..Default::default()
        };
        let ev = evaluate_sets(&GaussianQuantile, &map, &art, &test, &xs, &s).unwrap();
        assert!(ev.coverage < 0.9, "{}", ev.coverage);
    }

    #[test]
    fn infinite_radius_covers_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let map = AffineGaussianMap::new(2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], 1, &[0.0, 0.0]).unwrap();
        let mut art = CalibrationArtifact::from_upper("pb", 0.1, vec![1.0; 20], 0);
        art.threshold = None;
        let ys = gauss_points(&mut rng, 100, 2);
        let xs = gauss_points(&mut rng, 100, 1);
        let ev = evaluate_sets(&PullBack, &map, &art, &ys, &xs, &EvaluationSettings {
            volume_points: 0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!((ev.coverage, ev.worst_slab_coverage), (1.0, 1.0));
    }

    #[test]
    fn artifact_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let map = AffineGaussianMap::identity(2);
        let ys = gauss_points(&mut rng, 40, 2);
        let art = RerankedPullBack { fit_fraction: 0.5 }
            .calibrate(&map, &ys, &Points::empty_rows(40), 0.2, 1)
            .unwrap();
        let p = dir.path().join("a.json");
        art.save(&p).unwrap();
        assert_eq!(CalibrationArtifact::load(&p).unwrap(), art);
    }

    #[test]
    fn worst_slab_finds_uncovered_region() {
        let n = 1000;
        let xs = Points::new(1, (0..n).map(|i| i as f64).collect()).unwrap();
        let covered: Vec<bool> = (0..n).map(|i| i >= 200).collect();
        let w = worst_slab_coverage(&xs, &covered, 4, 0.1, 0).unwrap();
        assert_eq!(w, 0.0);
    }
}
