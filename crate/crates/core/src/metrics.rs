//! Distances between samples and the unexplained-variance score of a map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::autodiff::logsumexp;
use crate::error::{Error, Result};
use crate::points::{dot, norm, Points};

/// Largest sample size accepted by [`wasserstein2_exact`].
pub const MAX_EXACT_W2: usize = 2000;
pub const DEFAULT_PROJECTIONS: usize = 256;
const DENSITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    /// Free-form settings (projection count, bandwidths, sample sizes).
    pub settings: String,
    pub seed: Option<u64>,
}

fn same_dim(a: &Points, b: &Points) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("samples live in R^{} and R^{}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `W2` between two empirical measures of equal size via an exact assignment.
pub fn wasserstein2_exact(a: &Points, b: &Points) -> Result<f64> {
    same_dim(a, b)?;
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "exact W2 needs equal sample sizes, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n == 0 || n > MAX_EXACT_W2 {
        return Err(Error::Config(format!("exact W2 supports 1..={MAX_EXACT_W2} points, got {n}")));
    }
    let sol = assignment::solve(n, &assignment::squared_cost(a, b))?;
    Ok((sol.cost / n as f64).max(0.0).sqrt())
}

/// Squared 1-D W2 between two samples. Unequal sizes are matched on a
/// common grid of `min(n_a, n_b)` quantile levels.
pub fn w2_squared_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64;
    }
    let m = a.len().min(b.len());
    let pick = |s: &[f64], k: usize| s[(((k as f64 + 0.5) / m as f64) * s.len() as f64) as usize];
    (0..m).map(|k| (pick(a, k) - pick(b, k)).powi(2)).sum::<f64>() / m as f64
}

/// Sliced W2 over `projections` random unit directions.
pub fn sliced_w2(a: &Points, b: &Points, projections: usize, seed: u64) -> Result<f64> {
    same_dim(a, b)?;
    if projections == 0 {
        return Err(Error::Config("sliced W2 needs at least one projection".into()));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("sliced W2 needs nonempty samples".into()));
    }
    let d = a.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..projections)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = norm(&v);
            if n > 1e-12 {
                break v.iter().map(|x| x / n).collect();
            }
        })
        .collect();
    Ok(sliced_w2_along(a, b, &dirs))
}

/// Sliced W2 along the given unit directions.
pub fn sliced_w2_along(a: &Points, b: &Points, dirs: &[Vec<f64>]) -> f64 {
    let total: f64 = dirs
        .par_iter()
        .map(|t| {
            let mut pa: Vec<f64> = a.rows().map(|r| dot(r, t)).collect();
            let mut pb: Vec<f64> = b.rows().map(|r| dot(r, t)).collect();
            w2_squared_1d(&mut pa, &mut pb)
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    (total / dirs.len() as f64).sqrt()
}

/// Gaussian KDE with a diagonal Scott's-rule bandwidth.
#[derive(Debug, Clone)]
pub struct Kde {
    points: Points,
    bandwidth: Vec<f64>,
    log_norm: f64,
}

impl Kde {
    pub fn fit(sample: &Points) -> Result<Self> {
        let n = sample.len();
        let d = sample.dim();
        if n < 10 {
            return Err(Error::Data(format!("KDE needs at least 10 points, got {n}")));
        }
        let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
        let mut bandwidth = Vec::with_capacity(d);
        for j in 0..d {
            let col = sample.column(j);
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            if var.sqrt() < 1e-12 {
                return Err(Error::Data(format!("KDE sample has zero variance in coordinate {j}")));
            }
            bandwidth.push(factor * var.sqrt());
        }
        let log_norm = -(n as f64).ln()
            - bandwidth.iter().map(|h| h.ln()).sum::<f64>()
            - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(Self {
            points: sample.clone(),
            bandwidth,
            log_norm,
        })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .points
            .rows()
            .map(|p| {
                -0.5 * p
                    .iter()
                    .zip(z)
                    .zip(&self.bandwidth)
                    .map(|((a, b), h)| ((a - b) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        logsumexp(&terms) + self.log_norm
    }

    pub fn density(&self, z: &[f64]) -> f64 {
        self.log_density(z).exp()
    }
}

/// Mean `|p̂_A(z) − p̂_B(z)|` over the evaluation points.
pub fn kde_l1(a: &Points, b: &Points, eval_at: &Points) -> Result<f64> {
    same_dim(a, b)?;
    same_dim(a, eval_at)?;
    let (ka, kb) = (Kde::fit(a)?, Kde::fit(b)?);
    let diffs: Vec<f64> = (0..eval_at.len())
        .into_par_iter()
        .map(|i| (ka.density(eval_at.row(i)) - kb.density(eval_at.row(i))).abs())
        .collect();
    Ok(diffs.iter().sum::<f64>() / eval_at.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub raw: f64,
    /// `max(raw, 0)`.
    pub clipped: f64,
}

/// Mean `log(p̂_B(z) / p̂_A(z))` over the evaluation points, densities
/// floored at `1e-300`.
pub fn kde_kl(a: &Points, b: &Points, eval_at: &Points) -> Result<KlEstimate> {
    same_dim(a, b)?;
    same_dim(a, eval_at)?;
    let (ka, kb) = (Kde::fit(a)?, Kde::fit(b)?);
    let floor = DENSITY_FLOOR.ln();
    let terms: Vec<f64> = (0..eval_at.len())
        .into_par_iter()
        .map(|i| {
            let z = eval_at.row(i);
            kb.log_density(z).max(floor) - ka.log_density(z).max(floor)
        })
        .collect();
    let raw = terms.iter().sum::<f64>() / eval_at.len().max(1) as f64;
    Ok(KlEstimate {
        raw,
        clipped: raw.max(0.0),
    })
}

/// Unexplained-variance ratio of `estimate` against `truth`.
///
/// `inputs[k]` holds the evaluation inputs paired with `conditions.row(k)`.
/// Each pair contributes `‖T(v, x) − T̂(v, x)‖ / ‖T̄(x) − T(v, x)‖` where
/// `T̄(x)` is the mean of the truth over that condition's inputs; the result
/// is the mean over all pairs.
pub fn l2_unexplained_variance<T, E>(truth: T, estimate: E, conditions: &Points, inputs: &[Points]) -> Result<f64>
where
    T: Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Sync,
    E: Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Sync,
{
    if inputs.len() != conditions.len() || inputs.is_empty() {
        return Err(Error::Shape("one input set per condition is required".into()));
    }
    let per_x: Vec<Result<(f64, usize)>> = (0..conditions.len())
        .into_par_iter()
        .map(|k| {
            let x = conditions.row(k);
            let vs = &inputs[k];
            let t: Vec<Vec<f64>> = vs.rows().map(|v| truth(v, x)).collect::<Result<_>>()?;
            let Some(first) = t.first() else {
                return Ok((0.0, 0));
            };
            let mut mean = vec![0.0; first.len()];
            for r in &t {
                mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / t.len() as f64);
            }
            let mut acc = 0.0;
            for (v, tv) in vs.rows().zip(&t) {
                let e = estimate(v, x)?;
                let num: f64 = tv.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den: f64 = tv.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if den < 1e-12 {
                    return Err(Error::Data(
                        "ground-truth map is constant at an evaluation point; unexplained variance is undefined".into(),
                    ));
                }
                acc += num / den;
            }
            Ok((acc, t.len()))
        })
        .collect();
    let mut total = 0.0;
    let mut count = 0;
    for r in per_x {
        let (a, c) = r?;
        total += a;
        count += c;
    }
    if count == 0 {
        return Err(Error::Data("no evaluation pairs".into()));
    }
    Ok(total / count as f64)
}
