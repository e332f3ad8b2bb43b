//! Projected L-BFGS with a strong-Wolfe line search (Nocedal & Wright,
//! algorithms 3.5/3.6 and 7.4).
//!
//! The iterate is projected onto the feasible [`Domain`] after every accepted
//! step. Curvature pairs with `sᵀz ≤ 1e-10` are dropped, which also covers
//! pairs distorted by an active projection.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::{dot, norm};
use crate::reference::Domain;

/// How a cold (non-warm-started) solve picks its starting point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ColdStart {
    #[default]
    Zero,
    /// A draw from the reference distribution.
    ReferenceSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub eps_norm: f64,
    pub eps_obj: f64,
    pub max_iter: usize,
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    /// An objective stall only counts as convergence when the gradient norm
    /// is within this factor of `eps_norm`.
    pub stall_grad_factor: f64,
    pub cold_start: ColdStart,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            eps_norm: 1e-7,
            eps_obj: 1e-7,
            max_iter: 1000,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            stall_grad_factor: 10.0,
            cold_start: ColdStart::Zero,
        }
    }
}

impl SolverSettings {
    /// Inner-solver defaults used inside the training loops: 50 iterations
    /// when warm-started, 100 otherwise.
    pub fn training(warm_started: bool) -> Self {
        Self {
            max_iter: if warm_started { 50 } else { 100 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.eps_norm > 0.0
            && self.eps_obj > 0.0
            && self.max_iter > 0
            && self.memory > 0
            && 0.0 < self.c1
            && self.c1 < self.c2
            && self.c2 < 1.0
            && self.stall_grad_factor >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid solver settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GradientNorm,
    ObjectiveStall,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    /// Norm of the (projected) gradient at `x`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Objective after each accepted iteration, starting with the initial point.
    pub trajectory: Vec<f64>,
}

struct Objective<F> {
    f: F,
    evals: usize,
}

impl<F> Objective<F>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> Result<f64> {
        self.evals += 1;
        let v = (self.f)(x, g)?;
        if v.is_nan() || g.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!(
                "objective evaluated to NaN at {x:?} (evaluation {})",
                self.evals
            )));
        }
        Ok(v)
    }
}

fn projected_grad_norm(domain: &Domain, x: &[f64], g: &[f64]) -> f64 {
    if !domain.is_bounded() {
        return norm(g);
    }
    let mut t: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - b).collect();
    domain.project(&mut t);
    x.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Minimizes `f` (value and gradient written into the second argument)
/// from `x0` over `domain`.
pub fn minimize<F>(f: F, x0: &[f64], domain: &Domain, s: &SolverSettings) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    s.validate()?;
    let n = x0.len();
    let mut obj = Objective { f, evals: 0 };
    let mut x = x0.to_vec();
    domain.project(&mut x);
    let mut g = vec![0.0; n];
    let mut fx = obj.eval(&x, &mut g)?;
    let mut trajectory = vec![fx];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(s.memory);
    let mut iterations = 0;
    let mut gnorm = projected_grad_norm(domain, &x, &g);
    let mut reset_once = false;

    let finish = |x: Vec<f64>, fx, gnorm, it, evals, term, traj| {
        let converged = match term {
            Termination::GradientNorm => true,
            _ => gnorm <= s.stall_grad_factor * s.eps_norm,
        };
        Minimum {
            x,
            value: fx,
            grad_norm: gnorm,
            iterations: it,
            evaluations: evals,
            converged,
            termination: term,
            trajectory: traj,
        }
    };

    loop {
        if gnorm <= s.eps_norm {
            return Ok(finish(x, fx, gnorm, iterations, obj.evals, Termination::GradientNorm, trajectory));
        }
        if iterations >= s.max_iter {
            return Ok(finish(x, fx, gnorm, iterations, obj.evals, Termination::MaxIterations, trajectory));
        }
        let mut p = two_loop(&g, &history);
        let mut slope = dot(&g, &p);
        if slope >= 0.0 || !slope.is_finite() {
            history.clear();
            p = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let alpha0 = if history.is_empty() {
            (1.0 / norm(&p)).min(1.0)
        } else {
            1.0
        };
        let step = line_search(&mut obj, &x, fx, &p, slope, alpha0, s)?;
        let Some((mut x_new, mut f_new, mut g_new)) = step else {
            if !history.is_empty() && !reset_once {
                history.clear();
                reset_once = true;
                continue;
            }
            return Ok(finish(x, fx, gnorm, iterations, obj.evals, Termination::LineSearchFailed, trajectory));
        };
        reset_once = false;

        if domain.is_bounded() && !domain.contains(&x_new) {
            domain.project(&mut x_new);
            f_new = obj.eval(&x_new, &mut g_new)?;
            if f_new > fx {
                // projection undid the decrease; fall back to a projected-gradient arc
                match projected_backtrack(&mut obj, domain, &x, fx, &g, s)? {
                    Some((xb, fb, gb)) => {
                        x_new = xb;
                        f_new = fb;
                        g_new = gb;
                    }
                    None => {
                        return Ok(finish(x, fx, gnorm, iterations, obj.evals, Termination::LineSearchFailed, trajectory));
                    }
                }
            }
        }

        let sv: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let zv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sz = dot(&sv, &zv);
        if sz > 1e-10 {
            if history.len() == s.memory {
                history.pop_front();
            }
            history.push_back((sv, zv, 1.0 / sz));
        }
        let decrease = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;
        iterations += 1;
        trajectory.push(fx);
        gnorm = projected_grad_norm(domain, &x, &g);
        if gnorm <= s.eps_norm {
            continue;
        }
        if decrease.abs() <= s.eps_obj && gnorm <= s.stall_grad_factor * s.eps_norm {
            return Ok(finish(x, fx, gnorm, iterations, obj.evals, Termination::ObjectiveStall, trajectory));
        }
    }
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, z, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, zi) in q.iter_mut().zip(z) {
            *qi -= a * zi;
        }
        alphas.push(a);
    }
    if let Some((s, z, _)) = history.back() {
        let gamma = dot(s, z) / dot(z, z);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, z, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(z, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

type Point = (Vec<f64>, f64, Vec<f64>);

#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    obj: &mut Objective<F>,
    x: &[f64],
    fx: f64,
    p: &[f64],
    slope0: f64,
    alpha0: f64,
    s: &SolverSettings,
) -> Result<Option<Point>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let n = x.len();
    let at = |a: f64| -> Vec<f64> { x.iter().zip(p).map(|(xi, pi)| xi + a * pi).collect() };
    let eval = |obj: &mut Objective<F>, a: f64| -> Result<(Vec<f64>, f64, Vec<f64>, f64)> {
        let xa = at(a);
        let mut ga = vec![0.0; n];
        let fa = obj.eval(&xa, &mut ga)?;
        let d = dot(&ga, p);
        Ok((xa, fa, ga, d))
    };
    // best point satisfying sufficient decrease, returned if zoom gives up
    let mut fallback: Option<Point> = None;
    let note = |fallback: &mut Option<Point>, a: f64, xa: &[f64], fa: f64, ga: &[f64]| {
        if fa <= fx + s.c1 * a * slope0 && fallback.as_ref().is_none_or(|(_, fb, _)| fa < *fb) {
            *fallback = Some((xa.to_vec(), fa, ga.to_vec()));
        }
    };

    let mut a_prev = 0.0;
    let mut f_prev = fx;
    let mut d_prev = slope0;
    let mut a = alpha0;
    let (mut lo, mut hi);
    let (mut f_lo, mut d_lo, mut f_hi, mut d_hi);
    let mut i = 0;
    loop {
        let (xa, fa, ga, da) = eval(obj, a)?;
        note(&mut fallback, a, &xa, fa, &ga);
        if fa > fx + s.c1 * a * slope0 || (i > 0 && fa >= f_prev) {
            lo = a_prev;
            f_lo = f_prev;
            d_lo = d_prev;
            hi = a;
            f_hi = fa;
            d_hi = da;
            break;
        }
        if da.abs() <= -s.c2 * slope0 {
            return Ok(Some((xa, fa, ga)));
        }
        if da >= 0.0 {
            lo = a;
            f_lo = fa;
            d_lo = da;
            hi = a_prev;
            f_hi = f_prev;
            d_hi = d_prev;
            break;
        }
        a_prev = a;
        f_prev = fa;
        d_prev = da;
        a *= 2.0;
        i += 1;
        if i >= 40 {
            return Ok(fallback);
        }
    }

    for _ in 0..40 {
        let width = hi - lo;
        if width.abs() < 1e-16 * lo.abs().max(1.0) {
            break;
        }
        let mut aj = cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi);
        let (l, h) = if lo < hi { (lo, hi) } else { (hi, lo) };
        let margin = 0.1 * (h - l);
        if !aj.is_finite() || aj < l + margin || aj > h - margin {
            aj = 0.5 * (lo + hi);
        }
        let (xj, fj, gj, dj) = eval(obj, aj)?;
        note(&mut fallback, aj, &xj, fj, &gj);
        if fj > fx + s.c1 * aj * slope0 || fj >= f_lo {
            hi = aj;
            f_hi = fj;
            d_hi = dj;
        } else {
            if dj.abs() <= -s.c2 * slope0 {
                return Ok(Some((xj, fj, gj)));
            }
            if dj * (hi - lo) >= 0.0 {
                hi = lo;
                f_hi = f_lo;
                d_hi = d_lo;
            }
            lo = aj;
            f_lo = fj;
            d_lo = dj;
        }
    }
    Ok(fallback)
}

/// Minimizer of the cubic interpolating values and slopes at `a` and `b`.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return f64::NAN;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2)
}

fn projected_backtrack<F>(
    obj: &mut Objective<F>,
    domain: &Domain,
    x: &[f64],
    fx: f64,
    g: &[f64],
    s: &SolverSettings,
) -> Result<Option<Point>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let mut t = 1.0;
    for _ in 0..50 {
        let mut xt: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - t * b).collect();
        domain.project(&mut xt);
        let d: f64 = xt.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d == 0.0 {
            return Ok(None);
        }
        let mut gt = vec![0.0; x.len()];
        let ft = obj.eval(&xt, &mut gt)?;
        if ft <= fx - s.c1 / t * d {
            return Ok(Some((xt, ft, gt)));
        }
        t *= 0.5;
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> Result<f64> {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        Ok((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
    }

    #[test]
    fn solves_rosenbrock() {
        let m = minimize(rosenbrock, &[-1.2, 1.0], &Domain::Unbounded, &SolverSettings::default()).unwrap();
        assert!(m.converged, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);
        for w in m.trajectory.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn box_constrained_quadratic() {
        // min ½‖x − c‖² over [-1,1]², c = (3, 0.2) → (1, 0.2)
        let f = |x: &[f64], g: &mut [f64]| -> Result<f64> {
            g[0] = x[0] - 3.0;
            g[1] = x[1] - 0.2;
            Ok(0.5 * ((x[0] - 3.0).powi(2) + (x[1] - 0.2).powi(2)))
        };
        let m = minimize(f, &[0.0, 0.0], &Domain::Box { lo: -1.0, hi: 1.0 }, &SolverSettings::default()).unwrap();
        assert!(m.converged, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-9 && (m.x[1] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn nan_aborts() {
        let f = |_: &[f64], _: &mut [f64]| -> Result<f64> { Ok(f64::NAN) };
        assert!(matches!(
            minimize(f, &[0.0], &Domain::Unbounded, &SolverSettings::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let s = SolverSettings {
            max_iter: 2,
            ..SolverSettings::default()
        };
        let m = minimize(rosenbrock, &[-1.2, 1.0], &Domain::Unbounded, &s).unwrap();
        assert!(!m.converged);
        assert_eq!(m.termination, Termination::MaxIterations);
    }
}
