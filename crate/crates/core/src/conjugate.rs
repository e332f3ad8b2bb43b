//! Fenchel conjugates of convex potentials and their maximizers.
//!
//! For a potential `φ(·, x)` the conjugate objective is
//! `J(u; y, x) = uᵀy − φ(u, x)`; its maximizer is the rank of `y`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lbfgs::{minimize, SolverSettings, Termination};
use crate::picnn::Picnn;
use crate::points::{dot, Points};
use crate::reference::Domain;

#[derive(Debug, Clone)]
pub struct ConjugateProblem<'a> {
    pub potential: &'a Picnn,
    pub y: &'a [f64],
    pub x: &'a [f64],
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateSolution {
    pub u_hat: Vec<f64>,
    /// `J(û; y, x)`, i.e. the conjugate value `φ*(y, x)`.
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub termination: Termination,
}

impl<'a> ConjugateProblem<'a> {
    pub fn new(potential: &'a Picnn, y: &'a [f64], x: &'a [f64], domain: Domain) -> Result<Self> {
        if y.len() != potential.config().input_dim {
            return Err(Error::Shape(format!(
                "conjugate point has dimension {}, potential expects {}",
                y.len(),
                potential.config().input_dim
            )));
        }
        Ok(Self {
            potential,
            y,
            x,
            domain,
        })
    }

    /// `J(u; y, x)`.
    pub fn objective(&self, u: &[f64]) -> Result<f64> {
        Ok(dot(u, self.y) - self.potential.forward(u, self.x)?)
    }
}

/// Maximizes `uᵀy − φ(u, x)` over the problem's domain with projected L-BFGS,
/// starting from `init`.
pub fn solve_conjugate(
    problem: &ConjugateProblem<'_>,
    settings: &SolverSettings,
    init: &[f64],
) -> Result<ConjugateSolution> {
    let (pot, y, x) = (problem.potential, problem.y, problem.x);
    if init.len() != y.len() {
        return Err(Error::Shape("initial point has wrong dimension".into()));
    }
    // minimize −J = φ(u, x) − uᵀy
    let neg_j = |u: &[f64], g: &mut [f64]| -> Result<f64> {
        let v = pot.value_and_grad_u(u, x, g)?;
        for (gi, yi) in g.iter_mut().zip(y) {
            *gi -= yi;
        }
        Ok(v - dot(u, y))
    };
    let m = minimize(neg_j, init, &problem.domain, settings).map_err(|e| match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("conjugate solve at y={y:?}, x={x:?}: {msg}")),
        other => other,
    })?;
    Ok(ConjugateSolution {
        value: -m.value,
        u_hat: m.x,
        grad_norm: m.grad_norm,
        iterations: m.iterations,
        evaluations: m.evaluations,
        converged: m.converged,
        termination: m.termination,
    })
}

/// Solves one conjugate problem per row of `ys`/`xs`, in parallel. `inits`
/// supplies warm starts; otherwise every solve starts at the origin.
pub fn solve_batch(
    potential: &Picnn,
    ys: &Points,
    xs: &Points,
    domain: &Domain,
    settings: &SolverSettings,
    inits: Option<&Points>,
) -> Vec<Result<ConjugateSolution>> {
    let zero = vec![0.0; ys.dim()];
    (0..ys.len())
        .into_par_iter()
        .map(|i| {
            let problem = ConjugateProblem::new(potential, ys.row(i), xs.row(i), domain.clone())?;
            let init = inits.map_or(zero.as_slice(), |p| p.row(i));
            solve_conjugate(&problem, settings, init)
        })
        .collect()
}
