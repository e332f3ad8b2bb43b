//! Vector rank and quantile maps.
//!
//! A [`RankMap`] sends a response `y` at condition `x` to its rank in
//! reference space and back. [`QuantileModel`] is the learned map built on a
//! convex potential; [`AffineGaussianMap`] is an exact map for Gaussian data.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amortizer::{Amortizer, AmortizerRecord};
use crate::conjugate::{solve_conjugate, ConjugateProblem, ConjugateSolution};
use crate::error::{Error, Result};
use crate::lbfgs::{ColdStart, SolverSettings};
use crate::picnn::{ParamRecord, Picnn};
use crate::points::{norm, Points};
use crate::reference::{Domain, Reference};

/// Largest response dimension for which Jacobians are formed.
pub const MAX_JACOBIAN_DIM: usize = 16;

pub trait RankMap: Send + Sync {
    fn response_dim(&self) -> usize;
    fn condition_dim(&self) -> usize;
    fn reference(&self) -> Reference;

    /// `Q⁻¹(y, x)`. Fails with [`Error::NotConverged`] when an inner solve
    /// does not reach tolerance.
    fn rank(&self, y: &[f64], x: &[f64]) -> Result<Vec<f64>>;

    /// `Q(u, x)`.
    fn quantile(&self, u: &[f64], x: &[f64]) -> Result<Vec<f64>>;

    fn rank_batch(&self, ys: &Points, xs: &Points) -> Vec<Result<Vec<f64>>> {
        (0..ys.len())
            .into_par_iter()
            .map(|i| self.rank(ys.row(i), xs.row(i)))
            .collect()
    }

    fn quantile_batch(&self, us: &Points, xs: &Points) -> Result<Points> {
        let rows: Result<Vec<Vec<f64>>> = (0..us.len())
            .into_par_iter()
            .map(|i| self.quantile(us.row(i), xs.row(i)))
            .collect();
        Points::from_rows(self.response_dim(), rows?)
    }
}

/// Which function the potential network represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Variant {
    /// `φ(u, x)`: quantile by gradient, rank by conjugate solve.
    #[default]
    U,
    /// `ψ(y, x)`: rank by gradient, quantile by conjugate solve.
    Y,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u" | "U" => Ok(Variant::U),
            "y" | "Y" => Ok(Variant::Y),
            _ => Err(Error::Config(format!("unknown variant `{s}` (expected U or Y)"))),
        }
    }
}

/// A learned rank map on top of a convex potential, with an optional
/// amortizer that warm-starts the conjugate solves.
#[derive(Debug, Clone)]
pub struct QuantileModel {
    pub potential: Picnn,
    pub variant: Variant,
    pub reference: Reference,
    pub amortizer: Option<Amortizer>,
    pub solver: SolverSettings,
}

impl QuantileModel {
    pub fn new(potential: Picnn, variant: Variant, reference: Reference) -> Self {
        Self {
            potential,
            variant,
            reference,
            amortizer: None,
            solver: SolverSettings::default(),
        }
    }

    pub fn with_amortizer(mut self, amortizer: Amortizer) -> Self {
        self.amortizer = Some(amortizer);
        self
    }

    /// Domain of the conjugate solve: reference space for the U-variant,
    /// response space (unbounded) for the Y-variant.
    pub fn conjugate_domain(&self) -> Domain {
        match self.variant {
            Variant::U => self.reference.domain(),
            Variant::Y => Domain::Unbounded,
        }
    }

    fn initial_point(&self, target: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if let Some(a) = &self.amortizer {
            return a.predict(target, x);
        }
        Ok(match self.solver.cold_start {
            ColdStart::Zero => vec![0.0; target.len()],
            ColdStart::ReferenceSample => {
                // seeded by the target so that repeated calls agree
                let seed = target
                    .iter()
                    .chain(x)
                    .fold(0xcbf2_9ce4_8422_2325_u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut u = self.reference.sample(&mut rng, target.len());
                self.conjugate_domain().project(&mut u);
                u
            }
        })
    }

    /// Maximizer of `vᵀt − f(v, x)` for the network `f`, warm-started from the
    /// amortizer when present.
    pub fn solve(&self, target: &[f64], x: &[f64]) -> Result<ConjugateSolution> {
        let problem = ConjugateProblem::new(&self.potential, target, x, self.conjugate_domain())?;
        let init = self.initial_point(target, x)?;
        solve_conjugate(&problem, &self.solver, &init)
    }

    /// One solve per row with diagnostics kept.
    pub fn solve_batch(&self, targets: &Points, xs: &Points) -> Vec<Result<ConjugateSolution>> {
        (0..targets.len())
            .into_par_iter()
            .map(|i| self.solve(targets.row(i), xs.row(i)))
            .collect()
    }

    fn converged(&self, target: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let s = self.solve(target, x)?;
        if !s.converged {
            return Err(Error::NotConverged(format!(
                "conjugate solve stopped after {} iterations with gradient norm {:.3e} ({:?})",
                s.iterations, s.grad_norm, s.termination
            )));
        }
        Ok(s.u_hat)
    }

    pub fn to_record(&self) -> ModelRecord {
        ModelRecord {
            variant: self.variant,
            reference: self.reference,
            solver: self.solver.clone(),
            potential: self.potential.to_record(),
            amortizer: self.amortizer.as_ref().map(Amortizer::to_record),
        }
    }

    pub fn from_record(rec: &ModelRecord) -> Result<Self> {
        rec.solver.validate()?;
        Ok(Self {
            potential: Picnn::from_record(&rec.potential)?,
            variant: rec.variant,
            reference: rec.reference,
            amortizer: rec.amortizer.as_ref().map(Amortizer::from_record).transpose()?,
            solver: rec.solver.clone(),
        })
    }
}

impl RankMap for QuantileModel {
    fn response_dim(&self) -> usize {
        self.potential.config().input_dim
    }

    fn condition_dim(&self) -> usize {
        self.potential.config().condition_dim
    }

    fn reference(&self) -> Reference {
        self.reference
    }

    fn rank(&self, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        match self.variant {
            Variant::U => self.converged(y, x),
            Variant::Y => self.potential.grad_u(y, x),
        }
    }

    fn quantile(&self, u: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        match self.variant {
            Variant::U => self.potential.grad_u(u, x),
            Variant::Y => self.converged(u, x),
        }
    }
}

/// Serialized form of a [`QuantileModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub variant: Variant,
    pub reference: Reference,
    pub solver: SolverSettings,
    pub potential: ParamRecord,
    pub amortizer: Option<AmortizerRecord>,
}

/// `Q⁻¹(y, x) = A (y − b − B x)` with `A` symmetric positive definite: the
/// exact rank map of `Y | X = x ~ N(b + B x, (AᵀA)⁻¹)` against a standard
/// Gaussian reference.
#[derive(Debug, Clone)]
pub struct AffineGaussianMap {
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    shift: DVector<f64>,
    coupling: DMatrix<f64>,
    reference: Reference,
}

impl AffineGaussianMap {
    /// `a` is `d × d` row-major, `coupling` is `d × d_x` row-major.
    pub fn new(d: usize, a: &[f64], shift: &[f64], d_x: usize, coupling: &[f64]) -> Result<Self> {
        if a.len() != d * d || shift.len() != d || coupling.len() != d * d_x {
            return Err(Error::Shape("affine map blocks have inconsistent sizes".into()));
        }
        let a = DMatrix::from_row_slice(d, d, a);
        if (&a - a.transpose()).amax() > 1e-12 {
            return Err(Error::Config("affine rank map must be symmetric".into()));
        }
        let eig = a.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::Config("affine rank map must be positive definite".into()));
        }
        let a_inv = a.clone().try_inverse().ok_or_else(|| Error::Config("singular affine map".into()))?;
        Ok(Self {
            a,
            a_inv,
            shift: DVector::from_column_slice(shift),
            coupling: DMatrix::from_row_slice(d, d_x, coupling),
            reference: Reference::Gaussian,
        })
    }

    pub fn identity(d: usize) -> Self {
        let mut eye = vec![0.0; d * d];
        (0..d).for_each(|i| eye[i * d + i] = 1.0);
        Self::new(d, &eye, &vec![0.0; d], 0, &[]).expect("identity is valid")
    }

    fn mean(&self, x: &[f64]) -> DVector<f64> {
        &self.shift + &self.coupling * DVector::from_column_slice(x)
    }

    /// Closed-form conditional density of `y`.
    pub fn density(&self, y: &[f64], x: &[f64]) -> f64 {
        let u = self.rank(y, x).expect("affine rank is total");
        self.reference.density(&u) * self.a.determinant()
    }
}

impl RankMap for AffineGaussianMap {
    fn response_dim(&self) -> usize {
        self.a.nrows()
    }

    fn condition_dim(&self) -> usize {
        self.coupling.ncols()
    }

    fn reference(&self) -> Reference {
        self.reference
    }

    fn rank(&self, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.response_dim() || x.len() != self.condition_dim() {
            return Err(Error::Shape("affine rank map input has wrong dimension".into()));
        }
        let r = &self.a * (DVector::from_column_slice(y) - self.mean(x));
        Ok(r.as_slice().to_vec())
    }

    fn quantile(&self, u: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.response_dim() || x.len() != self.condition_dim() {
            return Err(Error::Shape("affine quantile map input has wrong dimension".into()));
        }
        let y = &self.a_inv * DVector::from_column_slice(u) + self.mean(x);
        Ok(y.as_slice().to_vec())
    }
}

/// Symmetrized central-difference Jacobian of the rank map in `y`, row-major.
/// The default step is `1e-4 (1 + ‖y‖)`.
pub fn rank_jacobian(map: &dyn RankMap, y: &[f64], x: &[f64], step: Option<f64>) -> Result<Vec<f64>> {
    let d = y.len();
    if d > MAX_JACOBIAN_DIM {
        return Err(Error::Config(format!(
            "rank Jacobian limited to {MAX_JACOBIAN_DIM} response dimensions, got {d}"
        )));
    }
    let h = step.unwrap_or(1e-4 * (1.0 + norm(y)));
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut jac = vec![0.0; d * d];
    let mut yp = y.to_vec();
    for j in 0..d {
        yp[j] = y[j] + h;
        let fp = map.rank(&yp, x)?;
        yp[j] = y[j] - h;
        let fm = map.rank(&yp, x)?;
        yp[j] = y[j];
        for i in 0..d {
            jac[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    for i in 0..d {
        for j in i + 1..d {
            let m = 0.5 * (jac[i * d + j] + jac[j * d + i]);
            jac[i * d + j] = m;
            jac[j * d + i] = m;
        }
    }
    Ok(jac)
}

/// Eigenvalues of a symmetric row-major matrix, ascending.
pub fn symmetric_eigenvalues(d: usize, m: &[f64]) -> Vec<f64> {
    let mut ev: Vec<f64> = DMatrix::from_row_slice(d, d, m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}
