//! Amortized conjugate predictor `ũ(y, x) = MLP([y; x]) + W_y y + b_y`.
//!
//! The MLP has ELU hidden layers and a zero-initialized output layer, and
//! the skip starts at `W_y = I`, `b_y = 0`, so a fresh amortizer is the
//! identity map on `y`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{elu, elu_grad};
use crate::error::{Error, Result};
use crate::picnn::{Picnn, PicnnConfig};
use crate::points::{dot, Points};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmortizerConfig {
    pub response_dim: usize,
    pub condition_dim: usize,
    pub width: usize,
    /// Number of hidden layers.
    pub depth: usize,
}

impl AmortizerConfig {
    /// Same width and depth as the potential network.
    pub fn mirroring(potential: &PicnnConfig) -> Self {
        Self {
            response_dim: potential.input_dim,
            condition_dim: potential.condition_dim,
            width: potential.width,
            depth: potential.depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.response_dim == 0 || self.width == 0 {
            return Err(Error::Config(format!("invalid amortizer config {self:?}")));
        }
        Ok(())
    }
}

/// Training loss for the amortizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AmortizerLoss {
    /// Mean squared distance to the exact conjugate solutions.
    #[default]
    Regression,
    /// Mean of `−J(ũ; y, x)`.
    Objective,
    /// Mean of `‖∇_u φ(ũ, x) − y‖²`.
    Residual,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone)]
pub struct Amortizer {
    config: AmortizerConfig,
    layers: Vec<Dense>,
    skip_w: usize,
    skip_b: usize,
    params: Vec<f64>,
}

struct Trace {
    /// Input to each dense layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
}

impl Amortizer {
    pub fn new<R: Rng + ?Sized>(config: AmortizerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d_in = config.response_dim + config.condition_dim;
        let mut layers = Vec::with_capacity(config.depth + 1);
        let mut offset = 0;
        let mut cols = d_in;
        for i in 0..=config.depth {
            let rows = if i == config.depth {
                config.response_dim
            } else {
                config.width
            };
            layers.push(Dense {
                w: offset,
                b: offset + rows * cols,
                rows,
                cols,
            });
            offset += rows * cols + rows;
            cols = rows;
        }
        let d = config.response_dim;
        let skip_w = offset;
        let skip_b = skip_w + d * d;
        let mut params = vec![0.0; skip_b + d];
        // He-uniform, so that signals survive a deep ELU stack
        for l in &layers[..config.depth] {
            if l.cols > 0 {
                let bound = (6.0 / l.cols as f64).sqrt();
                for v in &mut params[l.w..l.w + l.rows * l.cols] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        for i in 0..d {
            params[skip_w + i * d + i] = 1.0;
        }
        Ok(Self {
            config,
            layers,
            skip_w,
            skip_b,
            params,
        })
    }

    pub fn config(&self) -> &AmortizerConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "amortizer expects {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Indices of every weight that reads the conditioning input.
    pub fn condition_weight_indices(&self) -> Vec<usize> {
        let first = self.layers[0];
        let dy = self.config.response_dim;
        (0..first.rows)
            .flat_map(|r| (dy..first.cols).map(move |c| first.w + r * first.cols + c))
            .collect()
    }

    fn check(&self, y: &[f64], x: &[f64]) -> Result<()> {
        if y.len() != self.config.response_dim || x.len() != self.config.condition_dim {
            return Err(Error::Shape(format!(
                "amortizer expects y in R^{} and x in R^{}, got {} and {}",
                self.config.response_dim,
                self.config.condition_dim,
                y.len(),
                x.len()
            )));
        }
        Ok(())
    }

    fn forward_trace(&self, y: &[f64], x: &[f64]) -> (Vec<f64>, Trace) {
        let p = &self.params;
        let mut h: Vec<f64> = y.iter().chain(x).copied().collect();
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.config.depth),
        };
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = p[l.b..l.b + l.rows].to_vec();
            for (r, o) in out.iter_mut().enumerate() {
                *o += dot(&p[l.w + r * l.cols..l.w + (r + 1) * l.cols], &h);
            }
            trace.inputs.push(h);
            if i < self.config.depth {
                h = out.iter().map(|&v| elu(v)).collect();
                trace.pre.push(out);
            } else {
                h = out;
            }
        }
        let d = self.config.response_dim;
        for (r, o) in h.iter_mut().enumerate() {
            *o += p[self.skip_b + r] + dot(&p[self.skip_w + r * d..self.skip_w + (r + 1) * d], y);
        }
        (h, trace)
    }

    pub fn predict(&self, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check(y, x)?;
        Ok(self.forward_trace(y, x).0)
    }

    pub fn predict_batch(&self, ys: &Points, xs: &Points) -> Result<Points> {
        let mut out = Points::with_capacity(self.config.response_dim, ys.len());
        for (y, x) in ys.rows().zip(xs.rows()) {
            out.push(&self.predict(y, x)?)?;
        }
        Ok(out)
    }

    /// Accumulates `(∂ũ/∂params)ᵀ g` into `grad`.
    fn backward(&self, y: &[f64], trace: &Trace, g: &[f64], grad: &mut [f64]) {
        let p = &self.params;
        let d = self.config.response_dim;
        for r in 0..d {
            grad[self.skip_b + r] += g[r];
            for c in 0..d {
                grad[self.skip_w + r * d + c] += g[r] * y[c];
            }
        }
        let mut delta = g.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            for r in 0..l.rows {
                grad[l.b + r] += delta[r];
                let row = &mut grad[l.w + r * l.cols..l.w + (r + 1) * l.cols];
                for (gw, xv) in row.iter_mut().zip(input) {
                    *gw += delta[r] * xv;
                }
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; l.cols];
            for r in 0..l.rows {
                let row = &p[l.w + r * l.cols..l.w + (r + 1) * l.cols];
                for (pv, w) in prev.iter_mut().zip(row) {
                    *pv += delta[r] * w;
                }
            }
            for (pv, &a) in prev.iter_mut().zip(&trace.pre[i - 1]) {
                *pv *= elu_grad(a);
            }
            delta = prev;
        }
    }

    /// Batch loss and its parameter gradient. `targets` holds the exact
    /// conjugate solutions and is only read by [`AmortizerLoss::Regression`];
    /// the other losses need the potential.
    pub fn loss_and_grad(
        &self,
        loss: AmortizerLoss,
        ys: &Points,
        xs: &Points,
        targets: Option<&Points>,
        potential: Option<&Picnn>,
    ) -> Result<(f64, Vec<f64>)> {
        let n = ys.len();
        if n == 0 {
            return Err(Error::Data("amortizer loss needs a nonempty batch".into()));
        }
        if xs.len() != n || targets.is_some_and(|t| t.len() != n) {
            return Err(Error::Shape("amortizer batch sizes disagree".into()));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let d = self.config.response_dim;
        let mut g_u = vec![0.0; d];
        for i in 0..n {
            let (y, x) = (ys.row(i), xs.row(i));
            self.check(y, x)?;
            let (pred, trace) = self.forward_trace(y, x);
            let value = match loss {
                AmortizerLoss::Regression => {
                    let t = targets
                        .ok_or_else(|| Error::Config("regression loss needs targets".into()))?
                        .row(i);
                    let mut v = 0.0;
                    for k in 0..d {
                        let r = pred[k] - t[k];
                        v += r * r;
                        g_u[k] = 2.0 * r;
                    }
                    v
                }
                AmortizerLoss::Objective => {
                    let pot = need_potential(potential)?;
                    let phi = pot.value_and_grad_u(&pred, x, &mut g_u)?;
                    for k in 0..d {
                        g_u[k] -= y[k];
                    }
                    phi - dot(&pred, y)
                }
                AmortizerLoss::Residual => {
                    let pot = need_potential(potential)?;
                    let res: Vec<f64> = pot.grad_u(&pred, x)?.iter().zip(y).map(|(a, b)| a - b).collect();
                    let hv = hessian_vector(pot, &pred, x, &res)?;
                    for k in 0..d {
                        g_u[k] = 2.0 * hv[k];
                    }
                    dot(&res, &res)
                }
            };
            total += value;
            self.backward(y, &trace, &g_u, &mut grad);
        }
        let inv = 1.0 / n as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok((total * inv, grad))
    }

    pub fn to_record(&self) -> AmortizerRecord {
        AmortizerRecord {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_record(rec: &AmortizerRecord) -> Result<Self> {
        let mut a = Self::new(rec.config.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        a.set_params(rec.params.clone())?;
        Ok(a)
    }
}

fn need_potential(p: Option<&Picnn>) -> Result<&Picnn> {
    p.ok_or_else(|| Error::Config("objective-based amortizer losses need the potential".into()))
}

/// `∇²_u φ(u, x) v` by central differences of the gradient.
pub fn hessian_vector(pot: &Picnn, u: &[f64], x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let nv = crate::points::norm(v);
    if nv == 0.0 {
        return Ok(vec![0.0; u.len()]);
    }
    let h = 1e-5 * (1.0 + crate::points::norm(u)) / nv;
    let plus: Vec<f64> = u.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let gp = pot.grad_u(&plus, x)?;
    let gm = pot.grad_u(&minus, x)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmortizerRecord {
    pub config: AmortizerConfig,
    pub params: Vec<f64>,
}
