//! Partially input convex neural networks.
//!
//! `φ(u, x)` is convex in `u` for every `x`. The network is a stack of
//! `depth` z-updates
//!
//! ```text
//! c_{i+1} = ELU(W̃_i c_i + b̃_i)
//! z_{i+1} = Softplus(ActNorm(W^z_i (z_i ∘ [W^zc_i c_i + b^z_i]_+)
//!                            + W^u_i (u ∘ (W^uc_i c_i + b^u_i)) + W^c_i c_i + b_i))
//! ```
//!
//! with `c_0 = x`, `z_0 = 0`, nonnegative `W^z = softplus(W̃^z)`, positive
//! ActNorm scales `exp(s)`, and a scalar final layer. The strongly convex
//! variant adds `(e^w / 2)‖u‖²`.
//!
//! Parameters live in one flat vector; [`Layout`] names the blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{elu, elu_grad, sigmoid, softplus, softplus_inverse, DenseArray, NodeId, Tape};
use crate::error::{Error, Result};
use crate::points::Points;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicnnConfig {
    pub input_dim: usize,
    pub condition_dim: usize,
    pub width: usize,
    pub depth: usize,
    #[serde(default = "default_true")]
    pub strong_convexity: bool,
    #[serde(default = "default_alpha_log")]
    pub alpha_log_init: f64,
}

fn default_true() -> bool {
    true
}

fn default_alpha_log() -> f64 {
    0.1_f64.ln()
}

impl PicnnConfig {
    pub fn new(input_dim: usize, condition_dim: usize, width: usize, depth: usize) -> Self {
        Self {
            input_dim,
            condition_dim,
            width,
            depth,
            strong_convexity: true,
            alpha_log_init: default_alpha_log(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.width < 1 || self.depth < 1 {
            return Err(Error::Config(format!(
                "picnn needs input_dim >= 1, width >= 1, depth >= 1 (got {}, {}, {})",
                self.input_dim, self.width, self.depth
            )));
        }
        if !self.alpha_log_init.is_finite() {
            return Err(Error::Config("alpha_log_init must be finite".into()));
        }
        Ok(())
    }
}

/// A named `rows × cols` slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        if self.cols == 1 {
            vec![self.rows]
        } else {
            vec![self.rows, self.cols]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerLayout {
    /// width of z_i (0 for the first layer, where z_0 = 0)
    z_in: usize,
    /// width of z_{i+1} (1 for the final layer)
    out: usize,
    /// width of c_i
    ctx_in: usize,
    /// context update producing c_{i+1}; absent on the final layer
    ctx: Option<(Block, Block)>,
    wz_raw: Block,
    wzc: Block,
    bz: Block,
    wu: Block,
    wuc: Block,
    bu: Block,
    wc: Block,
    b: Block,
    act_scale_log: Block,
    act_shift: Block,
}

/// Parameter layout of a [`Picnn`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    layers: Vec<LayerLayout>,
    alpha_log: Option<Block>,
    total: usize,
}

struct LayoutBuilder {
    offset: usize,
    blocks: Vec<Block>,
}

impl LayoutBuilder {
    fn block(&mut self, name: String, rows: usize, cols: usize) -> Block {
        let b = Block {
            name,
            offset: self.offset,
            rows,
            cols,
        };
        self.offset += rows * cols;
        self.blocks.push(b.clone());
        b
    }
}

impl Layout {
    fn new(cfg: &PicnnConfig) -> Self {
        let mut lb = LayoutBuilder {
            offset: 0,
            blocks: vec![],
        };
        let k = cfg.depth;
        let mut layers = Vec::with_capacity(k);
        for i in 0..k {
            let z_in = if i == 0 { 0 } else { cfg.width };
            let out = if i + 1 == k { 1 } else { cfg.width };
            let ctx_in = if i == 0 { cfg.condition_dim } else { cfg.width };
            let p = |s: &str| format!("layer{i}.{s}");
            let ctx = (i + 1 < k).then(|| {
                (
                    lb.block(p("ctx_weight"), cfg.width, ctx_in),
                    lb.block(p("ctx_bias"), cfg.width, 1),
                )
            });
            let l = LayerLayout {
                z_in,
                out,
                ctx_in,
                ctx,
                wz_raw: lb.block(p("z_weight_raw"), out, z_in),
                wzc: lb.block(p("z_gate_weight"), z_in, ctx_in),
                bz: lb.block(p("z_gate_bias"), z_in, 1),
                wu: lb.block(p("u_weight"), out, cfg.input_dim),
                wuc: lb.block(p("u_gate_weight"), cfg.input_dim, ctx_in),
                bu: lb.block(p("u_gate_bias"), cfg.input_dim, 1),
                wc: lb.block(p("c_weight"), out, ctx_in),
                b: lb.block(p("bias"), out, 1),
                act_scale_log: lb.block(p("actnorm_scale_log"), out, 1),
                act_shift: lb.block(p("actnorm_shift"), out, 1),
            };
            layers.push(l);
        }
        let alpha_log = cfg
            .strong_convexity
            .then(|| lb.block("alpha_log".into(), 1, 1));
        Layout {
            layers,
            alpha_log,
            total: lb.offset,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// All blocks in storage order.
    pub fn blocks(&self) -> Vec<&Block> {
        let mut out = vec![];
        for l in &self.layers {
            if let Some((w, b)) = &l.ctx {
                out.push(w);
                out.push(b);
            }
            out.extend([
                &l.wz_raw,
                &l.wzc,
                &l.bz,
                &l.wu,
                &l.wuc,
                &l.bu,
                &l.wc,
                &l.b,
                &l.act_scale_log,
                &l.act_shift,
            ]);
        }
        if let Some(a) = &self.alpha_log {
            out.push(a);
        }
        out
    }
}

/// Effective (post-reparameterization) quantities derived from the raw
/// parameters; rebuilt whenever parameters change.
#[derive(Debug, Clone, Default)]
struct Derived {
    wz: Vec<Vec<f64>>,
    act_scale: Vec<Vec<f64>>,
    alpha: f64,
}

/// A partially input convex network with flat parameter storage.
#[derive(Debug, Clone)]
pub struct Picnn {
    config: PicnnConfig,
    layout: Layout,
    params: Vec<f64>,
    actnorm_initialized: bool,
    derived: Derived,
}

/// Per-layer forward quantities kept for the reverse sweep.
#[derive(Debug, Clone, Default)]
struct LayerTrace {
    c: Vec<f64>,
    z_in: Vec<f64>,
    gate_z_pre: Vec<f64>,
    gate_z: Vec<f64>,
    gate_u: Vec<f64>,
    u_gated: Vec<f64>,
    h: Vec<f64>,
    a: Vec<f64>,
    ctx_pre: Vec<f64>,
}

const QUADRATIC_SHIFT: f64 = -50.0;
const ACTNORM_MIN_SCALE: f64 = 1e-3;
const ACTNORM_CONSTANT_STD: f64 = 1e-8;

fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// out += Wᵀ g
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, g: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += gr * a;
        }
    }
}

/// dW += g ⊗ x
fn outer_acc(dw: &mut [f64], rows: usize, cols: usize, g: &[f64], x: &[f64]) {
    for r in 0..rows {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (d, xv) in row.iter_mut().zip(x) {
            *d += gr * xv;
        }
    }
}

impl Picnn {
    /// Randomly initialized network. ActNorm layers still need
    /// [`Picnn::actnorm_init`] before evaluation.
    pub fn new<R: Rng + ?Sized>(config: PicnnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        for l in &layout.layers {
            if let Some((w, _)) = &l.ctx {
                uniform_fill(rng, &mut params[w.range()], l.ctx_in);
            }
            for v in &mut params[l.wz_raw.range()] {
                *v = softplus_inverse(0.05 * rng.random_range(0.5..1.5));
            }
            uniform_fill(rng, &mut params[l.wzc.range()], l.ctx_in);
            uniform_fill(rng, &mut params[l.wu.range()], config.input_dim);
            uniform_fill(rng, &mut params[l.wuc.range()], l.ctx_in);
            params[l.bu.range()].iter_mut().for_each(|v| *v = 1.0);
            uniform_fill(rng, &mut params[l.wc.range()], l.ctx_in);
        }
        if let Some(a) = &layout.alpha_log {
            params[a.offset] = config.alpha_log_init;
        }
        let mut net = Self {
            config,
            layout,
            params,
            actnorm_initialized: false,
            derived: Derived::default(),
        };
        net.refresh();
        Ok(net)
    }

    /// A network whose convex part is constant in `u`: all u-path and
    /// context-path weights are zero and the output shift is −50, so that
    /// `φ(u, x) = softplus(−50) + (α / 2)‖u‖²` with `softplus(−50) ≈ 2e-22`.
    pub fn quadratic(input_dim: usize, condition_dim: usize, alpha: f64) -> Result<Self> {
        let mut cfg = PicnnConfig::new(input_dim, condition_dim, 1, 1);
        cfg.strong_convexity = true;
        cfg.alpha_log_init = alpha.ln();
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        params[layout.alpha_log.as_ref().unwrap().offset] = alpha.ln();
        params[layout.layers[0].act_shift.offset] = QUADRATIC_SHIFT;
        let mut net = Self {
            config: cfg,
            layout,
            params,
            actnorm_initialized: true,
            derived: Derived::default(),
        };
        net.refresh();
        Ok(net)
    }

    pub fn config(&self) -> &PicnnConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.actnorm_initialized
    }

    /// Marks ActNorm as initialized without touching its parameters.
    pub fn set_initialized(&mut self, yes: bool) {
        self.actnorm_initialized = yes;
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        self.params = params;
        self.refresh();
        Ok(())
    }

    /// Mutates the flat parameter vector in place and rebuilds derived state.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.params);
        self.refresh();
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .blocks()
            .into_iter()
            .find(|b| b.name == name)
            .map(|b| &self.params[b.range()])
    }

    /// Current strong-convexity coefficient `α = e^w` (0 when disabled).
    pub fn alpha(&self) -> f64 {
        self.derived.alpha
    }

    fn refresh(&mut self) {
        let p = &self.params;
        self.derived.wz = self
            .layout
            .layers
            .iter()
            .map(|l| p[l.wz_raw.range()].iter().map(|&v| softplus(v)).collect())
            .collect();
        self.derived.act_scale = self
            .layout
            .layers
            .iter()
            .map(|l| p[l.act_scale_log.range()].iter().map(|&v| v.exp()).collect())
            .collect();
        self.derived.alpha = self
            .layout
            .alpha_log
            .as_ref()
            .map_or(0.0, |a| p[a.offset].exp());
    }

    fn check_inputs(&self, u: &[f64], x: &[f64]) -> Result<()> {
        if u.len() != self.config.input_dim || x.len() != self.config.condition_dim {
            return Err(Error::Shape(format!(
                "picnn expects u in R^{} and x in R^{}, got {} and {}",
                self.config.input_dim,
                self.config.condition_dim,
                u.len(),
                x.len()
            )));
        }
        Ok(())
    }

    fn trace(&self, u: &[f64], x: &[f64], upto: usize) -> (Vec<LayerTrace>, Vec<f64>) {
        let p = &self.params;
        let mut traces = Vec::with_capacity(upto);
        let mut c = x.to_vec();
        let mut z: Vec<f64> = vec![];
        for (i, l) in self.layout.layers.iter().enumerate().take(upto) {
            let mut t = LayerTrace {
                c: c.clone(),
                z_in: z.clone(),
                ..Default::default()
            };
            let mut h = p[l.b.range()].to_vec();
            if l.z_in > 0 {
                let mut pre = p[l.bz.range()].to_vec();
                matvec_acc(&p[l.wzc.range()], l.z_in, l.ctx_in, &c, &mut pre);
                let gate: Vec<f64> = pre.iter().map(|&v| softplus(v)).collect();
                let zg: Vec<f64> = z.iter().zip(&gate).map(|(a, b)| a * b).collect();
                matvec_acc(&self.derived.wz[i], l.out, l.z_in, &zg, &mut h);
                t.gate_z_pre = pre;
                t.gate_z = gate;
            }
            let mut gu = p[l.bu.range()].to_vec();
            matvec_acc(&p[l.wuc.range()], self.config.input_dim, l.ctx_in, &c, &mut gu);
            let ug: Vec<f64> = u.iter().zip(&gu).map(|(a, b)| a * b).collect();
            matvec_acc(&p[l.wu.range()], l.out, self.config.input_dim, &ug, &mut h);
            matvec_acc(&p[l.wc.range()], l.out, l.ctx_in, &c, &mut h);
            let scale = &self.derived.act_scale[i];
            let shift = &p[l.act_shift.range()];
            let a: Vec<f64> = h
                .iter()
                .zip(scale)
                .zip(shift)
                .map(|((hv, s), t)| s * hv + t)
                .collect();
            z = a.iter().map(|&v| softplus(v)).collect();
            if let Some((w, b)) = &l.ctx {
                let mut pre = p[b.range()].to_vec();
                matvec_acc(&p[w.range()], self.config.width, l.ctx_in, &c, &mut pre);
                c = pre.iter().map(|&v| elu(v)).collect();
                t.ctx_pre = pre;
            }
            t.gate_u = gu;
            t.u_gated = ug;
            t.h = h;
            t.a = a;
            traces.push(t);
        }
        (traces, z)
    }

    /// Evaluates `φ(u, x)` and, on request, accumulates `weight · ∇_u φ` into
    /// `grad_u` and `weight · ∇_θ φ` into `grad_params`.
    pub fn eval_with_grads(
        &self,
        u: &[f64],
        x: &[f64],
        weight: f64,
        grad_u: Option<&mut [f64]>,
        grad_params: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check_inputs(u, x)?;
        if !self.actnorm_initialized {
            return Err(Error::ActNormUninitialized);
        }
        let k = self.layout.layers.len();
        let (traces, z) = self.trace(u, x, k);
        let sq: f64 = u.iter().map(|v| v * v).sum();
        let value = z[0] + 0.5 * self.derived.alpha * sq;

        if grad_u.is_none() && grad_params.is_none() {
            return Ok(value);
        }
        let mut du = vec![0.0; u.len()];
        let mut gp = grad_params;
        if let Some(a) = &self.layout.alpha_log {
            if let Some(g) = gp.as_deref_mut() {
                g[a.offset] += weight * 0.5 * self.derived.alpha * sq;
            }
            for (d, v) in du.iter_mut().zip(u) {
                *d += weight * self.derived.alpha * v;
            }
        }
        self.backward(u, &traces, weight, &mut du, gp);
        if let Some(g) = grad_u {
            for (o, d) in g.iter_mut().zip(&du) {
                *o += d;
            }
        }
        Ok(value)
    }

    fn backward(
        &self,
        u: &[f64],
        traces: &[LayerTrace],
        weight: f64,
        du: &mut [f64],
        mut gp: Option<&mut [f64]>,
    ) {
        let p = &self.params;
        let d_u = self.config.input_dim;
        let mut dz = vec![weight];
        let mut dc_next: Vec<f64> = vec![];
        for (i, l) in self.layout.layers.iter().enumerate().rev() {
            let t = &traces[i];
            let scale = &self.derived.act_scale[i];
            let da: Vec<f64> = dz.iter().zip(&t.a).map(|(g, a)| g * sigmoid(*a)).collect();
            let dh: Vec<f64> = da.iter().zip(scale).map(|(g, s)| g * s).collect();
            let mut dc = vec![0.0; l.ctx_in];

            if let Some(g) = gp.as_deref_mut() {
                for r in 0..l.out {
                    g[l.act_shift.offset + r] += da[r];
                    g[l.act_scale_log.offset + r] += da[r] * t.h[r] * scale[r];
                    g[l.b.offset + r] += dh[r];
                }
                outer_acc(&mut g[l.wc.range()], l.out, l.ctx_in, &dh, &t.c);
                outer_acc(&mut g[l.wu.range()], l.out, d_u, &dh, &t.u_gated);
            }
            matvec_t_acc(&p[l.wc.range()], l.out, l.ctx_in, &dh, &mut dc);

            let mut dug = vec![0.0; d_u];
            matvec_t_acc(&p[l.wu.range()], l.out, d_u, &dh, &mut dug);
            let mut dgu = vec![0.0; d_u];
            for j in 0..d_u {
                du[j] += dug[j] * t.gate_u[j];
                dgu[j] = dug[j] * u[j];
            }
            if let Some(g) = gp.as_deref_mut() {
                outer_acc(&mut g[l.wuc.range()], d_u, l.ctx_in, &dgu, &t.c);
                for j in 0..d_u {
                    g[l.bu.offset + j] += dgu[j];
                }
            }
            matvec_t_acc(&p[l.wuc.range()], d_u, l.ctx_in, &dgu, &mut dc);

            let mut dz_prev = vec![];
            if l.z_in > 0 {
                let zg: Vec<f64> = t.z_in.iter().zip(&t.gate_z).map(|(a, b)| a * b).collect();
                let mut dzg = vec![0.0; l.z_in];
                matvec_t_acc(&self.derived.wz[i], l.out, l.z_in, &dh, &mut dzg);
                dz_prev = dzg.iter().zip(&t.gate_z).map(|(a, b)| a * b).collect();
                let dpre: Vec<f64> = dzg
                    .iter()
                    .zip(&t.z_in)
                    .zip(&t.gate_z_pre)
                    .map(|((g, z), pre)| g * z * sigmoid(*pre))
                    .collect();
                if let Some(g) = gp.as_deref_mut() {
                    // chain through W^z = softplus(raw)
                    let raw = &p[l.wz_raw.range()];
                    let gw = &mut g[l.wz_raw.range()];
                    for r in 0..l.out {
                        if dh[r] == 0.0 {
                            continue;
                        }
                        for q in 0..l.z_in {
                            gw[r * l.z_in + q] += dh[r] * zg[q] * sigmoid(raw[r * l.z_in + q]);
                        }
                    }
                    outer_acc(&mut g[l.wzc.range()], l.z_in, l.ctx_in, &dpre, &t.c);
                    for q in 0..l.z_in {
                        g[l.bz.offset + q] += dpre[q];
                    }
                }
                matvec_t_acc(&p[l.wzc.range()], l.z_in, l.ctx_in, &dpre, &mut dc);
            }

            if let Some((w, b)) = &l.ctx {
                let dpre: Vec<f64> = dc_next
                    .iter()
                    .zip(&t.ctx_pre)
                    .map(|(g, pre)| g * elu_grad(*pre))
                    .collect();
                if let Some(g) = gp.as_deref_mut() {
                    outer_acc(&mut g[w.range()], self.config.width, l.ctx_in, &dpre, &t.c);
                    for (q, d) in dpre.iter().enumerate() {
                        g[b.offset + q] += d;
                    }
                }
                matvec_t_acc(&p[w.range()], self.config.width, l.ctx_in, &dpre, &mut dc);
            }
            dz = dz_prev;
            dc_next = dc;
        }
    }

    pub fn forward(&self, u: &[f64], x: &[f64]) -> Result<f64> {
        self.eval_with_grads(u, x, 1.0, None, None)
    }

    pub fn grad_u(&self, u: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; u.len()];
        self.eval_with_grads(u, x, 1.0, Some(&mut g), None)?;
        Ok(g)
    }

    /// Value and gradient in `u`.
    pub fn value_and_grad_u(&self, u: &[f64], x: &[f64], grad: &mut [f64]) -> Result<f64> {
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.eval_with_grads(u, x, 1.0, Some(grad), None)
    }

    /// Gradient of `Σ_k w_k φ(u_k, x_k)` with respect to the raw parameters.
    pub fn grad_params(&self, us: &Points, xs: &Points, weights: &[f64]) -> Result<Vec<f64>> {
        if us.len() != xs.len() || us.len() != weights.len() {
            return Err(Error::Shape("batch arrays differ in length".into()));
        }
        if us.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut g = vec![0.0; self.num_params()];
        for k in 0..us.len() {
            if weights[k] != 0.0 {
                self.eval_with_grads(us.row(k), xs.row(k), weights[k], None, Some(&mut g))?;
            }
        }
        Ok(g)
    }

    /// Data-dependent ActNorm initialization: layer by layer, sets each
    /// channel's scale and shift so that the batch's normalized
    /// pre-activations have mean 0 and variance 1.
    ///
    /// Channels whose batch standard deviation is below `1e-8` keep unit
    /// scale and are only centered; scales never go below `1e-3`.
    pub fn actnorm_init(&mut self, us: &Points, xs: &Points) -> Result<ActNormReport> {
        if self.actnorm_initialized {
            return Err(Error::Config("ActNorm already initialized".into()));
        }
        if us.len() < 2 || us.len() != xs.len() {
            return Err(Error::Data(format!(
                "ActNorm init needs a batch of at least 2 paired points, got {}",
                us.len()
            )));
        }
        for k in 0..us.len() {
            self.check_inputs(us.row(k), xs.row(k))?;
        }
        let n = us.len() as f64;
        let mut report = ActNormReport::default();
        for i in 0..self.layout.layers.len() {
            let l = self.layout.layers[i].clone();
            let mut mean = vec![0.0; l.out];
            let mut sq = vec![0.0; l.out];
            let hs: Vec<Vec<f64>> = (0..us.len())
                .map(|k| self.trace(us.row(k), xs.row(k), i + 1).0.pop().unwrap().h)
                .collect();
            for h in &hs {
                for r in 0..l.out {
                    mean[r] += h[r] / n;
                }
            }
            for h in &hs {
                for r in 0..l.out {
                    sq[r] += (h[r] - mean[r]).powi(2) / n;
                }
            }
            for r in 0..l.out {
                let std = sq[r].sqrt();
                let scale = if std < ACTNORM_CONSTANT_STD {
                    report.constant_channels += 1;
                    1.0
                } else if 1.0 / std < ACTNORM_MIN_SCALE {
                    report.clamped_channels += 1;
                    ACTNORM_MIN_SCALE
                } else {
                    1.0 / std
                };
                self.params[l.act_scale_log.offset + r] = scale.ln();
                self.params[l.act_shift.offset + r] = -mean[r] * scale;
            }
            self.refresh();
        }
        self.actnorm_initialized = true;
        Ok(report)
    }

    /// Per-layer post-ActNorm pre-activations `exp(s) ∘ h + t` at `(u, x)`.
    pub fn normalized_preactivations(&self, u: &[f64], x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(u, x)?;
        let (traces, _) = self.trace(u, x, self.layout.layers.len());
        Ok(traces.into_iter().map(|t| t.a).collect())
    }

    /// Builds `φ(u, x)` on a tape from primitive ops. Parameters become tape
    /// variables; the returned map lists their node ids by block name.
    pub fn build_on_tape(
        &self,
        tape: &mut Tape,
        u: NodeId,
        x: &[f64],
    ) -> Result<(NodeId, Vec<(String, NodeId)>)> {
        let p = &self.params;
        let mut vars = vec![];
        // weights stay matrices even with a single column
        let mut var = |tape: &mut Tape, b: &Block, matrix: bool| -> Result<NodeId> {
            let shape = if matrix { vec![b.rows, b.cols] } else { b.shape() };
            let arr = DenseArray::new(shape, p[b.range()].to_vec())?;
            let id = tape.variable(arr);
            vars.push((b.name.clone(), id));
            Ok(id)
        };
        let mut c = tape.constant(DenseArray::vector(x.to_vec()));
        let mut z: Option<NodeId> = None;
        for l in &self.layout.layers {
            let b = var(tape, &l.b, false)?;
            let mut h = b;
            if let Some(zn) = z {
                let wzc = var(tape, &l.wzc, true)?;
                let bz = var(tape, &l.bz, false)?;
                let pre = tape.matmul(wzc, c)?;
                let pre = tape.add(pre, bz)?;
                let gate = tape.softplus(pre)?;
                let zg = tape.mul(zn, gate)?;
                let raw = var(tape, &l.wz_raw, true)?;
                let wz = tape.softplus(raw)?;
                let term = tape.matmul(wz, zg)?;
                h = tape.add(h, term)?;
            }
            let wuc = var(tape, &l.wuc, true)?;
            let bu = var(tape, &l.bu, false)?;
            let gu = tape.matmul(wuc, c)?;
            let gu = tape.add(gu, bu)?;
            let ug = tape.mul(u, gu)?;
            let wu = var(tape, &l.wu, true)?;
            let term = tape.matmul(wu, ug)?;
            h = tape.add(h, term)?;
            let wc = var(tape, &l.wc, true)?;
            let term = tape.matmul(wc, c)?;
            h = tape.add(h, term)?;
            let s = var(tape, &l.act_scale_log, false)?;
            let t = var(tape, &l.act_shift, false)?;
            let es = tape.exp(s)?;
            let a = tape.mul(es, h)?;
            let a = tape.add(a, t)?;
            z = Some(tape.softplus(a)?);
            if let Some((w, bb)) = &l.ctx {
                let w = var(tape, w, true)?;
                let bb = var(tape, bb, false)?;
                let pre = tape.matmul(w, c)?;
                let pre = tape.add(pre, bb)?;
                c = tape.elu(pre)?;
            }
        }
        let mut out = tape.sum(z.expect("depth >= 1"))?;
        if let Some(a) = &self.layout.alpha_log {
            let w = var(tape, a, false)?;
            let ew = tape.exp(w)?;
            let sq = tape.square_norm(u)?;
            let q = tape.mul(ew, sq)?;
            let q = tape.sum(q)?;
            let q = tape.scale(q, 0.5)?;
            out = tape.add(out, q)?;
        }
        Ok((out, vars))
    }

    pub fn to_record(&self) -> ParamRecord {
        ParamRecord {
            format: PARAM_FORMAT.into(),
            version: PARAM_VERSION,
            config: self.config.clone(),
            actnorm_initialized: self.actnorm_initialized,
            arrays: self
                .layout
                .blocks()
                .into_iter()
                .map(|b| NamedArray {
                    name: b.name.clone(),
                    shape: vec![b.rows, b.cols],
                    data: self.params[b.range()].to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_record(rec: &ParamRecord) -> Result<Self> {
        if rec.format != PARAM_FORMAT || rec.version != PARAM_VERSION {
            return Err(Error::Data(format!(
                "unsupported parameter record {} v{}",
                rec.format, rec.version
            )));
        }
        rec.config.validate()?;
        let layout = Layout::new(&rec.config);
        let mut params = vec![0.0; layout.total];
        let blocks = layout.blocks();
        if blocks.len() != rec.arrays.len() {
            return Err(Error::Data(format!(
                "expected {} arrays, record has {}",
                blocks.len(),
                rec.arrays.len()
            )));
        }
        for (b, a) in blocks.iter().zip(&rec.arrays) {
            if a.name != b.name || a.shape != [b.rows, b.cols] || a.data.len() != b.len() {
                return Err(Error::Data(format!(
                    "array `{}` {:?} does not match expected `{}` [{}, {}]",
                    a.name, a.shape, b.name, b.rows, b.cols
                )));
            }
            params[b.range()].copy_from_slice(&a.data);
        }
        let mut net = Self {
            config: rec.config.clone(),
            layout,
            params,
            actnorm_initialized: rec.actnorm_initialized,
            derived: Derived::default(),
        };
        net.refresh();
        Ok(net)
    }
}

fn uniform_fill<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64], fan_in: usize) {
    if fan_in == 0 {
        return;
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in out {
        *v = rng.random_range(-bound..bound);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActNormReport {
    pub constant_channels: usize,
    pub clamped_channels: usize,
}

pub const PARAM_FORMAT: &str = "nvqr-picnn";
pub const PARAM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    /// `[rows, cols]`; vectors are stored as `[n, 1]`.
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned JSON form of a [`Picnn`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub format: String,
    pub version: u32,
    pub config: PicnnConfig,
    pub actnorm_initialized: bool,
    pub arrays: Vec<NamedArray>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn initialized(cfg: PicnnConfig, seed: u64) -> Picnn {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Picnn::new(cfg.clone(), &mut rng).unwrap();
        let n = 32;
        let us = Points::new(cfg.input_dim, randn(&mut rng, n * cfg.input_dim)).unwrap();
        let xs = if cfg.condition_dim == 0 {
            Points::empty_rows(n)
        } else {
            Points::new(cfg.condition_dim, randn(&mut rng, n * cfg.condition_dim)).unwrap()
        };
        net.actnorm_init(&us, &xs).unwrap();
        net
    }

    #[test]
    fn uninitialized_forward_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Picnn::new(PicnnConfig::new(2, 1, 4, 2), &mut rng).unwrap();
        assert!(matches!(
            net.forward(&[0.0, 0.0], &[0.0]),
            Err(Error::ActNormUninitialized)
        ));
    }

    #[test]
    fn zero_final_layer_gives_softplus_of_shift() {
        let mut cfg = PicnnConfig::new(2, 1, 5, 3);
        cfg.strong_convexity = false;
        let mut net = initialized(cfg, 1);
        let last = net.layout.layers.last().unwrap().clone();
        net.update_params(|p| {
            for b in [&last.wu, &last.wc, &last.b] {
                p[b.range()].iter_mut().for_each(|v| *v = 0.0);
            }
            // W^z = softplus(raw) cannot vanish, so cut the z input instead.
            p[last.bz.range()].iter_mut().for_each(|v| *v = -800.0);
            p[last.wzc.range()].iter_mut().for_each(|v| *v = 0.0);
        });
        let shift = net.params[last.act_shift.offset];
        for u in [[0.0, 0.0], [1.0, -2.0], [3.0, 0.5]] {
            let v = net.forward(&u, &[0.7]).unwrap();
            assert!((v - softplus(shift)).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_network_gradient_is_identity() {
        let net = Picnn::quadratic(3, 1, 1.0).unwrap();
        let c = net.forward(&[0.0; 3], &[0.2]).unwrap();
        assert!(c > 0.0 && c < 1e-20);
        let u = [0.3, -1.2, 2.0];
        let v = net.forward(&u, &[5.0]).unwrap();
        assert!((v - c - 0.5 * (0.09 + 1.44 + 4.0)).abs() < 1e-12);
        assert_eq!(net.grad_u(&u, &[5.0]).unwrap(), u.to_vec());
    }

    #[test]
    fn fused_path_matches_tape_path() {
        // single-column weights appear with a 1-d condition and width 1
        for (dx, width) in [(3, 6), (1, 1), (1, 4)] {
            fused_matches_tape(dx, width);
        }
    }

    fn fused_matches_tape(dx: usize, width: usize) {
        let net = initialized(PicnnConfig::new(2, dx, width, 3), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let u = randn(&mut rng, 2);
            let x = randn(&mut rng, dx);
            let mut gu = vec![0.0; 2];
            let mut gp = vec![0.0; net.num_params()];
            let v = net
                .eval_with_grads(&u, &x, 1.0, Some(&mut gu), Some(&mut gp))
                .unwrap();
            let mut tape = Tape::new();
            let un = tape.variable(DenseArray::vector(u.clone()));
            let (root, vars) = net.build_on_tape(&mut tape, un, &x).unwrap();
            assert!((tape.value(root).item() - v).abs() < 1e-12);
            let adj = tape.backward(root).unwrap();
            for (a, b) in adj[&un].data().iter().zip(&gu) {
                assert!((a - b).abs() < 1e-12);
            }
            for (name, id) in vars {
                let blk = net.layout.blocks().into_iter().find(|b| b.name == name).unwrap();
                for (a, b) in adj[&id].data().iter().zip(&gp[blk.range()]) {
                    assert!((a - b).abs() < 1e-12, "{name}");
                }
            }
        }
    }

    #[test]
    fn actnorm_standardizes_first_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = PicnnConfig::new(2, 1, 7, 4);
        let mut net = Picnn::new(cfg, &mut rng).unwrap();
        let n = 64;
        let us = Points::new(2, randn(&mut rng, 2 * n)).unwrap();
        let xs = Points::new(1, randn(&mut rng, n)).unwrap();
        let rep = net.actnorm_init(&us, &xs).unwrap();
        assert_eq!(rep.constant_channels, 0);
        let acts: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|k| net.normalized_preactivations(us.row(k), xs.row(k)).unwrap())
            .collect();
        for layer in 0..4 {
            let width = acts[0][layer].len();
            for ch in 0..width {
                let vals: Vec<f64> = acts.iter().map(|a| a[layer][ch]).collect();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                assert!(mean.abs() < 1e-6, "layer {layer} ch {ch} mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "layer {layer} ch {ch} var {var}");
            }
        }
    }

    #[test]
    fn actnorm_already_standard_batch_keeps_identity() {
        // depth 1, d_x = 0: the single pre-activation is linear in u
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = PicnnConfig::new(1, 0, 1, 1);
        cfg.strong_convexity = false;
        let mut net = Picnn::new(cfg, &mut rng).unwrap();
        let l = net.layout.layers[0].clone();
        net.update_params(|p| {
            p[l.wu.offset] = 1.0;
            p[l.bu.offset] = 1.0;
            p[l.b.offset] = 0.0;
        });
        let us = Points::new(1, vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        net.actnorm_init(&us, &Points::empty_rows(4)).unwrap();
        assert!(net.params[l.act_scale_log.offset].abs() < 1e-12);
        assert!(net.params[l.act_shift.offset].abs() < 1e-12);
    }

    #[test]
    fn actnorm_constant_channel_takes_clamp_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Picnn::new(PicnnConfig::new(1, 1, 3, 2), &mut rng).unwrap();
        let us = Points::new(1, vec![0.0; 8]).unwrap();
        let xs = Points::new(1, vec![0.5; 8]).unwrap();
        let rep = net.actnorm_init(&us, &xs).unwrap();
        assert!(rep.constant_channels > 0);
        assert!(net.derived.act_scale.iter().flatten().all(|&s| s >= ACTNORM_MIN_SCALE));
    }

    #[test]
    fn actnorm_needs_two_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Picnn::new(PicnnConfig::new(1, 1, 3, 2), &mut rng).unwrap();
        let err = net
            .actnorm_init(&Points::new(1, vec![0.0]).unwrap(), &Points::new(1, vec![0.0]).unwrap())
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn param_gradient_zero_weights_and_linearity() {
        let net = initialized(PicnnConfig::new(2, 1, 5, 3), 11);
        let us = Points::new(2, vec![0.3, -0.4, 1.1, 0.9]).unwrap();
        let xs = Points::new(1, vec![0.2, -1.0]).unwrap();
        let g0 = net.grad_params(&us, &xs, &[0.0, 0.0]).unwrap();
        assert!(g0.iter().all(|&v| v == 0.0));
        let (w1, w2) = (0.7, -1.3);
        let g = net.grad_params(&us, &xs, &[w1, w2]).unwrap();
        let ga = net.grad_params(&us.select(&[0]), &xs.select(&[0]), &[1.0]).unwrap();
        let gb = net.grad_params(&us.select(&[1]), &xs.select(&[1]), &[1.0]).unwrap();
        for k in 0..g.len() {
            assert!((g[k] - (w1 * ga[k] + w2 * gb[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let net = initialized(PicnnConfig::new(2, 2, 5, 3), 13);
        let u = [0.4, -0.8];
        let x = [1.0, -0.5];
        let mut gp = vec![0.0; net.num_params()];
        net.eval_with_grads(&u, &x, 1.0, None, Some(&mut gp)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        for _ in 0..20 {
            let k = rng.random_range(0..net.num_params());
            let mut plus = net.clone();
            plus.update_params(|p| p[k] += h);
            let mut minus = net.clone();
            minus.update_params(|p| p[k] -= h);
            let fd = (plus.forward(&u, &x).unwrap() - minus.forward(&u, &x).unwrap()) / (2.0 * h);
            let denom = gp[k].abs().max(fd.abs()).max(1e-8);
            assert!((gp[k] - fd).abs() / denom < 1e-5, "param {k}: {} vs {fd}", gp[k]);
        }
    }

    #[test]
    fn record_roundtrip() {
        let net = initialized(PicnnConfig::new(2, 1, 4, 2), 3);
        let rec = net.to_record();
        let json = serde_json::to_string(&rec).unwrap();
        let back = Picnn::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(back.forward(&[0.1, 0.2], &[0.3]).unwrap(), net.forward(&[0.1, 0.2], &[0.3]).unwrap());
        let mut bad = rec.clone();
        bad.arrays[0].name = "nope".into();
        assert!(Picnn::from_record(&bad).is_err());
    }
}
