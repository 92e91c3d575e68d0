//! Test objectives with analytic oracles, and a finite-difference checker.
//!
//! Every objective exposes `ℓ(w)`, `∇ℓ(w)` and Hessian-vector products;
//! Hessian diagonals and dense Hessians are optional capabilities. The
//! structured second-order methods only ever ask for HVPs and one diagonal
//! query, so they never form a dense Hessian.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Result, SngdError};
use crate::linalg::{inv_spd, is_spd, logdet_spd, Matrix, Vector};

/// Oracle bundle for a smooth loss `ℓ: ℝᵖ → ℝ`.
///
/// Implementations must be reentrant: Monte-Carlo estimators evaluate
/// oracles from several threads at once.
pub trait Objective: Send + Sync {
    /// Short identifier used in reports.
    fn name(&self) -> String;
    /// Input dimension `p`.
    fn dim(&self) -> usize;
    /// `ℓ(w)`.
    fn eval(&self, w: &Vector) -> f64;
    /// `∇ℓ(w)`.
    fn grad(&self, w: &Vector) -> Vector;
    /// `∇²ℓ(w) v`.
    fn hvp(&self, w: &Vector, v: &Vector) -> Vector;
    /// `diag ∇²ℓ(w)`, if the objective can provide it cheaply.
    fn hess_diag(&self, _w: &Vector) -> Option<Vector> {
        None
    }
    /// Dense `∇²ℓ(w)`, if available (small dimensions only).
    fn hess_dense(&self, _w: &Vector) -> Option<Matrix> {
        None
    }
}

impl<T: Objective + ?Sized> Objective for Arc<T> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, w: &Vector) -> f64 {
        (**self).eval(w)
    }
    fn grad(&self, w: &Vector) -> Vector {
        (**self).grad(w)
    }
    fn hvp(&self, w: &Vector, v: &Vector) -> Vector {
        (**self).hvp(w, v)
    }
    fn hess_diag(&self, w: &Vector) -> Option<Vector> {
        (**self).hess_diag(w)
    }
    fn hess_dense(&self, w: &Vector) -> Option<Matrix> {
        (**self).hess_dense(w)
    }
}

/// Dense Hessian assembled from `p` Hessian-vector products (symmetrized).
pub fn hessian_from_hvps(obj: &dyn Objective, w: &Vector) -> Matrix {
    let p = obj.dim();
    let mut h = Matrix::zeros(p, p);
    for j in 0..p {
        let mut e = Vector::zeros(p);
        e[j] = 1.0;
        h.set_column(j, &obj.hvp(w, &e));
    }
    (&h + h.transpose()) * 0.5
}

fn check_dim(p: usize, min: usize, name: &str) -> Result<()> {
    if p < min {
        return Err(SngdError::Config(format!("{name} needs dimension >= {min}, got {p}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rosenbrock.
// ---------------------------------------------------------------------------

/// `ℓ(w) = (1/p) Σᵢ [100(w_{i+1} − w_i²)² + (w_i − 1)²]`.
///
/// With `literal = true` the inner square is dropped, giving
/// `100(w_{i+1} − w_i)²` — a convex quadratic kept for comparison runs.
#[derive(Clone, Debug)]
pub struct Rosenbrock {
    p: usize,
    literal: bool,
}

/// Standard Rosenbrock objective in dimension `p ≥ 2`.
pub fn rosenbrock(p: usize) -> Result<Rosenbrock> {
    check_dim(p, 2, "rosenbrock")?;
    Ok(Rosenbrock { p, literal: false })
}

/// Rosenbrock variant without the inner square (`100(w_{i+1} − w_i)²`).
pub fn rosenbrock_literal(p: usize) -> Result<Rosenbrock> {
    check_dim(p, 2, "rosenbrock")?;
    Ok(Rosenbrock { p, literal: true })
}

impl Rosenbrock {
    /// Inner residual `w_{i+1} − w_i²` (or `w_{i+1} − w_i`) and its
    /// derivatives with respect to `w_i`: (value, first, second).
    fn inner(&self, wi: f64) -> (f64, f64, f64) {
        if self.literal {
            (wi, 1.0, 0.0)
        } else {
            (wi * wi, 2.0 * wi, 2.0)
        }
    }

    /// Tridiagonal Hessian bands `(diag, offdiag)` with `offdiag[i] = H[i, i+1]`.
    fn bands(&self, w: &Vector) -> (Vec<f64>, Vec<f64>) {
        let p = self.p;
        let s = 1.0 / p as f64;
        let mut d = vec![0.0; p];
        let mut o = vec![0.0; p - 1];
        for i in 0..p - 1 {
            let (q, dq, d2q) = self.inner(w[i]);
            let r = w[i + 1] - q;
            // 100 r² with r = w_{i+1} − q(w_i):
            // ∂²/∂w_i² = 200 (dq² − r d²q), ∂²/∂w_i∂w_{i+1} = −200 dq, ∂²/∂w_{i+1}² = 200.
            d[i] += s * (200.0 * (dq * dq - r * d2q) + 2.0);
            d[i + 1] += s * 200.0;
            o[i] = -s * 200.0 * dq;
        }
        (d, o)
    }
}

impl Objective for Rosenbrock {
    fn name(&self) -> String {
        if self.literal {
            format!("rosenbrock-literal({})", self.p)
        } else {
            format!("rosenbrock({})", self.p)
        }
    }
    fn dim(&self) -> usize {
        self.p
    }
    fn eval(&self, w: &Vector) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.p - 1 {
            let r = w[i + 1] - self.inner(w[i]).0;
            acc += 100.0 * r * r + (w[i] - 1.0) * (w[i] - 1.0);
        }
        acc / self.p as f64
    }
    fn grad(&self, w: &Vector) -> Vector {
        let s = 1.0 / self.p as f64;
        let mut g = Vector::zeros(self.p);
        for i in 0..self.p - 1 {
            let (q, dq, _) = self.inner(w[i]);
            let r = w[i + 1] - q;
            g[i] += s * (-200.0 * r * dq + 2.0 * (w[i] - 1.0));
            g[i + 1] += s * 200.0 * r;
        }
        g
    }
    fn hvp(&self, w: &Vector, v: &Vector) -> Vector {
        let (d, o) = self.bands(w);
        tridiag_apply(&d, &o, v)
    }
    fn hess_diag(&self, w: &Vector) -> Option<Vector> {
        Some(Vector::from_vec(self.bands(w).0))
    }
    fn hess_dense(&self, w: &Vector) -> Option<Matrix> {
        let (d, o) = self.bands(w);
        Some(tridiag_dense(&d, &o))
    }
}

fn tridiag_apply(d: &[f64], o: &[f64], v: &Vector) -> Vector {
    let p = d.len();
    let mut out = Vector::zeros(p);
    for i in 0..p {
        out[i] = d[i] * v[i];
        if i + 1 < p {
            out[i] += o[i] * v[i + 1];
        }
        if i > 0 {
            out[i] += o[i - 1] * v[i - 1];
        }
    }
    out
}

fn tridiag_dense(d: &[f64], o: &[f64]) -> Matrix {
    let p = d.len();
    let mut h = Matrix::from_diagonal(&Vector::from_column_slice(d));
    for i in 0..p - 1 {
        h[(i, i + 1)] = o[i];
        h[(i + 1, i)] = o[i];
    }
    h
}

// ---------------------------------------------------------------------------
// Dixon-Price.
// ---------------------------------------------------------------------------

/// `ℓ(w) = (1/p)[(w₁ − 1)² + Σ_{i=2}^p i (2w_i² − w_{i−1})²]`.
#[derive(Clone, Debug)]
pub struct DixonPrice {
    p: usize,
}

/// Dixon-Price objective in dimension `p ≥ 2`.
pub fn dixon_price(p: usize) -> Result<DixonPrice> {
    check_dim(p, 2, "dixon-price")?;
    Ok(DixonPrice { p })
}

impl DixonPrice {
    fn bands(&self, w: &Vector) -> (Vec<f64>, Vec<f64>) {
        let p = self.p;
        let s = 1.0 / p as f64;
        let mut d = vec![0.0; p];
        let mut o = vec![0.0; p - 1];
        d[0] += 2.0 * s;
        for j in 1..p {
            let c = (j + 1) as f64;
            let r = 2.0 * w[j] * w[j] - w[j - 1];
            d[j] += s * c * (8.0 * r + 32.0 * w[j] * w[j]);
            d[j - 1] += s * 2.0 * c;
            o[j - 1] = -s * 8.0 * c * w[j];
        }
        (d, o)
    }
}

impl Objective for DixonPrice {
    fn name(&self) -> String {
        format!("dixon-price({})", self.p)
    }
    fn dim(&self) -> usize {
        self.p
    }
    fn eval(&self, w: &Vector) -> f64 {
        let mut acc = (w[0] - 1.0) * (w[0] - 1.0);
        for j in 1..self.p {
            let r = 2.0 * w[j] * w[j] - w[j - 1];
            acc += (j + 1) as f64 * r * r;
        }
        acc / self.p as f64
    }
    fn grad(&self, w: &Vector) -> Vector {
        let s = 1.0 / self.p as f64;
        let mut g = Vector::zeros(self.p);
        g[0] += s * 2.0 * (w[0] - 1.0);
        for j in 1..self.p {
            let c = (j + 1) as f64;
            let r = 2.0 * w[j] * w[j] - w[j - 1];
            g[j] += s * 8.0 * c * r * w[j];
            g[j - 1] -= s * 2.0 * c * r;
        }
        g
    }
    fn hvp(&self, w: &Vector, v: &Vector) -> Vector {
        let (d, o) = self.bands(w);
        tridiag_apply(&d, &o, v)
    }
    fn hess_diag(&self, w: &Vector) -> Option<Vector> {
        Some(Vector::from_vec(self.bands(w).0))
    }
    fn hess_dense(&self, w: &Vector) -> Option<Matrix> {
        let (d, o) = self.bands(w);
        Some(tridiag_dense(&d, &o))
    }
}

// ---------------------------------------------------------------------------
// Quadratic.
// ---------------------------------------------------------------------------

/// `ℓ(w) = ½ wᵀHw − cᵀw` with SPD `H`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    h: Matrix,
    c: Vector,
}

/// Quadratic objective; `H` must be symmetric positive definite.
pub fn quadratic(h: Matrix, c: Vector) -> Result<Quadratic> {
    if h.nrows() != c.len() || h.ncols() != c.len() {
        return Err(SngdError::Dimension("quadratic: H must be p×p with c of length p".into()));
    }
    if !is_spd(&h) {
        return Err(SngdError::Config("quadratic: H must be symmetric positive definite".into()));
    }
    Ok(Quadratic { h, c })
}

impl Quadratic {
    pub fn hessian(&self) -> &Matrix {
        &self.h
    }
    pub fn linear_term(&self) -> &Vector {
        &self.c
    }
}

impl Objective for Quadratic {
    fn name(&self) -> String {
        format!("quadratic({})", self.c.len())
    }
    fn dim(&self) -> usize {
        self.c.len()
    }
    fn eval(&self, w: &Vector) -> f64 {
        0.5 * w.dot(&(&self.h * w)) - self.c.dot(w)
    }
    fn grad(&self, w: &Vector) -> Vector {
        &self.h * w - &self.c
    }
    fn hvp(&self, _w: &Vector, v: &Vector) -> Vector {
        &self.h * v
    }
    fn hess_diag(&self, _w: &Vector) -> Option<Vector> {
        Some(self.h.diagonal())
    }
    fn hess_dense(&self, _w: &Vector) -> Option<Matrix> {
        Some(self.h.clone())
    }
}

// ---------------------------------------------------------------------------
// Student-t / Gaussian mixture target.
// ---------------------------------------------------------------------------

/// One mixture component. `dof = None` selects a Gaussian component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Scale matrix (row-major rows), SPD.
    pub scale: Vec<Vec<f64>>,
    #[serde(default)]
    pub dof: Option<f64>,
}

#[derive(Clone, Debug)]
struct PreparedComponent {
    log_weight: f64,
    mean: Vector,
    prec: Matrix,
    log_norm: f64,
    dof: Option<f64>,
}

/// `ℓ(w) = −log Σ_k π_k St(w | μ_k, Σ_k, ν_k)` (Gaussian components allowed).
#[derive(Clone, Debug)]
pub struct StudentTMixture {
    dim: usize,
    comps: Vec<PreparedComponent>,
}

/// Builds a mixture target; weights are normalized.
pub fn student_t_mixture_target(components: &[MixtureComponent], dim: usize) -> Result<StudentTMixture> {
    if components.is_empty() {
        return Err(SngdError::Config("mixture needs at least one component".into()));
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    let d = dim as f64;
    let mut comps = Vec::with_capacity(components.len());
    for c in components {
        if !(c.weight > 0.0) {
            return Err(SngdError::Config("mixture weights must be positive".into()));
        }
        if c.mean.len() != dim {
            return Err(SngdError::Dimension(format!("component mean must have length {dim}")));
        }
        let scale = crate::linalg::from_rows(&c.scale)?;
        if scale.nrows() != dim || scale.ncols() != dim {
            return Err(SngdError::Dimension(format!("component scale must be {dim}x{dim}")));
        }
        let logdet = logdet_spd(&scale)?;
        let prec = inv_spd(&scale)?;
        let log_norm = match c.dof {
            Some(nu) => {
                if !(nu > 0.0) {
                    return Err(SngdError::Config(format!("degrees of freedom must be positive, got {nu}")));
                }
                ln_gamma((nu + d) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * d * (nu * std::f64::consts::PI).ln()
                    - 0.5 * logdet
            }
            None => -0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet,
        };
        comps.push(PreparedComponent {
            log_weight: (c.weight / total).ln(),
            mean: Vector::from_column_slice(&c.mean),
            prec,
            log_norm,
            dof: c.dof,
        });
    }
    Ok(StudentTMixture { dim, comps })
}

impl StudentTMixture {
    /// Per component: (log π_k + log density, ∇ log density, Px, scalars for
    /// the Hessian: (a, b) with ∇² log density = −a P + b (Px)(Px)ᵀ).
    fn parts(&self, w: &Vector) -> Vec<(f64, Vector, Vector, f64, f64)> {
        let d = self.dim as f64;
        self.comps
            .iter()
            .map(|c| {
                let x = w - &c.mean;
                let px = &c.prec * &x;
                let q = x.dot(&px);
                match c.dof {
                    Some(nu) => {
                        let denom = nu + q;
                        let logp = c.log_norm - 0.5 * (nu + d) * (1.0 + q / nu).ln();
                        let a = (nu + d) / denom;
                        let g = &px * (-a);
                        (c.log_weight + logp, g, px, a, 2.0 * (nu + d) / (denom * denom))
                    }
                    None => {
                        let logp = c.log_norm - 0.5 * q;
                        (c.log_weight + logp, -&px, px, 1.0, 0.0)
                    }
                }
            })
            .collect()
    }

    fn responsibilities(parts: &[(f64, Vector, Vector, f64, f64)]) -> (f64, Vec<f64>) {
        let m = parts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = parts.iter().map(|p| (p.0 - m).exp()).sum();
        let lse = m + s.ln();
        (lse, parts.iter().map(|p| (p.0 - lse).exp()).collect())
    }

    /// Log density `log Σ π_k p_k(w)` of the target.
    pub fn log_density(&self, w: &Vector) -> f64 {
        Self::responsibilities(&self.parts(w)).0
    }
}

impl Objective for StudentTMixture {
    fn name(&self) -> String {
        format!("student-t-mixture({}x{})", self.comps.len(), self.dim)
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, w: &Vector) -> f64 {
        -self.log_density(w)
    }
    fn grad(&self, w: &Vector) -> Vector {
        let parts = self.parts(w);
        let (_, r) = Self::responsibilities(&parts);
        let mut g = Vector::zeros(self.dim);
        for (rk, p) in r.iter().zip(&parts) {
            g -= &p.1 * *rk;
        }
        g
    }
    fn hvp(&self, w: &Vector, v: &Vector) -> Vector {
        // ∇²ℓ = −Σ r_k (H_k + g_k g_kᵀ) + ḡ ḡᵀ with ḡ = Σ r_k g_k.
        let parts = self.parts(w);
        let (_, r) = Self::responsibilities(&parts);
        let mut out = Vector::zeros(self.dim);
        let mut gbar = Vector::zeros(self.dim);
        for ((rk, p), c) in r.iter().zip(&parts).zip(&self.comps) {
            let (g, px, a, b) = (&p.1, &p.2, p.3, p.4);
            let hv = &c.prec * v * (-a) + px * (b * px.dot(v));
            out -= (hv + g * g.dot(v)) * *rk;
            gbar += g * *rk;
        }
        out + &gbar * gbar.dot(v)
    }
    fn hess_diag(&self, w: &Vector) -> Option<Vector> {
        self.hess_dense(w).map(|h| h.diagonal())
    }
    fn hess_dense(&self, w: &Vector) -> Option<Matrix> {
        Some(hessian_from_hvps(self, w))
    }
}

// ---------------------------------------------------------------------------
// Multi-layer perceptron.
// ---------------------------------------------------------------------------

/// Element-wise activation (twice continuously differentiable).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    /// (σ(z), σ′(z), σ″(z)).
    fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            Activation::Identity => (z, 1.0, 0.0),
        }
    }
}

/// A fully connected network `x ↦ W_L σ(… σ(W_1 x))` with a linear output
/// layer, squared loss `½ Σ_n ‖f(x_n) − y_n‖²` and an L2 penalty
/// `(α/2) Σ_l Tr(W_lᵀ W_l)`. Layer `l` has a weight matrix of shape
/// `layers[l+1] × layers[l]`; no bias terms.
#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub layers: Vec<usize>,
    pub activation: Activation,
    /// Features, one column per example (`layers[0] × n`).
    pub x: Matrix,
    /// Targets, one column per example (`layers[L] × n`).
    pub y: Matrix,
    pub l2_weight: f64,
}

/// Loss and gradients of an MLP at given layer weights.
#[derive(Clone, Debug)]
pub struct MlpEval {
    /// Data term plus L2 penalty.
    pub loss: f64,
    /// Data term only.
    pub data_loss: f64,
    /// `∇_{W_l}` of the data term, per layer.
    pub grads: Vec<Matrix>,
    /// Per-example data-term gradients `[example][layer]` (if requested).
    pub per_example: Option<Vec<Vec<Matrix>>>,
}

struct Forward {
    acts: Vec<Matrix>,  // a_0 = x, …, a_L (network output)
    dacts: Vec<Matrix>, // σ′(z_l) for hidden layers l = 1..L-1 (index l-1)
    ddacts: Vec<Matrix>,
}

/// Builds an MLP oracle; shapes are validated.
pub fn mlp_objective(spec: MlpSpec) -> Result<Mlp> {
    if spec.layers.len() < 2 || spec.layers.contains(&0) {
        return Err(SngdError::Config("mlp needs at least two positive layer sizes".into()));
    }
    let n = spec.x.ncols();
    if spec.x.nrows() != spec.layers[0]
        || spec.y.nrows() != *spec.layers.last().unwrap()
        || spec.y.ncols() != n
        || n == 0
    {
        return Err(SngdError::Dimension("mlp: data shapes do not match the layer sizes".into()));
    }
    if !(spec.l2_weight >= 0.0) {
        return Err(SngdError::Config("mlp: l2 weight must be non-negative".into()));
    }
    Ok(Mlp { spec })
}

/// MLP oracle. Implements [`Objective`] over the concatenation of the
/// column-major vectorized layer weights.
#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
}

impl Mlp {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Shapes `(rows, cols)` of each layer's weight matrix.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.spec.layers.windows(2).map(|w| (w[1], w[0])).collect()
    }

    /// Splits a flat parameter vector into layer matrices.
    pub fn unflatten(&self, w: &Vector) -> Result<Vec<Matrix>> {
        if w.len() != self.dim() {
            return Err(SngdError::Dimension(format!("mlp expects {} parameters", self.dim())));
        }
        let mut off = 0;
        Ok(self
            .shapes()
            .into_iter()
            .map(|(r, c)| {
                let m = Matrix::from_column_slice(r, c, &w.as_slice()[off..off + r * c]);
                off += r * c;
                m
            })
            .collect())
    }

    /// Concatenates layer matrices into a flat parameter vector.
    pub fn flatten(&self, ws: &[Matrix]) -> Vector {
        Vector::from_iterator(self.dim(), ws.iter().flat_map(|m| m.iter().copied()))
    }

    fn check_weights(&self, ws: &[Matrix]) -> Result<()> {
        let shapes = self.shapes();
        if ws.len() != shapes.len() || ws.iter().zip(&shapes).any(|(w, s)| w.shape() != *s) {
            return Err(SngdError::Dimension(format!("mlp: expected layer shapes {shapes:?}")));
        }
        Ok(())
    }

    fn forward(&self, ws: &[Matrix]) -> Forward {
        let l = ws.len();
        let mut acts = vec![self.spec.x.clone()];
        let mut dacts = Vec::new();
        let mut ddacts = Vec::new();
        for (i, w) in ws.iter().enumerate() {
            let z = w * acts.last().unwrap();
            if i + 1 < l {
                let e = z.map(|v| self.spec.activation.eval(v));
                acts.push(e.map(|t| t.0));
                dacts.push(e.map(|t| t.1));
                ddacts.push(e.map(|t| t.2));
            } else {
                acts.push(z);
            }
        }
        Forward { acts, dacts, ddacts }
    }

    /// Back-propagated errors `Δ_l = ∂(data loss)/∂z_l` for every layer.
    fn backward(&self, ws: &[Matrix], f: &Forward) -> Vec<Matrix> {
        let l = ws.len();
        let mut deltas = vec![Matrix::zeros(0, 0); l];
        deltas[l - 1] = &f.acts[l] - &self.spec.y;
        for i in (0..l - 1).rev() {
            deltas[i] = (ws[i + 1].transpose() * &deltas[i + 1]).component_mul(&f.dacts[i]);
        }
        deltas
    }

    /// Loss, layer gradients of the data term and optionally per-example
    /// gradients for the Gauss-Newton outer-product estimator.
    pub fn evaluate(&self, ws: &[Matrix], per_example: bool) -> Result<MlpEval> {
        self.check_weights(ws)?;
        let f = self.forward(ws);
        let l = ws.len();
        let resid = &f.acts[l] - &self.spec.y;
        let data_loss = 0.5 * resid.norm_squared();
        let reg = 0.5 * self.spec.l2_weight * ws.iter().map(|w| w.norm_squared()).sum::<f64>();
        let deltas = self.backward(ws, &f);
        let grads = (0..l).map(|i| &deltas[i] * f.acts[i].transpose()).collect();
        let per_example = per_example.then(|| {
            (0..self.spec.x.ncols())
                .map(|n| (0..l).map(|i| deltas[i].column(n) * f.acts[i].column(n).transpose()).collect())
                .collect()
        });
        Ok(MlpEval { loss: data_loss + reg, data_loss, grads, per_example })
    }

    /// Exact Hessian-vector product of the full loss (data term + L2) by a
    /// forward-over-reverse directional derivative of back-propagation.
    fn hvp_layers(&self, ws: &[Matrix], vs: &[Matrix]) -> Vec<Matrix> {
        let l = ws.len();
        let f = self.forward(ws);
        let deltas = self.backward(ws, &f);
        // Forward pass of directional derivatives R{z_l}, R{a_l}.
        let mut r_acts = vec![Matrix::zeros(self.spec.x.nrows(), self.spec.x.ncols())];
        let mut r_z = Vec::with_capacity(l);
        for i in 0..l {
            let rz = &vs[i] * &f.acts[i] + &ws[i] * &r_acts[i];
            let ra = if i + 1 < l { rz.component_mul(&f.dacts[i]) } else { rz.clone() };
            r_z.push(rz);
            r_acts.push(ra);
        }
        // Backward pass of R{Δ_l}.
        let mut r_deltas = vec![Matrix::zeros(0, 0); l];
        r_deltas[l - 1] = r_acts[l].clone();
        for i in (0..l - 1).rev() {
            let back = vs[i + 1].transpose() * &deltas[i + 1] + ws[i + 1].transpose() * &r_deltas[i + 1];
            let curv = (ws[i + 1].transpose() * &deltas[i + 1]).component_mul(&f.ddacts[i]).component_mul(&r_z[i]);
            r_deltas[i] = back.component_mul(&f.dacts[i]) + curv;
        }
        (0..l)
            .map(|i| {
                &r_deltas[i] * f.acts[i].transpose()
                    + &deltas[i] * r_acts[i].transpose()
                    + &vs[i] * self.spec.l2_weight
            })
            .collect()
    }
}

impl Objective for Mlp {
    fn name(&self) -> String {
        format!("mlp({:?})", self.spec.layers)
    }
    fn dim(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }
    fn eval(&self, w: &Vector) -> f64 {
        let ws = self.unflatten(w).expect("parameter length checked by caller");
        self.evaluate(&ws, false).expect("shapes valid").loss
    }
    fn grad(&self, w: &Vector) -> Vector {
        let ws = self.unflatten(w).expect("parameter length checked by caller");
        let e = self.evaluate(&ws, false).expect("shapes valid");
        let alpha = self.spec.l2_weight;
        let total: Vec<Matrix> = e.grads.iter().zip(&ws).map(|(g, w)| g + w * alpha).collect();
        self.flatten(&total)
    }
    fn hvp(&self, w: &Vector, v: &Vector) -> Vector {
        let ws = self.unflatten(w).expect("parameter length checked by caller");
        let vs = self.unflatten(v).expect("direction length checked by caller");
        self.flatten(&self.hvp_layers(&ws, &vs))
    }
}

// ---------------------------------------------------------------------------
// Wrappers.
// ---------------------------------------------------------------------------

/// Counts oracle calls of a wrapped objective (thread-safe).
pub struct CountingObjective<O> {
    inner: O,
    evals: AtomicUsize,
    grads: AtomicUsize,
    hvps: AtomicUsize,
    diags: AtomicUsize,
    denses: AtomicUsize,
}

/// Snapshot of [`CountingObjective`] counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub evals: usize,
    pub grads: usize,
    pub hvps: usize,
    pub diags: usize,
    pub denses: usize,
}

impl<O: Objective> CountingObjective<O> {
    pub fn new(inner: O) -> Self {
        CountingObjective {
            inner,
            evals: AtomicUsize::new(0),
            grads: AtomicUsize::new(0),
            hvps: AtomicUsize::new(0),
            diags: AtomicUsize::new(0),
            denses: AtomicUsize::new(0),
        }
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            evals: self.evals.load(Ordering::SeqCst),
            grads: self.grads.load(Ordering::SeqCst),
            hvps: self.hvps.load(Ordering::SeqCst),
            diags: self.diags.load(Ordering::SeqCst),
            denses: self.denses.load(Ordering::SeqCst),
        }
    }

    pub fn reset(&self) {
        for c in [&self.evals, &self.grads, &self.hvps, &self.diags, &self.denses] {
            c.store(0, Ordering::SeqCst);
        }
    }
}

impl<O: Objective> Objective for CountingObjective<O> {
    fn name(&self) -> String {
        self.inner.name()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, w: &Vector) -> f64 {
        self.evals.fetch_add(1, Ordering::SeqCst);
        self.inner.eval(w)
    }
    fn grad(&self, w: &Vector) -> Vector {
        self.grads.fetch_add(1, Ordering::SeqCst);
        self.inner.grad(w)
    }
    fn hvp(&self, w: &Vector, v: &Vector) -> Vector {
        self.hvps.fetch_add(1, Ordering::SeqCst);
        self.inner.hvp(w, v)
    }
    fn hess_diag(&self, w: &Vector) -> Option<Vector> {
        self.diags.fetch_add(1, Ordering::SeqCst);
        self.inner.hess_diag(w)
    }
    fn hess_dense(&self, w: &Vector) -> Option<Matrix> {
        self.denses.fetch_add(1, Ordering::SeqCst);
        self.inner.hess_dense(w)
    }
}

/// Hides the Hessian-diagonal and dense-Hessian capabilities of an objective.
pub struct HvpOnly<O>(pub O);

impl<O: Objective> Objective for HvpOnly<O> {
    fn name(&self) -> String {
        self.0.name()
    }
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, w: &Vector) -> f64 {
        self.0.eval(w)
    }
    fn grad(&self, w: &Vector) -> Vector {
        self.0.grad(w)
    }
    fn hvp(&self, w: &Vector, v: &Vector) -> Vector {
        self.0.hvp(w, v)
    }
}

/// `f(y) = ℓ(K y)` for an invertible `K` — the reparameterized problem used
/// by the linear-invariance checks.
pub struct LinearPullback<O> {
    inner: O,
    k: Matrix,
}

impl<O: Objective> LinearPullback<O> {
    pub fn new(inner: O, k: Matrix) -> Result<Self> {
        let p = inner.dim();
        if k.nrows() != p || k.ncols() != p {
            return Err(SngdError::Dimension(format!("pullback matrix must be {p}x{p}")));
        }
        Ok(LinearPullback { inner, k })
    }
}

impl<O: Objective> Objective for LinearPullback<O> {
    fn name(&self) -> String {
        format!("pullback({})", self.inner.name())
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, y: &Vector) -> f64 {
        self.inner.eval(&(&self.k * y))
    }
    fn grad(&self, y: &Vector) -> Vector {
        self.k.transpose() * self.inner.grad(&(&self.k * y))
    }
    fn hvp(&self, y: &Vector, v: &Vector) -> Vector {
        self.k.transpose() * self.inner.hvp(&(&self.k * y), &(&self.k * v))
    }
    fn hess_diag(&self, y: &Vector) -> Option<Vector> {
        self.hess_dense(y).map(|h| h.diagonal())
    }
    fn hess_dense(&self, y: &Vector) -> Option<Matrix> {
        let w = &self.k * y;
        let h = self.inner.hess_dense(&w).unwrap_or_else(|| hessian_from_hvps(&self.inner, &w));
        Some(self.k.transpose() * h * &self.k)
    }
}

/// The zero loss `ℓ ≡ 0` in dimension `p`.
pub struct ZeroObjective(pub usize);

impl Objective for ZeroObjective {
    fn name(&self) -> String {
        "zero".into()
    }
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&self, _w: &Vector) -> f64 {
        0.0
    }
    fn grad(&self, _w: &Vector) -> Vector {
        Vector::zeros(self.0)
    }
    fn hvp(&self, _w: &Vector, _v: &Vector) -> Vector {
        Vector::zeros(self.0)
    }
    fn hess_diag(&self, _w: &Vector) -> Option<Vector> {
        Some(Vector::zeros(self.0))
    }
    fn hess_dense(&self, _w: &Vector) -> Option<Matrix> {
        Some(Matrix::zeros(self.0, self.0))
    }
}

// ---------------------------------------------------------------------------
// Finite-difference verification.
// ---------------------------------------------------------------------------

/// Maximum relative errors found by [`check_oracles`].
#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub objective: String,
    pub trials: usize,
    pub grad_err: f64,
    pub hvp_err: f64,
    /// `None` when the objective has no Hessian-diagonal oracle.
    pub diag_err: Option<f64>,
}

impl OracleReport {
    /// Largest of the recorded errors.
    pub fn max_err(&self) -> f64 {
        self.grad_err.max(self.hvp_err).max(self.diag_err.unwrap_or(0.0))
    }

    /// Whether every oracle is within `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_err() <= tol
    }
}

fn rel_err(a: &Vector, b: &Vector) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// Central-finite-difference verification at `trials` random points
/// `w ~ N(center, scale²I)`: the gradient against `eval`, HVPs along random
/// directions against `grad`, and the Hessian diagonal against HVPs with
/// basis vectors. Errors are `‖a − b‖∞ / max(1, ‖b‖∞)`.
pub fn check_oracles(obj: &dyn Objective, trials: usize, center: &Vector, scale: f64, seed: u64) -> OracleReport {
    let p = obj.dim();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut randn = |n: usize| Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let (mut grad_err, mut hvp_err) = (0.0_f64, 0.0_f64);
    let mut diag_err: Option<f64> = None;
    for _ in 0..trials {
        let w = center + randn(p) * scale;
        let g = obj.grad(&w);
        let fd_g = Vector::from_fn(p, |i, _| {
            let h = crate::linalg::fd_step(w[i]);
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            (obj.eval(&wp) - obj.eval(&wm)) / (2.0 * h)
        });
        grad_err = grad_err.max(rel_err(&g, &fd_g));

        let v = randn(p);
        let h = crate::linalg::fd_step(w.amax()) / v.amax().max(1e-12);
        let fd_hv = (obj.grad(&(&w + &v * h)) - obj.grad(&(&w - &v * h))) / (2.0 * h);
        hvp_err = hvp_err.max(rel_err(&obj.hvp(&w, &v), &fd_hv));

        if let Some(diag) = obj.hess_diag(&w) {
            let from_hvp = Vector::from_fn(p, |i, _| {
                let mut e = Vector::zeros(p);
                e[i] = 1.0;
                obj.hvp(&w, &e)[i]
            });
            diag_err = Some(diag_err.unwrap_or(0.0).max(rel_err(&diag, &from_hvp)));
        }
    }
    OracleReport { objective: obj.name(), trials, grad_err, hvp_err, diag_err }
}
