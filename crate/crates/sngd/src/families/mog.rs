//! Finite mixture of Gaussians `q(w) = (1/K) Σ_k N(w | μ_k, (B_kB_kᵀ)⁻¹)`.
//!
//! The marginal mixture has a singular Fisher matrix in general, so each
//! component is updated with the block of the joint `q(w, z)` Fisher matrix,
//! which is `π_k` times the single-Gaussian block:
//!
//! ```text
//! μ_k ← μ_k − (β/π_k) S_k⁻¹ ∇_{μ_k}L,     ∇_{μ_k}L = E_q[π_k δ_k ∇b(w)]
//! B_k ← B_k h((β/π_k) B_k⁻¹ ∇_{Σ_k}L B_k⁻ᵀ), ∇_{Σ_k}L = ½E_q[π_k δ_k ∇²b(w)]
//! ```
//!
//! with `b(w) = ℓ(w) + γ log q(w)` and responsibilities
//! `δ_k = N_k(w) / Σ_c π_c N_c(w)`.
//!
//! Since `π_k δ_k = π_k N_k / q`, the weighted expectation over `q` equals
//! `π_k E_{N_k}[·]`. Samples are therefore drawn per component (stratified),
//! and each component takes a single-Gaussian Monte-Carlo step on
//! `E_{N_k}[∇b]`, `½E_{N_k}[∇²b]`. The entropy part of `∇b` is split as
//! `∇log q = −S_k(w − μ_k) + c_k(w)`; the first term is handled exactly as in
//! the single-Gaussian step and `c_k` (zero when `K = 1`) is added per sample.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SngdError};
use crate::gaussian::{mc_vi_from_eps, standard_normal, step_seed, GaussState, MCConfig};
use crate::groups::{Membership, StructuredFactor};
use crate::linalg::{Matrix, Vector};
use crate::objectives::Objective;

/// One mixture component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoGComponent {
    #[serde(with = "crate::linalg::serde_vector")]
    pub mu: Vector,
    pub factor: StructuredFactor,
}

/// Mixture with fixed weights `π_k = 1/K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoGState {
    pub components: Vec<MoGComponent>,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub iteration: u64,
}

impl MoGState {
    pub fn new(components: Vec<MoGComponent>, beta: f64, gamma: f64) -> Result<Self> {
        let first = components.first().ok_or_else(|| SngdError::Config("mixture needs at least one component".into()))?;
        let p = first.mu.len();
        for (k, c) in components.iter().enumerate() {
            if c.mu.len() != p || c.factor.dim() != p {
                return Err(SngdError::Dimension(format!("component {k} does not have dimension {p}")));
            }
            if let Membership::Fail(msg) = c.factor.membership_check() {
                return Err(SngdError::Config(format!("component {k} factor is not a group member: {msg}")));
            }
            c.factor
                .kind()
                .layout()
                .ok_or_else(|| SngdError::KindMismatch("mixture components need a triangular kind".into()))?;
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(SngdError::Config(format!("step size must be positive, got {beta}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(SngdError::Config(format!("entropy weight must be non-negative, got {gamma}")));
        }
        Ok(MoGState { components, beta, gamma, iteration: 0 })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].mu.len()
    }

    /// `π_k = 1/K`.
    pub fn weight(&self) -> f64 {
        1.0 / self.k() as f64
    }

    /// Component `k` as a single Gaussian sharing the step parameters.
    pub fn component_state(&self, k: usize) -> GaussState {
        let c = &self.components[k];
        GaussState {
            mu: c.mu.clone(),
            factor: c.factor.clone(),
            beta: self.beta,
            gamma: self.gamma,
            iteration: self.iteration,
        }
    }

    /// `log q(w)` by log-sum-exp.
    pub fn log_density(&self, w: &Vector) -> Result<f64> {
        Ok(Prepared::new(self).eval(w)?.lse)
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self> {
        let c: MoGState = serde_json::from_str(s)?;
        let mut st = MoGState::new(c.components, c.beta, c.gamma)?;
        st.iteration = c.iteration;
        Ok(st)
    }
}

struct Prepared<'a> {
    state: &'a MoGState,
    log_pi: f64,
    log_norm: Vec<f64>,
    precisions: Vec<Matrix>,
}

struct Evaluated {
    /// `log Σ_c π_c N_c(w)`.
    lse: f64,
    /// `r_c = π_c δ_c` (sums to one).
    r: Vec<f64>,
    /// `g_c = ∇ log N_c(w) = −S_c(w − μ_c)`.
    g: Vec<Vector>,
}

impl<'a> Prepared<'a> {
    fn new(state: &'a MoGState) -> Self {
        let p = state.dim() as f64;
        let c0 = -0.5 * p * (2.0 * std::f64::consts::PI).ln();
        Prepared {
            state,
            log_pi: state.weight().ln(),
            log_norm: state.components.iter().map(|c| c0 + c.factor.log_abs_det()).collect(),
            precisions: state.components.iter().map(|c| c.factor.precision_dense()).collect(),
        }
    }

    fn eval(&self, w: &Vector) -> Result<Evaluated> {
        if w.len() != self.state.dim() {
            return Err(SngdError::Dimension(format!("point must have dimension {}", self.state.dim())));
        }
        let mut logs = Vec::with_capacity(self.state.k());
        let mut g = Vec::with_capacity(self.state.k());
        for (c, ln) in self.state.components.iter().zip(&self.log_norm) {
            let y = c.factor.apply_t(&(w - &c.mu))?;
            logs.push(self.log_pi + ln - 0.5 * y.norm_squared());
            g.push(-c.factor.apply(&y)?);
        }
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let r = logs.iter().map(|l| (l - lse).exp()).collect();
        Ok(Evaluated { lse, r, g })
    }

    /// `(∇log q + S_k(w − μ_k), ∇²log q + S_k)` for component `k`:
    /// `Σ_c r_c(g_c − g_k)` and `Σ_c r_c(S_k − S_c) + Σ_c r_c(g_c − ḡ)(g_c − ḡ)ᵀ`.
    fn correction(&self, k: usize, w: &Vector) -> Result<(Vector, Matrix)> {
        let e = self.eval(w)?;
        let p = w.len();
        let mut cg = Vector::zeros(p);
        let mut gbar = Vector::zeros(p);
        for (rc, gc) in e.r.iter().zip(&e.g) {
            cg += (gc - &e.g[k]) * *rc;
            gbar += gc * *rc;
        }
        let mut ch = Matrix::zeros(p, p);
        for (c, (rc, gc)) in e.r.iter().zip(&e.g).enumerate() {
            if c != k {
                ch += (&self.precisions[k] - &self.precisions[c]) * *rc;
            }
            let d = gc - &gbar;
            ch.ger(*rc, &d, &d, 1.0);
        }
        Ok((cg, ch))
    }
}

/// Responsibilities `δ_k = N_k(w) / Σ_c π_c N_c(w)`; `Σ_k π_k δ_k = 1`.
pub fn mog_responsibilities(state: &MoGState, w: &Vector) -> Result<Vector> {
    let e = Prepared::new(state).eval(w)?;
    let k = state.k() as f64;
    Ok(Vector::from_iterator(e.r.len(), e.r.iter().map(|r| r * k)))
}

/// Samples per component for a total budget of `samples`.
fn per_component(samples: usize, k: usize) -> usize {
    samples.div_ceil(k)
}

/// One Monte-Carlo natural-gradient step for every component.
///
/// Component `k` uses `⌈samples/K⌉` draws `w = μ_k + B_k⁻ᵀε` with `ε` from
/// substreams `k⌈samples/K⌉ + s` of the iteration seed; with `K = 1` these are
/// exactly the draws of the single-Gaussian step.
pub fn mog_mc_step(state: &MoGState, obj: &dyn Objective, mc: &MCConfig) -> Result<MoGState> {
    if mc.samples == 0 {
        return Err(SngdError::Config("MC sample count must be at least 1".into()));
    }
    let p = state.dim();
    let per = per_component(mc.samples, state.k());
    let seed = step_seed(mc.seed, state.iteration);
    let prepared = Prepared::new(state);
    let components = (0..state.k())
        .map(|k| {
            let eps: Vec<Vector> = (0..per).map(|s| standard_normal(p, seed, (k * per + s) as u64)).collect();
            let corr = |w: &Vector| prepared.correction(k, w).expect("dimension checked");
            let next = mc_vi_from_eps(&state.component_state(k), obj, &eps, mc.estimator, Some(&corr))?;
            Ok(MoGComponent { mu: next.mu, factor: next.factor })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MoGState { components, beta: state.beta, gamma: state.gamma, iteration: state.iteration + 1 })
}

/// `E_q[ℓ(w) + γ log q(w)]` estimated with common random numbers: the same
/// `per_component` draws per component for a given `seed`.
pub fn mog_negative_elbo(state: &MoGState, obj: &dyn Objective, per_component: usize, seed: u64) -> Result<f64> {
    if per_component == 0 {
        return Err(SngdError::Config("need at least one draw per component".into()));
    }
    let p = state.dim();
    let prepared = Prepared::new(state);
    let mut total = 0.0;
    for (k, c) in state.components.iter().enumerate() {
        let vals: Vec<f64> = (0..per_component)
            .into_par_iter()
            .map(|s| -> Result<f64> {
                let eps = standard_normal(p, seed, (k * per_component + s) as u64);
                let w = &c.mu + c.factor.inv_transpose_apply(&eps)?;
                Ok(obj.eval(&w) + state.gamma * prepared.eval(&w)?.lse)
            })
            .collect::<Result<Vec<_>>>()?;
        total += state.weight() * vals.iter().sum::<f64>() / per_component as f64;
    }
    Ok(total)
}
