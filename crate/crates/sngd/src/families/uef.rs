//! Univariate minimal exponential families with positivity-constrained
//! parameters.
//!
//! Each constrained scalar `τ_i > 0` is reached through an unconstrained
//! `λ_i` by a link `τ_i = f(λ_i)` (softplus by default). With the additive
//! local map `λ = λ_t + η`, the Jacobian `∂τ/∂η` is `diag(f′(λ))`, so the
//! natural gradient in `η` is `ĝ_η = ĝ_τ / f′(λ)` and the update is
//! `λ ← λ − β ĝ_η`. When `τ` is the natural parameter, `ĝ_τ` equals the
//! Euclidean gradient with respect to the expectation parameter `m = ∇A(τ)`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SngdError};
use crate::linalg::Vector;

/// `f(x) = log(1 + eˣ)`, evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `f′(x) = eˣ / (1 + eˣ)`.
pub fn softplus_deriv(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Link from an unconstrained coordinate to a global parameter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    /// `τ = log(1 + e^λ) > 0`.
    #[default]
    Softplus,
    /// `τ = e^λ > 0`.
    Exp,
    /// `τ = λ` (unconstrained coordinate).
    Identity,
}

impl Link {
    pub fn apply(self, l: f64) -> f64 {
        match self {
            Link::Softplus => softplus(l),
            Link::Exp => l.exp(),
            Link::Identity => l,
        }
    }

    pub fn deriv(self, l: f64) -> f64 {
        match self {
            Link::Softplus => softplus_deriv(l),
            Link::Exp => l.exp(),
            Link::Identity => 1.0,
        }
    }

    /// `λ = f⁻¹(τ)`.
    pub fn inverse(self, t: f64) -> Result<f64> {
        match self {
            Link::Softplus if t > 0.0 => Ok(if t > 30.0 { t + (-(-t).exp()).ln_1p() } else { t.exp_m1().ln() }),
            Link::Exp if t > 0.0 => Ok(t.ln()),
            Link::Identity => Ok(t),
            _ => Err(SngdError::Config(format!("{self:?} link needs a positive value, got {t}"))),
        }
    }
}

/// Distribution descriptor: maps Euclidean gradients in `τ` to natural
/// gradients `ĝ_τ = F_τ⁻¹ g_τ`.
pub trait UefFamily {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    /// Expectation parameter `m(τ) = ∇A(τ)` (or the family's moment map).
    fn expectation_params(&self, tau: &Vector) -> Vector;
    fn natural_grad(&self, tau: &Vector, g_tau: &Vector) -> Result<Vector>;
}

/// Exponential distribution `q(w) = τ e^{−τw}`: natural parameter `τ`,
/// sufficient statistic `−w`, `A(τ) = −log τ`, `m = −1/τ`, `F = 1/τ²`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExponentialRate;

impl UefFamily for ExponentialRate {
    fn name(&self) -> String {
        "exponential".into()
    }
    fn dim(&self) -> usize {
        1
    }
    fn expectation_params(&self, tau: &Vector) -> Vector {
        tau.map(|t| -1.0 / t)
    }
    fn natural_grad(&self, tau: &Vector, g_tau: &Vector) -> Result<Vector> {
        Ok(g_tau.component_mul(&tau.component_mul(tau)))
    }
}

/// Univariate Gaussian in mean/precision form `τ = (μ, s = σ⁻²)` with
/// `F_τ = diag(s, 1/(2s²))`.
#[derive(Clone, Copy, Debug, Default)]
pub struct GaussianMeanPrecision;

impl UefFamily for GaussianMeanPrecision {
    fn name(&self) -> String {
        "gaussian(mu, precision)".into()
    }
    fn dim(&self) -> usize {
        2
    }
    fn expectation_params(&self, tau: &Vector) -> Vector {
        Vector::from_vec(vec![tau[0], tau[0] * tau[0] + 1.0 / tau[1]])
    }
    fn natural_grad(&self, tau: &Vector, g_tau: &Vector) -> Result<Vector> {
        let s = tau[1];
        if !(s > 0.0) {
            return Err(SngdError::Numerical(format!("precision must be positive, got {s}")));
        }
        Ok(Vector::from_vec(vec![g_tau[0] / s, 2.0 * s * s * g_tau[1]]))
    }
}

/// Unconstrained coordinates `λ`, their links and the step size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UEFState {
    #[serde(with = "crate::linalg::serde_vector")]
    pub lambda: Vector,
    pub links: Vec<Link>,
    pub beta: f64,
}

impl UEFState {
    /// All coordinates use the softplus link.
    pub fn new(lambda: Vector, beta: f64) -> Result<Self> {
        let links = vec![Link::Softplus; lambda.len()];
        Self::with_links(lambda, links, beta)
    }

    pub fn with_links(lambda: Vector, links: Vec<Link>, beta: f64) -> Result<Self> {
        if links.len() != lambda.len() {
            return Err(SngdError::Dimension("one link per coordinate is required".into()));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(SngdError::Config(format!("step size must be positive, got {beta}")));
        }
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(SngdError::Config("λ must be finite".into()));
        }
        Ok(UEFState { lambda, links, beta })
    }

    /// Builds the state whose links map to the given `τ`.
    pub fn from_tau(tau: &Vector, links: Vec<Link>, beta: f64) -> Result<Self> {
        if links.len() != tau.len() {
            return Err(SngdError::Dimension("one link per coordinate is required".into()));
        }
        let lambda = tau.iter().zip(&links).map(|(&t, l)| l.inverse(t)).collect::<Result<Vec<_>>>()?;
        Self::with_links(Vector::from_vec(lambda), links, beta)
    }

    /// `τ = f(λ)`.
    pub fn tau(&self) -> Vector {
        Vector::from_iterator(self.lambda.len(), self.lambda.iter().zip(&self.links).map(|(&l, f)| f.apply(l)))
    }

    /// `ĝ_η = ĝ_τ / f′(λ)`.
    pub fn eta_natural_grad(&self, g_tau_hat: &Vector) -> Result<Vector> {
        if g_tau_hat.len() != self.lambda.len() {
            return Err(SngdError::Dimension(format!("expected {} natural-gradient entries", self.lambda.len())));
        }
        Ok(Vector::from_iterator(
            self.lambda.len(),
            (0..self.lambda.len()).map(|i| g_tau_hat[i] / self.links[i].deriv(self.lambda[i])),
        ))
    }
}

/// `λ ← λ − β ĝ_τ / f′(λ)` for a natural gradient `ĝ_τ` in the global
/// parameter.
pub fn uef_step(state: &UEFState, g_tau_hat: &Vector) -> Result<UEFState> {
    let g_eta = state.eta_natural_grad(g_tau_hat)?;
    let lambda = &state.lambda - g_eta * state.beta;
    if lambda.iter().any(|l| !l.is_finite()) {
        return Err(SngdError::Numerical("λ became non-finite".into()));
    }
    let next = UEFState { lambda, links: state.links.clone(), beta: state.beta };
    let tau = next.tau();
    for (i, link) in next.links.iter().enumerate() {
        if *link != Link::Identity && !(tau[i] > 0.0 && tau[i].is_finite()) {
            return Err(SngdError::Numerical(format!("τ[{i}] = {} left the representable positive range", tau[i])));
        }
    }
    Ok(next)
}

/// Same step from a Euclidean gradient `g_τ`, using the family's inverse FIM.
pub fn uef_step_euclidean(state: &UEFState, family: &dyn UefFamily, g_tau: &Vector) -> Result<UEFState> {
    let g_hat = family.natural_grad(&state.tau(), g_tau)?;
    uef_step(state, &g_hat)
}
