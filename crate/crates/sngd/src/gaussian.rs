//! Gaussian search distributions `q(w) = N(μ, (BBᵀ)⁻¹)` with a structured
//! square-root precision factor `B`, and their natural-gradient updates.
//!
//! All updates share the local parameterization
//! `μ = μ_t + B_t⁻ᵀδ`, `B = B_t h(M)`, in which the Fisher information is
//! constant and block diagonal at `η = (δ, M) = 0`. A step therefore reads
//!
//! ```text
//! μ ← μ − β B⁻ᵀ δ̂,     δ̂ = B⁻¹ g_μ
//! B ← B h(−β M̂),       M̂ = −C ⊙ κ(2 B⁻¹ g_Σ B⁻ᵀ)
//! ```
//!
//! where `g_μ`, `g_Σ` are Euclidean gradients of the expected loss. The
//! deterministic Newton-like variants replace `2g_Σ` by `∇²ℓ(μ) − γS`,
//! evaluated at the mean.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SngdError};
use crate::groups::{c_mask, GroupKind, LocalDirection, Membership, StructuredFactor};
use crate::linalg::{asymmetry, frobenius, h_map, inv_dense, mat_exp, sym, Matrix, Vector};
use crate::objectives::{hessian_from_hvps, Objective};

/// Largest Frobenius norm accepted for the argument of `h` before the step
/// size is halved for the current iteration.
pub const MAX_H_ARG_NORM: f64 = 10.0;

/// Tolerance on the asymmetry of covariance gradients.
const SYM_TOL: f64 = 1e-8;

/// Map used to move the factor along a local direction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Retraction {
    /// `h(M) = I + M + ½M²` (structure preserving, `O(k²p)`).
    #[default]
    H,
    /// The matrix exponential (dense; triangular kinds only).
    Exp,
}

/// Mean, structured factor and step parameters of a Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussState {
    pub mu: Vector,
    pub factor: StructuredFactor,
    /// Step size `β > 0`.
    pub beta: f64,
    /// Entropy weight `γ ≥ 0`.
    pub gamma: f64,
    /// Number of updates applied so far.
    pub iteration: u64,
}

impl GaussState {
    /// Validates and builds a state.
    pub fn new(mu: Vector, factor: StructuredFactor, beta: f64, gamma: f64) -> Result<Self> {
        if mu.len() != factor.dim() {
            return Err(SngdError::Dimension(format!(
                "mean has length {} but the factor is {p}x{p}",
                mu.len(),
                p = factor.dim()
            )));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(SngdError::Config(format!("step size must be positive, got {beta}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(SngdError::Config(format!("entropy weight must be non-negative, got {gamma}")));
        }
        if let Membership::Fail(msg) = factor.membership_check() {
            return Err(SngdError::Config(format!("factor is not a group member: {msg}")));
        }
        Ok(GaussState { mu, factor, beta, gamma, iteration: 0 })
    }

    /// Dimension `p`.
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Dense precision `S = BBᵀ`.
    pub fn precision_dense(&self) -> Matrix {
        self.factor.precision_dense()
    }

    /// Dense covariance `S⁻¹`.
    pub fn covariance_dense(&self) -> Result<Matrix> {
        self.factor.covariance_dense()
    }

    /// `log q(w) = −(p/2) log 2π + log|det B| − ½‖Bᵀ(w − μ)‖²`.
    pub fn log_density(&self, w: &Vector) -> Result<f64> {
        let r = self.factor.apply_t(&(w - &self.mu))?;
        Ok(-0.5 * self.dim() as f64 * (2.0 * std::f64::consts::PI).ln() + self.factor.log_abs_det()
            - 0.5 * r.norm_squared())
    }

    /// JSON checkpoint `{mu, factor, beta, gamma, iteration}`.
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let c = Checkpoint {
            mu: self.mu.as_slice().to_vec(),
            factor: self.factor.clone(),
            beta: self.beta,
            gamma: self.gamma,
            iteration: self.iteration,
        };
        Ok(serde_json::to_string_pretty(&c)?)
    }

    /// Restores a state written by [`GaussState::to_checkpoint_json`].
    pub fn from_checkpoint_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        let mut st = GaussState::new(Vector::from_vec(c.mu), c.factor, c.beta, c.gamma)?;
        st.iteration = c.iteration;
        Ok(st)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    mu: Vec<f64>,
    factor: StructuredFactor,
    beta: f64,
    gamma: f64,
    iteration: u64,
}

/// Gradient estimator for the covariance part of Monte-Carlo updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Second-order form `½E[∇²ℓ] − (γ/2)S` via Hessian-vector products.
    #[default]
    Hessian,
    /// First-order form `½E[S(w − μ)∇ᵀb(w)]` (symmetrized), with
    /// `b = ℓ + γ log q`.
    SteinFirstOrder,
}

/// Monte-Carlo settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCConfig {
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub estimator: Estimator,
}

/// Natural gradients with respect to the local parameters `(δ, M)` at `0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NaturalGrads {
    pub delta_hat: Vector,
    pub m_hat: LocalDirection,
}

// ---------------------------------------------------------------------------
// Sampling.
// ---------------------------------------------------------------------------

/// `p` standard normals from the substream `stream` of `seed`.
pub fn standard_normal(p: usize, seed: u64, stream: u64) -> Vector {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Vector::from_fn(p, |_, _| StandardNormal.sample(&mut rng))
}

/// Seed of the Monte-Carlo draws of iteration `t` (one substream per sample).
pub fn step_seed(seed: u64, iteration: u64) -> u64 {
    seed ^ iteration.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `w_i = μ + B⁻ᵀε_i` with `ε_i` drawn from substream `i` of `seed`.
pub fn sample(state: &GaussState, count: usize, seed: u64) -> Result<Vec<Vector>> {
    if count == 0 {
        return Err(SngdError::Config("sample count must be at least 1".into()));
    }
    let eps: Vec<Vector> = (0..count as u64).map(|i| standard_normal(state.dim(), seed, i)).collect();
    sample_from_eps(state, &eps)
}

/// `w_i = μ + B⁻ᵀε_i` for given standard-normal draws.
pub fn sample_from_eps(state: &GaussState, eps: &[Vector]) -> Result<Vec<Vector>> {
    if eps.is_empty() {
        return Ok(Vec::new());
    }
    let e = Matrix::from_columns(eps);
    let w = state.factor.inv_transpose_apply_mat(&e)?;
    Ok(w.column_iter().map(|c| &state.mu + c).collect())
}

// ---------------------------------------------------------------------------
// Natural gradients and the generic step.
// ---------------------------------------------------------------------------

/// `B⁻¹ X B⁻ᵀ` for a symmetric `X`, symmetrized.
fn whiten(factor: &StructuredFactor, x: &Matrix) -> Result<Matrix> {
    let y = factor.inv_apply_mat(x)?;
    Ok(sym(&factor.inv_apply_mat(&y.transpose())?))
}

fn check_grads(factor: &StructuredFactor, g_mu: &Vector, g_sigma: &Matrix) -> Result<()> {
    let p = factor.dim();
    if g_mu.len() != p || g_sigma.nrows() != p || g_sigma.ncols() != p {
        return Err(SngdError::Dimension(format!("gradients must have dimension {p}")));
    }
    let asym = asymmetry(g_sigma);
    if asym > SYM_TOL {
        return Err(SngdError::Numerical(format!("covariance gradient is not symmetric (asymmetry {asym:e})")));
    }
    Ok(())
}

/// Natural gradients `δ̂ = B⁻¹g_μ`, `M̂ = −C ⊙ κ(2B⁻¹g_ΣB⁻ᵀ)` for any
/// triangular kind. For the full kind this is `M̂ = −B⁻¹g_ΣB⁻ᵀ`.
pub fn natural_grads(g_mu: &Vector, g_sigma: &Matrix, factor: &StructuredFactor) -> Result<NaturalGrads> {
    check_grads(factor, g_mu, g_sigma)?;
    let x = whiten(factor, g_sigma)? * 2.0;
    let kind = factor.kind();
    let m_hat = LocalDirection::kappa_extract(kind, &x)?.mask_scale(&c_mask(kind)?)?.scale(-1.0);
    Ok(NaturalGrads { delta_hat: factor.inv_apply(g_mu)?, m_hat })
}

fn require_full(factor: &StructuredFactor) -> Result<()> {
    match factor.kind() {
        GroupKind::BlockUpper { p, k } if p == k => Ok(()),
        other => Err(SngdError::KindMismatch(format!("expected a full factor, got {other:?}"))),
    }
}

/// Natural gradients for a full (dense) factor.
pub fn natural_grads_full(g_mu: &Vector, g_sigma: &Matrix, factor: &StructuredFactor) -> Result<NaturalGrads> {
    require_full(factor)?;
    natural_grads(g_mu, g_sigma, factor)
}

/// Largest `β/2ʲ` whose `h` argument stays within [`MAX_H_ARG_NORM`].
pub(crate) fn effective_beta(beta: f64, direction_norm: f64) -> Result<f64> {
    if !direction_norm.is_finite() {
        return Err(SngdError::Numerical("update direction is not finite".into()));
    }
    let mut b = beta;
    let mut halvings = 0;
    while b * direction_norm > MAX_H_ARG_NORM {
        b *= 0.5;
        halvings += 1;
    }
    if halvings > 0 {
        warn!("h argument norm {:.3e} too large; step size halved {halvings} time(s) to {b:.3e}", beta * direction_norm);
    }
    Ok(b)
}

pub(crate) fn finish_step(state: &GaussState, mu: Vector, factor: StructuredFactor) -> Result<GaussState> {
    if mu.iter().any(|x| !x.is_finite()) {
        return Err(SngdError::Numerical("mean became non-finite".into()));
    }
    if let Membership::Fail(msg) = factor.membership_check() {
        return Err(SngdError::Numerical(format!("factor left the group: {msg}")));
    }
    Ok(GaussState { mu, factor, beta: state.beta, gamma: state.gamma, iteration: state.iteration + 1 })
}

/// `μ ← μ − βB⁻ᵀδ̂`, `B ← B·R(−βM̂)` with the chosen retraction `R`.
pub fn apply_natural_step(state: &GaussState, ng: &NaturalGrads, retraction: Retraction) -> Result<GaussState> {
    let beta = effective_beta(state.beta, ng.m_hat.frobenius())?;
    let dir = ng.m_hat.scale(-beta);
    let factor = match retraction {
        Retraction::H => state.factor.apply_h(&dir)?,
        Retraction::Exp => state.factor.right_mul_dense(&mat_exp(&dir.densify())?)?,
    };
    let mu = &state.mu - state.factor.inv_transpose_apply(&ng.delta_hat)? * beta;
    finish_step(state, mu, factor)
}

/// One update from Euclidean gradients `g_μ`, `g_Σ` of the expected loss.
pub fn precision_step(state: &GaussState, g_mu: &Vector, g_sigma: &Matrix, retraction: Retraction) -> Result<GaussState> {
    let ng = natural_grads(g_mu, g_sigma, &state.factor)?;
    apply_natural_step(state, &ng, retraction)
}

// ---------------------------------------------------------------------------
// Deterministic Newton-like updates (expectations approximated at the mean).
// ---------------------------------------------------------------------------

/// Full update with a dense factor:
/// `μ ← μ − βS⁻¹∇ℓ(μ)`, `B ← B h((β/2)(B⁻¹∇²ℓ(μ)B⁻ᵀ − γI))`.
///
/// This path forms `B⁻¹HB⁻ᵀ` densely and is independent of the structured
/// κ machinery.
pub fn det_newton_step_full(state: &GaussState, obj: &dyn Objective) -> Result<GaussState> {
    require_full(&state.factor)?;
    let p = state.dim();
    check_obj_dim(obj, p)?;
    let g = obj.grad(&state.mu);
    let h = obj.hess_dense(&state.mu).unwrap_or_else(|| hessian_from_hvps(obj, &state.mu));
    let bd = state.factor.densify();
    let binv = inv_dense(&bd)?;
    let x = sym(&(&binv * h * binv.transpose())) - Matrix::identity(p, p) * state.gamma;
    let beta = effective_beta(state.beta, 0.5 * frobenius(&x))?;
    let b_new = bd * h_map(&(x * (0.5 * beta)))?;
    let mu = &state.mu - binv.transpose() * (binv * g) * beta;
    let factor = StructuredFactor::from_dense(state.factor.kind(), &b_new)?;
    finish_step(state, mu, factor)
}

fn check_obj_dim(obj: &dyn Objective, p: usize) -> Result<()> {
    if obj.dim() != p {
        return Err(SngdError::Dimension(format!("objective has dimension {} but the state has {p}", obj.dim())));
    }
    Ok(())
}

/// Probe directions `V = B⁻ᵀE_J` whose Hessian products determine
/// `κ(B⁻¹HB⁻ᵀ)`; `J` are the kind's dense indices.
pub fn curvature_probes(factor: &StructuredFactor) -> Result<Matrix> {
    let p = factor.dim();
    let j = factor.kind().dense_indices();
    let mut e = Matrix::zeros(p, j.len());
    for (q, &jj) in j.iter().enumerate() {
        e[(jj, q)] = 1.0;
    }
    factor.inv_transpose_apply_mat(&e)
}

/// `κ(X − γI)` from the columns `X[:, J]` and the diagonal of `X`.
fn kappa_from_cols(kind: &GroupKind, xcols: &Matrix, xdiag: &Vector, gamma: f64) -> Result<LocalDirection> {
    let p = kind.dim();
    let j = kind.dense_indices();
    let mut pos = vec![None; p];
    for (q, &jj) in j.iter().enumerate() {
        pos[jj] = Some(q);
    }
    LocalDirection::kappa_with(kind, |a, b| {
        let v = match (pos[a], pos[b]) {
            (_, Some(q)) => xcols[(a, q)],
            (Some(q), None) => xcols[(b, q)],
            (None, None) => xdiag[a],
        };
        if a == b {
            v - gamma
        } else {
            v
        }
    })
}

/// `κ(B⁻¹HB⁻ᵀ − γI)` from `HV = H·V` (with `V` from [`curvature_probes`]) and
/// `diag(H)`; the diagonal is only needed when the kind has diagonal-only
/// coordinates.
///
/// Row `i` of `B` for a diagonal-only coordinate `i` is supported on `{i} ∪ J`,
/// so `u_i = B⁻ᵀe_i = e_i/B_ii − Vc` with `c = B[i, J]ᵀ/B_ii`, giving
/// `X_ii = H_ii/B_ii² − (2/B_ii)(HV)[i,:]c + cᵀX_JJ c`.
pub fn kappa_from_hvps(factor: &StructuredFactor, hv: &Matrix, hdiag: Option<&Vector>, gamma: f64) -> Result<LocalDirection> {
    let kind = factor.kind();
    let lay = kind
        .layout()
        .ok_or_else(|| SngdError::KindMismatch("structured curvature needs a triangular kind".into()))?;
    let p = factor.dim();
    let j = kind.dense_indices();
    let xcols = factor.inv_apply_mat(hv)?;
    let mut xdiag = Vector::zeros(p);
    for (q, &jj) in j.iter().enumerate() {
        xdiag[jj] = xcols[(jj, q)];
    }
    if lay.d0 > 0 {
        let hd = hdiag.ok_or_else(|| SngdError::Capability("objective has no Hessian-diagonal oracle".into()))?;
        let xjj = Matrix::from_fn(j.len(), j.len(), |a, b| xcols[(j[a], b)]);
        for i in lay.k1..lay.k1 + lay.d0 {
            let di = factor.entry(i, i);
            let c = Vector::from_fn(j.len(), |q, _| factor.entry(i, j[q]) / di);
            let cross: f64 = (0..j.len()).map(|q| hv[(i, q)] * c[q]).sum();
            xdiag[i] = hd[i] / (di * di) - 2.0 / di * cross + c.dot(&(&xjj * &c));
        }
    }
    kappa_from_cols(kind, &xcols, &xdiag, gamma)
}

fn masked_step(state: &GaussState, g: &Vector, kappa: &LocalDirection) -> Result<GaussState> {
    let m_hat = kappa.mask_scale(&c_mask(state.factor.kind())?)?.scale(-1.0);
    let ng = NaturalGrads { delta_hat: state.factor.inv_apply(g)?, m_hat };
    apply_natural_step(state, &ng, Retraction::H)
}

/// Structured update
/// `μ ← μ − βS⁻¹∇ℓ(μ)`, `B ← B h(β C ⊙ κ(B⁻¹∇²ℓ(μ)B⁻ᵀ − γI))`
/// using one gradient, `|J|` Hessian-vector products (`k`, or `k₁ + k₂` for
/// the Heisenberg kinds) and a single Hessian-diagonal query.
pub fn det_newton_step_structured(state: &GaussState, obj: &dyn Objective) -> Result<GaussState> {
    let p = state.dim();
    check_obj_dim(obj, p)?;
    let lay = state
        .factor
        .kind()
        .layout()
        .ok_or_else(|| SngdError::KindMismatch("structured update needs a triangular kind".into()))?;
    let hdiag = if lay.d0 > 0 {
        Some(
            obj.hess_diag(&state.mu)
                .ok_or_else(|| SngdError::Capability(format!("{} has no Hessian-diagonal oracle", obj.name())))?,
        )
    } else {
        None
    };
    let g = obj.grad(&state.mu);
    let v = curvature_probes(&state.factor)?;
    let cols: Vec<Vector> = v.column_iter().map(|c| obj.hvp(&state.mu, &c.into_owned())).collect();
    let hv = if cols.is_empty() { Matrix::zeros(p, 0) } else { Matrix::from_columns(&cols) };
    let kappa = kappa_from_hvps(&state.factor, &hv, hdiag.as_ref(), state.gamma)?;
    masked_step(state, &g, &kappa)
}

/// Diagonal-covariance update on plain vectors (`B = diag(d)`):
/// `μ ← μ − β g/d²`, `d ← d·h((β/2)(diag(H)/d² − γ))`.
pub fn det_newton_step_diagonal(state: &GaussState, obj: &dyn Objective) -> Result<GaussState> {
    let p = state.dim();
    check_obj_dim(obj, p)?;
    if !matches!(state.factor.kind(), GroupKind::BlockUpper { k: 0, .. }) {
        return Err(SngdError::KindMismatch(format!("expected a diagonal factor, got {:?}", state.factor.kind())));
    }
    let d = state.factor.diagonal();
    let hd = obj
        .hess_diag(&state.mu)
        .ok_or_else(|| SngdError::Capability(format!("{} has no Hessian-diagonal oracle", obj.name())))?;
    let g = obj.grad(&state.mu);
    let m = Vector::from_fn(p, |i, _| 0.5 * (hd[i] / (d[i] * d[i]) - state.gamma));
    let beta = effective_beta(state.beta, m.norm())?;
    let d_new = d.zip_map(&m, |di, mi| {
        let x = beta * mi;
        di * (1.0 + x + 0.5 * x * x)
    });
    let step = g.component_div(&d).component_div(&d);
    let mu = &state.mu - step * beta;
    finish_step(state, mu, StructuredFactor::from_diagonal(&d_new)?)
}

// ---------------------------------------------------------------------------
// Monte-Carlo variational update.
// ---------------------------------------------------------------------------

/// One Monte-Carlo natural-gradient step on `E_q[ℓ] − γH[q]`.
///
/// Draws `w_s = μ + B⁻ᵀε_s` (substream `s` of [`step_seed`]), estimates
/// `g_μ = E[∇ℓ(w)]` and the covariance gradient with the configured
/// estimator, and applies `μ ← μ − βS⁻¹g_μ`, `B ← B h(β C ⊙ κ(2B⁻¹g_ΣB⁻ᵀ))`.
/// Samples are evaluated in parallel and reduced in index order, so the
/// result depends only on the seed.
pub fn mc_vi_step(state: &GaussState, obj: &dyn Objective, mc: &MCConfig) -> Result<GaussState> {
    if mc.samples == 0 {
        return Err(SngdError::Config("MC sample count must be at least 1".into()));
    }
    let seed = step_seed(mc.seed, state.iteration);
    let eps: Vec<Vector> = (0..mc.samples as u64).map(|s| standard_normal(state.dim(), seed, s)).collect();
    mc_vi_from_eps(state, obj, &eps, mc.estimator, None)
}

/// Entropy correction `w ↦ (c(w), C(w))` added (times `γ`) to the loss
/// gradient and Hessian of each sample. The single-Gaussian update uses none,
/// because `∇² log q = −S` exactly.
pub(crate) type EntropyCorrection<'a> = &'a (dyn Fn(&Vector) -> (Vector, Matrix) + Sync);

/// Monte-Carlo step from given standard-normal draws `ε_s`, with samples
/// `w_s = μ + B⁻ᵀε_s`.
pub(crate) fn mc_vi_from_eps(
    state: &GaussState,
    obj: &dyn Objective,
    eps: &[Vector],
    estimator: Estimator,
    correction: Option<EntropyCorrection<'_>>,
) -> Result<GaussState> {
    if eps.is_empty() {
        return Err(SngdError::Config("MC sample count must be at least 1".into()));
    }
    let p = state.dim();
    check_obj_dim(obj, p)?;
    let kind = state.factor.kind().clone();
    let lay = kind
        .layout()
        .ok_or_else(|| SngdError::KindMismatch("MC updates need a triangular kind".into()))?;
    let n = eps.len() as f64;
    let gamma = state.gamma;
    let ws = sample_from_eps(state, eps)?;
    let j = kind.dense_indices();
    let loss_grad = |w: &Vector| -> (Vector, Option<Matrix>) {
        match correction {
            Some(c) => {
                let (cg, ch) = c(w);
                (obj.grad(w) + cg * gamma, Some(ch * gamma))
            }
            None => (obj.grad(w), None),
        }
    };

    let (g_mu, kappa) = match estimator {
        Estimator::Hessian => {
            let v = curvature_probes(&state.factor)?;
            let need_diag = lay.d0 > 0;
            let per: Vec<(Vector, Matrix, Option<Vector>)> = ws
                .par_iter()
                .map(|w| {
                    let (g, corr) = loss_grad(w);
                    let mut hv = Matrix::zeros(p, v.ncols());
                    for q in 0..v.ncols() {
                        let vq = v.column(q).into_owned();
                        let mut col = obj.hvp(w, &vq);
                        if let Some(ch) = &corr {
                            col += ch * &vq;
                        }
                        hv.set_column(q, &col);
                    }
                    let diag = if need_diag {
                        obj.hess_diag(w).map(|d| match &corr {
                            Some(ch) => d + ch.diagonal(),
                            None => d,
                        })
                    } else {
                        None
                    };
                    (g, hv, diag)
                })
                .collect();
            let mut g = Vector::zeros(p);
            let mut hv = Matrix::zeros(p, v.ncols());
            let mut hd = Vector::zeros(p);
            for (gs, hvs, ds) in &per {
                g += gs;
                hv += hvs;
                if need_diag {
                    hd += ds
                        .as_ref()
                        .ok_or_else(|| SngdError::Capability(format!("{} has no Hessian-diagonal oracle", obj.name())))?;
                }
            }
            let hd = hd / n;
            // The −S part of ∇² log q is exact, so it contributes −γI after whitening.
            let kappa = kappa_from_hvps(&state.factor, &(hv / n), need_diag.then_some(&hd), gamma)?;
            (g / n, kappa)
        }
        Estimator::SteinFirstOrder => {
            let grads: Vec<Vector> = ws.par_iter().map(|w| loss_grad(w).0).collect();
            let gmat = Matrix::from_columns(&grads);
            // With w − μ = B⁻ᵀε: B⁻¹S(w − μ) = ε and B⁻¹∇b = B⁻¹∇ℓ − γε, so
            // 2B⁻¹g_ΣB⁻ᵀ = E[sym(ε (B⁻¹∇ℓ)ᵀ)] − γE[εεᵀ].
            let r = state.factor.inv_apply_mat(&gmat)?;
            let e = Matrix::from_columns(eps);
            let mut xcols = Matrix::zeros(p, j.len());
            for (q, &jj) in j.iter().enumerate() {
                let ej = e.row(jj).transpose();
                let rj = r.row(jj).transpose();
                let col = (&r * &ej + &e * &rj) * 0.5 - &e * &ej * gamma;
                xcols.set_column(q, &(col / n));
            }
            let xdiag = Vector::from_fn(p, |i, _| {
                (0..eps.len()).map(|s| e[(i, s)] * r[(i, s)] - gamma * e[(i, s)] * e[(i, s)]).sum::<f64>() / n
            });
            let kappa = kappa_from_cols(&kind, &xcols, &xdiag, 0.0)?;
            (gmat.column_sum() / n, kappa)
        }
    };
    masked_step(state, &g_mu, &kappa)
}

// ---------------------------------------------------------------------------
// Covariance-side square-root update.
// ---------------------------------------------------------------------------

/// Gaussian with a dense square-root covariance factor `Σ = AAᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovState {
    pub mu: Vector,
    pub a: Matrix,
    pub beta: f64,
}

/// `μ ← μ − βΣg_μ`, `A ← A Exp(−βAᵀg_ΣA)`.
pub fn gauss_cov_step(state: &CovState, g_mu: &Vector, g_sigma: &Matrix) -> Result<CovState> {
    let p = state.mu.len();
    if state.a.shape() != (p, p) || g_mu.len() != p || g_sigma.shape() != (p, p) {
        return Err(SngdError::Dimension(format!("covariance step expects dimension {p}")));
    }
    let asym = asymmetry(g_sigma);
    if asym > SYM_TOL {
        return Err(SngdError::Numerical(format!("covariance gradient is not symmetric (asymmetry {asym:e})")));
    }
    let mu = &state.mu - &state.a * (state.a.transpose() * g_mu) * state.beta;
    let m = sym(&(state.a.transpose() * g_sigma * &state.a)) * (-state.beta);
    let a = &state.a * mat_exp(&m)?;
    Ok(CovState { mu, a, beta: state.beta })
}

// ---------------------------------------------------------------------------
// Second-order expansion of the precision update.
// ---------------------------------------------------------------------------

/// `‖S′ − (S + βG + (β²/2) G S⁻¹ G)‖_F` where `S′ = B h(M) h(M)ᵀ Bᵀ` with
/// `M = (β/2) B⁻¹GB⁻ᵀ` is the precision after one full update driven by the
/// symmetric matrix `G` (`G = 2g_Σ`-style direction).
pub fn expansion_check(factor: &StructuredFactor, g: &Matrix, beta: f64) -> Result<f64> {
    let p = factor.dim();
    if g.shape() != (p, p) {
        return Err(SngdError::Dimension(format!("G must be {p}x{p}")));
    }
    let asym = asymmetry(g);
    if asym > SYM_TOL {
        return Err(SngdError::Numerical(format!("G is not symmetric (asymmetry {asym:e})")));
    }
    let b = factor.densify();
    let binv = inv_dense(&b)?;
    let s = &b * b.transpose();
    let m = sym(&(&binv * g * binv.transpose())) * (0.5 * beta);
    let bh = &b * h_map(&m)?;
    let s_new = &bh * bh.transpose();
    let s_inv = binv.transpose() * &binv;
    let target = &s + g * beta + g * s_inv * g * (0.5 * beta * beta);
    Ok(frobenius(&(s_new - target)))
}
