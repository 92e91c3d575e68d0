//! Wishart search distribution over SPD matrices with a square-root
//! precision factor.
//!
//! The auxiliary parameters are an unconstrained scalar `b` and a full
//! factor `B`. The degrees of freedom and the precision are
//! `n = 2(f(b) + (p−1)/2)` (`f` = softplus) and `S = nBBᵀ`, so the mean is
//! `Z = E[W] = nV = (BBᵀ)⁻¹` with `V = S⁻¹`. Gradients are taken at the mean:
//! `G_V ≈ n∇ℓ(Z)`, `g_n ≈ Tr(∇ℓ(Z)V)`. The update is
//!
//! ```text
//! B ← B Exp((β/n²) B⁻¹ G_V B⁻ᵀ)
//! b ← b − 2β (1+eᵇ)/eᵇ · (−2p/n + D_ψ,p(n/2))⁻¹ · (−Tr(G_V V)/n + g_n)
//! ```
//!
//! where `D_ψ,p` is the multivariate trigamma function.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::uef::{softplus, softplus_deriv};
use crate::error::{Result, SngdError};
use crate::gaussian::effective_beta;
use crate::groups::{GroupKind, Membership, StructuredFactor};
use crate::linalg::{chol_lower, frobenius, inv_spd, logdet_spd, mat_exp, sym, Matrix};

/// Objective `ℓ(Z)` over symmetric positive-definite matrices.
pub trait SpdObjective: Sync {
    fn name(&self) -> String;
    /// Side length `p` of `Z`.
    fn dim(&self) -> usize;
    fn eval(&self, z: &Matrix) -> Result<f64>;
    /// Symmetric Euclidean gradient `∇ℓ(Z)`.
    fn grad(&self, z: &Matrix) -> Result<Matrix>;
}

/// `ℓ(Z) = Tr(ΛZ) − log det Z`, minimized at `Z = Λ⁻¹`.
#[derive(Clone, Debug)]
pub struct LogDetTrace {
    lambda: Matrix,
}

impl LogDetTrace {
    pub fn new(lambda: Matrix) -> Result<Self> {
        inv_spd(&lambda)?;
        Ok(LogDetTrace { lambda: sym(&lambda) })
    }

    /// The minimizer `Λ⁻¹`.
    pub fn minimizer(&self) -> Matrix {
        inv_spd(&self.lambda).expect("validated at construction")
    }
}

impl SpdObjective for LogDetTrace {
    fn name(&self) -> String {
        format!("logdet-trace({})", self.lambda.nrows())
    }
    fn dim(&self) -> usize {
        self.lambda.nrows()
    }
    fn eval(&self, z: &Matrix) -> Result<f64> {
        Ok((&self.lambda * z).trace() - logdet_spd(z)?)
    }
    fn grad(&self, z: &Matrix) -> Result<Matrix> {
        Ok(&self.lambda - inv_spd(z)?)
    }
}

/// Wishart state `(b, B)` with step size `β`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WishartState {
    /// Unconstrained degrees-of-freedom parameter.
    pub b: f64,
    /// Full square-root factor, `S = nBBᵀ`.
    pub factor: StructuredFactor,
    pub beta: f64,
    #[serde(default)]
    pub iteration: u64,
}

impl WishartState {
    pub fn new(b: f64, factor: StructuredFactor, beta: f64) -> Result<Self> {
        let p = factor.dim();
        if *factor.kind() != (GroupKind::BlockUpper { p, k: p }) {
            return Err(SngdError::KindMismatch(format!("Wishart needs a full factor, got {:?}", factor.kind())));
        }
        if !b.is_finite() {
            return Err(SngdError::Config(format!("b must be finite, got {b}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(SngdError::Config(format!("step size must be positive, got {beta}")));
        }
        if let Membership::Fail(msg) = factor.membership_check() {
            return Err(SngdError::Config(format!("factor is not a group member: {msg}")));
        }
        Ok(WishartState { b, factor, beta, iteration: 0 })
    }

    pub fn p(&self) -> usize {
        self.factor.dim()
    }

    /// Degrees of freedom `n = 2f(b) + p − 1 > p − 1`.
    pub fn n(&self) -> f64 {
        2.0 * softplus(self.b) + self.p() as f64 - 1.0
    }

    /// Precision `S = nBBᵀ`.
    pub fn precision(&self) -> Matrix {
        self.factor.precision_dense() * self.n()
    }

    /// Scale `V = S⁻¹`.
    pub fn scale(&self) -> Result<Matrix> {
        Ok(self.factor.covariance_dense()? / self.n())
    }

    /// Mean `Z = nV = (BBᵀ)⁻¹`.
    pub fn mean(&self) -> Result<Matrix> {
        self.factor.covariance_dense()
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self> {
        let c: WishartState = serde_json::from_str(s)?;
        let mut st = WishartState::new(c.b, c.factor, c.beta)?;
        st.iteration = c.iteration;
        Ok(st)
    }
}

/// Trigamma `ψ₁(x)` for `x > 0`: upward recurrence `ψ₁(x) = ψ₁(x+1) + 1/x²`
/// to `x ≥ 10`, then the asymptotic Bernoulli series.
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(SngdError::Numerical(format!("trigamma needs a positive argument, got {x}")));
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    let series = r
        + 0.5 * r2
        + r * r2
            * (1.0 / 6.0
                + r2 * (-1.0 / 30.0
                    + r2 * (1.0 / 42.0 + r2 * (-1.0 / 30.0 + r2 * (5.0 / 66.0 + r2 * (-691.0 / 2730.0 + r2 * 7.0 / 6.0))))));
    Ok(acc + series)
}

/// `D_ψ,p(x) = Σ_{i=1}^p ψ₁(x + (1−i)/2)`, defined for `x > (p−1)/2`.
pub fn multivariate_trigamma(x: f64, p: usize) -> Result<f64> {
    if p == 0 {
        return Err(SngdError::Config("multivariate trigamma needs p ≥ 1".into()));
    }
    if !(x > (p as f64 - 1.0) / 2.0) {
        return Err(SngdError::Numerical(format!("multivariate trigamma needs x > {}, got {x}", (p as f64 - 1.0) / 2.0)));
    }
    (1..=p).map(|i| trigamma(x + (1.0 - i as f64) / 2.0)).sum()
}

/// One natural-gradient step with gradients evaluated at the mean.
///
/// Under this approximation `−Tr(G_V V)/n + g_n = 0` identically, so `b`
/// (and hence `n`) is left unchanged and only `B` moves.
pub fn wishart_step(state: &WishartState, obj: &dyn SpdObjective) -> Result<WishartState> {
    let p = state.p();
    if obj.dim() != p {
        return Err(SngdError::Dimension(format!("objective has dimension {} but the state has {p}", obj.dim())));
    }
    let n = state.n();
    let z = state.mean()?;
    let v = &z / n;
    let gz = sym(&obj.grad(&z)?);
    let g_v = &gz * n;
    let g_n = (&gz * &v).trace();

    // ĝ_M = −(1/n²) B⁻¹G_VB⁻ᵀ.
    let y = state.factor.inv_apply_mat(&g_v)?;
    let x = sym(&state.factor.inv_apply_mat(&y.transpose())?) / (n * n);
    let beta_m = effective_beta(state.beta, frobenius(&x))?;
    let factor = state.factor.right_mul_dense(&mat_exp(&(x * beta_m))?)?;

    // ĝ_δ with the trigamma Fisher term.
    let fisher = -2.0 * p as f64 / n + multivariate_trigamma(n / 2.0, p)?;
    if !(fisher > 0.0) {
        return Err(SngdError::Numerical(format!("degrees-of-freedom Fisher term is not positive ({fisher:e})")));
    }
    let inner = -(&g_v * &v).trace() / n + g_n;
    let g_delta = 2.0 / softplus_deriv(state.b) / fisher * inner;
    let b = state.b - state.beta * g_delta;

    if !b.is_finite() {
        return Err(SngdError::Numerical("degrees-of-freedom parameter became non-finite".into()));
    }
    if let Membership::Fail(msg) = factor.membership_check() {
        return Err(SngdError::Numerical(format!("factor left the group: {msg}")));
    }
    Ok(WishartState { b, factor, beta: state.beta, iteration: state.iteration + 1 })
}

/// `W = LΩΩᵀLᵀ` for a given lower-triangular `Ω`, `L` the lower Cholesky
/// factor of `V`. With `Ω = I` this returns `V`.
pub fn bartlett_from_omega(state: &WishartState, omega: &Matrix) -> Result<Matrix> {
    let p = state.p();
    if omega.shape() != (p, p) {
        return Err(SngdError::Dimension(format!("Ω must be {p}x{p}")));
    }
    let l = chol_lower(&state.scale()?)?;
    let lo = l * omega;
    Ok(sym(&(&lo * lo.transpose())))
}

/// One Wishart draw by the Bartlett decomposition: `c_i² ~ Gamma((n−i+1)/2,
/// rate ½)` on the diagonal of `Ω` and standard normals below it.
pub fn bartlett_sample(state: &WishartState, seed: u64) -> Result<Matrix> {
    let p = state.p();
    let n = state.n();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut omega = Matrix::zeros(p, p);
    for i in 0..p {
        let shape = (n - i as f64) / 2.0;
        let gamma = Gamma::new(shape, 2.0).map_err(|e| SngdError::Numerical(format!("Bartlett Gamma({shape}): {e}")))?;
        omega[(i, i)] = gamma.sample(&mut rng).sqrt();
        for j in 0..i {
            omega[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    bartlett_from_omega(state, &omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{from_rows, inv_dense};
    use approx::assert_relative_eq;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use statrs::function::gamma::digamma;

    fn full(m: &Matrix) -> StructuredFactor {
        let p = m.nrows();
        StructuredFactor::from_dense(&GroupKind::BlockUpper { p, k: p }, m).unwrap()
    }

    fn state(b: f64, v: &Matrix) -> WishartState {
        // Choose B so that V = (nBBᵀ)⁻¹.
        let p = v.nrows();
        let n = 2.0 * softplus(b) + p as f64 - 1.0;
        let s = inv_dense(v).unwrap() / n;
        let u = crate::linalg::chol_upper(&s).unwrap();
        WishartState::new(b, full(&u), 0.1).unwrap()
    }

    fn v3() -> Matrix {
        from_rows(&[vec![2.0, 0.6, -0.4], vec![0.6, 1.5, 0.3], vec![-0.4, 0.3, 1.0]]).unwrap()
    }

    #[test]
    fn degrees_of_freedom() {
        let st = WishartState::new(0.0, StructuredFactor::identity(&GroupKind::BlockUpper { p: 3, k: 3 }).unwrap(), 0.1)
            .unwrap();
        assert_relative_eq!(st.n(), 2.0 * (2f64.ln() + 1.0), epsilon = 1e-12);
        assert_relative_eq!(st.n(), 3.386294361, epsilon = 1e-8);
        for b in [-50.0, -5.0, 0.0, 5.0, 50.0] {
            let s = WishartState { b, ..st.clone() };
            assert!(s.n() >= 2.0 && s.n().is_finite());
            if b > -30.0 {
                assert!(s.n() > 2.0);
            }
        }
    }

    #[test]
    fn trigamma_values() {
        let pi2 = std::f64::consts::PI.powi(2);
        assert_relative_eq!(multivariate_trigamma(1.0, 1).unwrap(), pi2 / 6.0, epsilon = 1e-10);
        assert_relative_eq!(multivariate_trigamma(2.0, 1).unwrap(), pi2 / 6.0 - 1.0, epsilon = 1e-10);
        assert_relative_eq!(trigamma(0.5).unwrap(), pi2 / 2.0, epsilon = 1e-10);
        assert_relative_eq!(trigamma(25.0).unwrap(), pi2 / 6.0 - (1..25).map(|k| 1.0 / (k * k) as f64).sum::<f64>(), epsilon = 1e-12);
    }

    #[test]
    fn multivariate_trigamma_matches_fd_of_multivariate_digamma() {
        let psi_p = |x: f64, p: usize| (1..=p).map(|i| digamma(x + (1.0 - i as f64) / 2.0)).sum::<f64>();
        for (x, p) in [(3.0, 2), (1.7, 3), (0.9, 1), (6.5, 4)] {
            let h = 1e-5;
            let fd = (psi_p(x + h, p) - psi_p(x - h, p)) / (2.0 * h);
            assert_relative_eq!(multivariate_trigamma(x, p).unwrap(), fd, max_relative = 1e-7);
        }
    }

    #[test]
    fn trigamma_domain() {
        assert!(multivariate_trigamma(0.5, 2).is_err());
        assert!(multivariate_trigamma(0.0, 1).is_err());
        assert!(trigamma(-1.0).is_err());
    }

    struct Zero(usize);
    impl SpdObjective for Zero {
        fn name(&self) -> String {
            "zero".into()
        }
        fn dim(&self) -> usize {
            self.0
        }
        fn eval(&self, _: &Matrix) -> Result<f64> {
            Ok(0.0)
        }
        fn grad(&self, _: &Matrix) -> Result<Matrix> {
            Ok(Matrix::zeros(self.0, self.0))
        }
    }

    #[test]
    fn zero_gradient_leaves_state_unchanged() {
        let st = state(0.3, &v3());
        let next = wishart_step(&st, &Zero(3)).unwrap();
        assert_eq!(next.b, st.b);
        assert_relative_eq!(next.factor.densify(), st.factor.densify(), epsilon = 1e-15);
    }

    #[test]
    fn converges_and_keeps_invariants() {
        let lambda = from_rows(&[vec![3.0, 1.0, 0.0], vec![1.0, 2.0, 0.5], vec![0.0, 0.5, 1.0]]).unwrap();
        let obj = LogDetTrace::new(lambda).unwrap();
        let mut st = state(-0.7, &v3());
        let b0 = st.b;
        for _ in 0..500 {
            st = wishart_step(&st, &obj).unwrap();
            assert!(st.n() > st.p() as f64 - 1.0);
            assert!(crate::linalg::is_spd(&st.precision()));
            // The at-mean approximation gives a vanishing degrees-of-freedom gradient.
            assert_eq!(st.b, b0);
        }
        assert_relative_eq!(st.mean().unwrap(), obj.minimizer(), epsilon = 1e-8);
    }

    #[test]
    fn update_matches_dense_formula() {
        let lambda = from_rows(&[vec![3.0, 1.0, 0.0], vec![1.0, 2.0, 0.5], vec![0.0, 0.5, 1.0]]).unwrap();
        let obj = LogDetTrace::new(lambda.clone()).unwrap();
        let st = state(0.4, &v3());
        let next = wishart_step(&st, &obj).unwrap();
        let n = st.n();
        let b = st.factor.densify();
        let binv = inv_dense(&b).unwrap();
        let z = inv_dense(&(&b * b.transpose())).unwrap();
        let g = &lambda - inv_dense(&z).unwrap();
        let expect = &b * mat_exp(&(&binv * g * binv.transpose() * (st.beta / n))).unwrap();
        assert_relative_eq!(next.factor.densify(), expect, epsilon = 1e-12);
    }

    #[test]
    fn bartlett_identity_hook_returns_scale() {
        let st = state(0.2, &v3());
        let w = bartlett_from_omega(&st, &Matrix::identity(3, 3)).unwrap();
        assert_relative_eq!(w, st.scale().unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn bartlett_one_dim_mean() {
        let v = Matrix::from_element(1, 1, 0.7);
        let st = state(0.5, &v);
        let n = st.n();
        let draws = 100_000;
        let xs: Vec<f64> = (0..draws).map(|s| bartlett_sample(&st, s).unwrap()[(0, 0)] / 0.7).collect();
        let mean = xs.iter().sum::<f64>() / draws as f64;
        let se = (2.0 * n / draws as f64).sqrt();
        assert!((mean - n).abs() < 3.0 * se, "mean {mean} vs n {n} (se {se})");
    }

    #[test]
    fn bartlett_mean_is_n_v() {
        let st = state(1.0, &v3());
        let draws = 100_000;
        let mut acc = Matrix::zeros(3, 3);
        for s in 0..draws {
            acc += bartlett_sample(&st, s).unwrap();
        }
        let mean = acc / draws as f64;
        let expect = st.scale().unwrap() * st.n();
        for i in 0..3 {
            for j in 0..3 {
                assert!((mean[(i, j)] - expect[(i, j)]).abs() <= 0.05 * expect[(i, j)].abs(), "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn bartlett_diagonal_is_chi_squared() {
        let st = state(0.0, &v3());
        let n = st.n();
        let v11 = st.scale().unwrap()[(0, 0)];
        let draws = 10_000;
        let mut xs: Vec<f64> = (0..draws).map(|s| bartlett_sample(&st, 7 + s).unwrap()[(0, 0)] / v11).collect();
        xs.sort_by(f64::total_cmp);
        let chi = ChiSquared::new(n).unwrap();
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = chi.cdf(x);
                (c - i as f64 / draws as f64).max((i + 1) as f64 / draws as f64 - c)
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / (draws as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let st = state(0.3, &v3());
        let back = WishartState::from_checkpoint_json(&st.to_checkpoint_json().unwrap()).unwrap();
        assert_eq!(back, st);
    }
}
