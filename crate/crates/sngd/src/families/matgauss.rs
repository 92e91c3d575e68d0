//! Matrix Gaussian over a `d × p` weight matrix with Kronecker precision
//! `S = S_V ⊗ S_U`, `S_V = AAᵀ` (`p × p`), `S_U = BBᵀ` (`d × d`).
//!
//! Local coordinates `E = E_t + B⁻ᵀΔA⁻¹`, `A = A_t h(M)`, `B = B_t h(N)` give
//! the block-diagonal Fisher approximation `diag(I_Δ, 2d I_M, 2p I_N)` (the
//! exact `M`–`N` cross block is dropped). With per-example Gauss-Newton
//! curvature and natural momentum the update is
//!
//! ```text
//! Z ← (1−c₁)(αE + E[G]) + c₁ Z
//! E ← E − β_t B⁻ᵀB⁻¹ Z A⁻ᵀA⁻¹
//! A ← A h((β_t/2d){−dγI + α Tr((BBᵀ)⁻¹) A⁻¹A⁻ᵀ + E[Σₙ A⁻¹GₙᵀB⁻ᵀB⁻¹GₙA⁻ᵀ]})
//! B ← B h((β_t/2p){−pγI + α Tr((AAᵀ)⁻¹) B⁻¹B⁻ᵀ + E[Σₙ B⁻¹Gₙ(AAᵀ)⁻¹GₙᵀB⁻ᵀ]})
//! ```
//!
//! with `β_t = β(1−c₂ᵗ)/(1−c₁ᵗ)`. For structured (non-full) factors the
//! braces are projected with `C ⊙ κ(·)` as in the vector case, which reduces
//! to the halving above for full factors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SngdError};
use crate::gaussian::{effective_beta, standard_normal, step_seed};
use crate::groups::{c_mask, LocalDirection, Membership, StructuredFactor};
use crate::linalg::{mat_of, sym, Matrix, Vector};
use crate::objectives::Mlp;

/// Default momentum constants.
pub const C1: f64 = 0.9;
pub const C2: f64 = 0.999;

/// One layer's matrix-Gaussian state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatGaussState {
    /// Mean, `d × p`.
    #[serde(with = "crate::linalg::serde_matrix")]
    pub e: Matrix,
    /// Column factor, `S_V = AAᵀ` (`p × p`).
    pub a: StructuredFactor,
    /// Row factor, `S_U = BBᵀ` (`d × d`).
    pub b: StructuredFactor,
    /// Natural momentum, `d × p`.
    #[serde(with = "crate::linalg::serde_matrix")]
    pub z: Matrix,
    /// Number of updates applied.
    pub t: u64,
    pub c1: f64,
    pub c2: f64,
    /// L2 weight `α`.
    pub alpha: f64,
    /// Entropy weight `γ`.
    pub gamma: f64,
    /// Global step size `β`.
    pub beta: f64,
}

impl MatGaussState {
    /// Zero momentum, `t = 0` and the default constants `c₁ = 0.9`, `c₂ = 0.999`.
    pub fn new(e: Matrix, a: StructuredFactor, b: StructuredFactor, beta: f64, alpha: f64, gamma: f64) -> Result<Self> {
        let (d, p) = e.shape();
        let z = Matrix::zeros(d, p);
        let st = MatGaussState { e, a, b, z, t: 0, c1: C1, c2: C2, alpha, gamma, beta };
        st.validate()?;
        Ok(st)
    }

    /// Replaces the momentum constants (`c₁ = c₂ = 0` gives the plain update).
    pub fn with_momentum(mut self, c1: f64, c2: f64) -> Result<Self> {
        self.c1 = c1;
        self.c2 = c2;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let (d, p) = self.e.shape();
        if self.a.dim() != p || self.b.dim() != d || self.z.shape() != (d, p) {
            return Err(SngdError::Dimension(format!("matrix Gaussian expects A {p}x{p}, B {d}x{d} and Z {d}x{p}")));
        }
        for (name, f) in [("A", &self.a), ("B", &self.b)] {
            if let Membership::Fail(msg) = f.membership_check() {
                return Err(SngdError::Config(format!("factor {name} is not a group member: {msg}")));
            }
            f.kind()
                .layout()
                .ok_or_else(|| SngdError::KindMismatch(format!("factor {name} needs a triangular kind")))?;
        }
        if !(0.0..1.0).contains(&self.c1) || !(0.0..1.0).contains(&self.c2) {
            return Err(SngdError::Config("momentum constants must lie in [0, 1)".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(SngdError::Config(format!("step size must be positive, got {}", self.beta)));
        }
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) {
            return Err(SngdError::Config("α and γ must be non-negative".into()));
        }
        if self.z.iter().chain(self.e.iter()).any(|x| !x.is_finite()) {
            return Err(SngdError::Numerical("mean or momentum is not finite".into()));
        }
        Ok(())
    }

    /// Rows `d`.
    pub fn d(&self) -> usize {
        self.e.nrows()
    }

    /// Columns `p`.
    pub fn p(&self) -> usize {
        self.e.ncols()
    }

    /// Step-size multiplier `(1−c₂ᵗ)/(1−c₁ᵗ)` at the coming update `t+1`.
    pub fn step_multiplier(&self) -> f64 {
        let t = (self.t + 1) as i32;
        (1.0 - self.c2.powi(t)) / (1.0 - self.c1.powi(t))
    }

    /// `X A⁻¹`.
    fn right_inv(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.a.inv_transpose_apply_mat(&x.transpose())?.transpose())
    }

    /// `X A⁻ᵀ`.
    fn right_inv_t(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.a.inv_apply_mat(&x.transpose())?.transpose())
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self> {
        let st: MatGaussState = serde_json::from_str(s)?;
        st.validate()?;
        Ok(st)
    }
}

/// `W = E + B⁻ᵀ Z A⁻¹` for a given `d × p` standard-normal matrix `Z`.
pub fn matgauss_sample_from_z(state: &MatGaussState, z: &Matrix) -> Result<Matrix> {
    if z.shape() != state.e.shape() {
        return Err(SngdError::Dimension("noise must have the shape of the mean".into()));
    }
    Ok(&state.e + state.right_inv(&state.b.inv_transpose_apply_mat(z)?)?)
}

/// One draw `W = E + B⁻ᵀ Mat(z) A⁻¹`, `z` from substream 0 of `seed`.
pub fn matgauss_sample(state: &MatGaussState, seed: u64) -> Result<Matrix> {
    let (d, p) = state.e.shape();
    matgauss_sample_from_z(state, &mat_of(&standard_normal(d * p, seed, 0), d, p))
}

/// `C ⊙ κ(X)` of a symmetric matrix for the kind of `f`.
fn projected(f: &StructuredFactor, x: &Matrix) -> Result<LocalDirection> {
    LocalDirection::kappa_extract(f.kind(), &sym(x))?.mask_scale(&c_mask(f.kind())?)
}

/// One update from data-term gradients: `grads[s][n]` is the gradient of
/// example (or batch) `n` at the `s`-th weight sample. `E[G]` is the sample
/// mean of `Σₙ G_{s,n}`; the curvature uses `Σₙ` of per-example outer products.
pub fn matgauss_update(state: &MatGaussState, grads: &[Vec<Matrix>]) -> Result<MatGaussState> {
    if grads.is_empty() {
        return Err(SngdError::Config("matrix-Gaussian update needs at least one sample".into()));
    }
    let (d, p) = state.e.shape();
    let ns = grads.len() as f64;
    let mut eg = Matrix::zeros(d, p);
    let mut outer_a = Matrix::zeros(p, p);
    let mut outer_b = Matrix::zeros(d, d);
    for per_sample in grads {
        for g in per_sample {
            if g.shape() != (d, p) {
                return Err(SngdError::Dimension(format!("layer gradients must be {d}x{p}")));
            }
            eg += g;
            // Y = B⁻¹ G A⁻ᵀ; YᵀY = A⁻¹GᵀB⁻ᵀB⁻¹GA⁻ᵀ and YYᵀ = B⁻¹G(AAᵀ)⁻¹GᵀB⁻ᵀ.
            let y = state.right_inv_t(&state.b.inv_apply_mat(g)?)?;
            outer_a += y.transpose() * &y;
            outer_b += &y * y.transpose();
        }
    }
    eg /= ns;
    outer_a /= ns;
    outer_b /= ns;

    let beta_t = state.beta * state.step_multiplier();
    let g_mu = &state.e * state.alpha + eg;
    let z = &g_mu * (1.0 - state.c1) + &state.z * state.c1;

    let b_inv = state.b.inv_apply_mat(&Matrix::identity(d, d))?;
    let a_inv = state.a.inv_apply_mat(&Matrix::identity(p, p))?;
    let tr_su_inv = b_inv.norm_squared();
    let tr_sv_inv = a_inv.norm_squared();

    // E ← E − β_t S_U⁻¹ Z S_V⁻¹.
    let su_z = state.b.inv_transpose_apply_mat(&state.b.inv_apply_mat(&z)?)?;
    let step_e = state.right_inv(&state.right_inv_t(&su_z)?)?;
    let e = &state.e - step_e * beta_t;

    let x_a = Matrix::identity(p, p) * (-(d as f64) * state.gamma) + &a_inv * a_inv.transpose() * (state.alpha * tr_su_inv)
        + outer_a;
    let x_b = Matrix::identity(d, d) * (-(p as f64) * state.gamma) + &b_inv * b_inv.transpose() * (state.alpha * tr_sv_inv)
        + outer_b;
    let dir_a = projected(&state.a, &x_a)?.scale(1.0 / d as f64);
    let dir_b = projected(&state.b, &x_b)?.scale(1.0 / p as f64);
    let a = state.a.apply_h(&dir_a.scale(effective_beta(beta_t, dir_a.frobenius())?))?;
    let b = state.b.apply_h(&dir_b.scale(effective_beta(beta_t, dir_b.frobenius())?))?;

    let next = MatGaussState { e, a, b, z, t: state.t + 1, ..state.clone() };
    next.validate().map_err(|e| SngdError::Numerical(format!("matrix-Gaussian update failed: {e}")))?;
    Ok(next)
}

/// Sampling and gradient options of [`matgauss_gn_step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatGaussConfig {
    /// Weight samples per step.
    pub samples: usize,
    pub seed: u64,
    /// Per-example outer products (`true`) or the outer product of the
    /// full-batch gradient (`false`).
    pub per_example: bool,
}

impl Default for MatGaussConfig {
    fn default() -> Self {
        MatGaussConfig { samples: 1, seed: 0, per_example: true }
    }
}

/// One Gauss-Newton step for every layer of an MLP with independent
/// matrix-Gaussian layers. Sample `s` of layer `l` uses substream `sL + l` of
/// the iteration seed (taken from layer 0's counter).
pub fn matgauss_gn_step(layers: &[MatGaussState], mlp: &Mlp, cfg: &MatGaussConfig) -> Result<Vec<MatGaussState>> {
    let shapes = mlp.shapes();
    if layers.len() != shapes.len() || layers.iter().zip(&shapes).any(|(l, s)| l.e.shape() != *s) {
        return Err(SngdError::Dimension(format!("layers must match the network shapes {shapes:?}")));
    }
    if cfg.samples == 0 {
        return Err(SngdError::Config("need at least one weight sample".into()));
    }
    let nl = layers.len() as u64;
    let seed = step_seed(cfg.seed, layers[0].t);
    // grads[s][l][n]
    let grads: Vec<Vec<Vec<Matrix>>> = (0..cfg.samples as u64)
        .into_par_iter()
        .map(|s| -> Result<Vec<Vec<Matrix>>> {
            let ws = layers
                .iter()
                .enumerate()
                .map(|(l, st)| {
                    let (d, p) = st.e.shape();
                    matgauss_sample_from_z(st, &mat_of(&standard_normal(d * p, seed, s * nl + l as u64), d, p))
                })
                .collect::<Result<Vec<_>>>()?;
            let ev = mlp.evaluate(&ws, cfg.per_example)?;
            Ok(match ev.per_example {
                Some(per) => (0..ws.len()).map(|l| per.iter().map(|ex| ex[l].clone()).collect()).collect(),
                None => ev.grads.into_iter().map(|g| vec![g]).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    layers
        .iter()
        .enumerate()
        .map(|(l, st)| {
            let per_layer: Vec<Vec<Matrix>> = grads.iter().map(|g| g[l].clone()).collect();
            matgauss_update(st, &per_layer)
        })
        .collect()
}

/// Current means as network weights.
pub fn matgauss_means(layers: &[MatGaussState]) -> Vec<Matrix> {
    layers.iter().map(|l| l.e.clone()).collect()
}

/// Flattened means (for objective evaluation).
pub fn matgauss_mean_vector(layers: &[MatGaussState], mlp: &Mlp) -> Vector {
    mlp.flatten(&matgauss_means(layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::{random_factor, GroupKind};
    use crate::linalg::{inv_spd, kron, vec_of};
    use crate::objectives::{mlp_objective, Activation, MlpSpec, Objective};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full(n: usize) -> GroupKind {
        GroupKind::BlockUpper { p: n, k: n }
    }

    fn random_state(d: usize, p: usize, seed: u64) -> MatGaussState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Matrix::from_fn(d, p, |_, _| rng.random_range(-1.0..1.0));
        let a = random_factor(&full(p), &mut rng).unwrap();
        let b = random_factor(&full(d), &mut rng).unwrap();
        MatGaussState::new(e, a, b, 0.1, 0.3, 0.7).unwrap()
    }

    #[test]
    fn sampling_hooks() {
        let st = random_state(2, 3, 1);
        assert_eq!(matgauss_sample_from_z(&st, &Matrix::zeros(2, 3)).unwrap(), st.e);
        let id = MatGaussState::new(
            st.e.clone(),
            StructuredFactor::identity(&full(3)).unwrap(),
            StructuredFactor::identity(&full(2)).unwrap(),
            0.1,
            0.0,
            0.0,
        )
        .unwrap();
        let z = Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64 - 2.0);
        assert_relative_eq!(matgauss_sample_from_z(&id, &z).unwrap(), &st.e + &z, epsilon = 1e-15);
        assert_eq!(matgauss_sample(&st, 9).unwrap(), matgauss_sample(&st, 9).unwrap());
    }

    #[test]
    fn sample_covariance_is_kronecker() {
        let st = random_state(2, 2, 2);
        let draws = 100_000;
        let mut acc = Matrix::zeros(4, 4);
        for s in 0..draws {
            let v = vec_of(&(matgauss_sample(&st, s).unwrap() - &st.e));
            acc.ger(1.0, &v, &v, 1.0);
        }
        let cov = acc / draws as f64;
        let expect = kron(&inv_spd(&st.a.precision_dense()).unwrap(), &inv_spd(&st.b.precision_dense()).unwrap());
        let scale = expect.diagonal().amax();
        for i in 0..4 {
            for j in 0..4 {
                let tol = 0.05 * (expect[(i, j)].abs()).max(0.2 * scale);
                assert!((cov[(i, j)] - expect[(i, j)]).abs() <= tol, "({i},{j}): {} vs {}", cov[(i, j)], expect[(i, j)]);
            }
        }
    }

    #[test]
    fn entropy_only_first_step() {
        let id3 = StructuredFactor::identity(&full(3)).unwrap();
        let id2 = StructuredFactor::identity(&full(2)).unwrap();
        let e = Matrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let st = MatGaussState::new(e.clone(), id3, id2, 1.0, 0.0, 1.0).unwrap();
        assert_relative_eq!(st.step_multiplier(), 0.01, epsilon = 1e-12);
        let next = matgauss_update(&st, &[vec![Matrix::zeros(2, 3)]]).unwrap();
        assert_eq!(next.e, e);
        let h = 1.0 - 0.005 + 0.5 * 0.005 * 0.005;
        assert_relative_eq!(h, 0.9950125, epsilon = 1e-12);
        assert_relative_eq!(next.a.densify(), Matrix::identity(3, 3) * h, epsilon = 1e-15);
        assert_relative_eq!(next.b.densify(), Matrix::identity(2, 2) * h, epsilon = 1e-15);
    }

    #[test]
    fn zero_everything_is_a_fixed_point() {
        let mut st = random_state(2, 3, 3);
        st.alpha = 0.0;
        st.gamma = 0.0;
        let next = matgauss_update(&st, &[vec![Matrix::zeros(2, 3)]]).unwrap();
        assert_eq!(next.e, st.e);
        assert_eq!(next.a.densify(), st.a.densify());
        assert_eq!(next.b.densify(), st.b.densify());
    }

    /// Symmetric basis matrix of coordinate `(i, j)`, `i ≤ j`.
    fn sym_basis(n: usize, i: usize, j: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        m[(i, j)] = 1.0;
        m[(j, i)] = 1.0;
        m
    }

    fn sym_coords(n: usize) -> Vec<(usize, usize)> {
        (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
    }

    /// Vectorized update: Euclidean gradients of the vector Gaussian
    /// `N(vec E, (S_V ⊗ S_U)⁻¹)`, chain rule through the local coordinates,
    /// and the exact Fisher blocks of `Δ`, `M`, `N` with the `M`–`N` cross
    /// block dropped.
    fn dense_oracle(st: &MatGaussState, grads: &[Vec<Matrix>]) -> (Matrix, Matrix, Matrix) {
        let (d, p) = st.e.shape();
        let a = st.a.densify();
        let b = st.b.densify();
        let sv = &a * a.transpose();
        let su = &b * b.transpose();
        let s = kron(&sv, &su);
        let sigma = inv_spd(&s).unwrap();
        let ns = grads.len() as f64;
        let mut eg = Vector::zeros(d * p);
        let mut gg = Matrix::zeros(d * p, d * p);
        for per in grads {
            for g in per {
                let v = vec_of(g);
                eg += &v / ns;
                gg.ger(1.0 / ns, &v, &v, 1.0);
            }
        }
        let g_mu = vec_of(&st.e) * st.alpha + eg;
        let g_sigma = (Matrix::identity(d * p, d * p) * st.alpha + gg - &s * st.gamma) * 0.5;

        // Δ block: vec E = vec E_t + (A⁻ᵀ ⊗ B⁻ᵀ) vec Δ, Fisher I.
        let ainv = a.clone().try_inverse().unwrap();
        let binv = b.clone().try_inverse().unwrap();
        let jd = kron(&ainv.transpose(), &binv.transpose());
        let delta_new = -(jd.transpose() * &g_mu) * st.beta;
        let e_new = &st.e + mat_of(&(&jd * delta_new), d, p);

        // Factor blocks: ∂S/∂c for the symmetric coordinates of M (resp. N).
        let block = |n: usize, ds: &dyn Fn(&Matrix) -> Matrix, base: &Matrix| -> Matrix {
            let coords = sym_coords(n);
            let dss: Vec<Matrix> = coords.iter().map(|&(i, j)| ds(&sym_basis(n, i, j))).collect();
            let g = Vector::from_iterator(coords.len(), dss.iter().map(|dsc| -(&g_sigma * (&sigma * dsc * &sigma)).trace()));
            let f = Matrix::from_fn(coords.len(), coords.len(), |x, y| {
                0.5 * (&sigma * &dss[x] * &sigma * &dss[y]).trace()
            });
            let nat = f.try_inverse().unwrap() * g;
            let mut m = Matrix::zeros(n, n);
            for (c, &(i, j)) in coords.iter().enumerate() {
                m += sym_basis(n, i, j) * (-st.beta * nat[c]);
            }
            base * crate::linalg::h_map(&m).unwrap()
        };
        // With M symmetric, h(M)h(M)ᵀ = I + 2M + O(M²).
        let a_new = block(p, &|e: &Matrix| kron(&(&a * e * a.transpose() * 2.0), &su), &a);
        let b_new = block(d, &|e: &Matrix| kron(&sv, &(&b * e * b.transpose() * 2.0)), &b);
        (e_new, a_new, b_new)
    }

    #[test]
    fn plain_update_matches_vectorized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for seed in 0..5 {
            let st = random_state(2, 3, 100 + seed).with_momentum(0.0, 0.0).unwrap();
            let grads: Vec<Vec<Matrix>> = (0..2)
                .map(|_| (0..3).map(|_| Matrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0))).collect())
                .collect();
            let next = matgauss_update(&st, &grads).unwrap();
            let (e, a, b) = dense_oracle(&st, &grads);
            assert_relative_eq!(next.e, e, epsilon = 1e-8);
            assert_relative_eq!(next.a.densify(), a, epsilon = 1e-8);
            assert_relative_eq!(next.b.densify(), b, epsilon = 1e-8);
        }
    }

    #[test]
    fn momentum_and_step_multiplier() {
        let st = random_state(2, 2, 5);
        let g = vec![vec![Matrix::from_element(2, 2, 0.5)]];
        let s1 = matgauss_update(&st, &g).unwrap();
        let gmu = &st.e * st.alpha + Matrix::from_element(2, 2, 0.5);
        assert_relative_eq!(s1.z, &gmu * 0.1, epsilon = 1e-15);
        assert_eq!(s1.t, 1);
        let t2 = (1.0 - 0.999f64.powi(2)) / (1.0 - 0.9f64.powi(2));
        assert_relative_eq!(s1.step_multiplier(), t2, epsilon = 1e-15);
    }

    #[test]
    fn trains_a_small_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let x = Matrix::from_fn(3, n, |_, _| rng.random_range(-1.0..1.0));
        let y = Matrix::from_fn(1, n, |_, j| (x[(0, j)] - 0.5 * x[(1, j)]).sin() + 0.3 * x[(2, j)]);
        let spec = MlpSpec { layers: vec![3, 8, 1], activation: Activation::Tanh, x, y, l2_weight: 1e-2 };
        let mlp = mlp_objective(spec).unwrap();
        let mut layers: Vec<MatGaussState> = mlp
            .shapes()
            .into_iter()
            .map(|(d, p)| {
                let e = Matrix::from_fn(d, p, |_, _| rng.random_range(-0.5..0.5));
                let a = StructuredFactor::scaled_identity(&full(p), 1.0).unwrap();
                let b = StructuredFactor::scaled_identity(&full(d), 1.0).unwrap();
                MatGaussState::new(e, a, b, 0.1, 1e-2, 0.01).unwrap()
            })
            .collect();
        let loss0 = mlp.eval(&matgauss_mean_vector(&layers, &mlp));
        let cfg = MatGaussConfig { samples: 1, seed: 4, per_example: true };
        for _ in 0..500 {
            layers = matgauss_gn_step(&layers, &mlp, &cfg).unwrap();
        }
        let loss = mlp.eval(&matgauss_mean_vector(&layers, &mlp));
        assert!(loss < 0.05 * loss0, "{loss0} -> {loss}");
        let back = MatGaussState::from_checkpoint_json(&layers[0].to_checkpoint_json().unwrap()).unwrap();
        assert_eq!(back, layers[0]);
    }

    #[test]
    fn local_fisher_blocks_and_cross_term() {
        use crate::fim::{fd_fim, GaussParams, SCORE_FD_STEP};
        use crate::linalg::{from_rows, h_map};
        use rand_distr::{Distribution, StandardNormal};

        let (d, p) = (2, 2);
        let a = from_rows(&[vec![1.3, 0.4], vec![0.0, 0.8]]).unwrap();
        let b = from_rows(&[vec![0.9, -0.3], vec![0.0, 1.1]]).unwrap();
        let e = from_rows(&[vec![0.2, -0.5], vec![1.0, 0.3]]).unwrap();
        let ainv = a.clone().try_inverse().unwrap();
        let binv = b.clone().try_inverse().unwrap();
        let sym_p = sym_coords(p);
        let sym_d = sym_coords(d);
        let nc = d * p + sym_p.len() + sym_d.len();
        let params = |c: usize, t: f64| -> GaussParams {
            let (mut e2, mut a2, mut b2) = (e.clone(), a.clone(), b.clone());
            if c < d * p {
                let mut delta = Matrix::zeros(d, p);
                delta[(c % d, c / d)] = t;
                e2 += binv.transpose() * delta * &ainv;
            } else if c < d * p + sym_p.len() {
                let (i, j) = sym_p[c - d * p];
                a2 = &a * h_map(&(sym_basis(p, i, j) * t)).unwrap();
            } else {
                let (i, j) = sym_d[c - d * p - sym_p.len()];
                b2 = &b * h_map(&(sym_basis(d, i, j) * t)).unwrap();
            }
            let s = kron(&(&a2 * a2.transpose()), &(&b2 * b2.transpose()));
            GaussParams::from_precision(vec_of(&e2), s).unwrap()
        };
        let h = SCORE_FD_STEP;
        let perturbed: Vec<(GaussParams, GaussParams)> = (0..nc).map(|c| (params(c, h), params(c, -h))).collect();
        let draw = |rng: &mut rand_chacha::ChaCha20Rng| {
            let z = Matrix::from_fn(d, p, |_, _| StandardNormal.sample(&mut *rng));
            vec_of(&(&e + binv.transpose() * z * &ainv))
        };
        let log_q = |c: usize, sign: f64, w: &Vector| {
            let pr = if sign > 0.0 { &perturbed[c].0 } else { &perturbed[c].1 };
            pr.log_density(w)
        };
        let f = fd_fim(nc, 200_000, 11, draw, log_q).unwrap();

        let mut expected = vec![1.0; d * p];
        expected.extend(sym_p.iter().map(|&(i, j)| if i == j { 2.0 * d as f64 } else { 4.0 * d as f64 }));
        expected.extend(sym_d.iter().map(|&(i, j)| if i == j { 2.0 * p as f64 } else { 4.0 * p as f64 }));
        for (c, &x) in expected.iter().enumerate() {
            assert!((f[(c, c)] - x).abs() <= 0.05 * x, "coordinate {c}: {} vs {x}", f[(c, c)]);
        }
        // Δ is orthogonal to both factor blocks.
        for i in 0..d * p {
            for j in d * p..nc {
                assert!(f[(i, j)].abs() < 0.1, "Δ cross ({i},{j}) = {}", f[(i, j)]);
            }
        }
        // M–N cross block: ½Tr(ΣṠ_MΣṠ_N) = 2 Tr(E_M) Tr(E_N), so 2 for two
        // diagonal coordinates and 0 otherwise. The block-diagonal
        // approximation used by the update drops it.
        let m0 = d * p;
        let n0 = m0 + sym_p.len();
        for (x, &(i, j)) in sym_p.iter().enumerate() {
            for (y, &(k, l)) in sym_d.iter().enumerate() {
                let exact = if i == j && k == l { 2.0 } else { 0.0 };
                let got = f[(m0 + x, n0 + y)];
                assert!((got - exact).abs() <= 0.1 + 0.05 * exact, "M{:?} N{:?}: {got} vs {exact}", (i, j), (k, l));
            }
        }
        let cross = f.view((m0, n0), (sym_p.len(), sym_d.len())).amax();
        assert!(cross > 1.5);
    }
}
