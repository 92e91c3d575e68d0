//! Brute-force Fisher information estimates.
//!
//! The FIM of a parametric density `q(w|η)` at `η₀` is `E[s sᵀ]` with the
//! score `s = ∇_η log q(w|η)|_{η₀}` and `w ~ q(·|η₀)`. Here every score is a
//! central finite difference of `log q` in each coordinate, so the estimates
//! do not depend on any analytic Fisher or score formula; they serve as an
//! independent oracle for the block values the updates rely on and for the
//! singular parameterizations that motivate the structured local spaces.

use nalgebra::SymmetricEigen;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, SngdError};
use crate::groups::{CoordClass, GroupKind, LocalDirection, StructuredFactor};
use crate::linalg::{h_map, inv_spd, logdet_spd, Matrix, Vector};

/// Finite-difference step used for scores.
pub const SCORE_FD_STEP: f64 = 1e-4;

/// Number of independent sample chunks; fixed so the estimate depends only on
/// the seed and not on the thread count.
const CHUNKS: u64 = 64;

/// `E[s sᵀ]` over `samples` draws.
///
/// `draw` produces a sample from its own RNG; `log_q(c, sign, w)` evaluates
/// `log q(w|η₀ + sign·h·e_c)` (up to a constant shared by all parameters).
/// Chunk `i` uses substream `i` of `seed`; chunks are reduced in order.
pub fn fd_fim<D, L>(ncoords: usize, samples: usize, seed: u64, draw: D, log_q: L) -> Result<Matrix>
where
    D: Fn(&mut ChaCha20Rng) -> Vector + Sync,
    L: Fn(usize, f64, &Vector) -> f64 + Sync,
{
    if samples == 0 || ncoords == 0 {
        return Err(SngdError::Config("FIM estimate needs samples and coordinates".into()));
    }
    let h = SCORE_FD_STEP;
    let partial: Vec<Matrix> = (0..CHUNKS)
        .into_par_iter()
        .map(|chunk| {
            let lo = samples as u64 * chunk / CHUNKS;
            let hi = samples as u64 * (chunk + 1) / CHUNKS;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let mut acc = Matrix::zeros(ncoords, ncoords);
            let mut s = Vector::zeros(ncoords);
            for _ in lo..hi {
                let w = draw(&mut rng);
                for c in 0..ncoords {
                    s[c] = (log_q(c, 1.0, &w) - log_q(c, -1.0, &w)) / (2.0 * h);
                }
                acc.ger(1.0, &s, &s, 1.0);
            }
            acc
        })
        .collect();
    let total = partial.into_iter().fold(Matrix::zeros(ncoords, ncoords), |a, b| a + b);
    Ok(total / samples as f64)
}

/// Gaussian parameters prepared for repeated `log N(w|μ, P⁻¹)` evaluation.
#[derive(Clone, Debug)]
pub struct GaussParams {
    pub mu: Vector,
    pub precision: Matrix,
    pub half_logdet: f64,
}

impl GaussParams {
    /// From a mean and a precision matrix.
    pub fn from_precision(mu: Vector, precision: Matrix) -> Result<Self> {
        let half_logdet = 0.5 * logdet_spd(&precision)?;
        Ok(GaussParams { mu, precision, half_logdet })
    }

    /// From a mean and a covariance matrix.
    pub fn from_covariance(mu: Vector, covariance: &Matrix) -> Result<Self> {
        let half_logdet = -0.5 * logdet_spd(covariance)?;
        Ok(GaussParams { mu, precision: inv_spd(covariance)?, half_logdet })
    }

    /// `log N(w|μ, P⁻¹)` without the `−(p/2) log 2π` constant.
    pub fn log_density(&self, w: &Vector) -> f64 {
        let x = w - &self.mu;
        self.half_logdet - 0.5 * x.dot(&(&self.precision * &x))
    }
}

/// FIM of a Gaussian family whose coordinate perturbations have been
/// precomputed as `(plus, minus)` pairs; samples come from `base`.
fn gaussian_fd_fim(base: &GaussParams, perturbed: &[(GaussParams, GaussParams)], samples: usize, seed: u64) -> Result<Matrix> {
    let p = base.mu.len();
    let cov = inv_spd(&base.precision)?;
    let l = cov
        .cholesky()
        .ok_or(SngdError::NotPositiveDefinite { pivot: 0 })?
        .l();
    let draw = |rng: &mut ChaCha20Rng| {
        let e = Vector::from_fn(p, |_, _| StandardNormal.sample(rng));
        &base.mu + &l * e
    };
    let log_q = |c: usize, sign: f64, w: &Vector| {
        let (plus, minus) = &perturbed[c];
        if sign > 0.0 {
            plus.log_density(w)
        } else {
            minus.log_density(w)
        }
    };
    fd_fim(perturbed.len(), samples, seed, draw, log_q)
}

/// Role of a local coordinate `η = (δ, M)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LocalCoord {
    /// An entry of `δ`.
    Mean,
    /// A coordinate of the structured `M`.
    M(CoordClass),
}

impl LocalCoord {
    /// FIM diagonal value of the coordinate at `η = 0`: 1 for `δ`, 2 for a
    /// diagonal `M` entry, 4 for a symmetric off-diagonal pair and 1 for an
    /// asymmetric-block entry. The FIM is diagonal in these coordinates.
    pub fn expected_fim(self) -> f64 {
        match self {
            LocalCoord::Mean => 1.0,
            LocalCoord::M(CoordClass::Diagonal) => 2.0,
            LocalCoord::M(CoordClass::SymmetricOffDiagonal) => 4.0,
            LocalCoord::M(CoordClass::Asymmetric) => 1.0,
        }
    }
}

/// Brute-force FIM of `q(w|η) = N(μ + B⁻ᵀδ, (B h(M) h(M)ᵀ Bᵀ)⁻¹)` at `η = 0`
/// in the coordinates `δ` followed by [`LocalDirection::coords`].
pub fn local_gaussian_fim(mu: &Vector, factor: &StructuredFactor, samples: usize, seed: u64) -> Result<(Matrix, Vec<LocalCoord>)> {
    let kind = factor.kind().clone();
    if kind.layout().is_none() {
        return Err(SngdError::KindMismatch("local FIM needs a triangular kind".into()));
    }
    let p = factor.dim();
    let classes = LocalDirection::coord_classes(&kind)?;
    let mut labels = vec![LocalCoord::Mean; p];
    labels.extend(classes.iter().map(|&c| LocalCoord::M(c)));
    let n = labels.len();
    let base = GaussParams::from_precision(mu.clone(), factor.precision_dense())?;
    let perturb = |c: usize, t: f64| -> Result<GaussParams> {
        if c < p {
            let mut delta = Vector::zeros(p);
            delta[c] = t;
            GaussParams::from_precision(mu + factor.inv_transpose_apply(&delta)?, base.precision.clone())
        } else {
            let mut coords = vec![0.0; n - p];
            coords[c - p] = t;
            let f = factor.apply_h(&LocalDirection::from_coords(&kind, &coords)?)?;
            GaussParams::from_precision(mu.clone(), f.precision_dense())
        }
    };
    let h = SCORE_FD_STEP;
    let perturbed = (0..n).map(|c| Ok((perturb(c, h)?, perturb(c, -h)?))).collect::<Result<Vec<_>>>()?;
    Ok((gaussian_fd_fim(&base, &perturbed, samples, seed)?, labels))
}

/// Brute-force FIM of `N(μ, (B h(M) h(M)ᵀ Bᵀ)⁻¹)` at `M = 0` with all `p²`
/// entries of `M` free (column-major order). Antisymmetric directions leave
/// the precision unchanged to third order, so this FIM is singular.
pub fn unconstrained_m_fim(b: &Matrix, samples: usize, seed: u64) -> Result<Matrix> {
    let p = b.nrows();
    if b.ncols() != p {
        return Err(SngdError::Dimension("factor must be square".into()));
    }
    let mu = Vector::zeros(p);
    let base = GaussParams::from_precision(mu.clone(), b * b.transpose())?;
    let h = SCORE_FD_STEP;
    let perturb = |c: usize, t: f64| -> Result<GaussParams> {
        let mut m = Matrix::zeros(p, p);
        m[(c % p, c / p)] = t;
        let bh = b * h_map(&m)?;
        GaussParams::from_precision(mu.clone(), &bh * bh.transpose())
    };
    let perturbed = (0..p * p).map(|c| Ok((perturb(c, h)?, perturb(c, -h)?))).collect::<Result<Vec<_>>>()?;
    gaussian_fd_fim(&base, &perturbed, samples, seed)
}

/// Brute-force FIM of `N(0, vvᵀ + diag(d²))` in the parameters `α = (d, v)`.
pub fn rank_one_fim(v: &Vector, d: &Vector, samples: usize, seed: u64) -> Result<Matrix> {
    let p = v.len();
    if d.len() != p {
        return Err(SngdError::Dimension("v and d must have equal length".into()));
    }
    let cov = |alpha: &Vector| {
        let dd = alpha.rows(0, p).map(|x| x * x);
        let vv = alpha.rows(p, p).into_owned();
        &vv * vv.transpose() + Matrix::from_diagonal(&dd)
    };
    let mut alpha = Vector::zeros(2 * p);
    alpha.rows_mut(0, p).copy_from(d);
    alpha.rows_mut(p, p).copy_from(v);
    let mu = Vector::zeros(p);
    let base = GaussParams::from_covariance(mu.clone(), &cov(&alpha))?;
    let h = SCORE_FD_STEP;
    let perturb = |c: usize, t: f64| -> Result<GaussParams> {
        let mut a = alpha.clone();
        a[c] += t;
        GaussParams::from_covariance(mu.clone(), &cov(&a))
    };
    let perturbed = (0..2 * p).map(|c| Ok((perturb(c, h)?, perturb(c, -h)?))).collect::<Result<Vec<_>>>()?;
    gaussian_fd_fim(&base, &perturbed, samples, seed)
}

/// Ratio of the smallest to the largest eigenvalue of a symmetric matrix
/// (`0` for the zero matrix).
pub fn spectrum_ratio(f: &Matrix) -> f64 {
    let ev = SymmetricEigen::new(f.clone()).eigenvalues;
    let max = ev.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = ev.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if max <= 0.0 {
        0.0
    } else {
        min / max
    }
}

/// Outcome of comparing a local FIM estimate with its block values.
#[derive(Clone, Debug, Serialize)]
pub struct FimReport {
    pub kind: String,
    pub samples: usize,
    /// Largest relative error of a diagonal entry against its block value.
    pub max_diag_rel_err: f64,
    /// Largest absolute off-diagonal entry.
    pub max_offdiag_abs: f64,
    /// Per-class diagonal means `(class, expected, estimated)`.
    pub class_means: Vec<(String, f64, f64)>,
}

impl FimReport {
    /// Diagonal entries within `rel_tol` and off-diagonals within `abs_tol`.
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_diag_rel_err <= rel_tol && self.max_offdiag_abs <= abs_tol
    }
}

/// Estimates the local FIM at `(0, factor)` and
/// compares it with the block values.
pub fn local_fim_report(kind: &GroupKind, factor: &StructuredFactor, samples: usize, seed: u64) -> Result<FimReport> {
    let p = factor.dim();
    let (f, labels) = local_gaussian_fim(&Vector::zeros(p), factor, samples, seed)?;
    let n = labels.len();
    let mut max_diag_rel_err: f64 = 0.0;
    let mut max_offdiag_abs: f64 = 0.0;
    let mut sums: Vec<(LocalCoord, f64, usize)> = Vec::new();
    for i in 0..n {
        let e = labels[i].expected_fim();
        max_diag_rel_err = max_diag_rel_err.max((f[(i, i)] - e).abs() / e);
        match sums.iter_mut().find(|(l, _, _)| *l == labels[i]) {
            Some(entry) => {
                entry.1 += f[(i, i)];
                entry.2 += 1;
            }
            None => sums.push((labels[i], f[(i, i)], 1)),
        }
        for j in 0..n {
            if i != j {
                max_offdiag_abs = max_offdiag_abs.max(f[(i, j)].abs());
            }
        }
    }
    Ok(FimReport {
        kind: format!("{kind:?}"),
        samples,
        max_diag_rel_err,
        max_offdiag_abs,
        class_means: sums
            .into_iter()
            .map(|(l, s, c)| (format!("{l:?}"), l.expected_fim(), s / c as f64))
            .collect(),
    })
}
