//! Verification suites run by `sngd check <suite>` and by the acceptance
//! harness. Every check compares the library against an independent
//! reference (finite differences, dense matrices, brute-force Fisher
//! estimates or a re-parameterized run) and reports one row.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::baselines::ADAM_LR_GRID;
use crate::cli::{run_bench, Method, RunConfig};
use crate::error::{Result, SngdError};
use crate::families::{
    bartlett_sample, matgauss_update, mog_mc_step, mog_negative_elbo, uef_step_euclidean, wishart_step,
    GaussianMeanPrecision, Link, LogDetTrace, MatGaussState, MoGComponent, MoGState, UEFState, WishartState,
};
use crate::fim::{local_fim_report, rank_one_fim, spectrum_ratio, unconstrained_m_fim};
use crate::gaussian::{
    det_newton_step_diagonal, det_newton_step_full, det_newton_step_structured, expansion_check, mc_vi_step,
    Estimator, GaussState, MCConfig, MAX_H_ARG_NORM,
};
use crate::groups::{c_mask, random_direction, random_factor, GroupKind, LocalDirection, StructuredFactor};
use crate::linalg::{from_rows, h_map, inv_dense, kron, mat_of, sym, vec_of, Matrix, Vector};
use crate::objectives::{
    check_oracles, dixon_price, mlp_objective, quadratic, rosenbrock, student_t_mixture_target, Activation,
    CountingObjective, LinearPullback, MixtureComponent, MlpSpec, Objective, StudentTMixture,
};

/// Names accepted by [`run_suite`].
pub const SUITES: [&str; 7] = ["oracles", "groups", "fim", "invariance", "expansion", "families", "benchmark"];

/// Samples for the local-FIM block check.
pub const FIM_SAMPLES: usize = 2_000_000;

/// One line of a suite report.
#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckRow {
    fn new(suite: &str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckRow { suite: suite.into(), name: name.into(), passed, detail: detail.into() }
    }
}

/// Runs a named suite.
pub fn run_suite(name: &str) -> Result<Vec<CheckRow>> {
    match name {
        "oracles" => Ok(oracle_suite()),
        "groups" => group_suite(1000),
        "fim" => {
            let mut rows = fim_block_suite(FIM_SAMPLES)?;
            rows.extend(singularity_suite()?);
            Ok(rows)
        }
        "invariance" => {
            let mut rows = invariance_suite()?;
            rows.extend(structured_equivalence_suite()?);
            rows.extend(reduction_suite()?);
            Ok(rows)
        }
        "expansion" => expansion_suite(),
        "families" => family_suite(),
        "benchmark" => benchmark_suite(),
        other => Err(SngdError::Config(format!("unknown suite {other:?}; expected one of {}", SUITES.join(", ")))),
    }
}

/// Fixed-width pass/fail table.
pub fn format_table(rows: &[CheckRow]) -> String {
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<10} {:<w$} {:<6} detail\n", "suite", "check", "result");
    for r in rows {
        let status = if r.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{:<10} {:<w$} {:<6} {}\n", r.suite, r.name, status, r.detail));
    }
    out
}

pub fn all_passed(rows: &[CheckRow]) -> bool {
    !rows.is_empty() && rows.iter().all(|r| r.passed)
}

// ---------------------------------------------------------------------------
// Objective oracles.
// ---------------------------------------------------------------------------

/// The two-component Gaussian mixture used by the mixture checks and
/// benchmarks.
pub fn two_gaussian_target() -> Result<StudentTMixture> {
    student_t_mixture_target(
        &[
            MixtureComponent { weight: 1.0, mean: vec![-2.0, 0.0], scale: vec![vec![0.5, 0.0], vec![0.0, 0.5]], dof: None },
            MixtureComponent { weight: 1.0, mean: vec![2.0, 1.0], scale: vec![vec![0.4, 0.1], vec![0.1, 0.3]], dof: None },
        ],
        2,
    )
}

/// A small tanh network on a fixed synthetic regression set.
pub fn small_mlp(seed: u64) -> Result<crate::objectives::Mlp> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = 40;
    let x = Matrix::from_fn(3, n, |_, _| rng.random_range(-1.0..1.0));
    let y = Matrix::from_fn(1, n, |_, j| (x[(0, j)] - 0.5 * x[(1, j)]).sin() + 0.3 * x[(2, j)]);
    mlp_objective(MlpSpec { layers: vec![3, 8, 1], activation: Activation::Tanh, x, y, l2_weight: 1e-2 })
}

/// Finite-difference verification of every objective family.
pub fn oracle_suite() -> Vec<CheckRow> {
    let suite = "oracles";
    let mut rows = Vec::new();
    let mut push = |name: &str, obj: Result<Box<dyn Objective>>, scale: f64, tol: f64| match obj {
        Ok(obj) => {
            let rep = check_oracles(obj.as_ref(), 5, &Vector::zeros(obj.dim()), scale, 1);
            rows.push(CheckRow::new(
                suite,
                name,
                rep.passes(tol),
                format!("max rel err {:.2e} (tol {tol:.0e})", rep.max_err()),
            ));
        }
        Err(e) => rows.push(CheckRow::new(suite, name, false, e.to_string())),
    };
    let boxed = |o: Result<Box<dyn Objective>>| o;
    push("rosenbrock p=2", boxed(rosenbrock(2).map(|o| Box::new(o) as _)), 1.0, 1e-5);
    push("rosenbrock p=200", boxed(rosenbrock(200).map(|o| Box::new(o) as _)), 1.0, 1e-5);
    push("dixon-price p=20", boxed(dixon_price(20).map(|o| Box::new(o) as _)), 1.0, 1e-5);
    let h = {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = Matrix::from_fn(6, 6, |_, _| StandardNormal.sample(&mut rng));
        &a * a.transpose() + Matrix::identity(6, 6)
    };
    push("quadratic p=6", boxed(quadratic(h, Vector::from_element(6, 1.0)).map(|o| Box::new(o) as _)), 1.0, 1e-5);
    let st = student_t_mixture_target(
        &[
            MixtureComponent { weight: 1.0, mean: vec![-1.0, 0.5], scale: vec![vec![1.0, 0.2], vec![0.2, 0.5]], dof: Some(3.0) },
            MixtureComponent { weight: 2.0, mean: vec![1.0, -0.5], scale: vec![vec![0.6, 0.0], vec![0.0, 0.9]], dof: None },
        ],
        2,
    );
    push("student-t mixture", boxed(st.map(|o| Box::new(o) as _)), 2.0, 1e-5);
    push("mlp 3-8-1", boxed(small_mlp(3).map(|o| Box::new(o) as _)), 0.7, 1e-4);
    rows
}

// ---------------------------------------------------------------------------
// Group properties.
// ---------------------------------------------------------------------------

fn random_kind<R: Rng>(rng: &mut R, family: usize) -> GroupKind {
    let p = rng.random_range(2..=16);
    match family {
        0 => GroupKind::BlockUpper { p, k: rng.random_range(0..=p) },
        1 => GroupKind::BlockLower { p, k: rng.random_range(0..=p) },
        _ => {
            let k1 = rng.random_range(1..p);
            let k2 = rng.random_range(1..=p - k1);
            if family == 2 {
                GroupKind::HeisUpper { p, k1, k2 }
            } else {
                GroupKind::HeisLower { p, k1, k2 }
            }
        }
    }
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// `trials` random closure / inverse / `h`-membership checks per kind, each
/// compared with the dense product, inverse and `B h(M)`.
pub fn group_suite(trials: usize) -> Result<Vec<CheckRow>> {
    let names = ["BlockUpper", "BlockLower", "HeisUpper", "HeisLower"];
    let mut rows = Vec::new();
    for (family, name) in names.iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(100 + family as u64);
        let mut failures = Vec::new();
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let kind = random_kind(&mut rng, family);
            let a = random_factor(&kind, &mut rng)?;
            let b = random_factor(&kind, &mut rng)?;
            let (ad, bd) = (a.densify(), b.densify());
            let prod = a.multiply(&b)?;
            let inv = a.inverse()?;
            let m = random_direction(&kind, &mut rng, 0.5)?;
            let moved = a.apply_h(&m)?;
            let errs = [
                rel(&prod.densify(), &(&ad * &bd)),
                rel(&inv.densify(), &inv_dense(&ad)?),
                rel(&(&inv.densify() * &ad), &Matrix::identity(kind.dim(), kind.dim())),
                rel(&moved.densify(), &(&ad * h_map(&m.densify())?)),
            ];
            let members = [prod.membership_check(), inv.membership_check(), moved.membership_check()];
            let err = errs.iter().cloned().fold(0.0, f64::max);
            worst = worst.max(err);
            if err > 1e-10 || members.iter().any(|m| !m.passed()) {
                failures.push(format!("trial {trial} {kind:?}: err {err:.2e}"));
            }
        }
        rows.push(CheckRow::new(
            "groups",
            format!("{name} closure/inverse/h"),
            failures.is_empty(),
            match failures.first() {
                None => format!("{trials} trials, worst dense mismatch {worst:.2e}"),
                Some(f) => format!("{} failures, first: {f}", failures.len()),
            },
        ));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Fisher information.
// ---------------------------------------------------------------------------

/// Local FIM at `η = 0` against the block values. `B_up(3, 1)` has a 1×1
/// dense corner, so it carries no symmetric off-diagonal coordinate; the
/// full group `B_up(3, 3)` is checked as well to cover the value 4.
pub fn fim_block_suite(samples: usize) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (label, kind, seed) in [
        ("B_up(3,1)", GroupKind::BlockUpper { p: 3, k: 1 }, 21),
        ("B_up(3,3)", GroupKind::BlockUpper { p: 3, k: 3 }, 22),
    ] {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let f = random_factor(&kind, &mut rng)?;
        let rep = local_fim_report(&kind, &f, samples, seed + 10)?;
        let means =
            rep.class_means.iter().map(|(c, e, m)| format!("{c}: {m:.3} (want {e})")).collect::<Vec<_>>().join("; ");
        rows.push(CheckRow::new(
            "fim",
            format!("{label} diagonal blocks"),
            rep.max_diag_rel_err <= 0.05,
            format!("max rel err {:.3} over {samples} samples; {means}", rep.max_diag_rel_err),
        ));
        rows.push(CheckRow::new(
            "fim",
            format!("{label} off-diagonal"),
            rep.max_offdiag_abs <= 0.1,
            format!("max |F_ij| {:.3}", rep.max_offdiag_abs),
        ));
    }
    Ok(rows)
}

/// The rank-one covariance example: `Σ = vvᵀ + Diag(d²)` with
/// `v = (1,0,0)`, `d = (1,1,1)`, coordinates `(d, v)`.
pub fn rank_one_reference() -> Matrix {
    let mut f = Matrix::zeros(6, 6);
    for (i, x) in [0.5, 2.0, 2.0, 0.5, 0.5, 0.5].into_iter().enumerate() {
        f[(i, i)] = x;
    }
    f[(0, 3)] = 0.5;
    f[(3, 0)] = 0.5;
    f
}

/// Singular Fisher matrices: unconstrained `M` and the rank-one covariance.
pub fn singularity_suite() -> Result<Vec<CheckRow>> {
    let b = from_rows(&[vec![1.5, 0.0, 0.0], vec![0.4, 0.8, 0.0], vec![-0.3, 0.2, 1.1]])?;
    let fm = unconstrained_m_fim(&b, 200_000, 7)?;
    let r_m = spectrum_ratio(&fm);
    let v = Vector::from_vec(vec![1.0, 0.0, 0.0]);
    let d = Vector::from_vec(vec![1.0, 1.0, 1.0]);
    let fr = rank_one_fim(&v, &d, 1_000_000, 9)?;
    let r_r = spectrum_ratio(&fr);
    let reference = rank_one_reference();
    let mut worst: f64 = 0.0;
    for i in 0..6 {
        for j in 0..6 {
            let e = reference[(i, j)];
            let err = if e != 0.0 { (fr[(i, j)] - e).abs() / e } else { fr[(i, j)].abs() / 2.0 };
            worst = worst.max(err);
        }
    }
    Ok(vec![
        CheckRow::new("fim", "unconstrained M is singular", r_m <= 1e-6, format!("λmin/λmax = {r_m:.2e}")),
        CheckRow::new("fim", "rank-one FIM is singular", r_r <= 1e-6, format!("λmin/λmax = {r_r:.2e}")),
        CheckRow::new("fim", "rank-one FIM values", worst <= 0.02, format!("max rel err {worst:.4} (zeros relative to 2)")),
    ])
}

// ---------------------------------------------------------------------------
// Invariance, equivalences and reductions.
// ---------------------------------------------------------------------------

type Stepper = fn(&GaussState, &dyn Objective) -> Result<GaussState>;

/// Runs the update on `ℓ` from `(μ₀, B₀)` and on `f(y) = ℓ(Ky)` from
/// `(K⁻¹μ₀, KᵀB₀)`; returns `max_t |ℓ(μ_t) − f(y_t)| / (1 + |ℓ(μ_t)|)`.
pub fn invariance_residual<O: Objective + Clone>(
    obj: O,
    k: &Matrix,
    st0: &GaussState,
    iters: usize,
    step: Stepper,
) -> Result<f64> {
    let pull = LinearPullback::new(obj.clone(), k.clone())?;
    let kt = StructuredFactor::from_dense(st0.factor.kind(), &k.transpose())?;
    let y0 = GaussState::new(
        k.clone().lu().solve(&st0.mu).ok_or_else(|| SngdError::Numerical("K is singular".into()))?,
        kt.multiply(&st0.factor)?,
        st0.beta,
        st0.gamma,
    )?;
    let (mut a, mut b) = (st0.clone(), y0);
    let mut worst: f64 = 0.0;
    for _ in 0..iters {
        a = step(&a, &obj)?;
        b = step(&b, &pull)?;
        let l = obj.eval(&a.mu);
        worst = worst.max((l - pull.eval(&b.mu)).abs() / (1.0 + l.abs()));
    }
    Ok(worst)
}

fn start_state(kind: &GroupKind, seed: u64, beta: f64, gamma: f64) -> Result<GaussState> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let f = random_factor(kind, &mut rng)?;
    let f = f.multiply(&StructuredFactor::scaled_identity(kind, 2.0)?)?;
    let mu = Vector::from_fn(kind.dim(), |i, _| -0.5 + 0.15 * i as f64 + 0.1 * rng.random_range(-1.0..1.0));
    GaussState::new(mu, f, beta, gamma)
}

/// Linear invariance of the full update (random `K`) and of the structured
/// `B_up(2)` update (`Kᵀ ∈ B_up(2)`), on Rosenbrock with `p = 8`.
pub fn invariance_suite() -> Result<Vec<CheckRow>> {
    let p = 8;
    let obj = rosenbrock(p)?;
    let full = GroupKind::Full { p };
    let mut rng = ChaCha20Rng::seed_from_u64(41);
    let k = random_factor(&full, &mut rng)?.densify();
    let st = start_state(&full, 42, 0.1, 1.0)?;
    let r_full = invariance_residual(obj.clone(), &k, &st, 50, det_newton_step_full)?;

    let kind = GroupKind::BlockUpper { p, k: 2 };
    let kt = random_factor(&kind, &mut rng)?.densify();
    let st = start_state(&kind, 43, 0.1, 1.0)?;
    let r_str = invariance_residual(obj, &kt.transpose(), &st, 50, det_newton_step_structured)?;
    Ok(vec![
        CheckRow::new("invariance", "full update, random K", r_full <= 1e-8, format!("max residual {r_full:.2e}")),
        CheckRow::new("invariance", "B_up(2) update, Kᵀ in B_up(2)", r_str <= 1e-8, format!("max residual {r_str:.2e}")),
    ])
}

/// Dense form of the structured step: `μ − βS⁻¹g` and
/// `B h(β C ⊙ κ(B⁻¹HB⁻ᵀ − γI))` with explicit inverses.
pub fn dense_structured_step(st: &GaussState, g: &Vector, h: &Matrix) -> Result<(Vector, Matrix)> {
    let p = st.dim();
    let b = st.factor.densify();
    let binv = inv_dense(&b)?;
    let x = &binv * h * binv.transpose() - Matrix::identity(p, p) * st.gamma;
    let dir = LocalDirection::kappa_extract(st.factor.kind(), &sym(&x))?.mask_scale(&c_mask(st.factor.kind())?)?;
    let mut beta = st.beta;
    while beta * dir.frobenius() > MAX_H_ARG_NORM {
        beta *= 0.5;
    }
    let mu = &st.mu - binv.transpose() * (&binv * g) * beta;
    Ok((mu, &b * h_map(&(dir.densify() * beta))?))
}

/// Structured step on `p = 30`, `k = 3` quadratics against the dense form,
/// with the oracle-call budget asserted.
pub fn structured_equivalence_suite() -> Result<Vec<CheckRow>> {
    let p = 30;
    let kind = GroupKind::BlockUpper { p, k: 3 };
    let mut worst: f64 = 0.0;
    let mut calls_ok = true;
    let mut calls = String::new();
    for seed in 0..3 {
        let mut rng = ChaCha20Rng::seed_from_u64(50 + seed);
        let a = Matrix::from_fn(p, p, |_, _| StandardNormal.sample(&mut rng));
        let h = &a * a.transpose() / p as f64 + Matrix::identity(p, p);
        let c = Vector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let q = CountingObjective::new(quadratic(h.clone(), c)?);
        let st = start_state(&kind, 60 + seed, 0.3, 1.0)?;
        let next = det_newton_step_structured(&st, &q)?;
        let n = q.counts();
        calls_ok &= (n.hvps, n.diags, n.grads, n.denses) == (3, 1, 1, 0);
        calls = format!("{} HVPs, {} diagonal, {} gradient, {} dense", n.hvps, n.diags, n.grads, n.denses);
        let (mu, b) = dense_structured_step(&st, &q.grad(&st.mu), &h)?;
        worst = worst.max((&next.mu - &mu).amax() / mu.amax().max(1.0)).max(rel(&next.factor.densify(), &b));
    }
    Ok(vec![
        CheckRow::new("invariance", "structured = dense (p=30, k=3)", worst <= 1e-10, format!("max rel err {worst:.2e}")),
        CheckRow::new("invariance", "oracle calls per step", calls_ok, calls),
    ])
}

fn trajectory_gap(a: &GaussState, b: &GaussState) -> f64 {
    let mu = (&a.mu - &b.mu).amax() / (1.0 + a.mu.amax());
    let f = rel(&a.factor.densify(), &b.factor.densify());
    mu.max(f)
}

/// `k = p` structured ≡ full, `k = 0` ≡ diagonal, one-component mixture ≡
/// single Gaussian, over 20 steps each.
pub fn reduction_suite() -> Result<Vec<CheckRow>> {
    let p = 6;
    let obj = rosenbrock(p)?;
    let mu0 = Vector::from_fn(p, |i, _| 0.2 * i as f64 - 0.5);
    let mut gaps = [0.0f64; 3];

    let st = GaussState::new(mu0.clone(), StructuredFactor::identity(&GroupKind::BlockUpper { p, k: p })?, 0.2, 1.0)?;
    let (mut a, mut b) = (st.clone(), st);
    for _ in 0..20 {
        a = det_newton_step_full(&a, &obj)?;
        b = det_newton_step_structured(&b, &obj)?;
        gaps[0] = gaps[0].max(trajectory_gap(&a, &b));
    }
    let st = GaussState::new(mu0.clone(), StructuredFactor::identity(&GroupKind::BlockUpper { p, k: 0 })?, 0.2, 1.0)?;
    let (mut a, mut b) = (st.clone(), st);
    for _ in 0..20 {
        a = det_newton_step_diagonal(&a, &obj)?;
        b = det_newton_step_structured(&b, &obj)?;
        gaps[1] = gaps[1].max(trajectory_gap(&a, &b));
    }
    let obj3 = rosenbrock(3)?;
    let kind = GroupKind::Full { p: 3 };
    for estimator in [Estimator::Hessian, Estimator::SteinFirstOrder] {
        let mc = MCConfig { samples: 5, seed: 8, estimator };
        let mu = Vector::from_vec(vec![-0.5, 0.2, 0.4]);
        let factor = StructuredFactor::scaled_identity(&kind, 2.0)?;
        let mut g = GaussState::new(mu.clone(), factor.clone(), 0.02, 1.0)?;
        let mut m = MoGState::new(vec![MoGComponent { mu, factor }], 0.02, 1.0)?;
        for _ in 0..20 {
            g = mc_vi_step(&g, &obj3, &mc)?;
            m = mog_mc_step(&m, &obj3, &mc)?;
            gaps[2] = gaps[2].max(trajectory_gap(&g, &m.component_state(0)));
        }
    }
    let row = |name: &str, gap: f64| CheckRow::new("invariance", name, gap <= 1e-12, format!("max rel gap {gap:.2e}"));
    Ok(vec![
        row("k=p structured = full", gaps[0]),
        row("k=0 structured = diagonal", gaps[1]),
        row("K=1 mixture = single Gaussian", gaps[2]),
    ])
}

// ---------------------------------------------------------------------------
// Expansion order.
// ---------------------------------------------------------------------------

/// Log-log slope of [`expansion_check`] over `β ∈ {1e-1, 1e-2, 1e-3}`.
pub fn expansion_slope(seed: u64) -> Result<(f64, Vec<f64>)> {
    let p = 5;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let f = random_factor(&GroupKind::Full { p }, &mut rng)?;
    let a = Matrix::from_fn(p, p, |_, _| StandardNormal.sample(&mut rng));
    let g = sym(&(&a + a.transpose()));
    let betas = [1e-1, 1e-2, 1e-3];
    let errs = betas.iter().map(|&b| expansion_check(&f, &g, b)).collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = betas.iter().map(|b| b.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    Ok((slope, errs))
}

pub fn expansion_suite() -> Result<Vec<CheckRow>> {
    (0..3)
        .map(|seed| {
            let (slope, errs) = expansion_slope(70 + seed)?;
            Ok(CheckRow::new(
                "expansion",
                format!("β³ slope, seed {seed}"),
                (2.7..=3.3).contains(&slope),
                format!("slope {slope:.3}, errors {}", errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(" ")),
            ))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Families.
// ---------------------------------------------------------------------------

/// `n > p − 1` and SPD precision over 500 Wishart steps, plus the distance of
/// the final mean to the minimizer.
pub fn wishart_invariants(steps: usize) -> Result<(bool, f64)> {
    let p = 3;
    let lambda = from_rows(&[vec![2.0, 0.3, 0.0], vec![0.3, 1.0, -0.2], vec![0.0, -0.2, 1.5]])?;
    let obj = LogDetTrace::new(lambda)?;
    let mut st = WishartState::new(0.5, StructuredFactor::identity(&GroupKind::Full { p })?, 0.1)?;
    let mut ok = true;
    for _ in 0..steps {
        st = wishart_step(&st, &obj)?;
        ok &= st.n() > (p - 1) as f64 && crate::linalg::is_spd(&st.precision());
    }
    Ok((ok, rel(&st.mean()?, &obj.minimizer())))
}

/// Relative error of the Bartlett sample mean against `E[W] = nV`.
pub fn bartlett_mean_error(draws: u64) -> Result<f64> {
    let b = from_rows(&[vec![1.2, 0.3], vec![0.0, 0.8]])?;
    let st = WishartState::new(0.7, StructuredFactor::from_dense(&GroupKind::Full { p: 2 }, &b)?, 0.1)?;
    let mut acc = Matrix::zeros(2, 2);
    for s in 0..draws {
        acc += bartlett_sample(&st, s)?;
    }
    let mean = acc / draws as f64;
    let expect = inv_dense(&st.precision())? * st.n();
    Ok(rel(&mean, &expect) * expect.amax().max(1.0) / expect.amax())
}

/// `L(μ, v) = E[¼w⁴ + ½(w − 1)²] − ½ log v` for `w ~ N(μ, v)`: gradients in
/// `(μ, v)`.
fn quartic_grads(mu: f64, v: f64) -> (f64, f64) {
    (mu.powi(3) + 3.0 * mu * v + (mu - 1.0), 1.5 * mu * mu + 1.5 * v + 0.5 - 0.5 / v)
}

/// Largest gap between the exponential-family update with links
/// (identity, exp) in `(μ, σ⁻²)` and standard NGD in `(μ, log σ)`.
pub fn uef_equivalence_gap(steps: usize) -> Result<f64> {
    let beta = 0.1;
    let (mut mu, mut ls) = (2.0f64, 0.4f64);
    let tau0 = Vector::from_vec(vec![mu, (-2.0 * ls).exp()]);
    let mut st = UEFState::from_tau(&tau0, vec![Link::Identity, Link::Exp], beta)?;
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let v = (2.0 * ls).exp();
        let (g_mu, g_v) = quartic_grads(mu, v);
        (mu, ls) = (mu - beta * v * g_mu, ls - beta * v * g_v);
        let tau = st.tau();
        let (g_mu, g_v) = quartic_grads(tau[0], 1.0 / tau[1]);
        let g_tau = Vector::from_vec(vec![g_mu, -g_v / (tau[1] * tau[1])]);
        st = uef_step_euclidean(&st, &GaussianMeanPrecision, &g_tau)?;
        let tau = st.tau();
        worst = worst.max((tau[0] - mu).abs()).max((-0.5 * tau[1].ln() - ls).abs());
    }
    Ok(worst)
}

/// Vectorized reference for one matrix-Gaussian update without momentum:
/// gradients of the vector Gaussian `N(vec E, (S_V ⊗ S_U)⁻¹)`, the chain rule
/// through `E + B⁻ᵀΔA⁻¹`, `A h(M)`, `B h(N)` on a symmetric basis, and the
/// exact Fisher blocks of `Δ`, `M` and `N` with the `M`–`N` cross block
/// dropped. Requires full factors and `c₁ = c₂ = 0`.
pub fn matgauss_dense_reference(st: &MatGaussState, grads: &[Vec<Matrix>]) -> Result<(Matrix, Matrix, Matrix)> {
    let (d, p) = st.e.shape();
    let a = st.a.densify();
    let b = st.b.densify();
    let sv = &a * a.transpose();
    let su = &b * b.transpose();
    let s = kron(&sv, &su);
    let sigma = inv_dense(&s)?;
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

    let ainv = inv_dense(&a)?;
    let binv = inv_dense(&b)?;
    let jd = kron(&ainv.transpose(), &binv.transpose());
    let delta = -(jd.transpose() * &g_mu) * st.beta;
    let e_new = &st.e + mat_of(&(&jd * delta), d, p);

    let basis = |n: usize, i: usize, j: usize| {
        let mut m = Matrix::zeros(n, n);
        m[(i, j)] = 1.0;
        m[(j, i)] = 1.0;
        m
    };
    let block = |n: usize, ds: &dyn Fn(&Matrix) -> Matrix, base: &Matrix| -> Result<Matrix> {
        let coords: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
        let dss: Vec<Matrix> = coords.iter().map(|&(i, j)| ds(&basis(n, i, j))).collect();
        let g = Vector::from_iterator(coords.len(), dss.iter().map(|dsc| -(&g_sigma * (&sigma * dsc * &sigma)).trace()));
        let f = Matrix::from_fn(coords.len(), coords.len(), |x, y| 0.5 * (&sigma * &dss[x] * &sigma * &dss[y]).trace());
        let nat = inv_dense(&f)? * g;
        let mut m = Matrix::zeros(n, n);
        for (c, &(i, j)) in coords.iter().enumerate() {
            m += basis(n, i, j) * (-st.beta * nat[c]);
        }
        Ok(base * h_map(&m)?)
    };
    // d/dt of A h(tE) h(tE)ᵀ Aᵀ at 0 is 2AEAᵀ for symmetric E.
    let a_new = block(p, &|e: &Matrix| kron(&(&a * e * a.transpose() * 2.0), &su), &a)?;
    let b_new = block(d, &|e: &Matrix| kron(&sv, &(&b * e * b.transpose() * 2.0)), &b)?;
    Ok((e_new, a_new, b_new))
}

/// Largest deviation of [`matgauss_update`] from the vectorized reference
/// over a few random `2 × 3` problems.
pub fn matgauss_oracle_gap() -> Result<f64> {
    let (d, p) = (2, 3);
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let e = Matrix::from_fn(d, p, |_, _| rng.random_range(-1.0..1.0));
        let a = random_factor(&GroupKind::Full { p }, &mut rng)?;
        let b = random_factor(&GroupKind::Full { p: d }, &mut rng)?;
        let st = MatGaussState::new(e, a, b, 0.1, 0.3, 0.7)?.with_momentum(0.0, 0.0)?;
        let grads: Vec<Vec<Matrix>> = (0..2)
            .map(|_| (0..3).map(|_| Matrix::from_fn(d, p, |_, _| rng.random_range(-1.0..1.0))).collect())
            .collect();
        let next = matgauss_update(&st, &grads)?;
        let (e, a, b) = matgauss_dense_reference(&st, &grads)?;
        worst = worst
            .max((&next.e - e).amax())
            .max((next.a.densify() - a).amax())
            .max((next.b.densify() - b).amax());
    }
    Ok(worst)
}

/// Negative-ELBO estimates (common random numbers) every 100 steps of a
/// two-component fit of [`two_gaussian_target`].
pub fn mog_fit_trace(steps: usize) -> Result<Vec<f64>> {
    let target = two_gaussian_target()?;
    let full = GroupKind::Full { p: 2 };
    let comps = vec![
        MoGComponent { mu: Vector::from_vec(vec![-0.5, 0.0]), factor: StructuredFactor::identity(&full)? },
        MoGComponent { mu: Vector::from_vec(vec![0.5, 0.3]), factor: StructuredFactor::identity(&full)? },
    ];
    let mut st = MoGState::new(comps, 0.005, 1.0)?;
    let mc = MCConfig { samples: 10, seed: 21, estimator: Estimator::Hessian };
    let mut trace = vec![mog_negative_elbo(&st, &target, 2000, 777)?];
    for it in 1..=steps {
        st = mog_mc_step(&st, &target, &mc)?;
        if it % 100 == 0 {
            trace.push(mog_negative_elbo(&st, &target, 2000, 777)?);
        }
    }
    Ok(trace)
}

/// Whether every checkpoint improves on the best value seen before it.
pub fn best_so_far_strictly_decreasing(trace: &[f64]) -> bool {
    let mut best = f64::INFINITY;
    trace.iter().all(|&v| {
        let improved = v < best;
        best = best.min(v);
        improved
    })
}

pub fn family_suite() -> Result<Vec<CheckRow>> {
    let suite = "families";
    let (ok, dist) = wishart_invariants(500)?;
    let bart = bartlett_mean_error(100_000)?;
    let uef = uef_equivalence_gap(100)?;
    let mg = matgauss_oracle_gap()?;
    let trace = mog_fit_trace(1000)?;
    Ok(vec![
        CheckRow::new(suite, "Wishart n > p-1 and SPD (500 steps)", ok, format!("final mean rel. distance to minimizer {dist:.2e}")),
        CheckRow::new(suite, "Bartlett E[W] = nV", bart <= 0.05, format!("rel err {bart:.4} over 1e5 draws")),
        CheckRow::new(suite, "UEF = NGD in (μ, log σ)", uef <= 1e-10, format!("max gap {uef:.2e} over 100 steps")),
        CheckRow::new(suite, "matrix Gaussian = dense oracle", mg <= 1e-8, format!("max gap {mg:.2e}")),
        CheckRow::new(
            suite,
            "MoG best-so-far -ELBO decreasing",
            best_so_far_strictly_decreasing(&trace),
            trace.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(" "),
        ),
    ])
}

// ---------------------------------------------------------------------------
// Benchmark ordering against grid-tuned Adam.
// ---------------------------------------------------------------------------

/// Fixed budgets and configurations of the benchmark comparison, chosen once
/// by a calibration sweep (see `benchmarks/calibration.md`).
pub const CALIBRATION_JSON: &str = include_str!("../benchmarks/calibration.json");

/// One benchmark comparison: the structured run and the Adam runs share the
/// objective, the start and the iteration budget (`structured.iters`).
#[derive(Clone, Debug, serde::Deserialize)]
pub struct BenchmarkCase {
    pub name: String,
    pub structured: RunConfig,
    /// Loss the structured method must reach within the budget.
    pub target: f64,
    /// Required factor between Adam's best loss and `target`.
    pub ratio: f64,
}

#[derive(Clone, Debug, serde::Deserialize)]
struct Calibration {
    cases: Vec<BenchmarkCase>,
}

pub fn benchmark_cases() -> Result<Vec<BenchmarkCase>> {
    let cal: Calibration = serde_json::from_str(CALIBRATION_JSON)
        .map_err(|e| SngdError::Config(format!("invalid calibration file: {e}")))?;
    for c in &cal.cases {
        c.structured.validate()?;
    }
    Ok(cal.cases)
}

/// Outcome of one comparison.
#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkOutcome {
    pub name: String,
    pub budget: usize,
    /// First iteration at which the structured run reached the target.
    pub hit: Option<usize>,
    pub structured_best: f64,
    /// Lowest loss of any grid learning rate at any iteration within budget.
    pub adam_best: f64,
    pub adam_best_lr: f64,
}

impl BenchmarkOutcome {
    pub fn passed(&self, case: &BenchmarkCase) -> bool {
        self.hit.is_some() && self.adam_best >= case.ratio * case.target
    }
}

/// Runs the structured method and Adam at every grid learning rate for the
/// same budget from the same start.
pub fn run_benchmark_case(case: &BenchmarkCase) -> Result<BenchmarkOutcome> {
    let budget = case.structured.iters;
    let trace = run_bench(&case.structured, 0).map_err(|f| f.error)?;
    let hit = trace.iter().find(|r| r.loss_mean <= case.target).map(|r| r.iter);
    let structured_best = trace.iter().map(|r| r.loss_mean).fold(f64::INFINITY, f64::min);
    let (mut adam_best, mut adam_best_lr) = (f64::INFINITY, f64::NAN);
    for lr in ADAM_LR_GRID {
        let adam = RunConfig { method: Method::Adam, lr: Some(lr), ..case.structured.clone() };
        let best = match run_bench(&adam, 0) {
            Ok(t) => t.iter().map(|r| r.loss_mean).fold(f64::INFINITY, f64::min),
            Err(f) => f.records.iter().map(|r| r.loss_mean).fold(f64::INFINITY, f64::min),
        };
        if best < adam_best {
            (adam_best, adam_best_lr) = (best, lr);
        }
    }
    Ok(BenchmarkOutcome { name: case.name.clone(), budget, hit, structured_best, adam_best, adam_best_lr })
}

pub fn benchmark_suite() -> Result<Vec<CheckRow>> {
    let suite = "benchmark";
    let mut rows = Vec::new();
    for case in benchmark_cases()? {
        let out = run_benchmark_case(&case)?;
        rows.push(CheckRow::new(
            suite,
            format!("{} {:?} vs grid-tuned Adam", out.name, case.structured.method),
            out.passed(&case),
            format!(
                "budget {}: structured reaches {:.0e} at iter {} (best {:.1e}); Adam best {:.2e} (lr {})",
                out.budget,
                case.target,
                out.hit.map_or("-".to_string(), |h| h.to_string()),
                out.structured_best,
                out.adam_best,
                out.adam_best_lr
            ),
        ));
    }
    Ok(rows)
}

/// Wall-clock helper for reports.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_a_config_error() {
        assert!(matches!(run_suite("nope"), Err(SngdError::Config(_))));
    }

    #[test]
    fn table_lists_every_row() {
        let rows = vec![CheckRow::new("s", "a", true, "x"), CheckRow::new("s", "b", false, "y")];
        let t = format_table(&rows);
        assert!(t.contains("PASS") && t.contains("FAIL"));
        assert!(!all_passed(&rows));
        assert!(!all_passed(&[]));
    }

    #[test]
    fn best_so_far_examples() {
        assert!(best_so_far_strictly_decreasing(&[3.0, 2.0, 1.0]));
        assert!(!best_so_far_strictly_decreasing(&[3.0, 2.0, 2.5, 1.0]));
    }

    #[test]
    fn quick_suites_pass() {
        for rows in [oracle_suite(), group_suite(50).unwrap(), expansion_suite().unwrap(), invariance_suite().unwrap()] {
            assert!(all_passed(&rows), "{}", format_table(&rows));
        }
        let rows = structured_equivalence_suite().unwrap();
        assert!(all_passed(&rows), "{}", format_table(&rows));
        let rows = reduction_suite().unwrap();
        assert!(all_passed(&rows), "{}", format_table(&rows));
    }

    #[test]
    fn family_references() {
        assert!(matgauss_oracle_gap().unwrap() <= 1e-8);
        assert!(uef_equivalence_gap(100).unwrap() <= 1e-10);
        let (ok, dist) = wishart_invariants(500).unwrap();
        assert!(ok && dist < 1e-6, "{dist}");
    }
}
