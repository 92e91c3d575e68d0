//! The `sngd` command line: benchmark runs with CSV traces, static SVG loss
//! plots and the verification suites.
//!
//! ```text
//! sngd bench --config run.json [--seed N] [--out trace.csv]
//! sngd check <oracles|groups|fim|invariance|expansion|families|benchmark>
//! sngd plot a.csv b.csv --out fig.svg
//! ```
//!
//! Exit codes: 0 success, 1 a check suite failed, 2 invalid input
//! (configuration, CSV, unknown suite), 3 numerical failure during a run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::{adam_grid_search, adam_step, AdamState, ADAM_LR_GRID};
use crate::checks::{all_passed, format_table, run_suite};
use crate::error::{Result, SngdError};
use crate::families::{
    matgauss_gn_step, matgauss_mean_vector, mog_mc_step, uef_step, wishart_step, GaussianMeanPrecision,
    Link, LogDetTrace, MatGaussConfig, MatGaussState, MoGComponent, MoGState, SpdObjective, UEFState, UefFamily,
    WishartState,
};
use crate::gaussian::{
    det_newton_step_full, det_newton_step_structured, mc_vi_step, Estimator, GaussState, MCConfig,
};
use crate::groups::{GroupKind, StructuredFactor};
use crate::linalg::{from_rows, sym, Matrix, Vector};
use crate::objectives::{
    check_oracles, dixon_price, mlp_objective, quadratic, rosenbrock, rosenbrock_literal, student_t_mixture_target,
    Activation, Mlp, MixtureComponent, MlpSpec, Objective,
};

/// Header of every trace file.
pub const CSV_HEADER: &str = "iter,loss_mean,grad_norm,elapsed_ms";

/// Environment variable consulted when neither `--seed` nor the config sets
/// a seed.
pub const SEED_ENV: &str = "SNGD_SEED";

/// Tolerance of the pre-run oracle check (relative FD error).
pub const ORACLE_TOL: f64 = 1e-4;

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

/// Objective section of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    Rosenbrock {
        p: usize,
        /// Use `100(w_{i+1} − w_i)²` instead of the standard inner square.
        #[serde(default)]
        literal: bool,
    },
    DixonPrice {
        p: usize,
    },
    /// `½wᵀHw − cᵀw` with `H = diag` of eigenvalues log-spaced in `[1, cond]`
    /// and `c = 1`.
    Quadratic {
        p: usize,
        #[serde(default = "one")]
        cond: f64,
    },
    StudentTMixture {
        dim: usize,
        components: Vec<MixtureComponent>,
    },
    /// Tanh network on a synthetic regression set drawn from `data_seed`.
    Mlp {
        layers: Vec<usize>,
        examples: usize,
        #[serde(default)]
        data_seed: u64,
        #[serde(default = "default_l2")]
        l2_weight: f64,
    },
    /// `Tr(ΛZ) − log det Z` over SPD `Z` (for the Wishart method).
    LogDetTrace {
        lambda: Vec<Vec<f64>>,
    },
}

fn one() -> f64 {
    1.0
}

fn default_l2() -> f64 {
    1e-2
}

fn default_beta() -> f64 {
    0.1
}

fn default_iters() -> usize {
    100
}

fn default_samples() -> usize {
    10
}

fn default_components() -> usize {
    2
}

/// Optimizers selectable with `method`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FullNewton,
    TriUp,
    TriLow,
    HsUp,
    HsLow,
    McVi,
    Adam,
    Wishart,
    Mog,
    Uef,
    Matgauss,
}

/// Factor structure for the Monte-Carlo methods (`mc-vi`, `mog`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    #[default]
    Full,
    Diagonal,
    TriUp,
    TriLow,
    HsUp,
    HsLow,
}

/// Initial point overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Starting mean; defaults to the objective's standard start.
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    /// Initial precision factor `c·I` (default 1).
    #[serde(default)]
    pub scale: Option<f64>,
}

/// A complete benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub objective: ObjectiveConfig,
    pub method: Method,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub k1: Option<usize>,
    #[serde(default)]
    pub k2: Option<usize>,
    #[serde(default)]
    pub structure: Structure,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub estimator: Option<Estimator>,
    /// Mixture components for `mog`.
    #[serde(default = "default_components")]
    pub components: usize,
    /// Adam learning rate; when absent the grid is searched first.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| SngdError::Config(format!("invalid run configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Method/objective/structure compatibility and parameter ranges.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SngdError::Config(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if self.iters == 0 {
            return bad("iters must be at least 1".into());
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("lr must be positive, got {lr}"));
            }
        }
        if let Some(s) = self.init.scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("init.scale must be positive, got {s}"));
            }
        }
        let spd = matches!(self.objective, ObjectiveConfig::LogDetTrace { .. });
        let mlp = matches!(self.objective, ObjectiveConfig::Mlp { .. });
        match self.method {
            Method::Wishart if !spd => return bad("method wishart needs the log-det-trace objective".into()),
            Method::Matgauss if !mlp => return bad("method matgauss needs the mlp objective".into()),
            Method::Wishart | Method::Matgauss => {}
            m if spd => return bad(format!("objective log-det-trace is only available to wishart, not {m:?}")),
            _ => {}
        }
        if self.method == Method::Mog && self.components == 0 {
            return bad("mog needs at least one component".into());
        }
        if let Some(mu) = &self.init.mu {
            if let Some(p) = self.objective_dim() {
                if mu.len() != p {
                    return bad(format!("init.mu has length {}, objective dimension is {p}", mu.len()));
                }
            }
        }
        if let Some(p) = self.objective_dim() {
            if let Some(kind) = self.group_kind(p)? {
                kind.canonical()?;
            }
        }
        Ok(())
    }

    fn objective_dim(&self) -> Option<usize> {
        match &self.objective {
            ObjectiveConfig::Rosenbrock { p, .. }
            | ObjectiveConfig::DixonPrice { p }
            | ObjectiveConfig::Quadratic { p, .. } => Some(*p),
            ObjectiveConfig::StudentTMixture { dim, .. } => Some(*dim),
            ObjectiveConfig::Mlp { layers, .. } => Some(layers.windows(2).map(|w| w[0] * w[1]).sum()),
            ObjectiveConfig::LogDetTrace { .. } => None,
        }
    }

    fn need(&self, v: Option<usize>, name: &str) -> Result<usize> {
        v.ok_or_else(|| SngdError::Config(format!("method {:?} needs `{name}`", self.method)))
    }

    /// Factor kind for the Gaussian methods (`None` for the others).
    pub fn group_kind(&self, p: usize) -> Result<Option<GroupKind>> {
        let from_structure = |s: Structure| -> Result<GroupKind> {
            Ok(match s {
                Structure::Full => GroupKind::Full { p },
                Structure::Diagonal => GroupKind::Diagonal { p },
                Structure::TriUp => GroupKind::BlockUpper { p, k: self.need(self.k, "k")? },
                Structure::TriLow => GroupKind::BlockLower { p, k: self.need(self.k, "k")? },
                Structure::HsUp => GroupKind::HeisUpper { p, k1: self.need(self.k1, "k1")?, k2: self.need(self.k2, "k2")? },
                Structure::HsLow => GroupKind::HeisLower { p, k1: self.need(self.k1, "k1")?, k2: self.need(self.k2, "k2")? },
            })
        };
        Ok(Some(match self.method {
            Method::FullNewton => GroupKind::Full { p },
            Method::TriUp => from_structure(Structure::TriUp)?,
            Method::TriLow => from_structure(Structure::TriLow)?,
            Method::HsUp => from_structure(Structure::HsUp)?,
            Method::HsLow => from_structure(Structure::HsLow)?,
            Method::McVi | Method::Mog => from_structure(self.structure)?,
            _ => return Ok(None),
        }))
    }
}

// ---------------------------------------------------------------------------
// Objectives and starting points.
// ---------------------------------------------------------------------------

enum Problem {
    Vector(Box<dyn Objective>),
    Mlp(Mlp),
    Spd(LogDetTrace),
}

fn build_problem(cfg: &ObjectiveConfig) -> Result<Problem> {
    Ok(match cfg {
        ObjectiveConfig::Rosenbrock { p, literal } => {
            Problem::Vector(if *literal { Box::new(rosenbrock_literal(*p)?) } else { Box::new(rosenbrock(*p)?) })
        }
        ObjectiveConfig::DixonPrice { p } => Problem::Vector(Box::new(dixon_price(*p)?)),
        ObjectiveConfig::Quadratic { p, cond } => {
            if *p == 0 || !(*cond >= 1.0) {
                return Err(SngdError::Config("quadratic needs p >= 1 and cond >= 1".into()));
            }
            let eig = Vector::from_fn(*p, |i, _| {
                if *p == 1 {
                    1.0
                } else {
                    cond.powf(i as f64 / (*p - 1) as f64)
                }
            });
            Problem::Vector(Box::new(quadratic(Matrix::from_diagonal(&eig), Vector::from_element(*p, 1.0))?))
        }
        ObjectiveConfig::StudentTMixture { dim, components } => {
            Problem::Vector(Box::new(student_t_mixture_target(components, *dim)?))
        }
        ObjectiveConfig::Mlp { layers, examples, data_seed, l2_weight } => {
            if layers.len() < 2 || *examples == 0 {
                return Err(SngdError::Config("mlp needs at least two layers and one example".into()));
            }
            let mut rng = ChaCha20Rng::seed_from_u64(*data_seed);
            let (d_in, d_out) = (layers[0], *layers.last().unwrap());
            let x = Matrix::from_fn(d_in, *examples, |_, _| rng.random_range(-1.0..1.0));
            let proj = Matrix::from_fn(d_out, d_in, |_, _| StandardNormal.sample(&mut rng));
            let y = (&proj * &x).map(|v: f64| v.sin());
            Problem::Mlp(mlp_objective(MlpSpec {
                layers: layers.clone(),
                activation: Activation::Tanh,
                x,
                y,
                l2_weight: *l2_weight,
            })?)
        }
        ObjectiveConfig::LogDetTrace { lambda } => Problem::Spd(LogDetTrace::new(from_rows(lambda)?)?),
    })
}

/// Default starting point: the origin for Rosenbrock (the alternating
/// `(−1.2, 1, …)` start leads Newton-like methods into the local minimum
/// near `(−1, 1, …, 1)`), all-ones for Dixon-Price and the quadratic, zeros
/// for the mixture, and a seeded uniform draw in `±0.5` for network weights.
fn default_start(cfg: &ObjectiveConfig, p: usize, seed: u64) -> Vector {
    match cfg {
        ObjectiveConfig::DixonPrice { .. } | ObjectiveConfig::Quadratic { .. } => Vector::from_element(p, 1.0),
        ObjectiveConfig::Rosenbrock { .. } | ObjectiveConfig::StudentTMixture { .. } | ObjectiveConfig::LogDetTrace { .. } => {
            Vector::zeros(p)
        }
        ObjectiveConfig::Mlp { .. } => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
            Vector::from_fn(p, |_, _| rng.random_range(-0.5..0.5))
        }
    }
}

/// FD check of an SPD objective's gradient along random symmetric
/// directions at a few random SPD points.
fn check_spd_oracle(obj: &dyn SpdObjective, seed: u64) -> Result<f64> {
    let p = obj.dim();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let a = Matrix::from_fn(p, p, |_, _| StandardNormal.sample(&mut rng));
        let z = &a * a.transpose() / p as f64 + Matrix::identity(p, p);
        let d = sym(&Matrix::from_fn(p, p, |_, _| StandardNormal.sample(&mut rng)));
        let h = 1e-5;
        let fd = (obj.eval(&(&z + &d * h))? - obj.eval(&(&z - &d * h))?) / (2.0 * h);
        let an = obj.grad(&z)?.dot(&d);
        worst = worst.max((fd - an).abs() / an.abs().max(1.0));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Runner.
// ---------------------------------------------------------------------------

/// One row of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub loss_mean: f64,
    pub grad_norm: f64,
    pub elapsed_ms: f64,
}

/// Failure in the middle of a run, with the last good state.
#[derive(Debug)]
pub struct RunFailure {
    pub error: SngdError,
    pub records: Vec<TraceRecord>,
    /// JSON checkpoint of the last good state.
    pub checkpoint: String,
}

/// State of any method, for checkpoints.
enum RunState {
    Gauss(GaussState),
    Adam(AdamState),
    Wishart(WishartState),
    Mog(MoGState),
    Uef(UEFState),
    MatGauss(Vec<MatGaussState>),
}

impl RunState {
    fn checkpoint(&self) -> String {
        let r = match self {
            RunState::Gauss(s) => s.to_checkpoint_json(),
            RunState::Adam(s) => serde_json::to_string_pretty(s).map_err(Into::into),
            RunState::Wishart(s) => s.to_checkpoint_json(),
            RunState::Mog(s) => s.to_checkpoint_json(),
            RunState::Uef(s) => serde_json::to_string_pretty(s).map_err(Into::into),
            RunState::MatGauss(s) => serde_json::to_string_pretty(s).map_err(Into::into),
        };
        r.unwrap_or_else(|e| format!("{{\"error\": \"{e}\"}}"))
    }
}

/// Resolved seed: flag, then config, then `SNGD_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, cfg: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(cfg) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| SngdError::Config(format!("{SEED_ENV}={v:?} is not an integer"))),
        Err(_) => Ok(0),
    }
}

/// Runs the oracle check for the configured objective; errors if it fails.
pub fn preflight(cfg: &RunConfig, seed: u64) -> Result<()> {
    let (name, err) = match build_problem(&cfg.objective)? {
        Problem::Vector(obj) => {
            let p = obj.dim();
            let center = default_start(&cfg.objective, p, seed);
            let rep = check_oracles(obj.as_ref(), 3, &center, 0.5, seed);
            (obj.name(), rep.max_err())
        }
        Problem::Mlp(m) => {
            let rep = check_oracles(&m, 2, &Vector::zeros(m.dim()), 0.5, seed);
            (m.name(), rep.max_err())
        }
        Problem::Spd(o) => (o.name(), check_spd_oracle(&o, seed)?),
    };
    if err > ORACLE_TOL {
        return Err(SngdError::Config(format!(
            "oracle check failed for {name}: max relative FD error {err:.2e} > {ORACLE_TOL:.0e}"
        )));
    }
    info!("oracle check passed for {name} (max rel err {err:.2e})");
    Ok(())
}

/// Mean-field Gaussian driven by the exponential-family update: one
/// `(μᵢ, sᵢ = σᵢ⁻²)` pair per coordinate with links (identity, softplus).
/// Expectations are taken at the mean (`E[∇ℓ] ≈ ∇ℓ(μ)`, `E[∇²ℓ] ≈ ∇²ℓ(μ)`),
/// so the precision of a coordinate tracks `∂²ℓ/∂wᵢ² / γ`; where that is
/// negative the precision collapses and the run stops with a numerical error.
fn uef_mean_field_step(st: &UEFState, obj: &dyn Objective, gamma: f64) -> Result<UEFState> {
    let tau = st.tau();
    let p = tau.len() / 2;
    let mu = Vector::from_fn(p, |i, _| tau[2 * i]);
    let g = obj.grad(&mu);
    let hd = obj
        .hess_diag(&mu)
        .ok_or_else(|| SngdError::Capability(format!("{} has no Hessian-diagonal oracle", obj.name())))?;
    let mut ghat = Vector::zeros(2 * p);
    for i in 0..p {
        let s = tau[2 * i + 1];
        // ∂/∂v of E[ℓ] − γ·½ log v is ½H_ii − γ/(2v); ∂v/∂s = −1/s².
        let g_v = 0.5 * hd[i] - 0.5 * gamma * s;
        let pair = Vector::from_vec(vec![mu[i], s]);
        let nat = GaussianMeanPrecision.natural_grad(&pair, &Vector::from_vec(vec![g[i], -g_v / (s * s)]))?;
        ghat[2 * i] = nat[0];
        ghat[2 * i + 1] = nat[1];
    }
    uef_step(st, &ghat)
}

/// Executes a configuration and returns one record per iteration.
pub fn run_bench(cfg: &RunConfig, seed: u64) -> std::result::Result<Vec<TraceRecord>, RunFailure> {
    let early = |error: SngdError| RunFailure { error, records: Vec::new(), checkpoint: String::new() };
    cfg.validate().map_err(early)?;
    let problem = build_problem(&cfg.objective).map_err(early)?;
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.iters);
    let scale = cfg.init.scale.unwrap_or(1.0);

    macro_rules! run_loop {
        ($state:expr, $step:expr, $eval:expr, $wrap:expr) => {{
            let mut state = $state;
            for iter in 1..=cfg.iters {
                match $step(&state) {
                    Ok(next) => state = next,
                    Err(error) => {
                        return Err(RunFailure { error, records, checkpoint: $wrap(state).checkpoint() });
                    }
                }
                let (loss_mean, grad_norm): (f64, f64) = $eval(&state);
                if !loss_mean.is_finite() {
                    let error = SngdError::Numerical(format!("loss became non-finite at iteration {iter}"));
                    return Err(RunFailure { error, records, checkpoint: $wrap(state).checkpoint() });
                }
                records.push(TraceRecord { iter, loss_mean, grad_norm, elapsed_ms: start.elapsed().as_secs_f64() * 1e3 });
            }
            Ok(records)
        }};
    }

    match problem {
        Problem::Spd(obj) => {
            let p = obj.dim();
            let factor = StructuredFactor::scaled_identity(&GroupKind::Full { p }, scale).map_err(early)?;
            let st = WishartState::new(0.0, factor, cfg.beta).map_err(early)?;
            let eval = |s: &WishartState| match s.mean() {
                Ok(z) => (obj.eval(&z).unwrap_or(f64::NAN), obj.grad(&z).map(|g| g.norm()).unwrap_or(f64::NAN)),
                Err(_) => (f64::NAN, f64::NAN),
            };
            run_loop!(st, |s: &WishartState| wishart_step(s, &obj), eval, RunState::Wishart)
        }
        Problem::Mlp(mlp) => {
            let p = mlp.dim();
            let mu0 = cfg.init.mu.as_ref().map(|m| Vector::from_vec(m.clone())).unwrap_or_else(|| default_start(&cfg.objective, p, seed));
            let eval = |w: &Vector| (mlp.eval(w), mlp.grad(w).norm());
            match cfg.method {
                Method::Matgauss => {
                    let ws = mlp.unflatten(&mu0).map_err(early)?;
                    let alpha = mlp.spec().l2_weight;
                    let layers = ws
                        .into_iter()
                        .map(|e| {
                            let (d, q) = e.shape();
                            let a = StructuredFactor::scaled_identity(&GroupKind::Full { p: q }, scale)?;
                            let b = StructuredFactor::scaled_identity(&GroupKind::Full { p: d }, scale)?;
                            MatGaussState::new(e, a, b, cfg.beta, alpha, cfg.gamma)
                        })
                        .collect::<Result<Vec<_>>>()
                        .map_err(early)?;
                    let mc = MatGaussConfig { samples: cfg.mc_samples, seed, per_example: true };
                    run_loop!(
                        layers,
                        |l: &Vec<MatGaussState>| matgauss_gn_step(l, &mlp, &mc),
                        |l: &Vec<MatGaussState>| eval(&matgauss_mean_vector(l, &mlp)),
                        RunState::MatGauss
                    )
                }
                _ => run_vector(cfg, &mlp, mu0, seed, start, records),
            }
        }
        Problem::Vector(obj) => {
            let p = obj.dim();
            let mu0 = match &cfg.init.mu {
                Some(m) => Vector::from_vec(m.clone()),
                None => default_start(&cfg.objective, p, seed),
            };
            run_vector(cfg, obj.as_ref(), mu0, seed, start, records)
        }
    }
}

fn run_vector(
    cfg: &RunConfig,
    obj: &dyn Objective,
    mu0: Vector,
    seed: u64,
    start: Instant,
    mut records: Vec<TraceRecord>,
) -> std::result::Result<Vec<TraceRecord>, RunFailure> {
    let early = |error: SngdError| RunFailure { error, records: Vec::new(), checkpoint: String::new() };
    let p = obj.dim();
    let scale = cfg.init.scale.unwrap_or(1.0);
    let eval = |w: &Vector| (obj.eval(w), obj.grad(w).norm());

    macro_rules! run_loop {
        ($state:expr, $step:expr, $eval:expr, $wrap:expr) => {{
            let mut state = $state;
            for iter in 1..=cfg.iters {
                match $step(&state) {
                    Ok(next) => state = next,
                    Err(error) => {
                        return Err(RunFailure { error, records, checkpoint: $wrap(state).checkpoint() });
                    }
                }
                let (loss_mean, grad_norm): (f64, f64) = $eval(&state);
                if !loss_mean.is_finite() {
                    let error = SngdError::Numerical(format!("loss became non-finite at iteration {iter}"));
                    return Err(RunFailure { error, records, checkpoint: $wrap(state).checkpoint() });
                }
                records.push(TraceRecord { iter, loss_mean, grad_norm, elapsed_ms: start.elapsed().as_secs_f64() * 1e3 });
            }
            Ok(records)
        }};
    }

    match cfg.method {
        Method::Adam => {
            let lr = match cfg.lr {
                Some(lr) => lr,
                None => {
                    let (lr, points) = adam_grid_search(obj, &mu0, cfg.iters, &ADAM_LR_GRID).map_err(early)?;
                    info!("adam grid search: {points:?}; using lr = {lr}");
                    lr
                }
            };
            let st = AdamState::new(mu0).with_lr(lr);
            run_loop!(st, |s: &AdamState| adam_step(s, &obj.grad(&s.params)), |s: &AdamState| eval(&s.params), RunState::Adam)
        }
        Method::Uef => {
            let s0 = scale * scale;
            let lambda = Vector::from_fn(2 * p, |i, _| if i % 2 == 0 { mu0[i / 2] } else { s0 });
            let links = (0..2 * p).map(|i| if i % 2 == 0 { Link::Identity } else { Link::Softplus }).collect();
            let st = UEFState::from_tau(&lambda, links, cfg.beta).map_err(early)?;
            let mean = |s: &UEFState| {
                let t = s.tau();
                Vector::from_fn(p, |i, _| t[2 * i])
            };
            run_loop!(st, |s: &UEFState| uef_mean_field_step(s, obj, cfg.gamma), |s: &UEFState| eval(&mean(s)), RunState::Uef)
        }
        Method::Mog => {
            let kind = cfg.group_kind(p).map_err(early)?.expect("gaussian method");
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6d6f67);
            let comps = (0..cfg.components)
                .map(|_| {
                    let jitter = Vector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
                    Ok(MoGComponent { mu: &mu0 + jitter, factor: StructuredFactor::scaled_identity(&kind, scale)? })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(early)?;
            let st = MoGState::new(comps, cfg.beta, cfg.gamma).map_err(early)?;
            let mc = MCConfig { samples: cfg.mc_samples, seed, estimator: cfg.estimator.unwrap_or(Estimator::Hessian) };
            let eval_mog = |s: &MoGState| {
                let w = s.weight();
                s.components.iter().fold((0.0, 0.0), |(l, g), c| {
                    let (lc, gc) = eval(&c.mu);
                    (l + w * lc, g + w * gc)
                })
            };
            run_loop!(st, |s: &MoGState| mog_mc_step(s, obj, &mc), eval_mog, RunState::Mog)
        }
        Method::Wishart | Method::Matgauss => Err(early(SngdError::Config(format!(
            "method {:?} is not available for objective {}",
            cfg.method,
            obj.name()
        )))),
        method => {
            let kind = cfg.group_kind(p).map_err(early)?.expect("gaussian method");
            let factor = StructuredFactor::scaled_identity(&kind, scale).map_err(early)?;
            let st = GaussState::new(mu0, factor, cfg.beta, cfg.gamma).map_err(early)?;
            let mc = MCConfig { samples: cfg.mc_samples, seed, estimator: cfg.estimator.unwrap_or(Estimator::Hessian) };
            let step = |s: &GaussState| match method {
                Method::FullNewton => det_newton_step_full(s, obj),
                Method::McVi => mc_vi_step(s, obj, &mc),
                _ => det_newton_step_structured(s, obj),
            };
            run_loop!(st, step, |s: &GaussState| eval(&s.mu), RunState::Gauss)
        }
    }
}

// ---------------------------------------------------------------------------
// CSV.
// ---------------------------------------------------------------------------

/// Writes a trace with the fixed header.
pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(io_err)?;
    w.write_record(CSV_HEADER.split(',')).map_err(io_err)?;
    for r in records {
        w.write_record([r.iter.to_string(), r.loss_mean.to_string(), r.grad_norm.to_string(), r.elapsed_ms.to_string()])
            .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn io_err(e: csv::Error) -> SngdError {
    SngdError::Io(std::io::Error::other(e.to_string()))
}

/// Reads a trace; the header must match and there must be at least one row.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| {
        SngdError::Config(format!("cannot read {}: {e}", path.display()))
    })?;
    let header = r.headers().map_err(|e| SngdError::Config(format!("{}: {e}", path.display())))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(SngdError::Config(format!("{}: expected header {CSV_HEADER:?}", path.display())));
    }
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<TraceRecord>, _>>()
        .map_err(|e| SngdError::Config(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(SngdError::Config(format!("{}: trace has no rows", path.display())));
    }
    if rows.windows(2).any(|w| w[1].iter <= w[0].iter) {
        return Err(SngdError::Config(format!("{}: iter must be strictly increasing", path.display())));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// SVG.
// ---------------------------------------------------------------------------

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static SVG 1.1 plot of `loss_mean` (log scale) against `iter`, one
/// polyline per trace, ticks at every decade and a legend with the labels.
/// Non-positive losses are clamped to the smallest positive value present.
pub fn render_svg(traces: &[(String, Vec<TraceRecord>)]) -> Result<String> {
    if traces.is_empty() || traces.iter().any(|(_, t)| t.is_empty()) {
        return Err(SngdError::Config("nothing to plot".into()));
    }
    let all = || traces.iter().flat_map(|(_, t)| t.iter());
    let min_pos = all().map(|r| r.loss_mean).filter(|&l| l > 0.0 && l.is_finite()).fold(f64::INFINITY, f64::min);
    let floor = if min_pos.is_finite() { min_pos } else { 1.0 };
    let y = |l: f64| if l > 0.0 && l.is_finite() { l.log10() } else { floor.log10() };
    let (mut lo, mut hi) = all().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(y(r.loss_mean)), b.max(y(r.loss_mean))));
    lo = lo.floor();
    hi = hi.ceil();
    if hi <= lo {
        hi = lo + 1.0;
    }
    let x_max = all().map(|r| r.iter).max().unwrap_or(1).max(1) as f64;
    let x_min = all().map(|r| r.iter).min().unwrap_or(0) as f64;
    let x_span = (x_max - x_min).max(1.0);

    let (w, h) = (800.0, 500.0);
    let (left, right, top, bottom) = (80.0, 180.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |i: f64| left + (i - x_min) / x_span * pw;
    let py = |v: f64| top + (hi - v) / (hi - lo) * ph;

    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#).unwrap();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#).unwrap();
    let mut e = lo as i64;
    while e as f64 <= hi {
        let yy = py(e as f64);
        writeln!(s, r##"<line class="ytick" x1="{left}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#dddddd"/>"##, left + pw).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"#, left - 6.0, yy + 4.0).unwrap();
        e += 1;
    }
    for k in 0..=4 {
        let it = x_min + x_span * k as f64 / 4.0;
        let xx = px(it);
        writeln!(s, r#"<line x1="{xx:.2}" y1="{:.2}" x2="{xx:.2}" y2="{:.2}" stroke="black"/>"#, top + ph, top + ph + 5.0).unwrap();
        writeln!(s, r#"<text x="{xx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, top + ph + 18.0, it.round() as i64).unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">iteration</text>"#, left + pw / 2.0, h - 8.0).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">loss</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    )
    .unwrap();
    for (i, (label, t)) in traces.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = t.iter().map(|r| format!("{:.2},{:.2}", px(r.iter as f64), py(y(r.loss_mean)))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).unwrap();
        let ly = top + 16.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0).unwrap();
        writeln!(s, r#"<text class="legend" x="{:.2}" y="{:.2}">{}</text>"#, lx + 26.0, ly + 4.0, escape(label)).unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    Ok(s)
}

// ---------------------------------------------------------------------------
// Command line.
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(name = "sngd", version, about = "Structured natural-gradient descent benchmarks and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one benchmark configuration and write its CSV trace.
    Bench {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Seed (overrides the config; falls back to SNGD_SEED).
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV (overrides the config; default trace.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a verification suite and print a pass/fail table.
    Check {
        /// One of oracles, groups, fim, invariance, expansion, families, benchmark.
        suite: String,
    },
    /// Plot CSV traces as a static SVG.
    Plot {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status of a command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    ChecksFailed = 1,
    Invalid = 2,
    Numerical = 3,
}

fn classify(e: &SngdError) -> Exit {
    match e {
        SngdError::Numerical(_) => Exit::Numerical,
        _ => Exit::Invalid,
    }
}

fn bench(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Exit {
    let text = match fs::read_to_string(config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", config.display());
            return Exit::Invalid;
        }
    };
    let cfg = match RunConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return Exit::Invalid;
        }
    };
    let seed = match resolve_seed(seed, cfg.seed) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return Exit::Invalid;
        }
    };
    let out = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("trace.csv"));
    if let Err(e) = preflight(&cfg, seed) {
        eprintln!("error: {e}");
        return classify(&e);
    }
    match run_bench(&cfg, seed) {
        Ok(records) => match write_trace(&out, &records) {
            Ok(()) => {
                let last = records.last().expect("iters >= 1");
                println!("wrote {} rows to {} (final loss {:e})", records.len(), out.display(), last.loss_mean);
                Exit::Ok
            }
            Err(e) => {
                eprintln!("error: {e}");
                Exit::Invalid
            }
        },
        Err(fail) => {
            let code = classify(&fail.error);
            if code == Exit::Numerical {
                let partial = out.with_extension("partial.csv");
                let ckpt = out.with_extension("checkpoint.json");
                if let Err(e) = write_trace(&partial, &fail.records) {
                    warn!("could not write partial trace: {e}");
                }
                match fs::write(&ckpt, &fail.checkpoint) {
                    Ok(()) => eprintln!(
                        "error: {} after {} iterations; last good checkpoint: {}",
                        fail.error,
                        fail.records.len(),
                        ckpt.display()
                    ),
                    Err(e) => eprintln!("error: {} (checkpoint not written: {e})", fail.error),
                }
            } else {
                eprintln!("error: {}", fail.error);
            }
            code
        }
    }
}

fn check(suite: &str) -> Exit {
    match run_suite(suite) {
        Ok(rows) => {
            print!("{}", format_table(&rows));
            if all_passed(&rows) {
                Exit::Ok
            } else {
                Exit::ChecksFailed
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            classify(&e)
        }
    }
}

fn plot(traces: &[PathBuf], out: &Path) -> Exit {
    let mut data = Vec::new();
    for t in traces {
        match read_trace(t) {
            Ok(r) => data.push((t.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), r)),
            Err(e) => {
                eprintln!("error: {e}");
                return Exit::Invalid;
            }
        }
    }
    match render_svg(&data).and_then(|s| fs::write(out, s).map_err(Into::into)) {
        Ok(()) => {
            println!("wrote {}", out.display());
            Exit::Ok
        }
        Err(e) => {
            eprintln!("error: {e}");
            Exit::Invalid
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Exit::Invalid as i32 } else { Exit::Ok as i32 };
        }
    };
    let code = match cli.command {
        Command::Bench { config, seed, out } => bench(&config, seed, out),
        Command::Check { suite } => check(&suite),
        Command::Plot { traces, out } => plot(&traces, &out),
    };
    code as i32
}
