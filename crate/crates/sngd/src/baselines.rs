//! Adam, the first-order baseline for the benchmark comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SngdError};
use crate::linalg::Vector;
use crate::objectives::Objective;

/// Learning rates tried by [`adam_grid_search`].
pub const ADAM_LR_GRID: [f64; 5] = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];

/// Adam iterate with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    #[serde(with = "crate::linalg::serde_vector")]
    pub params: Vector,
    #[serde(with = "crate::linalg::serde_vector")]
    pub m: Vector,
    #[serde(with = "crate::linalg::serde_vector")]
    pub v: Vector,
    pub t: u64,
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with the usual defaults `lr = 1e-3`, `β₁ = 0.9`,
    /// `β₂ = 0.999`, `ε = 1e-8`.
    pub fn new(params: Vector) -> Self {
        let p = params.len();
        AdamState { params, m: Vector::zeros(p), v: Vector::zeros(p), t: 0, lr: 1e-3, b1: 0.9, b2: 0.999, eps: 1e-8 }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

/// One bias-corrected Adam step.
pub fn adam_step(state: &AdamState, grad: &Vector) -> Result<AdamState> {
    if grad.len() != state.params.len() {
        return Err(SngdError::Dimension(format!(
            "gradient has length {}, parameters {}",
            grad.len(),
            state.params.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(SngdError::Numerical("non-finite gradient".into()));
    }
    let t = state.t + 1;
    let m = &state.m * state.b1 + grad * (1.0 - state.b1);
    let v = &state.v * state.b2 + grad.component_mul(grad) * (1.0 - state.b2);
    let c1 = 1.0 - state.b1.powi(t as i32);
    let c2 = 1.0 - state.b2.powi(t as i32);
    let step = m.zip_map(&v, |mi, vi| (mi / c1) / ((vi / c2).sqrt() + state.eps));
    Ok(AdamState { params: &state.params - step * state.lr, m, v, t, ..state.clone() })
}

/// Runs `iters` Adam steps and returns the final state and the loss after
/// every step.
pub fn adam_run(obj: &dyn Objective, w0: &Vector, lr: f64, iters: usize) -> Result<(AdamState, Vec<f64>)> {
    let mut st = AdamState::new(w0.clone()).with_lr(lr);
    let mut losses = Vec::with_capacity(iters);
    for _ in 0..iters {
        st = adam_step(&st, &obj.grad(&st.params))?;
        losses.push(obj.eval(&st.params));
    }
    Ok((st, losses))
}

/// Result of one grid point.
#[derive(Clone, Debug, Serialize)]
pub struct GridPoint {
    pub lr: f64,
    /// Final loss; `None` if the run diverged.
    pub final_loss: Option<f64>,
}

/// Tries every learning rate in `grid` for `iters` steps from `w0` and
/// returns the one with the lowest final loss, with all grid results.
pub fn adam_grid_search(obj: &dyn Objective, w0: &Vector, iters: usize, grid: &[f64]) -> Result<(f64, Vec<GridPoint>)> {
    let mut points = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &lr in grid {
        let final_loss = match adam_run(obj, w0, lr, iters) {
            Ok((_, losses)) => losses.last().copied().filter(|l| l.is_finite()),
            Err(SngdError::Numerical(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some(l) = final_loss {
            if best.is_none_or(|(_, b)| l < b) {
                best = Some((lr, l));
            }
        }
        points.push(GridPoint { lr, final_loss });
    }
    let (lr, _) = best.ok_or_else(|| SngdError::Numerical("every learning rate diverged".into()))?;
    Ok((lr, points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{quadratic, rosenbrock};
    use crate::linalg::Matrix;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_leaves_params() {
        let st = AdamState::new(Vector::from_vec(vec![1.0, -2.0]));
        let next = adam_step(&st, &Vector::zeros(2)).unwrap();
        assert_eq!(next.params, st.params);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let st = AdamState::new(Vector::from_vec(vec![0.0, 0.0, 0.0])).with_lr(0.01);
        let g = Vector::from_vec(vec![3.0, -0.2, 1e-3]);
        let next = adam_step(&st, &g).unwrap();
        for i in 0..3 {
            let expect = -0.01 * g[i] / (g[i].abs() + 1e-8);
            assert_relative_eq!(next.params[i], expect, max_relative = 1e-12);
            assert_relative_eq!(next.params[i], -0.01 * g[i].signum(), max_relative = 1e-4);
        }
    }

    #[test]
    fn first_step_is_scale_invariant() {
        let st = AdamState::new(Vector::from_vec(vec![0.5, 0.5])).with_lr(0.1);
        let g = Vector::from_vec(vec![0.7, -1.3]);
        let base = adam_step(&st, &g).unwrap().params;
        for c in [1e-3, 0.5, 10.0, 1e4] {
            assert_relative_eq!(adam_step(&st, &(&g * c)).unwrap().params, base.clone(), max_relative = 1e-4);
        }
    }

    /// Scalar Adam written out independently.
    fn scalar_reference(w0: f64, lr: f64, iters: usize) -> Vec<f64> {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=iters as i32 {
            let g = w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-8);
            out.push(0.5 * w * w);
        }
        out
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        let q = quadratic(Matrix::identity(1, 1), Vector::zeros(1)).unwrap();
        let w0 = Vector::from_vec(vec![10.0]);
        let (_, losses) = adam_run(&q, &w0, 0.1, 100).unwrap();
        let reference = scalar_reference(10.0, 0.1, 100);
        for (a, b) in losses.iter().zip(&reference) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
        assert!(0.5 * 100.0 > losses[0]);
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn determinism_and_grid_search() {
        let obj = rosenbrock(4).unwrap();
        let w0 = Vector::from_element(4, -1.0);
        let (a, la) = adam_run(&obj, &w0, 1e-2, 50).unwrap();
        let (b, lb) = adam_run(&obj, &w0, 1e-2, 50).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (lr, points) = adam_grid_search(&obj, &w0, 200, &ADAM_LR_GRID).unwrap();
        assert_eq!(points.len(), 5);
        let best = points.iter().find(|p| p.lr == lr).unwrap().final_loss.unwrap();
        assert!(points.iter().all(|p| p.final_loss.is_none_or(|l| l >= best)));
    }

    #[test]
    fn rejects_bad_gradients() {
        let st = AdamState::new(Vector::zeros(2));
        assert!(matches!(adam_step(&st, &Vector::zeros(3)), Err(SngdError::Dimension(_))));
        assert!(matches!(adam_step(&st, &Vector::from_vec(vec![f64::NAN, 0.0])), Err(SngdError::Numerical(_))));
    }
}
