use std::ffi::{CStr, CString};
use std::ptr;

use sngd_ffi::*;

fn last_error() -> String {
    let p = sngd_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(sngd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn factor_round_trip_and_precision_solve() {
    unsafe {
        let dense = [2.0, 0.5, 0.0, 0.0, 1.5, 0.0, 0.0, 0.0, 3.0];
        let mut f = ptr::null_mut();
        assert_eq!(sngd_factor_from_dense(SngdGroup::BlockUpper, 3, 2, 0, dense.as_ptr(), &mut f), SngdStatus::Ok);
        assert_eq!(sngd_factor_dim(f), 3);
        let mut back = [0.0; 9];
        assert_eq!(sngd_factor_dense(f, back.as_mut_ptr(), 9), SngdStatus::Ok);
        assert_eq!(back, dense);

        let mut s = [0.0; 9];
        assert_eq!(sngd_factor_precision(f, s.as_mut_ptr(), 9), SngdStatus::Ok);
        let rhs = [1.0, -2.0, 0.5];
        let mut x = [0.0; 3];
        assert_eq!(sngd_factor_precision_solve(f, rhs.as_ptr(), x.as_mut_ptr(), 3), SngdStatus::Ok);
        for i in 0..3 {
            let sx: f64 = (0..3).map(|j| s[3 * i + j] * x[j]).sum();
            assert!((sx - rhs[i]).abs() < 1e-12);
        }
        let mut ld = 0.0;
        assert_eq!(sngd_factor_log_abs_det(f, &mut ld), SngdStatus::Ok);
        assert!((ld - (2.0f64 * 1.5 * 3.0).ln()).abs() < 1e-12);

        // A dense matrix outside the structure is rejected.
        let mut g = ptr::null_mut();
        let bad = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_ne!(sngd_factor_from_dense(SngdGroup::BlockUpper, 3, 1, 0, bad.as_ptr(), &mut g), SngdStatus::Ok);
        assert!(g.is_null());
        sngd_factor_free(f);
    }
}

#[test]
fn errors_are_reported_not_panicked() {
    unsafe {
        let mut f = ptr::null_mut();
        assert_eq!(sngd_factor_new(SngdGroup::BlockUpper, 3, 5, 0, 1.0, &mut f), SngdStatus::InvalidArgument);
        assert!(f.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(sngd_factor_new(SngdGroup::Full, 3, 0, 0, 1.0, ptr::null_mut()), SngdStatus::NullPointer);
        assert!(last_error().contains("out"));

        let mut o = ptr::null_mut();
        assert_eq!(sngd_objective_rosenbrock(4, &mut o), SngdStatus::Ok);
        let w = [0.0; 3];
        let mut v = 0.0;
        assert_eq!(sngd_objective_eval(o, w.as_ptr(), 3, &mut v), SngdStatus::DimensionMismatch);
        assert_eq!(sngd_objective_eval(ptr::null(), w.as_ptr(), 3, &mut v), SngdStatus::NullPointer);
        // A successful call clears the message.
        let w4 = [1.0; 4];
        assert_eq!(sngd_objective_eval(o, w4.as_ptr(), 4, &mut v), SngdStatus::Ok);
        assert!(sngd_last_error().is_null());
        assert_eq!(v, 0.0);
        sngd_objective_free(o);

        // Null handles are ignored by the release functions.
        sngd_factor_free(ptr::null_mut());
        sngd_objective_free(ptr::null_mut());
        sngd_gauss_free(ptr::null_mut());
        sngd_adam_free(ptr::null_mut());
        sngd_string_free(ptr::null_mut());
    }
}

#[test]
fn objective_oracles_agree_with_finite_differences() {
    unsafe {
        let mut o = ptr::null_mut();
        assert_eq!(sngd_objective_dixon_price(5, &mut o), SngdStatus::Ok);
        let w = [0.3, -0.2, 0.7, 1.1, -0.4];
        let mut g = [0.0; 5];
        assert_eq!(sngd_objective_grad(o, w.as_ptr(), 5, g.as_mut_ptr()), SngdStatus::Ok);
        let f = |w: &[f64]| {
            let mut v = 0.0;
            assert_eq!(sngd_objective_eval(o, w.as_ptr(), 5, &mut v), SngdStatus::Ok);
            v
        };
        for i in 0..5 {
            let (mut a, mut b) = (w, w);
            a[i] += 1e-6;
            b[i] -= 1e-6;
            assert!(((f(&a) - f(&b)) / 2e-6 - g[i]).abs() < 1e-6);
        }
        let dir = [1.0, 0.0, -1.0, 0.5, 0.0];
        let mut hv = [0.0; 5];
        assert_eq!(sngd_objective_hvp(o, w.as_ptr(), dir.as_ptr(), 5, hv.as_mut_ptr()), SngdStatus::Ok);
        let (mut wp, mut wm) = (w, w);
        for i in 0..5 {
            wp[i] += 1e-6 * dir[i];
            wm[i] -= 1e-6 * dir[i];
        }
        let (mut gp, mut gm) = ([0.0; 5], [0.0; 5]);
        sngd_objective_grad(o, wp.as_ptr(), 5, gp.as_mut_ptr());
        sngd_objective_grad(o, wm.as_ptr(), 5, gm.as_mut_ptr());
        for i in 0..5 {
            assert!(((gp[i] - gm[i]) / 2e-6 - hv[i]).abs() < 1e-5 * hv[i].abs().max(1.0));
        }
        sngd_objective_free(o);
    }
}

#[test]
fn newton_step_on_a_quadratic_reaches_the_minimizer() {
    unsafe {
        // ℓ(w) = ½wᵀHw − cᵀw; with γ = 1, β = 1 and S₀ = H the first step is
        // an exact Newton step to H⁻¹c.
        let h = [4.0, 1.0, 1.0, 3.0];
        let c = [1.0, 2.0];
        let mut o = ptr::null_mut();
        assert_eq!(sngd_objective_quadratic(h.as_ptr(), c.as_ptr(), 2, &mut o), SngdStatus::Ok);
        let l = [2.0, 0.0, 0.5, (3.0f64 - 0.25).sqrt()];
        let mut f = ptr::null_mut();
        assert_eq!(sngd_factor_from_dense(SngdGroup::Full, 2, 0, 0, l.as_ptr(), &mut f), SngdStatus::Ok);
        let mu = [5.0, -5.0];
        let mut g = ptr::null_mut();
        assert_eq!(sngd_gauss_new(mu.as_ptr(), 2, f, 1.0, 1.0, &mut g), SngdStatus::Ok);
        sngd_factor_free(f);
        assert_eq!(sngd_gauss_step(g, o, SngdGaussMethod::FullNewton, 0, 0), SngdStatus::Ok);
        let mut m = [0.0; 2];
        assert_eq!(sngd_gauss_mean(g, m.as_mut_ptr(), 2), SngdStatus::Ok);
        let expect = [(3.0 * 1.0 - 1.0 * 2.0) / 11.0, (4.0 * 2.0 - 1.0 * 1.0) / 11.0];
        assert!((m[0] - expect[0]).abs() < 1e-12 && (m[1] - expect[1]).abs() < 1e-12);
        let mut s = [0.0; 4];
        assert_eq!(sngd_gauss_precision(g, s.as_mut_ptr(), 4), SngdStatus::Ok);
        for (a, b) in s.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(sngd_gauss_mean(g, m.as_mut_ptr(), 3), SngdStatus::DimensionMismatch);

        // JSON checkpoints restore an identical state.
        let mut js = ptr::null_mut();
        assert_eq!(sngd_gauss_to_json(g, &mut js), SngdStatus::Ok);
        let mut g2 = ptr::null_mut();
        assert_eq!(sngd_gauss_from_json(js, &mut g2), SngdStatus::Ok);
        sngd_string_free(js);
        let mut m2 = [0.0; 2];
        sngd_gauss_mean(g2, m2.as_mut_ptr(), 2);
        assert_eq!(m, m2);

        sngd_gauss_free(g);
        sngd_gauss_free(g2);
        sngd_objective_free(o);
    }
}

#[test]
fn monte_carlo_steps_are_seeded() {
    unsafe {
        let mut o = ptr::null_mut();
        sngd_objective_rosenbrock(3, &mut o);
        let run = |seed: u64| {
            let mut f = ptr::null_mut();
            sngd_factor_new(SngdGroup::BlockLower, 3, 1, 0, 1.0, &mut f);
            let mut g = ptr::null_mut();
            sngd_gauss_new([0.0; 3].as_ptr(), 3, f, 0.05, 1.0, &mut g);
            sngd_factor_free(f);
            for _ in 0..5 {
                assert_eq!(sngd_gauss_step(g, o, SngdGaussMethod::MonteCarlo, 4, seed), SngdStatus::Ok);
            }
            let mut m = [0.0; 3];
            sngd_gauss_mean(g, m.as_mut_ptr(), 3);
            sngd_gauss_free(g);
            m
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        sngd_objective_free(o);
    }
}

#[test]
fn adam_steps_and_json_runs() {
    unsafe {
        let mut o = ptr::null_mut();
        sngd_objective_rosenbrock(2, &mut o);
        let mut a = ptr::null_mut();
        assert_eq!(sngd_adam_new([0.0, 0.0].as_ptr(), 2, 0.01, &mut a), SngdStatus::Ok);
        assert_eq!(sngd_adam_step(a, o), SngdStatus::Ok);
        let mut w = [0.0; 2];
        assert_eq!(sngd_adam_params(a, w.as_mut_ptr(), 2), SngdStatus::Ok);
        // The first Adam step moves every coordinate by lr against the
        // gradient sign; at the origin ∂ℓ/∂w₁ < 0 and ∂ℓ/∂w₂ = 0.
        assert!((w[0] - 0.01).abs() < 1e-6 && w[1] == 0.0);
        assert_eq!(sngd_adam_new([0.0].as_ptr(), 1, -1.0, &mut a), SngdStatus::InvalidArgument);
        sngd_adam_free(a);
        sngd_objective_free(o);

        let cfg = CString::new(r#"{"objective": {"name": "quadratic", "p": 3, "cond": 10}, "method": "hs-low", "k1": 1, "k2": 1, "iters": 8, "beta": 0.5}"#).unwrap();
        let mut losses = [0.0; 8];
        let mut n = 0;
        assert_eq!(sngd_run(cfg.as_ptr(), 0, losses.as_mut_ptr(), 8, &mut n), SngdStatus::Ok);
        assert_eq!(n, 8);
        assert!(losses[7] < losses[0]);
        assert_eq!(sngd_run(cfg.as_ptr(), 0, losses.as_mut_ptr(), 4, &mut n), SngdStatus::DimensionMismatch);
        let bad = CString::new("{}").unwrap();
        assert_eq!(sngd_run(bad.as_ptr(), 0, losses.as_mut_ptr(), 8, &mut n), SngdStatus::InvalidArgument);
        assert_eq!(n, 0);
    }
}
