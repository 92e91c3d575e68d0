use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sngd::groups::{random_direction, random_factor, GroupKind, LocalDirection, StructuredFactor};
use sngd::linalg::{h_map, sym, Matrix, Vector};

fn kind_strategy() -> impl Strategy<Value = GroupKind> {
    (0usize..4, 1usize..=12, 0usize..=12, 0usize..=12).prop_filter_map("valid block sizes", |(family, p, a, b)| {
        let kind = match family {
            0 => GroupKind::BlockUpper { p, k: a },
            1 => GroupKind::BlockLower { p, k: a },
            2 => GroupKind::HeisUpper { p, k1: a, k2: b },
            _ => GroupKind::HeisLower { p, k1: a, k2: b },
        };
        kind.canonical().ok().map(|_| kind)
    })
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn factor(kind: &GroupKind, seed: u64) -> StructuredFactor {
    random_factor(kind, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn products_stay_in_the_group(kind in kind_strategy(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (factor(&kind, s1), factor(&kind, s2));
        let ab = a.multiply(&b).unwrap();
        prop_assert!(ab.membership_check().passed());
        prop_assert!(rel(&ab.densify(), &(a.densify() * b.densify())) < 1e-10);
    }

    #[test]
    fn inverses_stay_in_the_group(kind in kind_strategy(), s in any::<u64>()) {
        let b = factor(&kind, s);
        let inv = b.inverse().unwrap();
        prop_assert!(inv.membership_check().passed());
        let p = b.dim();
        prop_assert!(rel(&(b.densify() * inv.densify()), &Matrix::identity(p, p)) < 1e-9);
    }

    #[test]
    fn h_step_stays_in_the_group(kind in kind_strategy(), s in any::<u64>(), scale in 0.01f64..1.0) {
        let b = factor(&kind, s);
        let m = random_direction(&kind, &mut ChaCha20Rng::seed_from_u64(s ^ 1), scale).unwrap();
        let next = b.apply_h(&m).unwrap();
        prop_assert!(next.membership_check().passed());
        let dense = b.densify() * h_map(&m.densify()).unwrap();
        prop_assert!(rel(&next.densify(), &dense) < 1e-10);
    }

    #[test]
    fn precision_solve_inverts_precision_apply(kind in kind_strategy(), s in any::<u64>()) {
        let b = factor(&kind, s);
        let x = Vector::from_fn(b.dim(), |i, _| (i as f64 + 1.0).sin());
        let y = b.precision_apply(&x).unwrap();
        let back = b.precision_solve(&y).unwrap();
        prop_assert!((back - &x).norm() <= 1e-8 * x.norm().max(1.0));
    }

    #[test]
    fn log_abs_det_matches_dense(kind in kind_strategy(), s in any::<u64>()) {
        let b = factor(&kind, s);
        let dense = b.densify().determinant().abs().ln();
        prop_assert!((b.log_abs_det() - dense).abs() < 1e-9 * dense.abs().max(1.0));
    }

    #[test]
    fn kappa_is_linear_with_round_tripping_coordinates(kind in kind_strategy(), s in any::<u64>()) {
        let p = kind.dim();
        let mut rng = ChaCha20Rng::seed_from_u64(s);
        let mut draw = || sym(&Matrix::from_fn(p, p, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0)));
        let (x, y) = (draw(), draw());
        let k = LocalDirection::kappa_extract(&kind, &x).unwrap();
        let coords = k.coords();
        prop_assert_eq!(LocalDirection::from_coords(&kind, &coords).unwrap(), k.clone());
        // κ is linear.
        let ky = LocalDirection::kappa_extract(&kind, &y).unwrap();
        let combo = LocalDirection::kappa_extract(&kind, &(&x * 2.0 - &y * 0.5)).unwrap();
        let expect = k.scale(2.0).add(&ky.scale(-0.5)).unwrap();
        prop_assert!(rel(&combo.densify(), &expect.densify()) < 1e-14);
    }

    #[test]
    fn factors_round_trip_through_json(kind in kind_strategy(), s in any::<u64>()) {
        let b = factor(&kind, s);
        let text = serde_json::to_string(&b.to_json()).unwrap();
        let back = StructuredFactor::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        prop_assert_eq!(back.densify(), b.densify());
    }
}
