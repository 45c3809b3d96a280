use std::sync::Arc;

use proptest::prelude::*;
use skdv::grid::{derivative, inner, make_grid, translate, Field, GridSpec};
use skdv::harness::ExperimentConfig;
use skdv::noise::{parseval_density, white_noise, Kernel, KernelSpec};
use skdv::soliton::{energy, mass, soliton, LinearizedOperator};

fn grid() -> Arc<GridSpec> {
    make_grid(80.0, 256).unwrap()
}

/// Smooth localized field from a few Gaussian bumps.
fn bumps(g: &Arc<GridSpec>, params: &[(f64, f64, f64)]) -> Field {
    Field::from_fn(g, |x| params.iter().map(|&(a, m, w)| a * (-(x - m).powi(2) / (w * w)).exp()).sum())
}

fn bump_params() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((-2.0..2.0f64, -15.0..15.0f64, 1.0..4.0f64), 1..4)
}

fn kernel_spec() -> impl Strategy<Value = KernelSpec> {
    // sech tails are slow; wide ones do not fit the box
    (0.1..3.0f64, 0.5..3.0f64, any::<bool>()).prop_map(|(a, l, g)| {
        if g {
            KernelSpec::gaussian(a, l)
        } else {
            KernelSpec::sech(a, l / 2.0)
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parseval_density_is_flat(spec in kernel_spec()) {
        let g = grid();
        let k = Kernel::new(spec, &g).unwrap();
        let d = parseval_density(&k);
        let target = k.variance_density();
        for &v in d.values() {
            prop_assert!((v - target).abs() <= 1e-10 * target.max(1.0));
        }
    }

    #[test]
    fn derivative_is_skew(p in bump_params(), q in bump_params()) {
        let g = grid();
        let (f, h) = (bumps(&g, &p), bumps(&g, &q));
        let lhs = inner(&derivative(&f, 1), &h).unwrap();
        let rhs = -inner(&f, &derivative(&h, 1)).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
        let third = inner(&derivative(&f, 3), &h).unwrap() + inner(&f, &derivative(&h, 3)).unwrap();
        prop_assert!(third.abs() < 1e-9);
    }

    #[test]
    fn linearized_operator_is_symmetric(p in bump_params(), q in bump_params(), c0 in 0.5..2.0f64) {
        let g = grid();
        let op = LinearizedOperator::new(c0, &g).unwrap();
        let (f, h) = (bumps(&g, &p), bumps(&g, &q));
        let a = inner(&op.apply(&f).unwrap(), &h).unwrap();
        let b = inner(&f, &op.apply(&h).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn smoother_adjoint_identity(spec in kernel_spec(), p in bump_params(), q in bump_params()) {
        let g = grid();
        let k = Kernel::new(spec, &g).unwrap();
        let (f, h) = (bumps(&g, &p), bumps(&g, &q));
        let a = inner(&k.apply(&f).unwrap(), &h).unwrap();
        let b = inner(&f, &k.adjoint(&h).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
    }

    #[test]
    fn translation_commutes_and_inverts(spec in kernel_spec(), p in bump_params(), y in -20.0..20.0f64) {
        let g = grid();
        let k = Kernel::new(spec, &g).unwrap();
        let f = bumps(&g, &p);
        let back = translate(&translate(&f, y), -y);
        prop_assert!(back.sub(&f).unwrap().max_abs() < 1e-11 * (1.0 + f.max_abs()));
        let a = k.apply(&translate(&f, y)).unwrap();
        let b = translate(&k.apply(&f).unwrap(), y);
        prop_assert!(a.sub(&b).unwrap().max_abs() < 1e-10 * (1.0 + a.max_abs()));
    }

    #[test]
    fn invariants_are_translation_invariant(c in 0.5..2.0f64, y in -20.0..20.0f64) {
        let g = grid();
        let u = soliton(c, &g).unwrap();
        let v = translate(&u, y);
        prop_assert!((mass(&u) - mass(&v)).abs() < 1e-10 * mass(&u));
        prop_assert!((energy(&u) - energy(&v)).abs() < 1e-10 * energy(&u).abs().max(1.0));
    }

    #[test]
    fn white_noise_is_keyed(seed in any::<u64>(), path in 0..1000u64, step in 0..100000u64) {
        let a = white_noise(seed, path, step, 64);
        prop_assert_eq!(&a, &white_noise(seed, path, step, 64));
        prop_assert_ne!(&a, &white_noise(seed, path, step + 1, 64));
        prop_assert_ne!(&a, &white_noise(seed, path + 1, step, 64));
    }

    #[test]
    fn config_round_trip(seed in any::<u64>(), paths in 1..5000usize, e0 in 0.01..1.0f64, ratio in 0.1..0.9f64) {
        let mut cfg = ExperimentConfig::default();
        cfg.ensemble.seed = seed;
        cfg.ensemble.paths = paths;
        cfg.physics.eps = vec![e0, e0 * ratio];
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}
