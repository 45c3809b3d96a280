use std::sync::Arc;

use skdv::grid::{inner, make_grid, Field};
use skdv::harness::{lambda_consistency, ExperimentConfig, ExperimentKind, PathSetup};
use skdv::limit::{g_tilde2, solve_thetas, LimitState, LimitSystem};
use skdv::noise::{Kernel, KernelSpec, NoiseState};
use skdv::soliton::{soliton, soliton_dx};
use skdv::stats::{excess_kurtosis, skewness};

fn setup(t_end: f64) -> (PathSetup, LimitSystem) {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::Clt);
    cfg.integration.t_end = t_end;
    let s = PathSetup::from_config(&cfg).unwrap();
    let sys = LimitSystem::new(&s.grid, s.c0, solve_thetas(s.c0, &s.grid).unwrap(), s.dt).unwrap();
    (s, sys)
}

#[test]
fn lambda_tracks_pairing_with_g1() {
    let (s, sys) = setup(1.0);
    for path in 0..3 {
        let worst = lambda_consistency(&s, &sys, path, 500).unwrap();
        assert!(worst < 1e-5, "path {path}: {worst:e}");
    }
}

#[test]
fn eta_stays_in_the_orthogonal_complement() {
    let (s, sys) = setup(2.0);
    let phi = soliton(s.c0, &s.grid).unwrap();
    let psi = soliton_dx(s.c0, &s.grid).unwrap();
    let g2 = g_tilde2(s.c0, solve_thetas(s.c0, &s.grid).unwrap(), &s.grid);
    let mut st = s.limit_state(7);
    for _ in 0..1000 {
        sys.step(&mut st).unwrap();
    }
    let scale = 1.0 + st.eta.norm_l2();
    assert!(st.eta.norm_l2() > 1e-3);
    assert!(inner(&st.eta, &phi).unwrap().abs() / scale < 1e-10);
    assert!(inner(&st.eta, &psi).unwrap().abs() / scale < 1e-10);
    // the g̃₂ pairing of the λ-corrected remainder carries no f₂ component
    let w = st.eta.sub(&psi.scale(st.lambda)).unwrap();
    assert!(inner(&w, &g2).unwrap().abs() / scale < 1e-3, "(w, g2) = {:e}", inner(&w, &g2).unwrap());
}

#[test]
fn response_is_linear_in_the_noise_amplitude() {
    let g = make_grid(100.0, 256).unwrap();
    let sys = LimitSystem::new(&g, 1.0, solve_thetas(1.0, &g).unwrap(), 2e-3).unwrap();
    let run = |amp: f64| {
        let k = Arc::new(Kernel::new(KernelSpec::gaussian(amp, 2.0), &g).unwrap());
        let mut st = LimitState::new(NoiseState::new(k, 3, 0));
        for _ in 0..300 {
            sys.step(&mut st).unwrap();
        }
        (st.eta, st.lambda)
    };
    let (e1, l1) = run(0.1);
    let (e3, l3) = run(0.3);
    assert!(e3.sub(&e1.scale(3.0)).unwrap().max_abs() < 1e-12 * (1.0 + e3.max_abs()));
    assert!((l3 - 3.0 * l1).abs() < 1e-12 * (1.0 + l3.abs()));
}

#[test]
fn pairings_are_gaussian() {
    let (s, sys) = setup(0.5);
    let probe = Field::from_fn(&s.grid, |x| (-(x + 3.0).powi(2) / 8.0).exp());
    let n = 400;
    let mut vals = Vec::with_capacity(n);
    let mut lams = Vec::with_capacity(n);
    for p in 0..n as u64 {
        let mut st = s.limit_state(p);
        for _ in 0..250 {
            sys.step(&mut st).unwrap();
        }
        vals.push(inner(&st.eta, &probe).unwrap());
        lams.push(st.lambda);
    }
    for v in [&vals, &lams] {
        let (sk, se) = skewness(v);
        let (ku, ke) = excess_kurtosis(v);
        assert!(sk.abs() < 4.0 * se, "skewness {sk} (se {se})");
        assert!(ku.abs() < 4.0 * ke, "kurtosis {ku} (se {ke})");
    }
}
