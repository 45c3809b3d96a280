use std::sync::Arc;

use skdv::grid::{make_grid, translate, Field, GridSpec};
use skdv::integrator::{NonlinearScheme, SkdvState};
use skdv::modulation::{project_orthogonal, ModulationState, Modulator};
use skdv::noise::{Kernel, KernelSpec, NoiseState};
use skdv::soliton::{soliton, soliton_dx, SolitonParams};

fn grid() -> Arc<GridSpec> {
    make_grid(100.0, 512).unwrap()
}

fn bump(g: &Arc<GridSpec>) -> Field {
    Field::from_fn(g, |x| (-(x - 1.5).powi(2) / 4.0).exp() * (1.0 - 0.4 * x))
}

#[test]
fn noise_free_drift_matches_finite_differences() {
    let g = grid();
    let eps = 0.05;
    let c = 1.02;
    let m = Modulator::new(&g, 1.0, 0.3, eps).unwrap();
    let eta0 = project_orthogonal(&m, &bump(&g)).unwrap();
    let u0 = soliton(c, &g).unwrap().add(&eta0.scale(eps)).unwrap();
    let quiet = Arc::new(Kernel::new(KernelSpec::gaussian(0.0, 2.0), &g).unwrap());

    let st0 = m.decompose(&u0, 0.0, SolitonParams { c, x0: 0.0 }, 0.0).unwrap();
    assert!((st0.c - c).abs() < 1e-10 && st0.x.abs() < 1e-10);
    let coef = m.coefficients(&st0, &quiet).unwrap();

    let h: f64 = 0.002;
    let dt: f64 = 2e-5;
    let mut state = SkdvState::new(u0, eps, NoiseState::new(quiet.clone(), 0, 0)).unwrap().with_scheme(NonlinearScheme::Rk4);
    let mut samples = vec![(st0.c, st0.x)];
    let mut guess = st0.params();
    for k in 1..=2 {
        for _ in 0..(h / dt).round() as usize {
            state.step(dt).unwrap();
        }
        let st = m.decompose(state.u(), 0.0, guess, k as f64 * h).unwrap();
        guess = st.params();
        samples.push((st.c, st.x));
    }
    let d = |f: fn(&(f64, f64)) -> f64| (-3.0 * f(&samples[0]) + 4.0 * f(&samples[1]) - f(&samples[2])) / (2.0 * h);
    let dxdt = d(|s| s.1);
    let dcdt = d(|s| s.0);
    assert!((dxdt - (c + eps * coef.y)).abs() < 1e-7, "dx/dt {dxdt} vs {}", c + eps * coef.y);
    assert!((dcdt - eps * coef.a).abs() < 2e-3 * (eps * coef.a).abs(), "dc/dt {dcdt:e} vs {:e}", eps * coef.a);
}

#[test]
fn translation_absorbed_by_center() {
    // u = φ + ε∂ₓφ: the oracle is a brute-force scan of the pairing residuals
    let g = grid();
    let eps = 0.05;
    let m = Modulator::new(&g, 1.0, 0.3, eps).unwrap();
    let u = soliton(1.0, &g).unwrap().add(&soliton_dx(1.0, &g).unwrap().scale(eps)).unwrap();
    let st = m.decompose(&u, 0.0, SolitonParams { c: 1.0, x0: 0.0 }, 0.0).unwrap();
    assert!(st.x.abs() > 1e-3);
    assert!(m.orthogonality_residual(&st.eta).unwrap() * eps < 1e-10);

    let residual = |c: f64, x: f64| -> f64 {
        let v = translate(&u, x).sub(&soliton(c, &g).unwrap()).unwrap();
        m.orthogonality_residual(&v).unwrap()
    };
    let (mut best, mut bc, mut bx) = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=40 {
        for j in 0..=40 {
            let c = 0.98 + 0.04 * i as f64 / 40.0;
            let x = -0.1 + 0.2 * j as f64 / 40.0;
            let r = residual(c, x);
            if r < best {
                (best, bc, bx) = (r, c, x);
            }
        }
    }
    assert!((st.c - bc).abs() <= 1e-3 + 1e-12, "c {} vs scan {bc}", st.c);
    assert!((st.x - bx).abs() <= 5e-3 + 1e-12, "x {} vs scan {bx}", st.x);
}

#[test]
fn decomposition_is_translation_equivariant() {
    let g = grid();
    let eps = 0.1;
    let m = Modulator::new(&g, 1.0, 0.3, eps).unwrap();
    let eta0 = project_orthogonal(&m, &bump(&g)).unwrap();
    let u = soliton(1.05, &g).unwrap().add(&eta0.scale(eps)).unwrap();
    let a = m.decompose(&u, 0.0, SolitonParams { c: 1.0, x0: 0.0 }, 0.0).unwrap();
    for s in [0.3, -1.7, 4.25] {
        let moved = translate(&u, -s);
        let b = m.decompose(&moved, 0.0, SolitonParams { c: 1.0, x0: s }, 0.0).unwrap();
        assert!((b.x - a.x - s).abs() < 1e-9, "shift {s}: {} vs {}", b.x, a.x + s);
        assert!((b.c - a.c).abs() < 1e-10);
    }
}

#[test]
fn exit_flag_follows_alpha_tube() {
    let g = grid();
    let m = Modulator::new(&g, 1.0, 0.05, 0.5).unwrap();
    let st = m.decompose(&soliton(1.2, &g).unwrap(), 0.0, SolitonParams { c: 1.2, x0: 0.0 }, 0.0).unwrap();
    assert!(st.exited);
    let ok: ModulationState = m.decompose(&soliton(1.01, &g).unwrap(), 0.0, SolitonParams { c: 1.0, x0: 0.0 }, 0.0).unwrap();
    assert!(!ok.exited);
}
