use skdv::diffusion::{
    covariance_of_t, peak_expectation, sample_order_one, tail_bound_violation, PeakMethod, PeakQuadrature, SigmaModel,
};
use skdv::grid::make_grid;
use skdv::limit::solve_thetas;
use skdv::noise::{Kernel, KernelSpec};
use skdv::stats::{covariance, excess_kurtosis, mean, skewness, variance};

fn model(amp: f64) -> SigmaModel {
    let g = make_grid(100.0, 512).unwrap();
    let k = Kernel::new(KernelSpec::gaussian(amp, 2.0), &g).unwrap();
    SigmaModel::new(&k, 1.0, solve_thetas(1.0, &g).unwrap()).unwrap()
}

#[test]
fn quadrature_agrees_with_monte_carlo() {
    let m = model(30.0);
    let q = peak_expectation(&m, 0.01, 100.0, &PeakMethod::Quadrature(PeakQuadrature::default())).unwrap();
    let mc = peak_expectation(&m, 0.01, 100.0, &PeakMethod::MonteCarlo { samples: 20000, seed: 5, lattice: 801 }).unwrap();
    assert!(mc.std_error > 0.0);
    assert!((q.peak - mc.peak).abs() < 3.0 * mc.std_error + 1e-3 * q.peak, "quad {} mc {} se {}", q.peak, mc.peak, mc.std_error);
}

#[test]
fn quadrature_is_converged_in_order() {
    let m = model(30.0);
    let lo = peak_expectation(&m, 0.01, 1000.0, &PeakMethod::Quadrature(PeakQuadrature { speed: 256, position: 256 })).unwrap();
    let hi = peak_expectation(&m, 0.01, 1000.0, &PeakMethod::Quadrature(PeakQuadrature::default())).unwrap();
    assert!((lo.peak - hi.peak).abs() < 1e-6 * hi.peak, "256: {} 128: {}", lo.peak, hi.peak);
}

#[test]
fn sampled_covariance_matches_closed_form() {
    let m = model(1.0);
    let eps = 0.1;
    let n = 4000;
    let ens = sample_order_one(&m, eps, 10.0, 0.05, n, 11).unwrap();
    for t in [1.0, 10.0] {
        let i = ens.times.iter().position(|&s| (s - t).abs() < 1e-9).unwrap();
        let c: Vec<f64> = ens.c.iter().map(|p| p[i]).collect();
        let y: Vec<f64> = ens.y.iter().map(|p| p[i]).collect();
        let exact = covariance_of_t(&m, eps, t).unwrap();
        // sample variance has relative standard error √(2/n)
        let tol = 4.0 * (2.0 / n as f64).sqrt();
        assert!(mean(&c).abs() < 4.0 * (exact.cc() / n as f64).sqrt());
        assert!((variance(&c) / exact.cc() - 1.0).abs() < tol, "cc at t = {t}");
        assert!((variance(&y) / exact.yy() - 1.0).abs() < tol, "yy at t = {t}");
        let cy_se = ((exact.cc() * exact.yy() + exact.cy().powi(2)) / n as f64).sqrt();
        assert!((covariance(&c, &y) - exact.cy()).abs() < 4.0 * cy_se, "cy at t = {t}");
    }
}

#[test]
fn order_one_marginals_are_gaussian() {
    let m = model(1.0);
    let ens = sample_order_one(&m, 0.1, 5.0, 0.1, 3000, 2).unwrap();
    let last = ens.times.len() - 1;
    let c: Vec<f64> = ens.c.iter().map(|p| p[last]).collect();
    let y: Vec<f64> = ens.y.iter().map(|p| p[last]).collect();
    // a generic linear combination as well
    let mix: Vec<f64> = c.iter().zip(&y).map(|(a, b)| 3.0 * a - 0.2 * b).collect();
    for v in [&c, &y, &mix] {
        let (s, se) = skewness(v);
        let (k, ke) = excess_kurtosis(v);
        assert!(s.abs() < 4.0 * se && k.abs() < 4.0 * ke, "skew {s} kurt {k}");
    }
}

#[test]
fn tail_bound_holds() {
    let m = model(1.0);
    for t in [1.0, 10.0, 100.0] {
        assert!(tail_bound_violation(&m, 0.1, t, 41).unwrap() <= 1e-12);
    }
}
