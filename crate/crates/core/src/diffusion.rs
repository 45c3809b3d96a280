//! Order-one reduced model for the modulation parameters and the averaged
//! soliton peak it predicts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use gauss_quad::GaussLegendre;
use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::inner;
use crate::limit::{g_tilde1, Thetas};
use crate::noise::Kernel;
use crate::soliton::{check_speed, profile, soliton, soliton_dc};
use crate::stats::{linear_fit, LinearFit};

/// Covariance rates of `B₁ = (φ,∂_cφ)^{-1}(φ², W̃)` and `B₂ = −(φ g̃₁, W̃)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaModel {
    pub sigma11: f64,
    pub sigma12: f64,
    pub sigma22: f64,
    pub c0: f64,
    pub provenance: SigmaProvenance,
}

/// Integrals the rates were assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaProvenance {
    pub phi_dc_pairing: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub kernel_l1: f64,
    pub grid_length: f64,
    pub grid_points: usize,
}

impl SigmaModel {
    pub fn new(kernel: &Kernel, c0: f64, thetas: Thetas) -> Result<Self> {
        check_speed(c0)?;
        let grid = kernel.grid();
        let phi = soliton(c0, grid)?;
        let pdc = inner(&phi, &soliton_dc(c0, grid)?)?;
        let a = kernel.adjoint(&phi.mul(&phi)?)?;
        let b = kernel.adjoint(&phi.mul(&g_tilde1(c0, thetas, grid))?)?;
        let model = Self {
            sigma11: inner(&a, &a)? / (pdc * pdc),
            sigma22: inner(&b, &b)?,
            sigma12: -inner(&a, &b)? / pdc,
            c0,
            provenance: SigmaProvenance {
                phi_dc_pairing: pdc,
                theta1: thetas.theta1,
                theta2: thetas.theta2,
                kernel_l1: kernel.l1_norm(),
                grid_length: grid.length(),
                grid_points: grid.points(),
            },
        };
        if !(model.sigma11 > 0.0 && model.sigma22 > 0.0 && model.determinant() >= -1e-12 * model.sigma11 * model.sigma22) {
            return Err(Error::NotPositiveDefinite(model.determinant()));
        }
        Ok(model)
    }

    pub fn determinant(&self) -> f64 {
        self.sigma11 * self.sigma22 - self.sigma12 * self.sigma12
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.sigma11, self.sigma12, self.sigma12, self.sigma22)
    }
}

/// Rate `(Φ*∂ₓ(φ²), Φ*(φ²))`, which vanishes identically.
pub fn w1_w2_cross_rate(kernel: &Kernel, c0: f64) -> Result<f64> {
    let grid = kernel.grid();
    let phi = soliton(c0, grid)?;
    let sq = phi.mul(&phi)?;
    let dsq = crate::grid::derivative(&sq, 1);
    let psi = crate::soliton::soliton_dx(c0, grid)?;
    let scale = -0.5 / (inner(&psi, &psi)? * inner(&phi, &soliton_dc(c0, grid)?)?);
    Ok(scale * inner(&kernel.adjoint(&dsq)?, &kernel.adjoint(&sq)?)?)
}

/// Covariance of `(C − c₀, X − c₀t)` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov2 {
    pub matrix: Matrix2<f64>,
    pub t: f64,
    pub eps: f64,
}

impl Cov2 {
    pub fn cc(&self) -> f64 {
        self.matrix[(0, 0)]
    }
    pub fn cy(&self) -> f64 {
        self.matrix[(0, 1)]
    }
    pub fn yy(&self) -> f64 {
        self.matrix[(1, 1)]
    }
    pub fn determinant(&self) -> f64 {
        self.cc() * self.yy() - self.cy() * self.cy()
    }
}

pub fn covariance_of_t(model: &SigmaModel, eps: f64, t: f64) -> Result<Cov2> {
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("t = {t} must be non-negative")));
    }
    let (s11, s12, s22) = (model.sigma11, model.sigma12, model.sigma22);
    let e2 = eps * eps;
    let cc = e2 * s11 * t;
    let cy = e2 * (s12 * t + 0.5 * s11 * t * t);
    let yy = e2 * (s22 * t + s12 * t * t + s11 * t.powi(3) / 3.0);
    Ok(Cov2 { matrix: Matrix2::new(cc, cy, cy, yy), t, eps })
}

/// Samples of `(C(t) − c₀, X(t) − c₀t)` at every multiple of `dt`.
#[derive(Debug, Clone)]
pub struct OrderOneEnsemble {
    pub times: Vec<f64>,
    /// `[path][time]`
    pub c: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

/// Exact Gaussian recursion for `dX = c₀dt + εB₁dt + εdB₂`, `dC = εdB₁`:
/// per step the triple `(ΔB₁, ΔB₂, ∫ΔB₁)` is drawn jointly.
pub fn sample_order_one(model: &SigmaModel, eps: f64, t_end: f64, dt: f64, n_paths: usize, seed: u64) -> Result<OrderOneEnsemble> {
    if !(dt > 0.0 && t_end >= 0.0) {
        return Err(Error::InvalidParameter("dt must be positive".into()));
    }
    let steps = (t_end / dt).round() as usize;
    let (s11, s12, s22) = (model.sigma11, model.sigma12, model.sigma22);
    let h = dt;
    let cov = Matrix3::new(
        s11 * h,
        s12 * h,
        s11 * h * h / 2.0,
        s12 * h,
        s22 * h,
        s12 * h * h / 2.0,
        s11 * h * h / 2.0,
        s12 * h * h / 2.0,
        s11 * h.powi(3) / 3.0,
    );
    let chol = cov.cholesky().ok_or(Error::NotPositiveDefinite(cov.determinant()))?.l();
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
    let mut out = OrderOneEnsemble { times, c: Vec::with_capacity(n_paths), y: Vec::with_capacity(n_paths) };
    for p in 0..n_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let (mut b1, mut b2, mut ib1) = (0.0, 0.0, 0.0);
        let mut cs = vec![0.0];
        let mut ys = vec![0.0];
        for _ in 0..steps {
            let z = Vector3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            let d = chol * z;
            ib1 += b1 * h + d[2];
            b1 += d[0];
            b2 += d[1];
            cs.push(eps * b1);
            ys.push(eps * (ib1 + b2));
        }
        out.c.push(cs);
        out.y.push(ys);
    }
    Ok(out)
}

/// Quadrature orders for [`peak_expectation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakQuadrature {
    /// Gauss–Legendre order in `√c`.
    pub speed: usize,
    /// Gauss–Legendre order in the soliton coordinate.
    pub position: usize,
}

impl Default for PeakQuadrature {
    fn default() -> Self {
        Self { speed: 128, position: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakValue {
    pub t: f64,
    pub eps: f64,
    pub peak: f64,
    /// location of the maximum relative to `c₀t`
    pub argmax: f64,
    /// Gaussian mass with `c₀ + c ≤ 0`
    pub clipped_mass: f64,
    /// Monte Carlo standard error (zero for quadrature)
    pub std_error: f64,
}

pub enum PeakMethod {
    Quadrature(PeakQuadrature),
    MonteCarlo { samples: usize, seed: u64, lattice: usize },
}

/// Standard normal CDF.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

struct PeakIntegrand {
    c0: f64,
    sd_c: f64,
    slope: f64,
    sd_cond: f64,
    gl_speed: GaussLegendre,
    gl_pos: GaussLegendre,
}

impl PeakIntegrand {
    /// `E φ_{c₀+C}(x − Y)`. The speed integral runs over `v = √c` so the
    /// integrand stays smooth where the law is clipped at `c = 0`.
    fn value(&self, x: f64) -> f64 {
        let s = self.sd_cond;
        let v_lo = (self.c0 - 12.0 * self.sd_c).max(0.0).sqrt();
        let v_hi = (self.c0 + 12.0 * self.sd_c).sqrt();
        let norm_c = 1.0 / (self.sd_c * (2.0 * std::f64::consts::PI).sqrt());
        let norm_y = 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt());
        self.gl_speed.integrate(v_lo, v_hi, |v| {
            let c = v * v;
            if c <= 0.0 {
                return 0.0;
            }
            let dc = c - self.c0;
            let density = 2.0 * v * norm_c * (-0.5 * (dc / self.sd_c).powi(2)).exp();
            let mu = self.slope * dc;
            // soliton coordinate u = x − y, Gaussian in y centred at mu
            let reach = 40.0 / v;
            let lo = (-reach).max(x - mu - 12.0 * s);
            let hi = reach.min(x - mu + 12.0 * s);
            if lo >= hi {
                return 0.0;
            }
            density
                * self.gl_pos.integrate(lo, hi, |u| {
                    let r = (x - u - mu) / s;
                    profile::phi(c, u) * norm_y * (-0.5 * r * r).exp()
                })
        })
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > tol {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// `max_x E φ_{C(t)}(x − X(t))` under the order-one Gaussian law.
pub fn peak_expectation(model: &SigmaModel, eps: f64, t: f64, method: &PeakMethod) -> Result<PeakValue> {
    let cov = covariance_of_t(model, eps, t)?;
    if !(cov.determinant() > 0.0) {
        return Err(Error::SingularJacobian(cov.determinant()));
    }
    let sd_c = cov.cc().sqrt();
    let c0 = model.c0;
    let clipped_mass = normal_cdf(-c0 / sd_c);
    let sd_y = cov.yy().sqrt();
    match method {
        PeakMethod::Quadrature(q) => {
            let integrand = PeakIntegrand {
                c0,
                sd_c,
                slope: cov.cy() / cov.cc(),
                sd_cond: (cov.determinant() / cov.cc()).sqrt(),
                gl_speed: GaussLegendre::new(q.speed).map_err(|e| Error::InvalidParameter(e.to_string()))?,
                gl_pos: GaussLegendre::new(q.position).map_err(|e| Error::InvalidParameter(e.to_string()))?,
            };
            let half = 6.0 * sd_y + 20.0 / c0.sqrt();
            let scan = 81;
            let h = 2.0 * half / (scan - 1) as f64;
            let (mut best, mut best_v) = (0.0, f64::NEG_INFINITY);
            for i in 0..scan {
                let x = -half + i as f64 * h;
                let v = integrand.value(x);
                if v > best_v {
                    best = x;
                    best_v = v;
                }
            }
            let (argmax, peak) = golden_max(|x| integrand.value(x), best - h, best + h, 1e-6 * h.max(1e-3));
            Ok(PeakValue { t, eps, peak: peak.max(best_v), argmax, clipped_mass, std_error: 0.0 })
        }
        PeakMethod::MonteCarlo { samples, seed, lattice } => {
            let l = Matrix2::new(sd_c, 0.0, cov.cy() / sd_c, (cov.determinant() / cov.cc()).sqrt());
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let draws: Vec<(f64, f64)> = (0..*samples)
                .map(|_| {
                    let z1: f64 = StandardNormal.sample(&mut rng);
                    let z2: f64 = StandardNormal.sample(&mut rng);
                    (l[(0, 0)] * z1, l[(1, 0)] * z1 + l[(1, 1)] * z2)
                })
                .collect();
            let half = 6.0 * sd_y + 20.0 / c0.sqrt();
            let h = 2.0 * half / (*lattice - 1) as f64;
            let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
            for i in 0..*lattice {
                let x = -half + i as f64 * h;
                let vals: Vec<f64> = draws
                    .iter()
                    .map(|&(dc, y)| {
                        let c = c0 + dc;
                        if c > 0.0 {
                            profile::phi(c, x - y)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let m = crate::stats::mean(&vals);
                if m > best.0 {
                    best = (m, x, crate::stats::std_error(&vals));
                }
            }
            Ok(PeakValue { t, eps, peak: best.0, argmax: best.1, clipped_mass, std_error: best.2 })
        }
    }
}

/// `K₀ ε^{-1/2} t^{-5/4}` normalization of a peak value.
pub fn bound_normalized(p: &PeakValue) -> f64 {
    p.peak * p.eps.sqrt() * p.t.powf(1.25)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub slope_r2: f64,
    pub eps_scaling: f64,
    pub eps_r2: f64,
    /// `max_t peak·ε^{1/2}t^{5/4}`
    pub k0: f64,
    pub table: Vec<PeakValue>,
    pub eps_table: Vec<PeakValue>,
}

/// Log-log regressions of the quadrature peak against `t` (at `eps`) and
/// against `ε` (at the largest `t`, over `eps_list`).
pub fn exponent_fit(model: &SigmaModel, eps: f64, t_grid: &[f64], eps_list: &[f64], q: PeakQuadrature) -> Result<ExponentFit> {
    if t_grid.len() < 2 || eps_list.len() < 2 {
        return Err(Error::InvalidParameter("need at least two times and two noise levels".into()));
    }
    let method = PeakMethod::Quadrature(q);
    let table = t_grid.iter().map(|&t| peak_expectation(model, eps, t, &method)).collect::<Result<Vec<_>>>()?;
    let ln = |v: f64| v.ln();
    let ft: LinearFit = linear_fit(
        &table.iter().map(|p| ln(p.t)).collect::<Vec<_>>(),
        &table.iter().map(|p| ln(p.peak)).collect::<Vec<_>>(),
    );
    let t_big = t_grid.iter().copied().fold(f64::MIN, f64::max);
    let eps_table = eps_list.iter().map(|&e| peak_expectation(model, e, t_big, &method)).collect::<Result<Vec<_>>>()?;
    let fe = linear_fit(
        &eps_table.iter().map(|p| ln(p.eps)).collect::<Vec<_>>(),
        &eps_table.iter().map(|p| ln(p.peak)).collect::<Vec<_>>(),
    );
    let k0 = table.iter().map(bound_normalized).fold(0.0, f64::max);
    Ok(ExponentFit { slope: ft.slope, slope_r2: ft.r_squared, eps_scaling: fe.slope, eps_r2: fe.r_squared, k0, table, eps_table })
}

/// Pointwise check of the marginal Gaussian bound
/// `exp(−½Σ⁻¹v·v) ≤ exp(−½ ε²/detΣ·(σ₁₁t³/12 + (σ₂₂ − σ₁₂²/σ₁₁)t)c²)` on a lattice;
/// returns the largest `lhs − rhs`.
pub fn tail_bound_violation(model: &SigmaModel, eps: f64, t: f64, lattice: usize) -> Result<f64> {
    let cov = covariance_of_t(model, eps, t)?;
    let inv = cov.matrix.try_inverse().ok_or(Error::SingularJacobian(cov.determinant()))?;
    let (s11, s12, s22) = (model.sigma11, model.sigma12, model.sigma22);
    let coef = eps * eps / cov.determinant() * (s11 * t.powi(3) / 12.0 + (s22 - s12 * s12 / s11) * t);
    let (rc, ry) = (4.0 * cov.cc().sqrt(), 4.0 * cov.yy().sqrt());
    let mut worst = f64::NEG_INFINITY;
    for i in 0..lattice {
        for j in 0..lattice {
            let c = -rc + 2.0 * rc * i as f64 / (lattice - 1) as f64;
            let y = -ry + 2.0 * ry * j as f64 / (lattice - 1) as f64;
            let v = nalgebra::Vector2::new(c, y);
            let lhs = (-0.5 * v.dot(&(inv * v))).exp();
            let rhs = (-0.5 * coef * c * c).exp();
            worst = worst.max(lhs - rhs);
        }
    }
    Ok(worst)
}

/// `∫₀^∞ √c e^{−c²/2α²} dc / α^{3/2}`, by Gauss–Legendre after `c = αs²`.
pub fn half_gaussian_sqrt_ratio(alpha: f64) -> f64 {
    let gl = GaussLegendre::new(200).expect("order");
    // c = α s², dc = 2αs ds, √c = √α s
    let integral = gl.integrate(0.0, 8.0, |s| alpha.sqrt() * s * (-0.5 * s.powi(4)).exp() * 2.0 * alpha * s);
    integral / alpha.powf(1.5)
}

/// CSV `t,peak,bound,clipped_mass` with `bound = K₀ ε^{-1/2} t^{-5/4}`.
pub fn write_peak_csv(path: &Path, table: &[PeakValue], k0: f64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,peak,bound,clipped_mass")?;
    for p in table {
        writeln!(w, "{},{},{},{}", p.t, p.peak, k0 / p.eps.sqrt() / p.t.powf(1.25), p.clipped_mass)?;
    }
    w.flush()?;
    Ok(())
}
