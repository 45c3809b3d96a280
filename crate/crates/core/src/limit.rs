//! Small-noise limit objects: the linear SPDE for the remainder, its
//! nullspace coordinate `λ`, and the exponentially weighted frame in which
//! the stable part is an Ornstein–Uhlenbeck process.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, LU, Dyn};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{derivative, inner, make_grid_with_origin, Field, GridSpec, Spectrum};
use crate::noise::{Kernel, NoiseState};
use crate::soliton::{check_speed, phi_dc_pairing, profile, soliton, soliton_dc, soliton_dx, LinearizedOperator};

/// `(z, b)`: `z = −|∂ₓφ|^{-2}(𝒯_{c₀t}Φ)*(φ∂ₓφ)`, `b = (φ, ∂_cφ)^{-1}(𝒯_{c₀t}Φ)*(φ²)`.
pub fn limit_coefficients(t: f64, c0: f64, kernel: &Kernel) -> Result<(Field, Field)> {
    let grid = kernel.grid();
    let phi = soliton(c0, grid)?;
    let psi = soliton_dx(c0, grid)?;
    let psi2 = inner(&psi, &psi)?;
    let pdc = phi_dc_pairing(c0, grid)?;
    let s = c0 * t;
    let z = kernel.adjoint_shifted(&phi.mul(&psi)?, s)?.scale(-1.0 / psi2);
    let b = kernel.adjoint_shifted(&phi.mul(&phi)?, s)?.scale(1.0 / pdc);
    Ok((z, b))
}

/// Biorthogonal coefficients: `g̃₁ = −θ₁∫_{−∞}^x ∂_cφ + θ₂φ`, `g̃₂ = θ₁φ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thetas {
    pub theta1: f64,
    pub theta2: f64,
}

/// Least-squares solution of the four pairing conditions
/// `(g̃₁,∂ₓφ)=1, (g̃₁,∂_cφ)=0, (g̃₂,∂ₓφ)=0, (g̃₂,∂_cφ)=1` on `grid`.
pub fn solve_thetas(c0: f64, grid: &Arc<GridSpec>) -> Result<Thetas> {
    check_speed(c0)?;
    let phi = soliton(c0, grid)?;
    let psi = soliton_dx(c0, grid)?;
    let dc = soliton_dc(c0, grid)?;
    let big_i = Field::from_fn(grid, |x| profile::dphi_dc_antiderivative(c0, x));
    // rows: conditions; columns: (θ₁, θ₂)
    let m = DMatrix::from_row_slice(
        4,
        2,
        &[
            -inner(&big_i, &psi)?,
            inner(&phi, &psi)?,
            -inner(&big_i, &dc)?,
            inner(&phi, &dc)?,
            inner(&phi, &psi)?,
            0.0,
            inner(&phi, &dc)?,
            0.0,
        ],
    );
    let rhs = DVector::from_column_slice(&[1.0, 0.0, 0.0, 1.0]);
    let svd = m.svd(true, true);
    if svd.singular_values.min() < 1e-12 * svd.singular_values.max() {
        return Err(Error::SingularJacobian(svd.singular_values.min()));
    }
    let sol = svd.solve(&rhs, 1e-14).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(Thetas { theta1: sol[0], theta2: sol[1] })
}

/// `g̃₁` sampled on `grid` (not periodic: tends to `−6θ₁/√c₀` at `+∞`).
pub fn g_tilde1(c0: f64, th: Thetas, grid: &Arc<GridSpec>) -> Field {
    Field::from_fn(grid, |x| -th.theta1 * profile::dphi_dc_antiderivative(c0, x) + th.theta2 * profile::phi(c0, x))
}

pub fn g_tilde2(c0: f64, th: Thetas, grid: &Arc<GridSpec>) -> Field {
    Field::from_fn(grid, |x| th.theta1 * profile::phi(c0, x))
}

/// Dense matrix of a linear map on nodal values.
pub(crate) fn operator_matrix(grid: &Arc<GridSpec>, op: impl Fn(&Field) -> Field) -> DMatrix<f64> {
    let n = grid.points();
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = op(&Field::from_raw(grid, e.clone()));
        m.set_column(j, &DVector::from_column_slice(col.values()));
        e[j] = 0.0;
    }
    m
}

/// The weighted generator `A_a = e^{ax}∂ₓL_{c₀}e^{−ax} = (∂ₓ−a)[−(∂ₓ−a)² + c₀ − φ]`
/// with its biorthogonal nullspace bases and spectral projections.
#[derive(Debug, Clone)]
pub struct WeightedFrame {
    pub c0: f64,
    pub a: f64,
    pub thetas: Thetas,
    pub grid: Arc<GridSpec>,
    pub f1: Field,
    pub f2: Field,
    pub g1: Field,
    pub g2: Field,
    pub a_matrix: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// `I − ∂ₓ²`, so that `‖w‖₁² = dx·wᵀHw`.
    pub h1_gram: DMatrix<f64>,
}

/// Default periodic box for the weighted frame: `[−30, 70)`, placing more room
/// on the side where `e^{ax}` grows.
pub fn weighted_grid(points: usize) -> Result<Arc<GridSpec>> {
    make_grid_with_origin(100.0, points, -30.0)
}

pub fn build_weighted_frame(c0: f64, a: f64, grid: &Arc<GridSpec>) -> Result<WeightedFrame> {
    check_speed(c0)?;
    if !(a > 0.0 && a < (c0 / 3.0).sqrt()) {
        return Err(Error::InvalidParameter(format!("weight a = {a} outside (0, sqrt(c0/3))")));
    }
    let thetas = solve_thetas(c0, grid)?;
    let weight = Field::from_fn(grid, |x| (a * x).exp());
    let unweight = Field::from_fn(grid, |x| (-a * x).exp());
    // sampled without periodic folding: the weight would amplify far images
    let f1 = Field::from_fn(grid, |x| profile::dphi_dx(c0, x)).mul(&weight)?;
    let f2 = Field::from_fn(grid, |x| profile::dphi_dc(c0, x)).mul(&weight)?;
    let g1 = g_tilde1(c0, thetas, grid).mul(&unweight)?;
    let g2 = g_tilde2(c0, thetas, grid).mul(&unweight)?;

    let n = grid.points();
    let d = operator_matrix(grid, |f| derivative(f, 1));
    let da = &d - DMatrix::identity(n, n) * a;
    let phi = Field::from_fn(grid, |x| profile::phi(c0, x));
    let mut inner_op = -(&da * &da);
    for i in 0..n {
        inner_op[(i, i)] += c0 - phi.values()[i];
    }
    let a_matrix = &da * inner_op;

    let dx = grid.dx();
    let col = |f: &Field| DVector::from_column_slice(f.values());
    let p = (col(&f1) * col(&g1).transpose() + col(&f2) * col(&g2).transpose()) * dx;
    let q = DMatrix::identity(n, n) - &p;
    let h1_gram = DMatrix::identity(n, n) - operator_matrix(grid, |f| derivative(f, 2));
    Ok(WeightedFrame { c0, a, thetas, grid: grid.clone(), f1, f2, g1, g2, a_matrix, p, q, h1_gram })
}

impl WeightedFrame {
    /// `e^{ax}φ_{c₀}`
    pub fn weighted_phi(&self) -> Field {
        Field::from_fn(&self.grid, |x| (self.a * x).exp() * profile::phi(self.c0, x))
    }

    pub fn h1_norm(&self, w: &DVector<f64>) -> f64 {
        (self.grid.dx() * w.dot(&(&self.h1_gram * w))).max(0.0).sqrt()
    }

    /// `max |(f_i, g_j) − δ_ij|`
    pub fn biorthogonality_defect(&self) -> Result<f64> {
        let pairs = [
            (inner(&self.f1, &self.g1)? - 1.0),
            inner(&self.f1, &self.g2)?,
            inner(&self.f2, &self.g1)?,
            (inner(&self.f2, &self.g2)? - 1.0),
        ];
        Ok(pairs.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }

    pub fn projection_defects(&self) -> (f64, f64) {
        let pp = &self.p * &self.p - &self.p;
        let pq = &self.p * &self.q;
        (pp.amax(), pq.amax())
    }

    /// `‖A f₁‖` and `‖A f₂ + f₁‖` in the max norm, relative to `‖f₁‖_∞`.
    pub fn nullspace_defects(&self) -> (f64, f64) {
        let f1 = DVector::from_column_slice(self.f1.values());
        let f2 = DVector::from_column_slice(self.f2.values());
        let s = f1.amax();
        ((&self.a_matrix * &f1).amax() / s, (&self.a_matrix * &f2 + &f1).amax() / s)
    }

    /// `e^{A h}`
    pub fn propagator(&self, h: f64) -> DMatrix<f64> {
        (&self.a_matrix * h).exp()
    }

    pub fn spectrum(&self) -> Vec<Complex64> {
        let ev = self.a_matrix.complex_eigenvalues();
        let mut v: Vec<Complex64> = ev.iter().map(|z| Complex64::new(z.re, z.im)).collect();
        v.sort_by(|x, y| y.re.total_cmp(&x.re));
        v
    }
}

/// Result of a decay fit for `‖e^{A t}Qw‖₁`.
#[derive(Debug, Clone)]
pub struct DecayFit {
    pub rates: Vec<f64>,
    pub rate: f64,
    pub times: Vec<f64>,
    pub norms: Vec<Vec<f64>>,
}

/// Evolve `Qw` for `samples` random smooth `w` and fit `log‖·‖₁` on `[T/2, T]`;
/// returns the smallest fitted rate.
pub fn semigroup_decay(frame: &WeightedFrame, samples: usize, t_end: f64, seed: u64) -> Result<DecayFit> {
    use rand::{Rng, SeedableRng};
    let steps = 40usize;
    let h = t_end / steps as f64;
    let e = frame.propagator(h);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * h).collect();
    let mut rates = Vec::with_capacity(samples);
    let mut all = Vec::with_capacity(samples);
    for _ in 0..samples {
        let centers: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| (rng.random_range(-10.0..10.0), rng.random_range(0.5..3.0), rng.random_range(-1.0..1.0)))
            .collect();
        let w = Field::from_fn(&frame.grid, |x| {
            centers.iter().map(|&(c, s, amp)| amp * (-((x - c) / s).powi(2)).exp()).sum()
        });
        let mut v = &frame.q * DVector::from_column_slice(w.values());
        let mut norms = vec![frame.h1_norm(&v)];
        for _ in 0..steps {
            v = &e * v;
            norms.push(frame.h1_norm(&v));
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = times
            .iter()
            .zip(&norms)
            .filter(|(t, _)| **t >= 0.5 * t_end)
            .map(|(t, n)| (*t, n.ln()))
            .unzip();
        let fit = crate::stats::linear_fit(&xs, &ys);
        rates.push(-fit.slope);
        all.push(norms);
    }
    let rate = rates.iter().copied().fold(f64::INFINITY, f64::min);
    if !(rate > 0.0) {
        return Err(Error::Numerical(format!("no decay: fitted rate {rate}")));
    }
    Ok(DecayFit { rates, rate, times, norms: all })
}

/// Covariance trace `∫₀ᵗ Σ_l ‖e^{Aσ}Q e^{ax}φ Φe_l‖₁² dσ` at every multiple of
/// `h` up to `t_end`, by the exact propagator and the trapezoid rule.
pub fn ou_covariance_trace(frame: &WeightedFrame, kernel: &Kernel, t_end: f64, h: f64) -> Result<Vec<(f64, f64)>> {
    let grid = &frame.grid;
    frame.grid.check(kernel.grid())?;
    let n = grid.points();
    let dx = grid.dx();
    let ephi = frame.weighted_phi();
    // columns: Φe_l for the orthonormal nodal basis, scaled by e^{ax}φ
    let smoother = operator_matrix(grid, |f| kernel.apply(f).expect("same grid")) * (1.0 / dx.sqrt());
    let mut b = &frame.q * DMatrix::from_diagonal(&DVector::from_column_slice(ephi.values())) * smoother;
    let e = frame.propagator(h);
    let density = |b: &DMatrix<f64>| dx * (b.transpose() * &frame.h1_gram * b).trace();
    let steps = (t_end / h).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut acc = 0.0;
    let mut prev = density(&b);
    out.push((0.0, 0.0));
    for s in 1..=steps {
        b = &e * b;
        let cur = density(&b);
        acc += 0.5 * h * (prev + cur);
        prev = cur;
        out.push((s as f64 * h, acc));
        debug_assert!(b.ncols() == n);
    }
    Ok(out)
}

/// One path of `dw₂ = A w₂ dt + Q e^{ax}φ dW̃` with a backward-Euler linear part.
#[derive(Debug, Clone)]
pub struct OuPath {
    pub times: Vec<f64>,
    pub h1_sq: Vec<f64>,
    pub p_leak: Vec<f64>,
    pub w: DVector<f64>,
}

pub struct OuStepper<'a> {
    frame: &'a WeightedFrame,
    lu: LU<f64, Dyn, Dyn>,
    forcing: DVector<f64>,
    dt: f64,
}

impl<'a> OuStepper<'a> {
    pub fn new(frame: &'a WeightedFrame, dt: f64) -> Result<Self> {
        let n = frame.grid.points();
        let lu = (DMatrix::identity(n, n) - &frame.a_matrix * dt).lu();
        let ephi = frame.weighted_phi();
        Ok(Self { frame, lu, forcing: DVector::from_column_slice(ephi.values()), dt })
    }

    pub fn run(&self, noise: &mut NoiseState, t_end: f64, stride: usize) -> Result<OuPath> {
        let n = self.frame.grid.points();
        let steps = (t_end / self.dt).round() as usize;
        let mut w = DVector::zeros(n);
        let mut path = OuPath { times: vec![0.0], h1_sq: vec![0.0], p_leak: vec![0.0], w: w.clone() };
        for s in 1..=steps {
            let dw = noise.sample_increment_shifted(self.dt, self.frame.c0 * (s - 1) as f64 * self.dt)?;
            let kick = self.forcing.component_mul(&DVector::from_column_slice(dw.values()));
            let rhs = w + &self.frame.q * kick;
            w = self.lu.solve(&rhs).ok_or(Error::SingularJacobian(0.0))?;
            if stride > 0 && s % stride == 0 {
                path.times.push(s as f64 * self.dt);
                path.h1_sq.push(self.frame.h1_norm(&w).powi(2));
                path.p_leak.push(self.frame.h1_norm(&(&self.frame.p * &w)));
            }
        }
        path.w = w;
        Ok(path)
    }
}

/// Ensemble of OU paths; returns `(t, mean ‖w₂‖₁², max ‖Pw₂‖₁)`.
pub fn ou_evolve(frame: &WeightedFrame, kernel: Arc<Kernel>, t_end: f64, dt: f64, paths: usize, seed: u64, stride: usize) -> Result<Vec<(f64, f64, f64)>> {
    let stepper = OuStepper::new(frame, dt)?;
    let mut sum: Vec<f64> = Vec::new();
    let mut leak: Vec<f64> = Vec::new();
    let mut times = Vec::new();
    for p in 0..paths {
        let mut noise = NoiseState::new(kernel.clone(), seed, p as u64);
        let path = stepper.run(&mut noise, t_end, stride)?;
        if sum.is_empty() {
            sum = vec![0.0; path.times.len()];
            leak = vec![0.0; path.times.len()];
            times = path.times.clone();
        }
        for i in 0..sum.len() {
            sum[i] += path.h1_sq[i];
            leak[i] = leak[i].max(path.p_leak[i]);
        }
    }
    Ok(times.into_iter().zip(sum).zip(leak).map(|((t, s), l)| (t, s / paths as f64, l)).collect())
}

/// Fields shared by all paths of the limit SPDE.
#[derive(Debug, Clone)]
pub struct LimitSystem {
    grid: Arc<GridSpec>,
    c0: f64,
    phi: Field,
    psi: Field,
    dc: Field,
    psi2: f64,
    pdc: f64,
    l_phi_xx: Field,
    /// `φ ∂ₓφ`
    phi_psi: Field,
    /// `φ g̃₁`
    phi_g1: Field,
    g1: Field,
    linear_full: Spectrum,
    linear_half: Spectrum,
    ik: Spectrum,
    dt: f64,
}

/// `η`, `λ` and the co-moving noise driving them.
#[derive(Debug, Clone)]
pub struct LimitState {
    pub eta: Field,
    pub lambda: f64,
    pub t: f64,
    pub noise: NoiseState,
}

impl LimitState {
    pub fn new(noise: NoiseState) -> Self {
        let eta = Field::zeros(noise.kernel().grid());
        Self { eta, lambda: 0.0, t: 0.0, noise }
    }
}

impl LimitSystem {
    pub fn new(grid: &Arc<GridSpec>, c0: f64, thetas: Thetas, dt: f64) -> Result<Self> {
        check_speed(c0)?;
        let phi = soliton(c0, grid)?;
        let psi = soliton_dx(c0, grid)?;
        let dc = soliton_dc(c0, grid)?;
        let psi2 = inner(&psi, &psi)?;
        let pdc = inner(&phi, &dc)?;
        let l_phi_xx = LinearizedOperator::new(c0, grid)?.apply(&derivative(&psi, 1))?;
        let g1 = g_tilde1(c0, thetas, grid);
        let phi_psi = phi.mul(&psi)?;
        let phi_g1 = phi.mul(&g1)?;
        let ny = grid.nyquist();
        let sym = |h: f64| -> Spectrum {
            grid.wavenumbers()
                .iter()
                .enumerate()
                .map(|(j, &k)| if j == ny { Complex64::new(1.0, 0.0) } else { Complex64::from_polar(1.0, (k * k * k + c0 * k) * h) })
                .collect()
        };
        Ok(Self {
            grid: grid.clone(),
            c0,
            phi,
            psi,
            dc,
            psi2,
            pdc,
            l_phi_xx,
            phi_psi,
            phi_g1,
            g1,
            linear_full: sym(dt),
            linear_half: sym(0.5 * dt),
            ik: grid.derivative_symbol(1),
            dt,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn g1(&self) -> &Field {
        &self.g1
    }

    /// `y(η) = |∂ₓφ|^{-2}(η, L∂ₓ²φ)`
    pub fn y(&self, eta: &Field) -> Result<f64> {
        Ok(inner(eta, &self.l_phi_xx)? / self.psi2)
    }

    /// `Πf = f − (f,∂ₓφ)|∂ₓφ|^{-2}∂ₓφ − (f,φ)(φ,∂_cφ)^{-1}∂_cφ`
    pub fn project(&self, f: &Field) -> Result<Field> {
        let a = inner(f, &self.psi)? / self.psi2;
        let b = inner(f, &self.phi)? / self.pdc;
        f.sub(&self.psi.scale(a))?.sub(&self.dc.scale(b))
    }

    /// `−∂ₓ(φη)` in transform space.
    fn potential(&self, v: &[Complex64]) -> Spectrum {
        let eta = Field::from_spectrum(&self.grid, v);
        let prod = eta.mul(&self.phi).expect("same grid");
        let mut s = prod.spectrum();
        for (x, d) in s.iter_mut().zip(&self.ik) {
            *x *= -d;
        }
        s
    }

    /// Integrating-factor RK4 for `∂ₓL_{c₀}` over one step.
    fn linear_flow(&self, eta: &Field) -> Field {
        let dt = self.dt;
        let mul = |a: &[Complex64], b: &[Complex64]| -> Spectrum { a.iter().zip(b).map(|(x, y)| x * y).collect() };
        let axpy = |a: &[Complex64], s: f64, b: &[Complex64]| -> Spectrum { a.iter().zip(b).map(|(x, y)| x + y * s).collect() };
        let v = eta.spectrum();
        let eh = &self.linear_half;
        let ef = &self.linear_full;
        let k1 = self.potential(&v);
        let k2 = self.potential(&mul(eh, &axpy(&v, 0.5 * dt, &k1)));
        let ehv = mul(eh, &v);
        let k3 = self.potential(&axpy(&ehv, 0.5 * dt, &k2));
        let k4 = self.potential(&axpy(&mul(ef, &v), dt, &mul(eh, &k3)));
        let mut out = mul(ef, &v);
        let ek1 = mul(ef, &k1);
        let k23: Spectrum = k2.iter().zip(&k3).map(|(a, b)| a + b).collect();
        let ek23 = mul(eh, &k23);
        for i in 0..out.len() {
            out[i] += (ek1[i] + ek23[i] * 2.0 + k4[i]) * (dt / 6.0);
        }
        Field::from_spectrum(&self.grid, &out)
    }

    /// `η ← Π(flow(η) + φ ΔW̃)`, together with `∫ y ds` over the step.
    ///
    /// The drift integral is taken along the same unprojected flow that
    /// advances `η`: `∫ y = −(flow(η) − η, ∂ₓφ)/|∂ₓφ|²`, which keeps `λ` and
    /// `(η, g̃₁)` consistent step by step.
    pub fn step_limit_eta(&self, eta: &Field, dw: &Field) -> Result<(Field, f64)> {
        let moved = self.linear_flow(eta);
        let y_integral = -inner(&moved.sub(eta)?, &self.psi)? / self.psi2;
        let out = self.project(&moved.add(&self.phi.mul(dw)?)?)?;
        if !out.is_finite() {
            return Err(Error::TrajectoryFailed { t: f64::NAN, reason: "non-finite limit remainder".into() });
        }
        Ok((out, y_integral))
    }

    /// `λ ← λ + ∫y ds − |∂ₓφ|^{-2}(φ∂ₓφ, ΔW̃) + (φ g̃₁, ΔW̃)`
    pub fn step_lambda(&self, lambda: f64, y_integral: f64, dw: &Field) -> Result<f64> {
        Ok(lambda + y_integral - inner(&self.phi_psi, dw)? / self.psi2 + inner(&self.phi_g1, dw)?)
    }

    /// Draw `ΔW̃ = 𝒯_{c₀t}ΔW` and advance both `η` and `λ`.
    pub fn step(&self, st: &mut LimitState) -> Result<Field> {
        let dw = st.noise.sample_increment_shifted(self.dt, self.c0 * st.t)?;
        let (next, yi) = self.step_limit_eta(&st.eta, &dw)?;
        st.lambda = self.step_lambda(st.lambda, yi, &dw)?;
        st.eta = next;
        st.t += self.dt;
        Ok(dw)
    }

    /// Advance `η` without drawing noise (zero path).
    pub fn step_deterministic(&self, st: &mut LimitState) -> Result<()> {
        let zero = Field::zeros(&self.grid);
        let (next, yi) = self.step_limit_eta(&st.eta, &zero)?;
        st.lambda = self.step_lambda(st.lambda, yi, &zero)?;
        st.eta = next;
        st.t += self.dt;
        st.noise.skip(self.dt);
        Ok(())
    }
}

/// CSV `real,imag`.
pub fn write_spectrum_csv(path: &Path, spectrum: &[Complex64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "real,imag")?;
    for z in spectrum {
        writeln!(w, "{},{}", z.re, z.im)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::noise::KernelSpec;

    #[test]
    fn thetas_at_unit_speed() {
        let g = make_grid(100.0, 512).unwrap();
        let th = solve_thetas(1.0, &g).unwrap();
        assert!((th.theta1 - 1.0 / 18.0).abs() < 1e-9);
        assert!((th.theta2 - 1.0 / 18.0).abs() < 1e-9);
    }

    #[test]
    fn frame_invariants() {
        let g = weighted_grid(256).unwrap();
        let a = 0.5 * (1.0f64 / 3.0).sqrt();
        let fr = build_weighted_frame(1.0, a, &g).unwrap();
        assert!(fr.biorthogonality_defect().unwrap() < 1e-8);
        let (pp, pq) = fr.projection_defects();
        assert!(pp < 1e-8 && pq < 1e-8, "{pp} {pq}");
        let (n1, n2) = fr.nullspace_defects();
        assert!(n1 < 1e-6 && n2 < 1e-6, "{n1} {n2}");
        assert!(inner(&g_tilde2(1.0, fr.thetas, &g), &soliton_dx(1.0, &g).unwrap()).unwrap().abs() < 1e-14);
        assert!(build_weighted_frame(1.0, 0.6, &g).is_err());
        assert!(build_weighted_frame(1.0, 0.0, &g).is_err());
    }

    #[test]
    fn limit_coefficient_parity_and_transport() {
        let g = make_grid(100.0, 256).unwrap();
        let k = Kernel::new(KernelSpec::default(), &g).unwrap();
        let (z, b) = limit_coefficients(0.0, 1.0, &k).unwrap();
        let n = g.points();
        for j in 1..n / 2 {
            assert!((z.values()[n / 2 + j] + z.values()[n / 2 - j]).abs() < 1e-12);
            assert!((b.values()[n / 2 + j] - b.values()[n / 2 - j]).abs() < 1e-12);
        }
        let (z1, _) = limit_coefficients(1.5, 1.0, &k).unwrap();
        let moved = crate::grid::translate(&z, -1.5);
        assert!(z1.sub(&moved).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_noise_limit_stays_zero() {
        let g = make_grid(100.0, 256).unwrap();
        let k = Arc::new(Kernel::new(KernelSpec::default(), &g).unwrap());
        let th = solve_thetas(1.0, &g).unwrap();
        let sys = LimitSystem::new(&g, 1.0, th, 1e-2).unwrap();
        let mut st = LimitState::new(NoiseState::new(k, 0, 0));
        for _ in 0..50 {
            sys.step_deterministic(&mut st).unwrap();
        }
        assert_eq!(st.eta.max_abs(), 0.0);
        assert_eq!(st.lambda, 0.0);
    }

    #[test]
    fn orthogonality_preserved() {
        let g = make_grid(100.0, 256).unwrap();
        let k = Arc::new(Kernel::new(KernelSpec::default(), &g).unwrap());
        let th = solve_thetas(1.0, &g).unwrap();
        let sys = LimitSystem::new(&g, 1.0, th, 5e-3).unwrap();
        let mut st = LimitState::new(NoiseState::new(k, 4, 0));
        let phi = soliton(1.0, &g).unwrap();
        let psi = soliton_dx(1.0, &g).unwrap();
        for _ in 0..1000 {
            sys.step(&mut st).unwrap();
            let scale = 1.0 + st.eta.norm_l2();
            assert!(inner(&st.eta, &phi).unwrap().abs() < 1e-6 * scale);
            assert!(inner(&st.eta, &psi).unwrap().abs() < 1e-6 * scale);
        }
    }
}
