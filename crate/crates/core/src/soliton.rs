//! The KdV soliton family, its parameter derivatives, the conserved
//! functionals and the linearized operator around a soliton.
//!
//! With the nonlinearity `½∂ₓ(u²)` the profile solving
//! `φ'' − cφ + ½φ² = 0` is `φ_c(x) = 3c sech²(√c x / 2)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::{derivative, inner, Field, GridSpec};

/// Speed and center of a soliton `φ_c(x − x₀)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolitonParams {
    pub c: f64,
    pub x0: f64,
}

impl SolitonParams {
    pub fn new(c: f64, x0: f64) -> Result<Self> {
        check_speed(c)?;
        Ok(Self { c, x0 })
    }
}

pub(crate) fn check_speed(c: f64) -> Result<()> {
    if c > 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("soliton speed must be positive, got {c}")))
    }
}

/// Closed-form profile values. All functions take the speed `c > 0` and a
/// position measured from the soliton center.
pub mod profile {
    fn parts(c: f64, x: f64) -> (f64, f64) {
        let s = 0.5 * c.sqrt() * x;
        let sech = 1.0 / s.cosh();
        (sech * sech, s.tanh())
    }

    pub fn phi(c: f64, x: f64) -> f64 {
        3.0 * c * parts(c, x).0
    }

    pub fn dphi_dx(c: f64, x: f64) -> f64 {
        let (s2, t) = parts(c, x);
        -3.0 * c.powf(1.5) * s2 * t
    }

    pub fn d2phi_dx2(c: f64, x: f64) -> f64 {
        let (s2, _) = parts(c, x);
        3.0 * c * c * s2 - 4.5 * c * c * s2 * s2
    }

    pub fn d3phi_dx3(c: f64, x: f64) -> f64 {
        let (s2, t) = parts(c, x);
        c.powf(2.5) * s2 * t * (9.0 * s2 - 3.0)
    }

    pub fn dphi_dc(c: f64, x: f64) -> f64 {
        let (s2, t) = parts(c, x);
        3.0 * s2 - 1.5 * c.sqrt() * x * s2 * t
    }

    pub fn d2phi_dc2(c: f64, x: f64) -> f64 {
        let (s2, t) = parts(c, x);
        -2.25 * x / c.sqrt() * s2 * t - 0.375 * x * x * (s2 * s2 - 2.0 * s2 * t * t)
    }

    /// `∫_{−∞}^x ∂_cφ_c(y) dy`
    pub fn dphi_dc_antiderivative(c: f64, x: f64) -> f64 {
        let (s2, t) = parts(c, x);
        3.0 / c.sqrt() * (1.0 + t) + 1.5 * x * s2
    }
}

/// Position of grid node `j` relative to `center`, folded into the periodic box.
fn relative(grid: &GridSpec, j: usize, center: f64) -> f64 {
    let l = grid.length();
    let mut r = grid.x(j) - center;
    r -= l * (r / l).round();
    r
}

fn sample(grid: &Arc<GridSpec>, center: f64, f: impl Fn(f64) -> f64) -> Field {
    Field::from_raw(grid, (0..grid.points()).map(|j| f(relative(grid, j, center))).collect())
}

pub fn soliton(c: f64, grid: &Arc<GridSpec>) -> Result<Field> {
    soliton_at(SolitonParams::new(c, 0.0)?, grid)
}

/// `φ_c(x − x₀)` sampled with periodic wrap.
pub fn soliton_at(p: SolitonParams, grid: &Arc<GridSpec>) -> Result<Field> {
    check_speed(p.c)?;
    Ok(sample(grid, p.x0, |x| profile::phi(p.c, x)))
}

pub fn soliton_dc(c: f64, grid: &Arc<GridSpec>) -> Result<Field> {
    soliton_dc_at(SolitonParams::new(c, 0.0)?, grid)
}

pub fn soliton_dc_at(p: SolitonParams, grid: &Arc<GridSpec>) -> Result<Field> {
    check_speed(p.c)?;
    Ok(sample(grid, p.x0, |x| profile::dphi_dc(p.c, x)))
}

pub fn soliton_dx(c: f64, grid: &Arc<GridSpec>) -> Result<Field> {
    check_speed(c)?;
    Ok(sample(grid, 0.0, |x| profile::dphi_dx(c, x)))
}

pub fn soliton_dxx(c: f64, grid: &Arc<GridSpec>) -> Result<Field> {
    check_speed(c)?;
    Ok(sample(grid, 0.0, |x| profile::d2phi_dx2(c, x)))
}

pub fn soliton_dxxx(c: f64, grid: &Arc<GridSpec>) -> Result<Field> {
    check_speed(c)?;
    Ok(sample(grid, 0.0, |x| profile::d3phi_dx3(c, x)))
}

pub fn soliton_dcc(c: f64, grid: &Arc<GridSpec>) -> Result<Field> {
    check_speed(c)?;
    Ok(sample(grid, 0.0, |x| profile::d2phi_dc2(c, x)))
}

/// `L²` norm of `φ'' − cφ + ½φ²` for the sampled profile (second derivative
/// taken spectrally).
pub fn soliton_residual(c: f64, grid: &Arc<GridSpec>) -> Result<f64> {
    Ok(profile_residual(&soliton(c, grid)?, c))
}

/// Residual of the soliton equation for an arbitrary candidate profile.
pub fn profile_residual(u: &Field, c: f64) -> f64 {
    let upp = derivative(u, 2);
    let r: Vec<f64> = u
        .values()
        .iter()
        .zip(upp.values())
        .map(|(&v, &d2)| d2 - c * v + 0.5 * v * v)
        .collect();
    Field::from_raw(u.grid(), r).norm_l2()
}

/// `m(u) = ½∫u²`
pub fn mass(u: &Field) -> f64 {
    0.5 * u.norm_l2().powi(2)
}

/// `H(u) = ½∫(∂ₓu)² − ⅙∫u³`
pub fn energy(u: &Field) -> f64 {
    let ux = derivative(u, 1);
    let cubic = u.grid().dx() * u.values().iter().map(|v| v * v * v).sum::<f64>();
    0.5 * ux.norm_l2().powi(2) - cubic / 6.0
}

/// `Q_{c₀}(u) = H(u) + c₀ m(u)`
pub fn lyapunov(u: &Field, c0: f64) -> f64 {
    energy(u) + c0 * mass(u)
}

/// `L_{c₀} = −∂ₓ² + c₀ − φ_{c₀}`, the Hessian of `Q_{c₀}` at `φ_{c₀}`.
#[derive(Debug, Clone)]
pub struct LinearizedOperator {
    c0: f64,
    profile: Field,
}

impl LinearizedOperator {
    pub fn new(c0: f64, grid: &Arc<GridSpec>) -> Result<Self> {
        Ok(Self { c0, profile: soliton(c0, grid)? })
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn profile(&self) -> &Field {
        &self.profile
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.profile.grid()
    }

    pub fn apply(&self, v: &Field) -> Result<Field> {
        self.grid().check(v.grid())?;
        let vxx = derivative(v, 2);
        let out = v
            .values()
            .iter()
            .zip(vxx.values())
            .zip(self.profile.values())
            .map(|((&vi, &d2), &p)| -d2 + self.c0 * vi - p * vi)
            .collect();
        Ok(Field::from_raw(self.grid(), out))
    }

    /// Dense matrix of the discretized operator (acting on nodal values).
    pub fn matrix(&self) -> DMatrix<f64> {
        let grid = self.grid();
        let n = grid.points();
        let d2 = fourier_matrix(grid, |k| -k * k);
        let mut m = -d2;
        for i in 0..n {
            m[(i, i)] += self.c0 - self.profile.values()[i];
        }
        symmetrize(m)
    }
}

pub fn apply_l(op: &LinearizedOperator, v: &Field) -> Result<Field> {
    op.apply(v)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Dense matrix of the real Fourier multiplier with symbol `σ(κ)` (even in κ).
pub(crate) fn fourier_matrix(grid: &Arc<GridSpec>, symbol: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let n = grid.points();
    let sym: Vec<f64> = grid.wavenumbers().iter().map(|&k| symbol(k)).collect();
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let mut spec = grid.forward(&e);
        for (s, w) in spec.iter_mut().zip(&sym) {
            *s *= w;
        }
        let col = grid.inverse(&spec);
        m.set_column(j, &DVector::from_vec(col));
        e[j] = 0.0;
    }
    m
}

/// Eigenvalues of the unconstrained discretized `L_{c₀}`, ascending.
pub fn linearized_spectrum(c0: f64, grid: &Arc<GridSpec>) -> Result<Vec<f64>> {
    let op = LinearizedOperator::new(c0, grid)?;
    let mut ev: Vec<f64> = SymmetricEigen::new(op.matrix()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

/// Largest `ν` with `(L_{c₀}v, v) ≥ ν‖v‖²_{H¹}` for all `v ⊥ {φ_{c₀}, ∂ₓφ_{c₀}}`,
/// from a dense eigensolve of the H¹-normalized operator on the constrained
/// subspace.
pub fn coercivity_nu(c0: f64, grid: &Arc<GridSpec>) -> Result<f64> {
    let op = LinearizedOperator::new(c0, grid)?;
    let n = grid.points();
    // S = (1 − ∂ₓ²)^{-1/2}, so that v = S w turns the H¹ Rayleigh quotient into an L² one.
    let s = fourier_matrix(grid, |k| 1.0 / (1.0 + k * k).sqrt());
    let m = symmetrize(&s * op.matrix() * &s);

    let phi = DVector::from_column_slice(op.profile().values());
    let dphi = DVector::from_column_slice(soliton_dx(c0, grid)?.values());
    // v ⊥ g  ⇔  w ⊥ S g
    let mut q1 = &s * phi;
    q1 /= q1.norm();
    let mut q2 = &s * dphi;
    q2 -= &q1 * q1.dot(&q2);
    q2 /= q2.norm();

    let constrained = &q1 * q1.transpose() + &q2 * q2.transpose();
    let proj = DMatrix::<f64>::identity(n, n) - &constrained;
    // Push the two excluded directions far above the restricted spectrum.
    let shift = 10.0 * m.amax() + 1.0;
    let restricted = symmetrize(&proj * m * &proj + constrained * shift);
    let nu = SymmetricEigen::new(restricted).eigenvalues.min();
    if nu > 0.0 {
        Ok(nu)
    } else {
        Err(Error::NotPositiveDefinite(nu))
    }
}

/// `(φ_c, ∂_cφ_c)` on the grid.
pub fn phi_dc_pairing(c: f64, grid: &Arc<GridSpec>) -> Result<f64> {
    inner(&soliton(c, grid)?, &soliton_dc(c, grid)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, translate};

    fn grid() -> Arc<GridSpec> {
        make_grid(100.0, 1024).unwrap()
    }

    #[test]
    fn amplitude_and_decay() {
        let g = grid();
        let phi = soliton(1.0, &g).unwrap();
        assert_eq!(phi.values()[512], 3.0);
        assert!(phi.edge_max(4) < 1e-10);
        assert!(soliton(0.0, &g).is_err());
        assert!(soliton(-1.0, &g).is_err());
    }

    #[test]
    fn speed_scaling() {
        let g = grid();
        for c in [0.5, 2.0, 3.7] {
            let phi = soliton(c, &g).unwrap();
            for (j, v) in phi.values().iter().enumerate() {
                let x = g.x(j);
                assert!((v - c * profile::phi(1.0, c.sqrt() * x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn derivatives_at_center() {
        let g = grid();
        assert_eq!(soliton_dx(1.0, &g).unwrap().values()[512], 0.0);
        for c in [0.3, 1.0, 4.0] {
            assert!((soliton_dc(c, &g).unwrap().values()[512] - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dc_matches_finite_difference() {
        let g = grid();
        let h = 1e-5;
        for c in [0.5, 1.0, 2.0] {
            let fd = soliton(c + h, &g)
                .unwrap()
                .sub(&soliton(c - h, &g).unwrap())
                .unwrap()
                .scale(0.5 / h);
            let an = soliton_dc(c, &g).unwrap();
            assert!(fd.sub(&an).unwrap().max_abs() < 1e-8, "c = {c}");

            let fd2 = soliton_dc(c + h, &g)
                .unwrap()
                .sub(&soliton_dc(c - h, &g).unwrap())
                .unwrap()
                .scale(0.5 / h);
            assert!(fd2.sub(&soliton_dcc(c, &g).unwrap()).unwrap().max_abs() < 1e-7);
        }
    }

    #[test]
    fn x_derivatives_match_spectral() {
        let g = grid();
        let phi = soliton(1.3, &g).unwrap();
        for (order, exact) in [
            (1, soliton_dx(1.3, &g).unwrap()),
            (2, soliton_dxx(1.3, &g).unwrap()),
            (3, soliton_dxxx(1.3, &g).unwrap()),
        ] {
            assert!(derivative(&phi, order).sub(&exact).unwrap().max_abs() < 1e-9);
        }
    }

    #[test]
    fn antiderivative_matches_quadrature() {
        for c in [0.5, 1.0, 2.5] {
            for x in [-7.0, -1.0, 0.0, 0.4, 3.0, 12.0] {
                let f = |y| profile::dphi_dc(c, y);
                let de = quadrature::double_exponential::integrate;
                let q = de(f, -80.0, -20.0, 1e-14).integral + de(f, -20.0, x, 1e-14).integral;
                assert!((q - profile::dphi_dc_antiderivative(c, x)).abs() < 1e-10, "c = {c}, x = {x}");
            }
        }
        assert!((profile::dphi_dc_antiderivative(1.0, 60.0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn residual_small_for_soliton_and_large_otherwise() {
        let g = grid();
        assert!(soliton_residual(1.0, &g).unwrap() < 1e-8);
        let phi = soliton(1.0, &g).unwrap();
        let moved = translate(&phi, 3.3);
        assert!(profile_residual(&moved, 1.0) < 1e-8);
        assert!(profile_residual(&phi.scale(2.0), 1.0) > 1.0);
    }

    #[test]
    fn functionals() {
        let g = grid();
        assert_eq!(mass(&Field::zeros(&g)), 0.0);
        let phi = soliton(1.0, &g).unwrap();
        assert!((mass(&phi) - 12.0).abs() < 1e-8);
        assert!((energy(&phi) + 7.2).abs() < 1e-8);
        assert!((lyapunov(&phi, 1.0) - 4.8).abs() < 1e-8);
    }

    #[test]
    fn kernel_identities() {
        let g = grid();
        let op = LinearizedOperator::new(1.0, &g).unwrap();
        let dx = soliton_dx(1.0, &g).unwrap();
        let dc = soliton_dc(1.0, &g).unwrap();
        let phi = op.profile().clone();
        assert!(op.apply(&dx).unwrap().norm_l2() < 1e-8 * dx.norm_l2());
        let l_dc = op.apply(&dc).unwrap();
        assert!(l_dc.add(&phi).unwrap().norm_l2() < 1e-8 * phi.norm_l2());
        // direct evaluation on a c₀-independent function
        let v = Field::from_fn(&g, |x| (-x * x / 8.0).exp() * x.cos());
        let direct = Field::from_fn(&g, |x| {
            let e = (-x * x / 8.0).exp();
            let f = e * x.cos();
            let fpp = e * ((x * x / 16.0 - 0.25 - 1.0) * x.cos() + 0.5 * x * x.sin());
            -fpp + f - profile::phi(1.0, x) * f
        });
        assert!(op.apply(&v).unwrap().sub(&direct).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn discrete_operator_is_self_adjoint() {
        let g = grid();
        let op = LinearizedOperator::new(1.0, &g).unwrap();
        let f = Field::from_fn(&g, |x| (-(x - 1.0).powi(2) / 5.0).exp());
        let h = Field::from_fn(&g, |x| x * (-x * x / 7.0).exp());
        let a = inner(&op.apply(&f).unwrap(), &h).unwrap();
        let b = inner(&f, &op.apply(&h).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn coercivity_and_spectrum() {
        let g = make_grid(100.0, 512).unwrap();
        let nu = coercivity_nu(1.0, &g).unwrap();
        assert!(nu > 0.0, "nu = {nu}");
        let spec = linearized_spectrum(1.0, &g).unwrap();
        assert_eq!(spec.iter().filter(|&&e| e < -1e-8).count(), 1);
        // Pöschl–Teller: ground state −5c/4
        assert!((spec[0] + 1.25).abs() < 1e-8);
        let kernel = spec.iter().fold(f64::INFINITY, |m, &e| if e.abs() < m.abs() { e } else { m });
        assert!(kernel.abs() < 1e-6);
    }
}
