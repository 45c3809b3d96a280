//! Modulated decomposition `u(· + x) = φ_c + εη` with `η ⊥ {φ_{c₀}, ∂ₓφ_{c₀}}`,
//! the drift and martingale coefficient systems of the modulation equations
//! `dx = c dt + εy dt + ε(z, dW)`, `dc = εa dt + ε(b, dW)`, exit detection and
//! the refined center `x̃ = x − ελ`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{derivative, inner, translate, Field, GridSpec};
use crate::noise::Kernel;
use crate::soliton::{
    check_speed, soliton, soliton_at, soliton_dc, soliton_dcc, soliton_dx, soliton_dxx, soliton_dxxx, LinearizedOperator,
    SolitonParams,
};

pub const NEWTON_MAX_ITER: usize = 50;
pub const NEWTON_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitReason {
    Speed,
    Remainder,
    /// Newton failure or singular modulation matrix.
    SolitonLost,
}

#[derive(Debug, Clone)]
pub struct ModulationState {
    pub t: f64,
    pub c: f64,
    /// Lab-frame center.
    pub x: f64,
    /// `η` such that `u(· + x) = φ_c + εη` (raw difference when `ε = 0`).
    pub eta: Field,
    pub exited: bool,
    pub exit_reason: Option<ExitReason>,
}

impl ModulationState {
    pub fn params(&self) -> SolitonParams {
        SolitonParams { c: self.c, x0: self.x }
    }
}

/// Martingale representers: fields whose pairings with `Φe_l` give the two
/// components of `Z_l`, together with their images under `Φ*`.
#[derive(Debug, Clone)]
pub struct MartingaleReps {
    pub z_rep: Field,
    pub b_rep: Field,
    pub phi_star_z: Field,
    pub phi_star_b: Field,
}

#[derive(Debug, Clone)]
pub struct ModCoefficients {
    pub y: f64,
    pub a: f64,
    pub reps: MartingaleReps,
    pub jacobian: Matrix2<f64>,
}

/// Profiles of `φ_{c₀}` shared by all decompositions around `c₀`.
#[derive(Debug, Clone)]
pub struct Modulator {
    grid: Arc<GridSpec>,
    c0: f64,
    alpha: f64,
    eps: f64,
    phi0: Field,
    psi: Field,
    phi0_xx: Field,
    phi0_xxx: Field,
    l_phi0_xx: Field,
    psi_norm2: f64,
}

impl Modulator {
    pub fn new(grid: &Arc<GridSpec>, c0: f64, alpha: f64, eps: f64) -> Result<Self> {
        check_speed(c0)?;
        if !(alpha > 0.0) || !(eps >= 0.0) {
            return Err(Error::InvalidParameter(format!("alpha = {alpha}, eps = {eps}")));
        }
        let phi0 = soliton(c0, grid)?;
        let psi = soliton_dx(c0, grid)?;
        let phi0_xx = soliton_dxx(c0, grid)?;
        let phi0_xxx = soliton_dxxx(c0, grid)?;
        let l_phi0_xx = LinearizedOperator::new(c0, grid)?.apply(&phi0_xx)?;
        let psi_norm2 = inner(&psi, &psi)?;
        Ok(Self { grid: grid.clone(), c0, alpha, eps, phi0, psi, phi0_xx, phi0_xxx, l_phi0_xx, psi_norm2 })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn phi0(&self) -> &Field {
        &self.phi0
    }

    /// `∂ₓφ_{c₀}`
    pub fn psi(&self) -> &Field {
        &self.psi
    }

    /// `|∂ₓφ_{c₀}|²_{L²}`
    pub fn psi_norm2(&self) -> f64 {
        self.psi_norm2
    }

    /// `L_{c₀}∂ₓ²φ_{c₀}`
    pub fn l_phi0_xx(&self) -> &Field {
        &self.l_phi0_xx
    }

    fn scale(&self) -> f64 {
        if self.eps > 0.0 {
            self.eps
        } else {
            1.0
        }
    }

    /// `(c, x)` solving the orthogonality conditions for `u`, Newton from
    /// `guess`. `frame_offset` is the lab position of the origin of `u`'s frame.
    pub fn decompose(&self, u: &Field, frame_offset: f64, guess: SolitonParams, t: f64) -> Result<ModulationState> {
        self.grid.check(u.grid())?;
        check_speed(guess.c)?;
        let spec = u.spectrum();
        let grid = &self.grid;
        let ik = grid.derivative_symbol(1);
        let shifted = |y: f64| -> (Field, Field) {
            let sh = grid.shift_symbol(y);
            let a: Vec<_> = spec.iter().zip(&sh).map(|(s, p)| s * p).collect();
            let b: Vec<_> = a.iter().zip(&ik).map(|(s, d)| s * d).collect();
            (Field::from_spectrum(grid, &a), Field::from_spectrum(grid, &b))
        };

        let (mut c, mut x) = (guess.c, guess.x0);
        let mut residual = f64::INFINITY;
        for _ in 0..NEWTON_MAX_ITER {
            if !(c > 0.0) || !c.is_finite() || !x.is_finite() {
                break;
            }
            let (v, vx) = shifted(x - frame_offset);
            let phic = soliton(c, grid)?;
            let dc = soliton_dc(c, grid)?;
            let diff = v.sub(&phic)?;
            let f = Vector2::new(inner(&diff, &self.phi0)?, inner(&diff, &self.psi)?);
            residual = f.amax();
            if residual < NEWTON_TOL {
                let mut eta = diff;
                if self.eps > 0.0 {
                    eta = eta.scale(1.0 / self.eps);
                }
                return Ok(self.classify(ModulationState { t, c, x, eta, exited: false, exit_reason: None }));
            }
            let j = Matrix2::new(
                -inner(&dc, &self.phi0)?,
                inner(&vx, &self.phi0)?,
                -inner(&dc, &self.psi)?,
                inner(&vx, &self.psi)?,
            );
            let step = j.lu().solve(&(-f)).ok_or(Error::SingularJacobian(j.determinant()))?;
            c += step[0];
            x += step[1];
        }
        Err(Error::NoConvergence { iterations: NEWTON_MAX_ITER, residual })
    }

    fn classify(&self, mut st: ModulationState) -> ModulationState {
        let remainder = self.scale() * st.eta.norm_h1();
        if (st.c - self.c0).abs() > self.alpha {
            st.exited = true;
            st.exit_reason = Some(ExitReason::Speed);
        } else if remainder > self.alpha {
            st.exited = true;
            st.exit_reason = Some(ExitReason::Remainder);
        }
        st
    }

    /// `|(η, φ_{c₀})| + |(η, ∂ₓφ_{c₀})|`
    pub fn orthogonality_residual(&self, eta: &Field) -> Result<f64> {
        Ok(inner(eta, &self.phi0)?.abs() + inner(eta, &self.psi)?.abs())
    }

    /// The 2×2 modulation matrix `A^ε`.
    pub fn jacobian_a(&self, st: &ModulationState) -> Result<Matrix2<f64>> {
        let grid = &self.grid;
        let dxc = soliton_dx(st.c, grid)?;
        let dcc = soliton_dc(st.c, grid)?;
        let eta_x = derivative(&st.eta, 1);
        let e = self.eps;
        let a = Matrix2::new(
            inner(&dxc, &self.psi)? + e * inner(&eta_x, &self.psi)?,
            -inner(&dcc, &self.psi)?,
            -inner(&dxc, &self.phi0)?,
            inner(&dcc, &self.phi0)?,
        );
        let scale = a.abs().max().max(1.0);
        let det = a.determinant();
        if det.abs() < 1e-12 * scale * scale {
            return Err(Error::SingularJacobian(det));
        }
        Ok(a)
    }

    /// `v = φ_c + εη` in the modulated frame.
    fn full_profile(&self, st: &ModulationState) -> Result<Field> {
        let phic = soliton(st.c, &self.grid)?;
        if self.eps > 0.0 {
            phic.add(&st.eta.scale(self.eps))
        } else {
            Ok(phic)
        }
    }

    pub fn solve_martingale(&self, st: &ModulationState, kernel: &Kernel) -> Result<MartingaleReps> {
        let a = self.jacobian_a(st)?;
        let inv = a.try_inverse().ok_or(Error::SingularJacobian(a.determinant()))?;
        let v = self.full_profile(st)?;
        let f1 = v.mul(&self.psi)?;
        let f2 = v.mul(&self.phi0)?;
        // F_l = (−(f1, 𝒯_xΦe_l), (f2, 𝒯_xΦe_l)) and (f, 𝒯_xΦe_l) = (𝒯_{−x}f, Φe_l)
        let g1 = translate(&f1, -st.x).scale(-1.0);
        let g2 = translate(&f2, -st.x);
        let combo = |r: usize| -> Result<Field> { g1.scale(inv[(r, 0)]).add(&g2.scale(inv[(r, 1)])) };
        let z_rep = combo(0)?;
        let b_rep = combo(1)?;
        let s1 = kernel.adjoint_shifted(&f1, st.x)?.scale(-1.0);
        let s2 = kernel.adjoint_shifted(&f2, st.x)?;
        let phi_star_z = s1.scale(inv[(0, 0)]).add(&s2.scale(inv[(0, 1)]))?;
        let phi_star_b = s1.scale(inv[(1, 0)]).add(&s2.scale(inv[(1, 1)]))?;
        Ok(MartingaleReps { z_rep, b_rep, phi_star_z, phi_star_b })
    }

    /// Right-hand side `G^ε` of the drift system.
    pub fn drift_rhs(&self, st: &ModulationState, reps: &MartingaleReps, kernel: &Kernel) -> Result<Vector2<f64>> {
        let grid = &self.grid;
        let e = self.eps;
        let eta = &st.eta;
        let psi = &self.psi;
        let psi_x = &self.phi0_xx;
        let phic = soliton(st.c, grid)?;
        let phic_xx = soliton_dxx(st.c, grid)?;
        let phic_cc = soliton_dcc(st.c, grid)?;
        let dphi_eta = phic.sub(&self.phi0)?.mul(eta)?;
        let eta2 = eta.mul(eta)?;
        let z2 = reps.phi_star_z.norm_l2().powi(2);
        let b2 = reps.phi_star_b.norm_l2().powi(2);
        let pz = &reps.phi_star_z;
        // Σ_l (∂ₓ(f 𝒯_xΦe_l), g)(z, Φe_l) = −(Φ*𝒯_{−x}(f ∂ₓg), Φ*z)
        let sum = |f: &Field, gx: &Field| -> Result<f64> { Ok(-inner(&kernel.adjoint_shifted(&f.mul(gx)?, st.x)?, pz)?) };

        let mut g1 = inner(eta, &self.l_phi0_xx)? + (st.c - self.c0) * inner(eta, psi_x)?
            - 0.5 * e * inner(&eta2, psi_x)?
            - inner(&dphi_eta, psi_x)?;
        let mut g2 = 0.5 * e * inner(&eta2, psi)? + inner(&dphi_eta, psi)?;
        if e > 0.0 {
            g1 += -0.5 * e * inner(&phic_xx, psi)? * z2 + 0.5 * e * inner(&phic_cc, psi)? * b2
                - e * sum(&phic, psi_x)?
                - 0.5 * e * e * inner(eta, &self.phi0_xxx)? * z2
                - e * e * sum(eta, psi_x)?;
            g2 += 0.5 * e * inner(&phic_xx, &self.phi0)? * z2 - 0.5 * e * inner(&phic_cc, &self.phi0)? * b2
                + e * sum(&phic, psi)?
                + 0.5 * e * e * inner(eta, psi_x)? * z2
                + e * e * sum(eta, psi)?;
        }
        Ok(Vector2::new(g1, g2))
    }

    /// `(y, a) = (A^ε)^{-1} G^ε`
    pub fn solve_drift(&self, st: &ModulationState, reps: &MartingaleReps, kernel: &Kernel) -> Result<(f64, f64)> {
        let a = self.jacobian_a(st)?;
        let g = self.drift_rhs(st, reps, kernel)?;
        let y = a.lu().solve(&g).ok_or(Error::SingularJacobian(a.determinant()))?;
        Ok((y[0], y[1]))
    }

    pub fn coefficients(&self, st: &ModulationState, kernel: &Kernel) -> Result<ModCoefficients> {
        let reps = self.solve_martingale(st, kernel)?;
        let (y, a) = self.solve_drift(st, &reps, kernel)?;
        let jacobian = self.jacobian_a(st)?;
        Ok(ModCoefficients { y, a, reps, jacobian })
    }

    /// `|∂ₓφ_{c₀}|^{-2}(η, L_{c₀}∂ₓ²φ_{c₀})`, the `ε → 0` limit of `y`.
    pub fn limit_y(&self, eta: &Field) -> Result<f64> {
        Ok(inner(eta, &self.l_phi0_xx)? / self.psi_norm2)
    }
}

/// Per-snapshot tracker with stopping-time semantics.
#[derive(Debug, Clone)]
pub struct Tracker {
    modulator: Modulator,
    series: Vec<ModulationState>,
    exit_time: Option<f64>,
    exit_reason: Option<ExitReason>,
    last: SolitonParams,
    last_t: f64,
}

impl Tracker {
    pub fn new(modulator: Modulator, start: SolitonParams) -> Self {
        Self { modulator, series: Vec::new(), exit_time: None, exit_reason: None, last: start, last_t: 0.0 }
    }

    pub fn modulator(&self) -> &Modulator {
        &self.modulator
    }

    pub fn series(&self) -> &[ModulationState] {
        &self.series
    }

    pub fn into_series(self) -> Vec<ModulationState> {
        self.series
    }

    pub fn exit_time(&self) -> Option<f64> {
        self.exit_time
    }

    pub fn exit_reason(&self) -> Option<ExitReason> {
        self.exit_reason
    }

    pub fn exited(&self) -> bool {
        self.exit_time.is_some()
    }

    /// Decompose the snapshot warm-started from the previous state advanced by
    /// `c·Δt`. Returns `false` once the exit time has been reached.
    pub fn observe(&mut self, u: &Field, t: f64, frame_offset: f64) -> bool {
        if self.exited() {
            return false;
        }
        let guess = SolitonParams { c: self.last.c, x0: self.last.x0 + self.last.c * (t - self.last_t) };
        match self.modulator.decompose(u, frame_offset, guess, t) {
            Ok(st) => {
                self.last = st.params();
                self.last_t = t;
                if st.exited {
                    self.exit_time = Some(t);
                    self.exit_reason = st.exit_reason;
                }
                let go = !st.exited;
                self.series.push(st);
                go
            }
            Err(_) => {
                self.exit_time = Some(t);
                self.exit_reason = Some(ExitReason::SolitonLost);
                false
            }
        }
    }
}

/// Track a recorded trajectory of `(t, u, frame_offset)` snapshots.
pub fn track(snapshots: &[(f64, Field, f64)], modulator: Modulator) -> Tracker {
    let start = SolitonParams { c: modulator.c0(), x0: snapshots.first().map_or(0.0, |s| s.2) };
    let mut tracker = Tracker::new(modulator, start);
    for (t, u, offset) in snapshots {
        if !tracker.observe(u, *t, *offset) {
            break;
        }
    }
    tracker
}

#[derive(Debug, Clone)]
pub struct RefinedState {
    pub t: f64,
    pub x_refined: f64,
    pub eta_refined: Field,
}

/// `x̃ = x − ελ` and `η̃ = (φ_c(· − ελ) − φ_c)/ε + η(· − ελ)`.
pub fn refine_center(series: &[ModulationState], lambda: &[f64], eps: f64) -> Result<Vec<RefinedState>> {
    if series.len() != lambda.len() {
        return Err(Error::InvalidParameter(format!(
            "{} states but {} values of lambda",
            series.len(),
            lambda.len()
        )));
    }
    series
        .iter()
        .zip(lambda)
        .map(|(st, &lam)| {
            let shift = eps * lam;
            if shift == 0.0 {
                return Ok(RefinedState { t: st.t, x_refined: st.x, eta_refined: st.eta.clone() });
            }
            let grid = st.eta.grid();
            let moved = soliton_at(SolitonParams { c: st.c, x0: shift }, grid)?;
            let phic = soliton(st.c, grid)?;
            let eta_refined = moved.sub(&phic)?.scale(1.0 / eps).add(&translate(&st.eta, -shift))?;
            Ok(RefinedState { t: st.t, x_refined: st.x - shift, eta_refined })
        })
        .collect()
}

/// CSV with columns `t,c,x,x_refined,|eta|_L2,|eta|_H1,exited`.
pub fn write_tracking_csv(path: &Path, series: &[ModulationState], refined: Option<&[RefinedState]>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,c,x,x_refined,|eta|_L2,|eta|_H1,exited")?;
    for (i, st) in series.iter().enumerate() {
        let xr = refined.and_then(|r| r.get(i)).map_or(st.x, |r| r.x_refined);
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            st.t,
            st.c,
            st.x,
            xr,
            st.eta.norm_l2(),
            st.eta.norm_h1(),
            u8::from(st.exited)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Remove the components along `φ_{c₀}` and `∂ₓφ_{c₀}` (orthogonal to each other by parity).
pub fn project_orthogonal(m: &Modulator, f: &Field) -> Result<Field> {
    let p0 = inner(f, m.phi0())? / inner(m.phi0(), m.phi0())?;
    let p1 = inner(f, m.psi())? / m.psi_norm2();
    f.sub(&m.phi0().scale(p0))?.sub(&m.psi().scale(p1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::noise::KernelSpec;

    fn setup(eps: f64) -> (Modulator, Kernel) {
        let g = make_grid(100.0, 512).unwrap();
        let k = Kernel::new(KernelSpec::default(), &g).unwrap();
        (Modulator::new(&g, 1.0, 0.3, eps).unwrap(), k)
    }

    fn bump(g: &Arc<GridSpec>) -> Field {
        Field::from_fn(g, |x| (-(x - 1.0).powi(2) / 3.0).exp() * (1.0 + 0.3 * x))
    }

    #[test]
    fn exact_soliton_recovered() {
        let (m, _) = setup(0.0);
        let g = m.grid().clone();
        for (c, x) in [(1.0, 0.0), (1.1, 2.5), (0.9, -3.7)] {
            let u = soliton_at(SolitonParams { c, x0: x }, &g).unwrap();
            let st = m.decompose(&u, 0.0, SolitonParams { c: 1.0, x0: x + 0.3 }, 0.0).unwrap();
            assert!((st.c - c).abs() < 1e-10 && (st.x - x).abs() < 1e-10, "{} {}", st.c, st.x);
            assert!(st.eta.max_abs() < 1e-9);
        }
    }

    #[test]
    fn frame_offset_is_respected() {
        let (m, _) = setup(0.0);
        let g = m.grid().clone();
        let u = soliton_at(SolitonParams { c: 1.05, x0: 0.7 }, &g).unwrap();
        let st = m.decompose(&u, 10.0, SolitonParams { c: 1.0, x0: 10.5 }, 0.0).unwrap();
        assert!((st.x - 10.7).abs() < 1e-10);
    }

    #[test]
    fn orthogonal_perturbation_is_kept() {
        let eps = 0.01;
        let (m, _) = setup(eps);
        let g = m.grid().clone();
        let eta0 = project_orthogonal(&m, &bump(&g)).unwrap();
        let u = m.phi0().add(&eta0.scale(eps)).unwrap();
        let st = m.decompose(&u, 0.0, SolitonParams { c: 1.0, x0: 0.0 }, 0.0).unwrap();
        assert!((st.c - 1.0).abs() < 1e-10 && st.x.abs() < 1e-10);
        assert!(st.eta.sub(&eta0).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn exit_classification() {
        let (m, _) = setup(0.0);
        let g = m.grid().clone();
        let u = soliton(1.5, &g).unwrap();
        let st = m.decompose(&u, 0.0, SolitonParams { c: 1.0, x0: 0.0 }, 0.0).unwrap();
        assert_eq!(st.exit_reason, Some(ExitReason::Speed));
        let big = project_orthogonal(&m, &bump(&g)).unwrap().scale(2.0);
        let st = m.decompose(&m.phi0().add(&big).unwrap(), 0.0, SolitonParams { c: 1.0, x0: 0.0 }, 0.0).unwrap();
        assert_eq!(st.exit_reason, Some(ExitReason::Remainder));
    }

    #[test]
    fn newton_failure_is_reported() {
        let (m, _) = setup(0.0);
        let u = Field::zeros(m.grid());
        assert!(m.decompose(&u, 0.0, SolitonParams { c: 1.0, x0: 0.0 }, 0.0).is_err());
    }

    #[test]
    fn jacobian_at_rest() {
        let (m, _) = setup(0.0);
        let st = m.decompose(m.phi0(), 0.0, SolitonParams { c: 1.0, x0: 0.0 }, 0.0).unwrap();
        let a = m.jacobian_a(&st).unwrap();
        assert!((a[(0, 0)] - 4.8).abs() < 1e-6);
        assert!((a[(1, 1)] - 18.0).abs() < 1e-6);
        assert!(a[(0, 1)].abs() < 1e-12 && a[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn drift_vanishes_at_rest() {
        let (m, k) = setup(0.0);
        let st = m.decompose(m.phi0(), 0.0, SolitonParams { c: 1.0, x0: 0.0 }, 0.0).unwrap();
        let co = m.coefficients(&st, &k).unwrap();
        assert!(co.y.abs() < 1e-12 && co.a.abs() < 1e-12);
    }

    #[test]
    fn zero_eps_drift_matches_limit() {
        let (m, k) = setup(0.0);
        let g = m.grid().clone();
        let eta = project_orthogonal(&m, &bump(&g)).unwrap().scale(0.05);
        let st = ModulationState { t: 0.0, c: 1.0, x: 0.0, eta: eta.clone(), exited: false, exit_reason: None };
        let co = m.coefficients(&st, &k).unwrap();
        assert!((co.y - m.limit_y(&eta).unwrap()).abs() < 1e-12);
        assert!(co.a.abs() < 1e-12);
    }

    #[test]
    fn martingale_limits() {
        let (m, k) = setup(0.0);
        let st = m.decompose(m.phi0(), 0.0, SolitonParams { c: 1.0, x0: 0.0 }, 0.0).unwrap();
        let reps = m.solve_martingale(&st, &k).unwrap();
        let pp = m.phi0().mul(m.psi()).unwrap();
        let z = k.adjoint(&pp).unwrap().scale(-1.0 / m.psi_norm2());
        let b = k.adjoint(&m.phi0().mul(m.phi0()).unwrap()).unwrap().scale(1.0 / 18.0);
        assert!(reps.phi_star_z.sub(&z).unwrap().max_abs() < 1e-10);
        assert!(reps.phi_star_b.sub(&b).unwrap().max_abs() < 1e-8);
        assert!(k.adjoint(&reps.z_rep).unwrap().sub(&reps.phi_star_z).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn refine_identity_and_csv() {
        let (m, _) = setup(0.1);
        let st = m.decompose(m.phi0(), 0.0, SolitonParams { c: 1.0, x0: 0.0 }, 0.0).unwrap();
        let r = refine_center(std::slice::from_ref(&st), &[0.0], 0.1).unwrap();
        assert_eq!(r[0].x_refined, st.x);
        assert!(refine_center(std::slice::from_ref(&st), &[], 0.1).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("track.csv");
        write_tracking_csv(&p, &[st], Some(&r)).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("t,c,x,x_refined,|eta|_L2,|eta|_H1,exited\n0,1,"));
    }
}
