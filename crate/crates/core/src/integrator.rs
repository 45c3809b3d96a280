//! Strang split-step pseudospectral integrator for
//! `du + (∂ₓ³u + ½∂ₓ(u²))dt = εu dW` in Itô form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::ControlFlow;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{derivative, inner, make_grid_with_origin, Field, GridSpec, Spectrum};
use crate::noise::NoiseState;
use crate::soliton::{energy, mass};

/// Scheme for the two nonlinear half-steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NonlinearScheme {
    #[default]
    Midpoint,
    Rk4,
}

/// Pathwise sums entering the discrete mass and energy balances. The
/// stochastic integrals are evaluated at the drifted state the noise update
/// acts on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BalanceRecord {
    pub mass_start: f64,
    pub energy_start: f64,
    pub mass_end: f64,
    pub energy_end: f64,
    /// `Σ ε(u², ΔW)`
    pub mass_martingale: f64,
    /// `Σ ε²|k|² m(u) dt`
    pub mass_correction: f64,
    /// `Σ ε(−u∂ₓ²u − ½u³, ΔW)`
    pub energy_martingale: f64,
    /// `Σ ½ε²(|k|²(|∂ₓu|² − ∫u³) + |k′|²|u|²) dt`
    pub energy_correction: f64,
}

/// Residuals `|LHS − RHS|` of the mass and energy Itô balances.
pub fn ito_balance_residual(rec: &BalanceRecord) -> (f64, f64) {
    let mass = (rec.mass_end - rec.mass_start - rec.mass_martingale - rec.mass_correction).abs();
    let energy = (rec.energy_end - rec.energy_start - rec.energy_martingale - rec.energy_correction).abs();
    (mass, energy)
}

#[derive(Debug, Clone)]
struct Workspace {
    dt: f64,
    /// `exp((iκ³ + iκ·frame_speed)dt)`
    propagator: Spectrum,
    /// `−½iκ` restricted to the 2/3 band
    flux: Spectrum,
    keep: Vec<bool>,
    a: Spectrum,
    b: Spectrum,
    k1: Spectrum,
    k2: Spectrum,
    k3: Spectrum,
    k4: Spectrum,
    phys: Spectrum,
    scratch: Spectrum,
}

impl Workspace {
    fn new(grid: &GridSpec, dt: f64, frame_speed: f64) -> Self {
        let n = grid.points();
        let ny = grid.nyquist();
        let cutoff = n / 3;
        let mut propagator = Vec::with_capacity(n);
        let mut flux = Vec::with_capacity(n);
        let mut keep = Vec::with_capacity(n);
        for (j, &k) in grid.wavenumbers().iter().enumerate() {
            let idx = if j <= ny { j } else { n - j };
            let inside = idx < cutoff;
            keep.push(inside);
            if j == ny {
                propagator.push(Complex64::new(1.0, 0.0));
                flux.push(Complex64::new(0.0, 0.0));
            } else {
                propagator.push(Complex64::from_polar(1.0, (k * k * k + frame_speed * k) * dt));
                flux.push(if inside { Complex64::new(0.0, -0.5 * k) } else { Complex64::new(0.0, 0.0) });
            }
        }
        let z = vec![Complex64::new(0.0, 0.0); n];
        Self {
            dt,
            propagator,
            flux,
            keep,
            a: z.clone(),
            b: z.clone(),
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z.clone(),
            phys: z.clone(),
            scratch: vec![Complex64::new(0.0, 0.0); grid.scratch_len()],
        }
    }
}

/// `out = −½ iκ · F[(F⁻¹ mask·v)²]` on the 2/3 band.
fn nonlinear(grid: &GridSpec, ws_keep: &[bool], flux: &[Complex64], v: &[Complex64], out: &mut [Complex64], phys: &mut [Complex64], scratch: &mut [Complex64]) {
    let inv_n = 1.0 / grid.points() as f64;
    for ((p, &x), &k) in phys.iter_mut().zip(v).zip(ws_keep) {
        *p = if k { x } else { Complex64::new(0.0, 0.0) };
    }
    grid.inverse_in_place(phys, scratch);
    for p in phys.iter_mut() {
        let r = p.re * inv_n;
        *p = Complex64::new(r * r, 0.0);
    }
    grid.forward_in_place(phys, scratch);
    for ((o, &p), &f) in out.iter_mut().zip(phys.iter()).zip(flux) {
        *o = p * f;
    }
}

/// One trajectory of the stochastic KdV equation.
#[derive(Debug, Clone)]
pub struct SkdvState {
    u: Field,
    t: f64,
    frame_speed: f64,
    eps: f64,
    noise: NoiseState,
    scheme: NonlinearScheme,
    blowup: f64,
    balance: Option<BalanceRecord>,
    ws: Option<Box<Workspace>>,
}

impl SkdvState {
    pub fn new(u: Field, eps: f64, noise: NoiseState) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidParameter(format!("eps must be non-negative, got {eps}")));
        }
        u.grid().check(noise.kernel().grid())?;
        if !u.is_finite() {
            return Err(Error::InvalidParameter("initial field is not finite".into()));
        }
        Ok(Self {
            u,
            t: 0.0,
            frame_speed: 0.0,
            eps,
            noise,
            scheme: NonlinearScheme::default(),
            blowup: 1e6,
            balance: None,
            ws: None,
        })
    }

    /// Solve in the frame moving with speed `c` (state is `u(x + ct)`).
    pub fn with_frame_speed(mut self, c: f64) -> Self {
        self.frame_speed = c;
        self.ws = None;
        self
    }

    pub fn with_scheme(mut self, scheme: NonlinearScheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Abort when `max|u|` exceeds this bound.
    pub fn with_blowup_bound(mut self, bound: f64) -> Self {
        self.blowup = bound;
        self
    }

    /// Start accumulating the terms of the Itô balances.
    pub fn with_balance(mut self) -> Self {
        self.balance = Some(BalanceRecord {
            mass_start: mass(&self.u),
            energy_start: energy(&self.u),
            mass_end: mass(&self.u),
            energy_end: energy(&self.u),
            ..Default::default()
        });
        self
    }

    pub fn u(&self) -> &Field {
        &self.u
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn frame_speed(&self) -> f64 {
        self.frame_speed
    }

    /// Accumulated displacement of the moving frame.
    pub fn frame_offset(&self) -> f64 {
        self.frame_speed * self.t
    }

    pub fn noise(&self) -> &NoiseState {
        &self.noise
    }

    pub fn balance(&self) -> Option<&BalanceRecord> {
        self.balance.as_ref()
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.u.grid()
    }

    fn workspace(&mut self, dt: f64) -> Box<Workspace> {
        match self.ws.take() {
            Some(ws) if ws.dt == dt => ws,
            _ => Box::new(Workspace::new(self.u.grid(), dt, self.frame_speed)),
        }
    }

    /// Advance by `dt`.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let grid = self.u.grid().clone();
        let mut ws = self.workspace(dt);
        let mut v = grid.forward(self.u.values());

        self.nonlinear_half(&grid, &mut ws, &mut v);
        for (x, p) in v.iter_mut().zip(&ws.propagator) {
            *x *= p;
        }
        self.nonlinear_half(&grid, &mut ws, &mut v);
        let mut values = grid.inverse(&v);
        self.ws = Some(ws);

        if self.eps > 0.0 {
            let shift = self.frame_offset();
            let dw = self.noise.sample_increment_shifted(dt, shift)?;
            let c0dt = self.noise.kernel().variance_density() * dt;
            let e = self.eps;
            if let Some(rec) = self.balance.as_mut() {
                let drifted = Field::from_raw(&grid, values.clone());
                accumulate_balance(rec, &drifted, &dw, e, dt, self.noise.kernel());
            }
            for (u, &w) in values.iter_mut().zip(dw.values()) {
                *u += e * *u * w + 0.5 * e * e * *u * (w * w - c0dt);
            }
        } else {
            self.noise.skip(dt);
        }

        let next = Field::from_raw(&grid, values);
        if !next.is_finite() || next.max_abs() > self.blowup {
            return Err(Error::TrajectoryFailed {
                t: self.t,
                reason: if next.is_finite() { "amplitude bound exceeded".into() } else { "non-finite field".into() },
            });
        }
        self.u = next;
        self.t += dt;
        if let Some(rec) = self.balance.as_mut() {
            rec.mass_end = mass(&self.u);
            rec.energy_end = energy(&self.u);
        }
        Ok(())
    }

    fn nonlinear_half(&self, grid: &GridSpec, ws: &mut Workspace, v: &mut Spectrum) {
        let h = 0.5 * ws.dt;
        let Workspace { keep, flux, a, b, k1, k2, k3, k4, phys, scratch, .. } = ws;
        match self.scheme {
            NonlinearScheme::Midpoint => {
                nonlinear(grid, keep, flux, v, k1, phys, scratch);
                for ((x, &y), &k) in a.iter_mut().zip(v.iter()).zip(k1.iter()) {
                    *x = y + k * (0.5 * h);
                }
                nonlinear(grid, keep, flux, a, k2, phys, scratch);
                for (x, &k) in v.iter_mut().zip(k2.iter()) {
                    *x += k * h;
                }
            }
            NonlinearScheme::Rk4 => {
                nonlinear(grid, keep, flux, v, k1, phys, scratch);
                for ((x, &y), &k) in a.iter_mut().zip(v.iter()).zip(k1.iter()) {
                    *x = y + k * (0.5 * h);
                }
                nonlinear(grid, keep, flux, a, k2, phys, scratch);
                for ((x, &y), &k) in b.iter_mut().zip(v.iter()).zip(k2.iter()) {
                    *x = y + k * (0.5 * h);
                }
                nonlinear(grid, keep, flux, b, k3, phys, scratch);
                for ((x, &y), &k) in a.iter_mut().zip(v.iter()).zip(k3.iter()) {
                    *x = y + k * h;
                }
                nonlinear(grid, keep, flux, a, k4, phys, scratch);
                for (i, x) in v.iter_mut().enumerate() {
                    *x += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0);
                }
            }
        }
    }

    /// Step until `t_end`, calling `observer` every `stride` steps (and at the
    /// start); the final state is always observed. The observer can stop the
    /// run early with `ControlFlow::Break`.
    pub fn run<F>(&mut self, t_end: f64, dt: f64, stride: usize, mut observer: F) -> Result<()>
    where
        F: FnMut(&SkdvState) -> ControlFlow<()>,
    {
        if !(t_end > self.t) {
            return Err(Error::InvalidParameter(format!("end time {t_end} is not after t = {}", self.t)));
        }
        let steps = ((t_end - self.t) / dt).round() as usize;
        if stride > 0 && observer(self).is_break() {
            return Ok(());
        }
        for n in 1..=steps {
            self.step(dt)?;
            let last = n == steps;
            if ((stride > 0 && n.is_multiple_of(stride)) || last) && observer(self).is_break() {
                return Ok(());
            }
        }
        Ok(())
    }
}

fn accumulate_balance(rec: &mut BalanceRecord, u: &Field, dw: &Field, eps: f64, dt: f64, kernel: &crate::noise::Kernel) {
    let dx = u.grid().dx();
    let uxx = derivative(u, 2);
    let ux = derivative(u, 1);
    let k2 = kernel.variance_density();
    let kp2 = kernel.h1_norm().powi(2) - kernel.l2_norm().powi(2);
    let mut m_mart = 0.0;
    let mut e_mart = 0.0;
    let mut cubic = 0.0;
    for ((&v, &w), &d2) in u.values().iter().zip(dw.values()).zip(uxx.values()) {
        m_mart += v * v * w;
        e_mart += (-v * d2 - 0.5 * v * v * v) * w;
        cubic += v * v * v;
    }
    let m = mass(u);
    let ux2 = inner(&ux, &ux).unwrap_or(0.0);
    rec.mass_martingale += eps * dx * m_mart;
    rec.mass_correction += eps * eps * k2 * m * dt;
    rec.energy_martingale += eps * dx * e_mart;
    rec.energy_correction += 0.5 * eps * eps * (k2 * (ux2 - dx * cubic) + kp2 * 2.0 * m) * dt;
}

/// One row per snapshot: `t, u(x₀), …, u(x_{N−1})` under a header row of grid nodes.
pub fn write_snapshots_csv(path: &Path, snapshots: &[(f64, Field)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some((_, first)) = snapshots.first() {
        write!(w, "t")?;
        for x in first.grid().nodes() {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    for (t, u) in snapshots {
        write!(w, "{t}")?;
        for v in u.values() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Little-endian: `L: f64, N: u64, t: f64, eps: f64`, then `N` values as `f64`.
pub fn write_snapshot_binary(path: &Path, u: &Field, t: f64, eps: f64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let grid = u.grid();
    w.write_all(&grid.length().to_le_bytes())?;
    w.write_all(&(grid.points() as u64).to_le_bytes())?;
    w.write_all(&t.to_le_bytes())?;
    w.write_all(&eps.to_le_bytes())?;
    for v in u.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_snapshot_binary`]; the grid is rebuilt centered at 0.
pub fn read_snapshot_binary(path: &Path) -> Result<(Field, f64, f64)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut b = [0u8; 8];
    let mut next = |r: &mut BufReader<File>| -> Result<[u8; 8]> {
        r.read_exact(&mut b)?;
        Ok(b)
    };
    let length = f64::from_le_bytes(next(&mut r)?);
    let n = u64::from_le_bytes(next(&mut r)?) as usize;
    let t = f64::from_le_bytes(next(&mut r)?);
    let eps = f64::from_le_bytes(next(&mut r)?);
    let grid = make_grid_with_origin(length, n, -0.5 * length)?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(f64::from_le_bytes(next(&mut r)?));
    }
    Ok((Field::new(&grid, values)?, t, eps))
}
