//! Spatially homogeneous Wiener process `W = Σ βᵢ Φeᵢ` with `Φf = k ⋆ f`.
//!
//! Increments are synthesized as `√(dt/dx) · k ⋆ ξ` with `ξ` i.i.d. standard
//! normals on the nodes, which makes the nodal covariance exactly `dt·c_L`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{apply_symbol, convolution_symbol, derivative, Field, GridSpec, Spectrum};

/// Shape of the convolution kernel `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `A exp(−x²/(2ℓ²))`
    Gaussian { amplitude: f64, width: f64 },
    /// `A sech(x/ℓ)`
    Sech { amplitude: f64, width: f64 },
    /// Nodal values on the simulation grid.
    Tabulated { values: Vec<f64> },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Gaussian { amplitude: 1.0, width: 2.0 }
    }
}

impl KernelSpec {
    pub fn gaussian(amplitude: f64, width: f64) -> Self {
        KernelSpec::Gaussian { amplitude, width }
    }

    pub fn sech(amplitude: f64, width: f64) -> Self {
        KernelSpec::Sech { amplitude, width }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Gaussian { amplitude, width } | KernelSpec::Sech { amplitude, width } => {
                if !(amplitude.is_finite() && *amplitude >= 0.0) {
                    return Err(Error::InvalidParameter(format!("kernel amplitude {amplitude}")));
                }
                if !(width.is_finite() && *width > 0.0) {
                    return Err(Error::InvalidParameter(format!("kernel width {width}")));
                }
                Ok(())
            }
            KernelSpec::Tabulated { values } => {
                if values.iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter("tabulated kernel has non-finite values".into()))
                }
            }
        }
    }

    /// Same shape with the amplitude multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        match self {
            KernelSpec::Gaussian { amplitude, width } => KernelSpec::Gaussian { amplitude: amplitude * s, width: *width },
            KernelSpec::Sech { amplitude, width } => KernelSpec::Sech { amplitude: amplitude * s, width: *width },
            KernelSpec::Tabulated { values } => KernelSpec::Tabulated { values: values.iter().map(|v| v * s).collect() },
        }
    }

    fn eval(&self, x: f64) -> f64 {
        match *self {
            KernelSpec::Gaussian { amplitude, width } => amplitude * (-0.5 * (x / width).powi(2)).exp(),
            KernelSpec::Sech { amplitude, width } => amplitude / (x / width).cosh(),
            KernelSpec::Tabulated { .. } => unreachable!("tabulated kernels are sampled directly"),
        }
    }
}

/// A kernel bound to a grid, with the smoother `Φ` and its adjoint.
#[derive(Debug, Clone)]
pub struct Kernel {
    spec: KernelSpec,
    values: Field,
    symbol: Spectrum,
    adjoint_symbol: Spectrum,
    corr_weights: Vec<f64>,
    l2: f64,
    h1: f64,
    l1: f64,
}

impl Kernel {
    pub fn new(spec: KernelSpec, grid: &Arc<GridSpec>) -> Result<Self> {
        spec.validate()?;
        let values = match &spec {
            KernelSpec::Tabulated { values } => Field::new(grid, values.clone())?,
            other => {
                let l = grid.length();
                Field::from_fn(grid, |x| other.eval(x - l * (x / l).round()))
            }
        };
        let peak = values.max_abs();
        if values.edge_max(2) > 1e-10 * peak.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel does not decay at the box edge ({:e})",
                values.edge_max(2)
            )));
        }
        let symbol = convolution_symbol(&values);
        let adjoint_symbol = symbol.iter().map(|s| s.conj()).collect();
        let corr_weights = symbol.iter().map(|s| s.norm_sqr() / grid.length()).collect();
        let l2 = values.norm_l2();
        let h1 = values.norm_h1();
        let l1 = grid.dx() * values.values().iter().map(|v| v.abs()).sum::<f64>();
        Ok(Self { spec, values, symbol, adjoint_symbol, corr_weights, l2, h1, l1 })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.values.grid()
    }

    pub fn values(&self) -> &Field {
        &self.values
    }

    /// `|k|_{L²}`
    pub fn l2_norm(&self) -> f64 {
        self.l2
    }

    /// `‖k‖₁ = (|k|² + |k′|²)^{1/2}`
    pub fn h1_norm(&self) -> f64 {
        self.h1
    }

    pub fn l1_norm(&self) -> f64 {
        self.l1
    }

    /// Periodized autocorrelation `c_L(z) = ∫ k(z + u) k(u) du`, exact at lattice lags.
    pub fn correlation(&self, z: f64) -> f64 {
        self.grid().wavenumbers().iter().zip(&self.corr_weights).map(|(&k, &w)| w * (k * z).cos()).sum()
    }

    /// `c_L(0) = |k|²_{L²}`
    pub fn variance_density(&self) -> f64 {
        self.correlation(0.0)
    }

    /// `Φf = k ⋆ f`
    pub fn apply(&self, f: &Field) -> Result<Field> {
        self.grid().check(f.grid())?;
        Ok(apply_symbol(f, &self.symbol))
    }

    /// `Φ*f = k̃ ⋆ f` with `k̃(x) = k(−x)`.
    pub fn adjoint(&self, f: &Field) -> Result<Field> {
        self.grid().check(f.grid())?;
        Ok(apply_symbol(f, &self.adjoint_symbol))
    }

    /// `(𝒯_s Φ)* f`: adjoint of `f ↦ (k ⋆ f)(· + s)`.
    pub fn adjoint_shifted(&self, f: &Field, s: f64) -> Result<Field> {
        self.grid().check(f.grid())?;
        let shift = self.grid().shift_symbol(-s);
        let sym: Spectrum = self.adjoint_symbol.iter().zip(&shift).map(|(a, b)| a * b).collect();
        Ok(apply_symbol(f, &sym))
    }

    /// `√(dt/dx) · (k ⋆ ξ)(· + s)`.
    pub fn increment_from_white(&self, white: &[f64], dt: f64, shift: f64) -> Result<Field> {
        let grid = self.grid();
        if white.len() != grid.points() {
            return Err(Error::GridMismatch);
        }
        let scale = (dt / grid.dx()).sqrt();
        let mut spec = grid.forward(white);
        if shift == 0.0 {
            for (s, m) in spec.iter_mut().zip(&self.symbol) {
                *s *= m * scale;
            }
        } else {
            for ((s, m), p) in spec.iter_mut().zip(&self.symbol).zip(grid.shift_symbol(shift)) {
                *s *= m * p * scale;
            }
        }
        Ok(Field::from_spectrum(grid, &spec))
    }
}

pub fn correlation(kernel: &Kernel, z: f64) -> f64 {
    kernel.correlation(z)
}

pub fn smoother(kernel: &Kernel, f: &Field) -> Result<Field> {
    kernel.apply(f)
}

pub fn smoother_adjoint(kernel: &Kernel, f: &Field) -> Result<Field> {
    kernel.adjoint(f)
}

/// `Σ_l (Φe_l)²(x)` summed over the orthonormal nodal basis `e_l = δ_l/√dx`.
pub fn parseval_density(kernel: &Kernel) -> Field {
    let grid = kernel.grid();
    let n = grid.points();
    let mut acc = vec![0.0; n];
    let mut e = vec![0.0; n];
    let h = 1.0 / grid.dx().sqrt();
    for l in 0..n {
        e[l] = h;
        let col = apply_symbol(&Field::from_raw(grid, e.clone()), &kernel.symbol);
        for (a, v) in acc.iter_mut().zip(col.values()) {
            *a += v * v;
        }
        e[l] = 0.0;
    }
    Field::from_raw(grid, acc)
}

/// Deterministic standard normals for `(seed, path, step)`.
pub fn white_noise(seed: u64, path: u64, step: u64, n: usize) -> Vec<f64> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&path.to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..].copy_from_slice(b"skdv-wn1");
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Reproducible noise source for one trajectory.
#[derive(Debug, Clone)]
pub struct NoiseState {
    kernel: Arc<Kernel>,
    seed: u64,
    path: u64,
    step: u64,
    substeps: u64,
    t: f64,
}

impl NoiseState {
    pub fn new(kernel: Arc<Kernel>, seed: u64, path: u64) -> Self {
        Self { kernel, seed, path, step: 0, substeps: 1, t: 0.0 }
    }

    /// Each increment becomes the sum of `m` consecutive increments of the
    /// base stream, so a run at `dt` sees the same Brownian path as a run at
    /// `dt/m` with `m = 1`.
    pub fn with_substeps(mut self, m: u64) -> Self {
        self.substeps = m.max(1);
        self
    }

    pub fn kernel(&self) -> &Arc<Kernel> {
        &self.kernel
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> u64 {
        self.path
    }

    /// Number of increments drawn so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// The white noise that the next increment will use.
    pub fn peek_white(&self) -> Vec<f64> {
        let n = self.kernel.grid().points();
        let m = self.substeps;
        if m == 1 {
            return white_noise(self.seed, self.path, self.step, n);
        }
        let mut acc = vec![0.0; n];
        for i in 0..m {
            for (a, w) in acc.iter_mut().zip(white_noise(self.seed, self.path, self.step * m + i, n)) {
                *a += w;
            }
        }
        let s = 1.0 / (m as f64).sqrt();
        acc.iter_mut().for_each(|a| *a *= s);
        acc
    }

    /// Advance the stream without drawing.
    pub fn skip(&mut self, dt: f64) {
        self.step += 1;
        self.t += dt;
    }

    pub fn sample_increment(&mut self, dt: f64) -> Result<Field> {
        self.sample_increment_shifted(dt, 0.0)
    }

    /// Increment of `𝒯_s W`, i.e. the lab-frame increment read at `x + s`.
    pub fn sample_increment_shifted(&mut self, dt: f64, shift: f64) -> Result<Field> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let xi = self.peek_white();
        let dw = self.kernel.increment_from_white(&xi, dt, shift)?;
        self.step += 1;
        self.t += dt;
        Ok(dw)
    }
}

/// `∂ₓ` applied through `Φ*`, for the commutation check.
pub fn adjoint_derivative_defect(kernel: &Kernel, f: &Field) -> Result<f64> {
    let a = kernel.adjoint(&derivative(f, 1))?;
    let b = derivative(&kernel.adjoint(f)?, 1);
    Ok(a.sub(&b)?.max_abs())
}
