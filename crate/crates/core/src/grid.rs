//! Periodic spatial discretization.
//!
//! A [`GridSpec`] stands in for the real line: `points` equispaced nodes on
//! `[origin, origin + length)` with periodic wrap. Every function of `x` is a
//! [`Field`] sampled on such a grid. Differentiation, translation and
//! convolution go through the discrete Fourier transform; quadrature is the
//! rectangle rule, which is spectrally accurate for smooth periodic integrands.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub type Spectrum = Vec<Complex64>;

pub struct GridSpec {
    length: f64,
    points: usize,
    dx: f64,
    origin: f64,
    wavenumbers: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridSpec")
            .field("length", &self.length)
            .field("points", &self.points)
            .field("origin", &self.origin)
            .finish()
    }
}

impl PartialEq for GridSpec {
    fn eq(&self, other: &Self) -> bool {
        self.length == other.length && self.points == other.points && self.origin == other.origin
    }
}

/// Grid on `[-L/2, L/2)`.
pub fn make_grid(length: f64, points: usize) -> Result<Arc<GridSpec>> {
    make_grid_with_origin(length, points, -0.5 * length)
}

/// Grid on `[origin, origin + L)`. Used where a weighted operator needs the
/// box placed asymmetrically around the soliton.
pub fn make_grid_with_origin(length: f64, points: usize, origin: f64) -> Result<Arc<GridSpec>> {
    if !(length > 0.0) || !length.is_finite() {
        return Err(Error::InvalidGrid(format!("length must be positive, got {length}")));
    }
    if points < 8 || !points.is_multiple_of(2) {
        return Err(Error::InvalidGrid(format!(
            "point count must be even and at least 8, got {points}"
        )));
    }
    if !origin.is_finite() {
        return Err(Error::InvalidGrid("origin must be finite".into()));
    }
    let dk = 2.0 * PI / length;
    let wavenumbers = (0..points)
        .map(|j| {
            let m = if j <= points / 2 { j as isize } else { j as isize - points as isize };
            m as f64 * dk
        })
        .collect();
    let mut planner = FftPlanner::new();
    Ok(Arc::new(GridSpec {
        length,
        points,
        dx: length / points as f64,
        origin,
        wavenumbers,
        forward: planner.plan_fft_forward(points),
        inverse: planner.plan_fft_inverse(points),
    }))
}

impl GridSpec {
    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    /// Wavenumbers in standard transform order (`κ_0 = 0`, Nyquist at `N/2`).
    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    pub fn nyquist(&self) -> usize {
        self.points / 2
    }

    pub fn x(&self, j: usize) -> f64 {
        self.origin + j as f64 * self.dx
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.points).map(|j| self.x(j)).collect()
    }

    /// Unnormalized forward DFT.
    pub fn forward(&self, values: &[f64]) -> Spectrum {
        let mut buf: Spectrum = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    pub fn forward_in_place(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        self.forward.process_with_scratch(buf, scratch);
    }

    pub fn inverse_in_place(&self, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        self.inverse.process_with_scratch(buf, scratch);
    }

    pub fn scratch_len(&self) -> usize {
        self.forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len())
    }

    /// Inverse DFT including the `1/N` normalization; returns the real part.
    pub fn inverse(&self, spectrum: &[Complex64]) -> Vec<f64> {
        let mut buf = spectrum.to_vec();
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.points as f64;
        buf.iter().map(|z| z.re * scale).collect()
    }

    /// Multiplier `(iκ)^order` for every mode. Odd orders drop the Nyquist mode,
    /// whose derivative is not representable as a real field.
    pub fn derivative_symbol(&self, order: u32) -> Spectrum {
        let ny = self.nyquist();
        self.wavenumbers
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                if j == ny && order % 2 == 1 {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, k).powu(order)
                }
            })
            .collect()
    }

    /// Phase factors realizing `f(x) -> f(x + y)`.
    pub fn shift_symbol(&self, y: f64) -> Spectrum {
        let ny = self.nyquist();
        self.wavenumbers
            .iter()
            .enumerate()
            .map(|(j, &k)| {
                if j == ny {
                    Complex64::new((k * y).cos(), 0.0)
                } else {
                    Complex64::from_polar(1.0, k * y)
                }
            })
            .collect()
    }

    pub(crate) fn check(&self, other: &GridSpec) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

/// Real samples on a grid.
#[derive(Clone)]
pub struct Field {
    grid: Arc<GridSpec>,
    values: Vec<f64>,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field")
            .field("grid", &self.grid)
            .field("l2", &self.norm_l2())
            .finish()
    }
}

impl Field {
    pub fn new(grid: &Arc<GridSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.points() {
            return Err(Error::InvalidParameter(format!(
                "expected {} samples, got {}",
                grid.points(),
                values.len()
            )));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite sample at index {j}")));
        }
        Ok(Self { grid: Arc::clone(grid), values })
    }

    /// Skips the finiteness scan; for values produced by trusted arithmetic.
    pub(crate) fn from_raw(grid: &Arc<GridSpec>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.points());
        Self { grid: Arc::clone(grid), values }
    }

    pub fn zeros(grid: &Arc<GridSpec>) -> Self {
        Self::from_raw(grid, vec![0.0; grid.points()])
    }

    pub fn from_fn(grid: &Arc<GridSpec>, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(grid, grid.nodes().into_iter().map(f).collect())
    }

    pub fn from_spectrum(grid: &Arc<GridSpec>, spectrum: &[Complex64]) -> Self {
        Self::from_raw(grid, grid.inverse(spectrum))
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn spectrum(&self) -> Spectrum {
        self.grid.forward(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(&self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.grid.check(&other.grid)?;
        Ok(Self::from_raw(
            &self.grid,
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    pub fn add(&self, other: &Field) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Field) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Field) -> Result<()> {
        self.grid.check(&other.grid)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn norm_l2(&self) -> f64 {
        (self.grid.dx * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    /// `(|f|² + |f'|²)^{1/2}`
    pub fn norm_h1(&self) -> f64 {
        let d = derivative(self, 1);
        (self.norm_l2().powi(2) + d.norm_l2().powi(2)).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest magnitude among the first and last `width` samples.
    pub fn edge_max(&self, width: usize) -> f64 {
        let n = self.values.len();
        let w = width.min(n / 2);
        self.values[..w]
            .iter()
            .chain(&self.values[n - w..])
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn argmax(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

pub(crate) fn apply_symbol(f: &Field, symbol: &[Complex64]) -> Field {
    let mut spec = f.spectrum();
    for (s, m) in spec.iter_mut().zip(symbol) {
        *s *= m;
    }
    Field::from_spectrum(&f.grid, &spec)
}

/// Spectral derivative of the given order.
pub fn derivative(f: &Field, order: u32) -> Field {
    if order == 0 {
        return f.clone();
    }
    apply_symbol(f, &f.grid.derivative_symbol(order))
}

/// `(𝒯_y f)(x) = f(x + y)`, exact for band-limited `f`.
pub fn translate(f: &Field, y: f64) -> Field {
    if y == 0.0 {
        return f.clone();
    }
    apply_symbol(f, &f.grid.shift_symbol(y))
}

/// Rectangle-rule `L²` inner product.
pub fn inner(f: &Field, g: &Field) -> Result<f64> {
    f.grid.check(&g.grid)?;
    Ok(inner_slices(f.grid.dx, &f.values, &g.values))
}

pub(crate) fn inner_slices(dx: f64, a: &[f64], b: &[f64]) -> f64 {
    dx * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Transfer function of `h ↦ ∫ f(· − y) h(y) dy` on the periodic grid.
pub(crate) fn convolution_symbol(f: &Field) -> Spectrum {
    let grid = &f.grid;
    let ny = grid.nyquist();
    let mut spec = f.spectrum();
    for (j, (s, &k)) in spec.iter_mut().zip(grid.wavenumbers()).enumerate() {
        let phase = if j == ny {
            Complex64::new((k * grid.origin).cos(), 0.0)
        } else {
            Complex64::from_polar(1.0, -k * grid.origin)
        };
        *s *= phase * grid.dx;
    }
    spec
}

/// Periodic convolution approximating `∫ f(x − y) g(y) dy`.
pub fn convolve(f: &Field, g: &Field) -> Result<Field> {
    f.grid.check(&g.grid)?;
    Ok(apply_symbol(g, &convolution_symbol(f)))
}
