//! Interaction kernels and their convolutions.
//!
//! Radial kernels have the form `k(x) = c · p(|x|/ε) / ε^d` with a unit-mass
//! profile `p`, so `ε` is a length and `c` the total mass. The constant
//! kernel is the exception: it evaluates to `c` everywhere and has no mass.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridField};
use crate::numerics::{integrate, unit_sphere_area, LinearTable};

/// Gaussian tails beyond this many bandwidths are dropped in indexed sums.
pub const GAUSSIAN_CUTOFF: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum KernelFamily {
    /// Standard normal density; the bandwidth is the standard deviation.
    Gaussian,
    /// `exp(-1/(1-r²))` on the unit ball, normalised; the bandwidth is the radius.
    CompactBump,
    Constant,
    /// Radial profile given as a table in units of the bandwidth, zero outside.
    Tabulated { profile: LinearTable },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
    pub amplitude: f64,
    pub dim: usize,
    #[serde(skip)]
    prefactor: f64,
    #[serde(skip)]
    profile_slope: f64,
    #[serde(skip)]
    profile_max: f64,
}

fn bump_profile(r: f64) -> f64 {
    if r < 1.0 {
        (-1.0 / (1.0 - r * r)).exp()
    } else {
        0.0
    }
}

fn bump_normaliser(dim: usize) -> f64 {
    unit_sphere_area(dim) * integrate(|r| bump_profile(r) * r.powi(dim as i32 - 1), 0.0, 1.0, 64)
}

fn bump_max_slope() -> f64 {
    let n = 20_000;
    (1..n)
        .map(|k| {
            let r = k as f64 / n as f64;
            let s = 1.0 - r * r;
            bump_profile(r) * 2.0 * r / (s * s)
        })
        .fold(0.0, f64::max)
}

impl KernelSpec {
    fn build(family: KernelFamily, bandwidth: f64, amplitude: f64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidKernel("dimension must be positive".into()));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidKernel(format!("bandwidth {bandwidth} must be > 0")));
        }
        if !(amplitude >= 0.0) || !amplitude.is_finite() {
            return Err(Error::InvalidKernel(format!("amplitude {amplitude} must be >= 0")));
        }
        let scale = bandwidth.powi(dim as i32);
        let (norm, slope, pmax) = match &family {
            KernelFamily::Gaussian => ((2.0 * PI).powf(-(dim as f64) / 2.0), (-0.5f64).exp(), 1.0),
            KernelFamily::CompactBump => (1.0 / bump_normaliser(dim), bump_max_slope(), (-1.0f64).exp()),
            KernelFamily::Constant => (1.0, 0.0, 1.0),
            KernelFamily::Tabulated { profile } => {
                if profile.abscissa[0] < 0.0 {
                    return Err(Error::InvalidKernel("tabulated radii must be >= 0".into()));
                }
                if profile.min_value() < 0.0 {
                    return Err(Error::InvalidKernel("tabulated kernel values must be >= 0".into()));
                }
                // zero outside the table: the jumps at the ends count as slope
                let n = profile.values.len();
                let mut slope = profile.max_slope();
                if profile.values[n - 1] > 0.0 {
                    slope = f64::INFINITY;
                }
                if profile.abscissa[0] > 0.0 && profile.values[0] > 0.0 {
                    slope = f64::INFINITY;
                }
                (1.0, slope, profile.max_value())
            }
        };
        let prefactor = match family {
            KernelFamily::Constant => amplitude,
            _ => amplitude * norm / scale,
        };
        Ok(Self {
            family,
            bandwidth,
            amplitude,
            dim,
            prefactor,
            profile_slope: slope,
            profile_max: pmax,
        })
    }

    pub fn gaussian(dim: usize, bandwidth: f64, amplitude: f64) -> Result<Self> {
        Self::build(KernelFamily::Gaussian, bandwidth, amplitude, dim)
    }

    pub fn compact_bump(dim: usize, radius: f64, amplitude: f64) -> Result<Self> {
        Self::build(KernelFamily::CompactBump, radius, amplitude, dim)
    }

    pub fn constant(dim: usize, amplitude: f64) -> Result<Self> {
        Self::build(KernelFamily::Constant, 1.0, amplitude, dim)
    }

    pub fn tabulated(dim: usize, bandwidth: f64, amplitude: f64, profile: LinearTable) -> Result<Self> {
        Self::build(KernelFamily::Tabulated { profile }, bandwidth, amplitude, dim)
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.family, KernelFamily::Constant)
    }

    /// Kernel value at radius `r = |x|`.
    #[inline]
    pub fn eval_radius(&self, r: f64) -> f64 {
        let s = r / self.bandwidth;
        match &self.family {
            KernelFamily::Gaussian => self.prefactor * (-0.5 * s * s).exp(),
            KernelFamily::CompactBump => self.prefactor * bump_profile(s),
            KernelFamily::Constant => self.prefactor,
            KernelFamily::Tabulated { profile } => self.prefactor * profile.eval_or_zero(s),
        }
    }

    /// Kernel value at radius² (avoids a square root for Gaussians).
    #[inline]
    pub fn eval_sq(&self, r2: f64) -> f64 {
        match &self.family {
            KernelFamily::Gaussian => {
                self.prefactor * (-0.5 * r2 / (self.bandwidth * self.bandwidth)).exp()
            }
            KernelFamily::Constant => self.prefactor,
            _ => self.eval_radius(r2.sqrt()),
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_sq(x.iter().map(|v| v * v).sum())
    }

    /// Declared supremum.
    pub fn sup(&self) -> f64 {
        self.prefactor * self.profile_max
    }

    /// Lipschitz constant (sup of |∇k|).
    pub fn lipschitz(&self) -> f64 {
        if self.is_constant() {
            0.0
        } else {
            self.prefactor * self.profile_slope / self.bandwidth
        }
    }

    /// Radius beyond which the kernel vanishes (or is dropped in fast paths).
    /// `None` for the constant kernel.
    pub fn reach(&self) -> Option<f64> {
        match &self.family {
            KernelFamily::Gaussian => Some(GAUSSIAN_CUTOFF * self.bandwidth),
            KernelFamily::CompactBump => Some(self.bandwidth),
            KernelFamily::Constant => None,
            KernelFamily::Tabulated { profile } => {
                Some(self.bandwidth * profile.abscissa.last().copied().unwrap_or(0.0))
            }
        }
    }

    fn radial_moment(&self, power: i32) -> f64 {
        let upper = match &self.family {
            KernelFamily::Gaussian => 14.0,
            KernelFamily::CompactBump => 1.0,
            KernelFamily::Constant => return f64::INFINITY,
            KernelFamily::Tabulated { profile } => *profile.abscissa.last().unwrap(),
        };
        let d = self.dim as i32;
        let area = unit_sphere_area(self.dim);
        let scaled = |s: f64| {
            let r = s * self.bandwidth;
            self.eval_radius(r) * self.bandwidth.powi(d) * s.powi(d - 1 + power)
        };
        let panels = match &self.family {
            KernelFamily::Tabulated { profile } => {
                // integrate segment by segment so kinks fall on panel edges
                let mut total = 0.0;
                for w in profile.abscissa.windows(2) {
                    total += integrate(scaled, w[0], w[1], 2);
                }
                return area * total * self.bandwidth.powi(power);
            }
            _ => 128,
        };
        area * integrate(scaled, 0.0, upper, panels) * self.bandwidth.powi(power)
    }

    /// ∫ k, by radial quadrature (infinite for the constant kernel).
    pub fn mass(&self) -> f64 {
        self.radial_moment(0)
    }

    /// ∫ |x| k(x) dx.
    pub fn first_moment(&self) -> f64 {
        self.radial_moment(1)
    }

    /// Midpoint rule over the box [-R, R]^d (d ≤ 2) with `n` cells per axis,
    /// R the reach. Used to audit the analytic mass.
    pub fn box_mass(&self, n: usize) -> f64 {
        let r = self.reach().unwrap_or(1.0);
        let h = 2.0 * r / n as f64;
        let c = |i: usize| -r + (i as f64 + 0.5) * h;
        match self.dim {
            1 => (0..n).map(|i| self.eval(&[c(i)])).sum::<f64>() * h,
            2 => {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += self.eval(&[c(i), c(j)]);
                    }
                }
                s * h * h
            }
            _ => self.mass(),
        }
    }

    /// `γ_ε(x) = γ(x/ε) ε^{-d}` for a unit-mass `γ`.
    pub fn mollify(&self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::InvalidKernel(format!("mollifier scale {eps} must be > 0")));
        }
        let m = self.mass();
        if !((m - 1.0).abs() <= 1e-6) {
            return Err(Error::InvalidKernel(format!("mollifier base has mass {m}, expected 1")));
        }
        Self::build(self.family.clone(), self.bandwidth * eps, self.amplitude, self.dim)
    }

    /// Same shape with a new amplitude.
    pub fn scaled(&self, amplitude: f64) -> Result<Self> {
        Self::build(self.family.clone(), self.bandwidth, amplitude, self.dim)
    }
}

/// Weighted point cloud `w Σ δ_{x_n}` for one species.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmpiricalMeasure {
    pub dim: usize,
    /// Flat coordinates, `len() * dim` entries.
    pub points: Vec<f64>,
    pub weight: f64,
    pub species: usize,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weight: f64, species: usize) -> Result<Self> {
        if dim == 0 || !points.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: points.len(),
            });
        }
        if points.iter().any(|v| !v.is_finite()) || !weight.is_finite() {
            return Err(Error::InvalidParameter("atoms and weight must be finite".into()));
        }
        Ok(Self {
            dim,
            points,
            weight,
            species,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.len() as f64 * self.weight
    }

    pub fn point(&self, n: usize) -> &[f64] {
        &self.points[n * self.dim..(n + 1) * self.dim]
    }

    /// Concatenate atoms of two measures with equal weights.
    pub fn merged(&self, other: &Self) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        Self::new(self.dim, points, self.weight, self.species)
    }
}

/// `w Σ_n k(x - x_n)` by direct summation.
pub fn convolve_points(k: &KernelSpec, dim: usize, points: &[f64], weight: f64, x: &[f64]) -> f64 {
    if k.is_constant() {
        return k.sup() * weight * (points.len() / dim) as f64;
    }
    let mut s = 0.0;
    for p in points.chunks_exact(dim) {
        let mut r2 = 0.0;
        for a in 0..dim {
            let d = x[a] - p[a];
            r2 += d * d;
        }
        s += k.eval_sq(r2);
    }
    s * weight
}

/// Exact `(k * ν)(x)`.
pub fn convolve_empirical(k: &KernelSpec, nu: &EmpiricalMeasure, x: &[f64]) -> Result<f64> {
    if x.len() != nu.dim || k.dim != nu.dim {
        return Err(Error::DimensionMismatch {
            expected: nu.dim,
            got: x.len(),
        });
    }
    Ok(convolve_points(k, nu.dim, &nu.points, nu.weight, x))
}

/// Points sorted along the first axis; sums only visit atoms within the
/// kernel reach of the query along that axis. In one dimension, tabulated
/// (piecewise-linear) kernels are summed exactly from prefix sums in
/// O(segments · log N).
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    dim: usize,
    sorted: Vec<f64>,
    keys: Vec<f64>,
    /// prefix[k] = Σ_{n<k} keys[n]
    prefix: Vec<f64>,
    weight: f64,
}

impl NeighborIndex {
    pub fn new(dim: usize, points: &[f64], weight: f64) -> Self {
        let n = points.len() / dim;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| points[a * dim].total_cmp(&points[b * dim]));
        let mut sorted = Vec::with_capacity(points.len());
        for &o in &order {
            sorted.extend_from_slice(&points[o * dim..(o + 1) * dim]);
        }
        let keys: Vec<f64> = order.iter().map(|&o| points[o * dim]).collect();
        let mut prefix = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        prefix.push(0.0);
        for k in &keys {
            acc += k;
            prefix.push(acc);
        }
        Self {
            dim,
            sorted,
            keys,
            prefix,
            weight,
        }
    }

    /// (count, Σ y) over keys between `lo` and `hi`, each end open or closed.
    #[inline]
    fn window(&self, lo: f64, lo_closed: bool, hi: f64, hi_closed: bool) -> (f64, f64) {
        let a = if lo_closed {
            self.keys.partition_point(|&v| v < lo)
        } else {
            self.keys.partition_point(|&v| v <= lo)
        };
        let b = if hi_closed {
            self.keys.partition_point(|&v| v <= hi)
        } else {
            self.keys.partition_point(|&v| v < hi)
        };
        if b <= a {
            return (0.0, 0.0);
        }
        ((b - a) as f64, self.prefix[b] - self.prefix[a])
    }

    fn convolve_piecewise_linear(&self, k: &KernelSpec, profile: &LinearTable, x: f64) -> f64 {
        let bw = k.bandwidth;
        let last = profile.abscissa.len() - 2;
        let mut s = 0.0;
        for seg in 0..=last {
            let (ra, rb) = (profile.abscissa[seg], profile.abscissa[seg + 1]);
            let (pa, pb) = (profile.values[seg], profile.values[seg + 1]);
            let slope = (pb - pa) / (rb - ra);
            let base = pa - slope * ra;
            let closed_end = seg == last;
            // y >= x with (y - x)/bw in [ra, rb)
            let (n, sum) = self.window(x + bw * ra, true, x + bw * rb, closed_end);
            s += n * base + slope * (sum - n * x) / bw;
            // y < x with (x - y)/bw in [ra, rb)
            let (n, sum) = self.window(x - bw * rb, closed_end, x - bw * ra, ra > 0.0);
            s += n * base + slope * (n * x - sum) / bw;
        }
        s * k.prefactor * self.weight
    }

    pub fn from_measure(nu: &EmpiricalMeasure) -> Self {
        Self::new(nu.dim, &nu.points, nu.weight)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn convolve(&self, k: &KernelSpec, x: &[f64]) -> f64 {
        let reach = match k.reach() {
            None => return k.sup() * self.weight * self.len() as f64,
            Some(r) => r,
        };
        if self.dim == 1 {
            if let KernelFamily::Tabulated { profile } = &k.family {
                return self.convolve_piecewise_linear(k, profile, x[0]);
            }
        }
        let lo = self.keys.partition_point(|&v| v < x[0] - reach);
        let hi = self.keys.partition_point(|&v| v <= x[0] + reach);
        let r2max = reach * reach;
        let mut s = 0.0;
        for p in self.sorted[lo * self.dim..hi * self.dim].chunks_exact(self.dim) {
            let mut r2 = 0.0;
            for a in 0..self.dim {
                let d = x[a] - p[a];
                r2 += d * d;
            }
            if r2 <= r2max {
                s += k.eval_sq(r2);
            }
        }
        s * self.weight
    }
}

/// Midpoint-rule `∫ k(x - y) u^i(y) dy` at a single point.
pub fn convolve_field(k: &KernelSpec, u: &GridField, species: usize, x: &[f64]) -> Result<f64> {
    let g = &u.grid;
    if x.len() != g.dim || k.dim != g.dim {
        return Err(Error::DimensionMismatch {
            expected: g.dim,
            got: x.len(),
        });
    }
    let vals = &u.values[species];
    let mut s = 0.0;
    for (c, v) in vals.iter().enumerate() {
        if *v == 0.0 {
            continue;
        }
        let y = g.center(c);
        let mut r2 = 0.0;
        for a in 0..g.dim {
            let d = x[a] - y[a];
            r2 += d * d;
        }
        s += v * k.eval_sq(r2);
    }
    Ok(s * g.cell_volume())
}

/// Whole-grid convolution `(k * u)(x_c)` at every cell centre, via a
/// zero-padded FFT. Padding to at least `2n - 1` per axis makes the
/// circular product equal the linear midpoint sum.
pub struct GridConvolver {
    grid: Grid,
    kernel: KernelSpec,
    padded: [usize; 2],
    spectrum: Vec<Complex<f64>>,
    forward: [Arc<dyn Fft<f64>>; 2],
    inverse: [Arc<dyn Fft<f64>>; 2],
}

impl std::fmt::Debug for GridConvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridConvolver")
            .field("kernel", &self.kernel)
            .field("padded", &self.padded)
            .finish()
    }
}

fn transpose(src: &[Complex<f64>], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

impl GridConvolver {
    pub fn new(kernel: &KernelSpec, grid: &Grid) -> Result<Self> {
        if kernel.dim != grid.dim {
            return Err(Error::DimensionMismatch {
                expected: grid.dim,
                got: kernel.dim,
            });
        }
        let mut padded = [1usize; 2];
        for a in 0..grid.dim {
            padded[a] = (2 * grid.cells[a] - 1).next_power_of_two();
        }
        let mut planner = FftPlanner::new();
        let forward = [planner.plan_fft_forward(padded[0]), planner.plan_fft_forward(padded[1])];
        let inverse = [planner.plan_fft_inverse(padded[0]), planner.plan_fft_inverse(padded[1])];
        let mut conv = Self {
            grid: grid.clone(),
            kernel: kernel.clone(),
            padded,
            spectrum: Vec::new(),
            forward,
            inverse,
        };
        if !kernel.is_constant() {
            let [l0, l1] = padded;
            let mut buf = vec![Complex::new(0.0, 0.0); l0 * l1];
            let off = |m: usize, l: usize, n: usize| -> Option<i64> {
                if m < n {
                    Some(m as i64)
                } else if m + n > l {
                    Some(m as i64 - l as i64)
                } else {
                    None
                }
            };
            let h0 = grid.spacing(0);
            let h1 = if grid.dim > 1 { grid.spacing(1) } else { 0.0 };
            let n1 = if grid.dim > 1 { grid.cells[1] } else { 1 };
            for m0 in 0..l0 {
                let Some(a) = off(m0, l0, grid.cells[0]) else { continue };
                for m1 in 0..l1 {
                    let Some(b) = off(m1, l1, n1) else { continue };
                    let x0 = a as f64 * h0;
                    let x1 = b as f64 * h1;
                    buf[m0 * l1 + m1] = Complex::new(kernel.eval_sq(x0 * x0 + x1 * x1), 0.0);
                }
            }
            conv.fft(&mut buf, false);
            conv.spectrum = buf;
        }
        Ok(conv)
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    fn fft(&self, buf: &mut Vec<Complex<f64>>, inverse: bool) {
        let [l0, l1] = self.padded;
        let plans = if inverse { &self.inverse } else { &self.forward };
        if self.grid.dim == 1 {
            plans[0].process(buf);
            return;
        }
        plans[1].process(buf);
        let mut t = transpose(buf, l0, l1);
        plans[0].process(&mut t);
        *buf = transpose(&t, l1, l0);
    }

    /// Convolution at every cell centre.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let vol = g.cell_volume();
        if self.kernel.is_constant() {
            let m = values.iter().sum::<f64>() * vol;
            return vec![self.kernel.sup() * m; values.len()];
        }
        let [l0, l1] = self.padded;
        let n0 = g.cells[0];
        let n1 = if g.dim > 1 { g.cells[1] } else { 1 };
        let mut buf = vec![Complex::new(0.0, 0.0); l0 * l1];
        for i in 0..n0 {
            for j in 0..n1 {
                buf[i * l1 + j] = Complex::new(values[i * n1 + j], 0.0);
            }
        }
        self.fft(&mut buf, false);
        for (b, s) in buf.iter_mut().zip(&self.spectrum) {
            *b *= s;
        }
        self.fft(&mut buf, true);
        let scale = vol / (l0 * l1) as f64;
        let mut out = vec![0.0; values.len()];
        for i in 0..n0 {
            for j in 0..n1 {
                out[i * n1 + j] = buf[i * l1 + j].re * scale;
            }
        }
        out
    }

    /// Reference O(n²) midpoint sum, same output layout as [`apply`](Self::apply).
    pub fn apply_direct(&self, values: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let vol = g.cell_volume();
        let centers: Vec<_> = (0..g.len()).map(|c| g.center(c)).collect();
        centers
            .iter()
            .map(|x| {
                let mut s = 0.0;
                for (c, v) in values.iter().enumerate() {
                    let y = &centers[c];
                    let mut r2 = 0.0;
                    for a in 0..g.dim {
                        let d = x[a] - y[a];
                        r2 += d * d;
                    }
                    s += v * self.kernel.eval_sq(r2);
                }
                s * vol
            })
            .collect()
    }
}
