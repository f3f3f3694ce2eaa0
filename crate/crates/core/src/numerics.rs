//! Small numerical building blocks: quadrature, tridiagonal solves,
//! piecewise-linear tables and C² spline interpolation on uniform grids.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pn1 = if n == 0 { 0.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule for ∫_a^b f, `panels` panels of 16 nodes.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(16);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        for (x, w) in nodes.iter().zip(&weights) {
            total += w * f(mid + 0.5 * h * x);
        }
    }
    total * 0.5 * h
}

/// Surface measure of the unit sphere in ℝ^d.
pub fn unit_sphere_area(dim: usize) -> f64 {
    match dim {
        0 => 0.0,
        1 => 2.0,
        2 => 2.0 * PI,
        d => 2.0 * PI * unit_sphere_area(d - 2) / (d - 2) as f64,
    }
}

/// Solve a tridiagonal system (Thomas algorithm). `lower[0]` and
/// `upper[n-1]` are ignored.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Piecewise-linear table on increasing abscissae.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTable {
    pub abscissa: Vec<f64>,
    pub values: Vec<f64>,
}

impl LinearTable {
    pub fn new(abscissa: Vec<f64>, values: Vec<f64>) -> crate::Result<Self> {
        if abscissa.len() != values.len() || abscissa.len() < 2 {
            return crate::error::invalid("table needs at least two (abscissa, value) rows");
        }
        if abscissa.windows(2).any(|w| !(w[1] > w[0])) {
            return crate::error::invalid("table abscissae must be strictly increasing");
        }
        if abscissa.iter().chain(&values).any(|v| !v.is_finite()) {
            return crate::error::invalid("table entries must be finite");
        }
        Ok(Self { abscissa, values })
    }

    fn locate(&self, x: f64) -> usize {
        match self
            .abscissa
            .binary_search_by(|a| a.partial_cmp(&x).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(self.abscissa.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.abscissa.len() - 2),
        }
    }

    /// Linear interpolation, 0 outside the table.
    pub fn eval_or_zero(&self, x: f64) -> f64 {
        let (a0, a1) = (self.abscissa[0], *self.abscissa.last().unwrap());
        if !(x >= a0 && x <= a1) {
            return 0.0;
        }
        self.eval_clamped(x)
    }

    /// Linear interpolation, end values held constant outside the table.
    pub fn eval_clamped(&self, x: f64) -> f64 {
        let n = self.abscissa.len();
        if x <= self.abscissa[0] {
            return self.values[0];
        }
        if x >= self.abscissa[n - 1] {
            return self.values[n - 1];
        }
        let i = self.locate(x);
        let t = (x - self.abscissa[i]) / (self.abscissa[i + 1] - self.abscissa[i]);
        self.values[i] + t * (self.values[i + 1] - self.values[i])
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_slope(&self) -> f64 {
        self.abscissa
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(a, v)| ((v[1] - v[0]) / (a[1] - a[0])).abs())
            .fold(0.0, f64::max)
    }

    /// Parse a two-column CSV (abscissa, value). Lines starting with `#`
    /// and a non-numeric header row are skipped.
    pub fn from_csv(text: &str) -> crate::Result<Self> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (a, b) = match (cols.next(), cols.next()) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(crate::Error::Parse(format!(
                        "line {}: expected two columns",
                        lineno + 1
                    )))
                }
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(x), Ok(y)) => {
                    xs.push(x);
                    ys.push(y);
                }
                _ if xs.is_empty() => continue,
                _ => {
                    return Err(crate::Error::Parse(format!(
                        "line {}: non-numeric entry",
                        lineno + 1
                    )))
                }
            }
        }
        Self::new(xs, ys)
    }
}

/// Interpolating cubic B-spline on a uniform node lattice (d = 1 or 2).
///
/// Natural end conditions; queries outside the node range are clamped to
/// it. The interpolant is C², so finite differences of it are smooth.
#[derive(Clone, Debug)]
pub struct SplineField {
    dim: usize,
    origin: [f64; 2],
    spacing: [f64; 2],
    nodes: [usize; 2],
    /// Coefficients with one ghost layer on each side, row-major.
    coef: Vec<f64>,
}

fn prefilter_line(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 3 {
        return values.to_vec();
    }
    let mut lower = vec![1.0 / 6.0; n];
    let mut diag = vec![4.0 / 6.0; n];
    let mut upper = vec![1.0 / 6.0; n];
    lower[0] = 0.0;
    upper[0] = 0.0;
    diag[0] = 1.0;
    lower[n - 1] = 0.0;
    upper[n - 1] = 0.0;
    diag[n - 1] = 1.0;
    solve_tridiagonal(&lower, &diag, &upper, values)
}

fn pad_line(c: &[f64]) -> Vec<f64> {
    let n = c.len();
    let mut out = Vec::with_capacity(n + 2);
    let first = if n >= 2 { 2.0 * c[0] - c[1] } else { c[0] };
    let last = if n >= 2 { 2.0 * c[n - 1] - c[n - 2] } else { c[n - 1] };
    out.push(first);
    out.extend_from_slice(c);
    out.push(last);
    out
}

#[inline]
fn bspline_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

impl SplineField {
    /// `values` are node values in row-major order (last axis fastest).
    pub fn new(dim: usize, origin: &[f64], spacing: &[f64], nodes: &[usize], values: &[f64]) -> Self {
        assert!(dim == 1 || dim == 2, "spline fields support d = 1, 2");
        let mut o = [0.0; 2];
        let mut h = [1.0; 2];
        let mut n = [1usize; 2];
        o[..dim].copy_from_slice(&origin[..dim]);
        h[..dim].copy_from_slice(&spacing[..dim]);
        n[..dim].copy_from_slice(&nodes[..dim]);
        let coef = if dim == 1 {
            pad_line(&prefilter_line(values))
        } else {
            let (n0, n1) = (n[0], n[1]);
            // along axis 1
            let mut rows = vec![0.0; n0 * (n1 + 2)];
            for i in 0..n0 {
                let line = pad_line(&prefilter_line(&values[i * n1..(i + 1) * n1]));
                rows[i * (n1 + 2)..(i + 1) * (n1 + 2)].copy_from_slice(&line);
            }
            // along axis 0
            let mut out = vec![0.0; (n0 + 2) * (n1 + 2)];
            let mut col = vec![0.0; n0];
            for j in 0..n1 + 2 {
                for i in 0..n0 {
                    col[i] = rows[i * (n1 + 2) + j];
                }
                let line = pad_line(&prefilter_line(&col));
                for (i, v) in line.into_iter().enumerate() {
                    out[i * (n1 + 2) + j] = v;
                }
            }
            out
        };
        Self {
            dim,
            origin: o,
            spacing: h,
            nodes: n,
            coef,
        }
    }

    #[inline]
    fn cell(&self, k: usize, x: f64) -> (usize, f64) {
        let n = self.nodes[k];
        if n < 2 {
            return (0, 0.0);
        }
        let u = ((x - self.origin[k]) / self.spacing[k]).clamp(0.0, (n - 1) as f64);
        let i = (u.floor() as usize).min(n - 2);
        (i, u - i as f64)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        if self.dim == 1 {
            let (i, t) = self.cell(0, x[0]);
            let w = bspline_weights(t);
            // padded index of node i is i + 1; stencil covers i-1..=i+2
            w[0] * self.coef[i] + w[1] * self.coef[i + 1] + w[2] * self.coef[i + 2] + w[3] * self.coef[i + 3]
        } else {
            let (i, ti) = self.cell(0, x[0]);
            let (j, tj) = self.cell(1, x[1]);
            let wi = bspline_weights(ti);
            let wj = bspline_weights(tj);
            let stride = self.nodes[1] + 2;
            let mut acc = 0.0;
            for (a, wa) in wi.iter().enumerate() {
                let row = (i + a) * stride + j;
                acc += wa
                    * (wj[0] * self.coef[row]
                        + wj[1] * self.coef[row + 1]
                        + wj[2] * self.coef[row + 2]
                        + wj[3] * self.coef[row + 3]);
            }
            acc
        }
    }
}

/// Ordinary least-squares line `y = a + b x`. Returns (a, b, stderr of b).
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let se = if xs.len() > 2 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    (a, b, se)
}
