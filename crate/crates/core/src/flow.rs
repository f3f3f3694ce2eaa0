//! Stochastic flows of the frozen linear diffusions, their inverses,
//! Jacobians and determinants, and the Feynman–Kac estimators built on them.
//!
//! A field supplies σ, b and a killing rate `r - Σ_j C^{ij} * ξ^j` at
//! (t, x). The forward flow solves `dX = b dt + κ σ dB` by Euler–Maruyama.
//! The inverse flow `Z_s = η_{t-s,t}(y)` solves the time-reverted Itô
//! equation `dZ = A dW + β ds` with `A = κσ(t-s, ·)`,
//! `β = -(b - Σ_{lk} A_{lk} ∂_l A_{·k})` and `W_s = B_{t-s} - B_t`, so the
//! same Brownian path drives both and `X_{0,t}(η_{0,t}(y)) ≈ y`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::grid::GridField;
use crate::io::DensityRow;
use crate::model::{CoefficientModel, Mat, NoiseConvention, Point, MAX_DIM};
use crate::numerics::SplineField;
use crate::pde::PdeSolver;
use crate::rng::{Purpose, Stream};

pub trait FlowField: Sync {
    fn dim(&self) -> usize;
    /// Coefficients are defined on `[0, horizon]`.
    fn horizon(&self) -> f64;
    fn noise_factor(&self) -> f64;
    /// σ without the noise factor.
    fn sigma(&self, t: f64, x: &[f64]) -> Mat;
    fn drift(&self, t: f64, x: &[f64]) -> Point;
    fn killing(&self, _t: f64, _x: &[f64]) -> f64 {
        0.0
    }
}

type SigmaFn = Box<dyn Fn(f64, &[f64]) -> Mat + Send + Sync>;
type DriftFn = Box<dyn Fn(f64, &[f64]) -> Point + Send + Sync>;
type ScalarFn = Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Coefficients given by closures.
pub struct AnalyticField {
    dim: usize,
    horizon: f64,
    kappa: f64,
    sigma: SigmaFn,
    drift: DriftFn,
    killing: Option<ScalarFn>,
}

impl AnalyticField {
    pub fn new<S, B>(dim: usize, convention: NoiseConvention, sigma: S, drift: B) -> Self
    where
        S: Fn(f64, &[f64]) -> Mat + Send + Sync + 'static,
        B: Fn(f64, &[f64]) -> Point + Send + Sync + 'static,
    {
        Self {
            dim,
            horizon: f64::INFINITY,
            kappa: convention.factor(),
            sigma: Box::new(sigma),
            drift: Box::new(drift),
            killing: None,
        }
    }

    /// Constant σ = s·I and constant drift.
    pub fn constant(dim: usize, convention: NoiseConvention, s: f64, drift: Point) -> Self {
        Self::new(
            dim,
            convention,
            move |_, _| {
                let mut m = [[0.0; MAX_DIM]; MAX_DIM];
                for (k, row) in m.iter_mut().enumerate().take(dim) {
                    row[k] = s;
                }
                m
            },
            move |_, _| drift,
        )
    }

    pub fn with_killing<K>(mut self, k: K) -> Self
    where
        K: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.killing = Some(Box::new(k));
        self
    }
}

impl FlowField for AnalyticField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn noise_factor(&self) -> f64 {
        self.kappa
    }
    fn sigma(&self, t: f64, x: &[f64]) -> Mat {
        (self.sigma)(t, x)
    }
    fn drift(&self, t: f64, x: &[f64]) -> Point {
        (self.drift)(t, x)
    }
    fn killing(&self, t: f64, x: &[f64]) -> f64 {
        self.killing.as_ref().map_or(0.0, |k| k(t, x))
    }
}

/// Coefficients of species `i` frozen along a PDE solution: the convolved
/// arguments `G^{ij} * ξ^j_t`, `H^{ij} * ξ^j_t` and the competition
/// `Σ_j C^{ij} * ξ^j_t` are interpolated by cubic splines in space and
/// linearly in time, then composed with the model's σ, b and r.
pub struct FrozenCoefficients {
    model: CoefficientModel,
    species: usize,
    times: Vec<f64>,
    g: Vec<Vec<SplineField>>,
    h: Vec<Vec<SplineField>>,
    competition: Vec<SplineField>,
}

impl FrozenCoefficients {
    /// `snapshots` must start at t = 0 and be spaced at most `10 δt` apart.
    pub fn from_pde(solver: &PdeSolver, snapshots: &[GridField], species: usize) -> Result<Self> {
        let model = solver.model().clone();
        if species >= model.num_species() {
            return invalid(format!("species {species} out of range"));
        }
        if snapshots.is_empty() || snapshots[0].time.abs() > 1e-12 {
            return invalid("frozen coefficients need a snapshot at t = 0");
        }
        let max_gap = 10.0 * solver.params().dt * (1.0 + 1e-9);
        for w in snapshots.windows(2) {
            let gap = w[1].time - w[0].time;
            if !(gap > 0.0) || gap > max_gap {
                return invalid(format!(
                    "snapshot spacing {gap} outside (0, 10 δt = {}]",
                    10.0 * solver.params().dt
                ));
            }
        }
        let grid = solver.grid();
        let d = grid.dim;
        let origin: Vec<f64> = (0..d).map(|k| grid.axis_center(k, 0)).collect();
        let spacing: Vec<f64> = (0..d).map(|k| grid.spacing(k)).collect();
        let spline = |v: &[f64]| SplineField::new(d, &origin, &spacing, &grid.cells, v);
        let sp = &model.species[species];
        let rates: Vec<f64> = (0..grid.len()).map(|c| model.rate(species, &grid.center(c)[..d])).collect();
        let mut g = Vec::new();
        let mut h = Vec::new();
        let mut competition = Vec::new();
        for u in snapshots {
            let cf = solver.coefficient_fields(u);
            g.push(if sp.sigma_uses_measure() {
                cf.g_conv[species].iter().map(|v| spline(v)).collect()
            } else {
                Vec::new()
            });
            h.push(if sp.drift_uses_measure() {
                cf.h_conv[species].iter().map(|v| spline(v)).collect()
            } else {
                Vec::new()
            });
            let comp: Vec<f64> = rates.iter().zip(&cf.growth[species]).map(|(r, k)| r - k).collect();
            competition.push(spline(&comp));
        }
        Ok(Self {
            model,
            species,
            times: snapshots.iter().map(|s| s.time).collect(),
            g,
            h,
            competition,
        })
    }

    fn bracket(&self, t: f64) -> (usize, f64) {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return (0, 0.0);
        }
        if t >= self.times[n - 1] {
            return (n - 1, 0.0);
        }
        let k = self.times.partition_point(|s| *s <= t) - 1;
        (k, (t - self.times[k]) / (self.times[k + 1] - self.times[k]))
    }

    fn lerp(&self, fields: &[Vec<SplineField>], t: f64, x: &[f64]) -> Vec<f64> {
        let (k, th) = self.bracket(t);
        if fields[k].is_empty() {
            return Vec::new();
        }
        fields[k]
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let a = s.eval(x);
                if th == 0.0 {
                    a
                } else {
                    (1.0 - th) * a + th * fields[k + 1][j].eval(x)
                }
            })
            .collect()
    }

    /// Largest finite-difference slope of σ and b over `probes`, at every
    /// stored time.
    pub fn lipschitz_probe(&self, probes: &[Point], step: f64) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for &t in &self.times {
            for p in probes {
                for l in 0..d {
                    let (mut xp, mut xm) = (*p, *p);
                    xp[l] += step;
                    xm[l] -= step;
                    let (sp, sm) = (self.sigma(t, &xp[..d]), self.sigma(t, &xm[..d]));
                    let (bp, bm) = (self.drift(t, &xp[..d]), self.drift(t, &xm[..d]));
                    for k in 0..d {
                        worst = worst.max(((bp[k] - bm[k]) / (2.0 * step)).abs());
                        for q in 0..d {
                            worst = worst.max(((sp[k][q] - sm[k][q]) / (2.0 * step)).abs());
                        }
                    }
                }
            }
        }
        worst
    }
}

impl FlowField for FrozenCoefficients {
    fn dim(&self) -> usize {
        self.model.dim
    }
    fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }
    fn noise_factor(&self) -> f64 {
        self.model.noise_factor()
    }
    fn sigma(&self, t: f64, x: &[f64]) -> Mat {
        let v = self.lerp(&self.g, t, x);
        self.model.sigma(self.species, x, &v)
    }
    fn drift(&self, t: f64, x: &[f64]) -> Point {
        let w = self.lerp(&self.h, t, x);
        self.model.drift(self.species, x, &w)
    }
    fn killing(&self, t: f64, x: &[f64]) -> f64 {
        let (k, th) = self.bracket(t);
        let mut c = self.competition[k].eval(x);
        if th > 0.0 {
            c = (1.0 - th) * c + th * self.competition[k + 1].eval(x);
        }
        self.model.rate(self.species, x) - c
    }
}

/// Brownian increments on a uniform grid, shared between coupled flows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BrownianPath {
    pub dim: usize,
    pub dt: f64,
    /// `steps * dim` increments, step-major.
    pub increments: Vec<f64>,
}

impl BrownianPath {
    /// Path keyed by (query, replica); the same key always yields the same
    /// increments.
    pub fn sample(seed: u64, query: u32, replica: u64, dim: usize, dt: f64, steps: usize) -> Self {
        let mut s = Stream::keyed(seed, Purpose::Flow, query, replica, 0);
        let sd = dt.sqrt();
        Self {
            dim,
            dt,
            increments: (0..steps * dim).map(|_| sd * s.normal()).collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.increments.len() / self.dim.max(1)
    }

    #[inline]
    pub fn increment(&self, n: usize) -> Point {
        let mut p = [0.0; MAX_DIM];
        p[..self.dim].copy_from_slice(&self.increments[n * self.dim..(n + 1) * self.dim]);
        p
    }

    /// Same path on a grid `m` times coarser.
    pub fn coarsen(&self, m: usize) -> Result<Self> {
        if m == 0 || !self.steps().is_multiple_of(m) {
            return invalid(format!("cannot coarsen {} steps by {m}", self.steps()));
        }
        let d = self.dim;
        let mut inc = vec![0.0; self.increments.len() / m];
        for n in 0..self.steps() {
            for k in 0..d {
                inc[(n / m) * d + k] += self.increments[n * d + k];
            }
        }
        Ok(Self {
            dim: d,
            dt: self.dt * m as f64,
            increments: inc,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlowParams {
    pub dt: f64,
    /// Paths leaving the ball of this radius abort.
    pub blowup: f64,
    /// Finite-difference step for coefficient derivatives.
    pub fd_step: f64,
}

impl FlowParams {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            blowup: 1e8,
            fd_step: 1e-4,
        }
    }

    pub fn steps(&self, span: f64) -> usize {
        ((span / self.dt) - 1e-9).ceil().max(1.0) as usize
    }
}

fn check_span<F: FlowField + ?Sized>(f: &F, s: f64, t: f64, noise: &BrownianPath) -> Result<f64> {
    if !(s <= t) {
        return invalid(format!("need s <= t, got s = {s}, t = {t}"));
    }
    if t > f.horizon() + 1e-9 {
        return invalid(format!("t = {t} beyond the coefficient horizon {}", f.horizon()));
    }
    if noise.dim != f.dim() {
        return Err(Error::DimensionMismatch {
            expected: f.dim(),
            got: noise.dim,
        });
    }
    let n = noise.steps();
    if n == 0 {
        return Ok(0.0);
    }
    let h = (t - s) / n as f64;
    if (h - noise.dt).abs() > 1e-9 * noise.dt.max(1e-300) {
        return invalid(format!("noise step {} does not tile [{s}, {t}] in {n} steps", noise.dt));
    }
    Ok(h)
}

fn guard(x: &[f64], limit: f64, t: f64) -> Result<()> {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !r.is_finite() || r > limit {
        return Err(Error::Numerical(format!("flow path blew up (|X| = {r:e}) at t = {t}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForwardOutcome {
    pub end: Point,
    /// `∫ killing(r, X_r) dr` along the path.
    pub log_weight: f64,
    pub path: Option<Vec<Point>>,
}

/// `X_{s,t}(x)` driven by `noise`, whose steps tile [s, t].
pub fn forward_path<F: FlowField + ?Sized>(
    f: &F,
    s: f64,
    t: f64,
    x: &[f64],
    noise: &BrownianPath,
    params: &FlowParams,
    store: bool,
) -> Result<ForwardOutcome> {
    let h = check_span(f, s, t, noise)?;
    let d = f.dim();
    let kappa = f.noise_factor();
    let mut z = [0.0; MAX_DIM];
    z[..d].copy_from_slice(&x[..d]);
    let mut path = store.then(|| vec![z]);
    let mut logw = 0.0;
    for n in 0..noise.steps() {
        let tn = s + n as f64 * h;
        let sig = f.sigma(tn, &z[..d]);
        let b = f.drift(tn, &z[..d]);
        logw += f.killing(tn, &z[..d]) * h;
        let db = noise.increment(n);
        let mut next = z;
        for k in 0..d {
            next[k] += b[k] * h + kappa * (0..d).map(|q| sig[k][q] * db[q]).sum::<f64>();
        }
        z = next;
        guard(&z[..d], params.blowup, tn + h)?;
        if let Some(p) = path.as_mut() {
            p.push(z);
        }
    }
    Ok(ForwardOutcome {
        end: z,
        log_weight: logw,
        path,
    })
}

/// Local coefficients of the reverted equation and the derivatives the
/// Jacobian and determinant need.
struct Local {
    a: Mat,
    /// `m[q][k][l] = ∂_l A_{kq}`.
    m: [Mat; MAX_DIM],
    beta: Point,
    grad_beta: Mat,
    div_beta_circ: f64,
    /// `[q][l] = ∂_l div A^q`.
    grad_div_a: Mat,
}

struct Reverted<'a, F: ?Sized> {
    f: &'a F,
    d: usize,
    kappa: f64,
    h: f64,
}

impl<F: FlowField + ?Sized> Reverted<'_, F> {
    fn a(&self, t: f64, x: &Point) -> Mat {
        let s = self.f.sigma(t, &x[..self.d]);
        let mut a = [[0.0; MAX_DIM]; MAX_DIM];
        for k in 0..self.d {
            for q in 0..self.d {
                a[k][q] = self.kappa * s[k][q];
            }
        }
        a
    }

    fn grad_a(&self, t: f64, x: &Point) -> [Mat; MAX_DIM] {
        let mut m = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
        for l in 0..self.d {
            let (mut xp, mut xm) = (*x, *x);
            xp[l] += self.h;
            xm[l] -= self.h;
            let (ap, am) = (self.a(t, &xp), self.a(t, &xm));
            for q in 0..self.d {
                for k in 0..self.d {
                    m[q][k][l] = (ap[k][q] - am[k][q]) / (2.0 * self.h);
                }
            }
        }
        m
    }

    /// `-b + c · Σ_q Σ_l A_{lq} ∂_l A_{·q}`; c = 1 gives β, c = 1/2 gives
    /// the Stratonovich drift β°.
    fn drift_with(&self, t: f64, x: &Point, c: f64) -> Point {
        let a = self.a(t, x);
        let m = self.grad_a(t, x);
        let b = self.f.drift(t, &x[..self.d]);
        let mut out = [0.0; MAX_DIM];
        for k in 0..self.d {
            let mut corr = 0.0;
            for q in 0..self.d {
                for l in 0..self.d {
                    corr += a[l][q] * m[q][k][l];
                }
            }
            out[k] = -b[k] + c * corr;
        }
        out
    }

    fn div_a(&self, t: f64, x: &Point) -> Point {
        let m = self.grad_a(t, x);
        let mut out = [0.0; MAX_DIM];
        for q in 0..self.d {
            out[q] = (0..self.d).map(|k| m[q][k][k]).sum();
        }
        out
    }

    /// `[k][l] = ∂_l g_k`.
    fn jacobian_of(&self, x: &Point, g: impl Fn(&Point) -> Point) -> Mat {
        let mut j = [[0.0; MAX_DIM]; MAX_DIM];
        for l in 0..self.d {
            let (mut xp, mut xm) = (*x, *x);
            xp[l] += self.h;
            xm[l] -= self.h;
            let (gp, gm) = (g(&xp), g(&xm));
            for k in 0..self.d {
                j[k][l] = (gp[k] - gm[k]) / (2.0 * self.h);
            }
        }
        j
    }

    fn local(&self, t: f64, x: &Point) -> Local {
        let gb = self.jacobian_of(x, |y| self.drift_with(t, y, 1.0));
        let gbc = self.jacobian_of(x, |y| self.drift_with(t, y, 0.5));
        Local {
            a: self.a(t, x),
            m: self.grad_a(t, x),
            beta: self.drift_with(t, x, 1.0),
            grad_beta: gb,
            div_beta_circ: (0..self.d).map(|k| gbc[k][k]).sum(),
            grad_div_a: self.jacobian_of(x, |y| self.div_a(t, y)),
        }
    }
}

fn identity(d: usize) -> Mat {
    let mut m = [[0.0; MAX_DIM]; MAX_DIM];
    for (k, row) in m.iter_mut().enumerate().take(d) {
        row[k] = 1.0;
    }
    m
}

pub fn det(m: &Mat, d: usize) -> f64 {
    if d == 1 {
        m[0][0]
    } else {
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InverseOutcome {
    pub end: Point,
    pub jacobian: Mat,
    /// Determinant of the integrated Jacobian matrix.
    pub det_matrix: f64,
    /// Determinant integrated directly in Itô form.
    pub det_ito: f64,
    /// Largest relative gap between the two determinant routes on the path.
    pub det_gap: f64,
    pub min_det: f64,
    /// `∫_0^t killing(t - s, Z_s) ds`.
    pub log_weight: f64,
    pub path: Option<Vec<Point>>,
    pub jacobians: Option<Vec<Mat>>,
}

/// `η_{0,t}(y)` with its Jacobian and determinant, driven by the forward
/// increments `noise` on [0, t] (reverted internally).
pub fn inverse_path<F: FlowField + ?Sized>(
    f: &F,
    t: f64,
    y: &[f64],
    noise: &BrownianPath,
    params: &FlowParams,
    store: bool,
) -> Result<InverseOutcome> {
    let h = check_span(f, 0.0, t, noise)?;
    let d = f.dim();
    let rev = Reverted {
        f,
        d,
        kappa: f.noise_factor(),
        h: params.fd_step,
    };
    let n_steps = noise.steps();
    let mut z = [0.0; MAX_DIM];
    z[..d].copy_from_slice(&y[..d]);
    let mut jac = identity(d);
    let mut det_ito = 1.0;
    let mut det_gap: f64 = 0.0;
    let mut min_det: f64 = 1.0;
    let mut logw = 0.0;
    let mut path = store.then(|| vec![z]);
    let mut jacs = store.then(|| vec![jac]);
    for n in 0..n_steps {
        let tau = t - n as f64 * h;
        let b = noise.increment(n_steps - 1 - n);
        let mut dw = [0.0; MAX_DIM];
        for q in 0..d {
            dw[q] = -b[q];
        }
        let loc = rev.local(tau, &z);
        logw += f.killing(tau, &z[..d]) * h;

        // J <- (I + Σ_q ∇A^q dW^q + ∇β ds) J
        let mut step = identity(d);
        for k in 0..d {
            for l in 0..d {
                step[k][l] += loc.grad_beta[k][l] * h + (0..d).map(|q| loc.m[q][k][l] * dw[q]).sum::<f64>();
            }
        }
        let mut next_j = [[0.0; MAX_DIM]; MAX_DIM];
        for k in 0..d {
            for l in 0..d {
                next_j[k][l] = (0..d).map(|p| step[k][p] * jac[p][l]).sum();
            }
        }
        jac = next_j;

        let mut lin = 0.0;
        let mut corr = 0.0;
        for q in 0..d {
            let div_q: f64 = (0..d).map(|k| loc.m[q][k][k]).sum();
            let adv: f64 = (0..d).map(|l| loc.a[l][q] * loc.grad_div_a[q][l]).sum();
            lin += div_q * dw[q];
            corr += div_q * div_q + adv;
        }
        det_ito *= 1.0 + lin + (loc.div_beta_circ + 0.5 * corr) * h;

        let mut next = z;
        for k in 0..d {
            next[k] += loc.beta[k] * h + (0..d).map(|q| loc.a[k][q] * dw[q]).sum::<f64>();
        }
        z = next;
        let s_now = (n + 1) as f64 * h;
        guard(&z[..d], params.blowup, t - s_now)?;
        let dm = det(&jac, d);
        if !(dm > 0.0) || !(det_ito > 0.0) {
            return Err(Error::Numerical(format!(
                "inverse-flow Jacobian determinant not positive (matrix {dm:e}, Itô {det_ito:e}) at s = {s_now}, y = {:?}",
                &y[..d]
            )));
        }
        min_det = min_det.min(dm).min(det_ito);
        det_gap = det_gap.max((dm - det_ito).abs() / dm);
        if let Some(p) = path.as_mut() {
            p.push(z);
        }
        if let Some(js) = jacs.as_mut() {
            js.push(jac);
        }
    }
    Ok(InverseOutcome {
        end: z,
        jacobian: jac,
        det_matrix: det(&jac, d),
        det_ito,
        det_gap,
        min_det,
        log_weight: logw,
        path,
        jacobians: jacs,
    })
}

/// Central finite-difference Jacobian of `y ↦ η_{0,t}(y)` under fixed noise.
pub fn inverse_fd_jacobian<F: FlowField + ?Sized>(
    f: &F,
    t: f64,
    y: &[f64],
    noise: &BrownianPath,
    params: &FlowParams,
    step: f64,
) -> Result<Mat> {
    let d = f.dim();
    let mut j = [[0.0; MAX_DIM]; MAX_DIM];
    for l in 0..d {
        let (mut yp, mut ym) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
        yp[..d].copy_from_slice(&y[..d]);
        ym[..d].copy_from_slice(&y[..d]);
        yp[l] += step;
        ym[l] -= step;
        let p = inverse_path(f, t, &yp[..d], noise, params, false)?.end;
        let m = inverse_path(f, t, &ym[..d], noise, params, false)?.end;
        for k in 0..d {
            j[k][l] = (p[k] - m[k]) / (2.0 * step);
        }
    }
    Ok(j)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BundleEntry {
    pub query: usize,
    pub replica: u64,
    pub start: Point,
    pub forward: Vec<Point>,
    pub inverse: Vec<Point>,
    pub jacobians: Vec<Mat>,
    pub det_matrix: Vec<f64>,
    pub noise: BrownianPath,
}

/// Forward and inverse paths from the same points under common noise.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowBundle {
    pub dim: usize,
    pub t: f64,
    pub dt: f64,
    pub entries: Vec<BundleEntry>,
}

impl FlowBundle {
    /// `[entry, step, (forward, inverse, jacobian row-major, det)]` for the
    /// binary dump.
    pub fn flatten(&self) -> (Vec<usize>, Vec<f64>) {
        let d = self.dim;
        let steps = self.entries.first().map_or(0, |e| e.forward.len());
        let width = 2 * d + d * d + 1;
        let mut data = Vec::with_capacity(self.entries.len() * steps * width);
        for e in &self.entries {
            for n in 0..steps {
                data.extend_from_slice(&e.forward[n][..d]);
                data.extend_from_slice(&e.inverse[n][..d]);
                for row in &e.jacobians[n][..d] {
                    data.extend_from_slice(&row[..d]);
                }
                data.push(e.det_matrix[n]);
            }
        }
        (vec![self.entries.len(), steps, width], data)
    }
}

pub fn sample_bundle<F: FlowField + ?Sized>(
    f: &F,
    t: f64,
    points: &[Point],
    replicas: u64,
    params: &FlowParams,
    seed: u64,
) -> Result<FlowBundle> {
    let d = f.dim();
    let steps = params.steps(t);
    let dt = t / steps as f64;
    let jobs: Vec<(usize, u64)> = (0..points.len()).flat_map(|q| (0..replicas).map(move |r| (q, r))).collect();
    let entries = jobs
        .par_iter()
        .map(|&(q, r)| {
            let noise = BrownianPath::sample(seed, q as u32, r, d, dt, steps);
            let fw = forward_path(f, 0.0, t, &points[q][..d], &noise, params, true)?;
            let inv = inverse_path(f, t, &points[q][..d], &noise, params, true)?;
            let jacobians = inv.jacobians.unwrap();
            Ok(BundleEntry {
                query: q,
                replica: r,
                start: points[q],
                forward: fw.path.unwrap(),
                inverse: inv.path.unwrap(),
                det_matrix: jacobians.iter().map(|j| det(j, d)).collect(),
                jacobians,
                noise,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlowBundle { dim: d, t, dt, entries })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n as f64).sqrt(),
            n,
        }
    }
}

/// `⟨ξ_t, φ⟩` as the killed expectation of φ along forward paths, with the
/// outer integral over the initial density done at the cell centres of
/// `initial` (species `species`).
#[allow(clippy::too_many_arguments)]
pub fn feynman_kac_functional<F: FlowField + ?Sized>(
    f: &F,
    initial: &GridField,
    species: usize,
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    t: f64,
    n_paths: usize,
    params: &FlowParams,
    seed: u64,
) -> Result<Estimate> {
    let d = f.dim();
    let vol = initial.grid.cell_volume();
    let vals = &initial.values[species];
    let peak = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let nodes: Vec<usize> = (0..vals.len()).filter(|&c| vals[c].abs() > 1e-14 * peak).collect();
    let steps = params.steps(t);
    let dt = t / steps as f64;
    let per_node = nodes
        .par_iter()
        .map(|&c| {
            let x = initial.grid.center(c);
            let samples = (0..n_paths as u64)
                .map(|r| {
                    let noise = BrownianPath::sample(seed, c as u32, r, d, dt, steps);
                    let o = forward_path(f, 0.0, t, &x[..d], &noise, params, false)?;
                    Ok(phi(&o.end[..d]) * o.log_weight.exp())
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((vals[c] * vol, Estimate::from_samples(&samples)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_node.iter().map(|(w, e)| w * e.mean).sum();
    let var: f64 = per_node.iter().map(|(w, e)| (w * e.stderr).powi(2)).sum();
    Ok(Estimate {
        mean,
        stderr: var.sqrt(),
        n: n_paths,
    })
}

/// Density at each query point as the mean of
/// `exp(∫ killing) · ξ_0(η_{0,t}(y)) · det ∇η_{0,t}(y)`.
pub fn density_estimate<F: FlowField + ?Sized>(
    f: &F,
    xi0: &(dyn Fn(&[f64]) -> f64 + Sync),
    ys: &[Point],
    t: f64,
    n_paths: usize,
    params: &FlowParams,
    seed: u64,
) -> Result<Vec<DensityRow>> {
    let d = f.dim();
    let steps = params.steps(t);
    let dt = t / steps as f64;
    ys.iter()
        .enumerate()
        .map(|(q, y)| {
            let samples = (0..n_paths as u64)
                .into_par_iter()
                .map(|r| {
                    let noise = BrownianPath::sample(seed, q as u32, r, d, dt, steps);
                    let o = inverse_path(f, t, &y[..d], &noise, params, false)?;
                    Ok(o.log_weight.exp() * xi0(&o.end[..d]) * o.det_matrix)
                })
                .collect::<Result<Vec<f64>>>()?;
            let e = Estimate::from_samples(&samples);
            Ok(DensityRow {
                y: y[..d].to_vec(),
                estimate: e.mean,
                stderr: e.stderr,
                n_paths,
            })
        })
        .collect()
}

/// Density estimates at `params.dt` and at twice that step from the same
/// Brownian paths; the paired difference estimates the time-discretization
/// error of the fine estimate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedDensity {
    pub fine: DensityRow,
    pub coarse: DensityRow,
    /// coarse minus fine, per path.
    pub difference: Estimate,
}

pub fn density_estimate_paired<F: FlowField + ?Sized>(
    f: &F,
    xi0: &(dyn Fn(&[f64]) -> f64 + Sync),
    ys: &[Point],
    t: f64,
    n_paths: usize,
    params: &FlowParams,
    seed: u64,
) -> Result<Vec<PairedDensity>> {
    let d = f.dim();
    let mut steps = params.steps(t);
    steps += steps % 2;
    let dt = t / steps as f64;
    let coarse_params = FlowParams { dt: 2.0 * dt, ..*params };
    let row = |y: &Point, xs: &[f64]| {
        let e = Estimate::from_samples(xs);
        DensityRow {
            y: y[..d].to_vec(),
            estimate: e.mean,
            stderr: e.stderr,
            n_paths,
        }
    };
    ys.iter()
        .enumerate()
        .map(|(q, y)| {
            let pairs = (0..n_paths as u64)
                .into_par_iter()
                .map(|r| {
                    let noise = BrownianPath::sample(seed, q as u32, r, d, dt, steps);
                    let psi = |o: InverseOutcome| o.log_weight.exp() * xi0(&o.end[..d]) * o.det_matrix;
                    let fine = psi(inverse_path(f, t, &y[..d], &noise, params, false)?);
                    let coarse = psi(inverse_path(f, t, &y[..d], &noise.coarsen(2)?, &coarse_params, false)?);
                    Ok((fine, coarse))
                })
                .collect::<Result<Vec<(f64, f64)>>>()?;
            let fine: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let coarse: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let diff: Vec<f64> = pairs.iter().map(|p| p.1 - p.0).collect();
            Ok(PairedDensity {
                fine: row(y, &fine),
                coarse: row(y, &coarse),
                difference: Estimate::from_samples(&diff),
            })
        })
        .collect()
}

/// Test functions with known bounded-Lipschitz norm.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFunction {
    Constant { value: f64 },
    /// `height · max(0, 1 - |x - center| / radius)`.
    Tent { center: Point, radius: f64, height: f64 },
    /// `clamp(slope · x_axis, -cap, cap)`.
    Ramp { axis: usize, slope: f64, cap: f64 },
    /// `amplitude · cos(freq · x_axis)`.
    Cosine { axis: usize, freq: f64, amplitude: f64 },
}

impl TestFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Constant { value } => *value,
            TestFunction::Tent { center, radius, height } => {
                let r = x.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
                height * (1.0 - r / radius).max(0.0)
            }
            TestFunction::Ramp { axis, slope, cap } => (slope * x[*axis]).clamp(-cap, *cap),
            TestFunction::Cosine { axis, freq, amplitude } => amplitude * (freq * x[*axis]).cos(),
        }
    }

    /// `Lip(φ) + sup|φ|`.
    pub fn lb_norm(&self) -> f64 {
        match self {
            TestFunction::Constant { value } => value.abs(),
            TestFunction::Tent { radius, height, .. } => height.abs() * (1.0 + 1.0 / radius),
            TestFunction::Ramp { slope, cap, .. } => slope.abs() + cap.abs(),
            TestFunction::Cosine { freq, amplitude, .. } => amplitude.abs() * (1.0 + freq.abs()),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, TestFunction::Constant { .. })
    }

    pub fn standard_dictionary(dim: usize, half: f64) -> Vec<TestFunction> {
        let mut out = vec![TestFunction::Constant { value: 1.0 }];
        for axis in 0..dim {
            out.push(TestFunction::Ramp { axis, slope: 1.0, cap: 1.0 });
            for freq in [0.5, 1.0, 2.0] {
                out.push(TestFunction::Cosine { axis, freq, amplitude: 1.0 });
            }
        }
        for c in [-half / 2.0, 0.0, half / 2.0] {
            out.push(TestFunction::Tent {
                center: [c; MAX_DIM],
                radius: 1.0,
                height: 1.0,
            });
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SemigroupRow {
    pub function: usize,
    pub lb_norm: f64,
    /// Sampled `Lip + sup` of `P_{s,t} φ` over the probes.
    pub propagated_lb_norm: f64,
    /// `max_x |P φ(x) - P̃ φ(x)|²` over the probes.
    pub gap_sq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SemigroupReport {
    pub rows: Vec<SemigroupRow>,
    /// Largest `‖P φ‖_LB / ‖φ‖_LB` over non-constant dictionary entries.
    pub lipschitz_constant: f64,
    pub max_gap_sq: f64,
}

/// Estimates `P_{s,t} φ(x) = E φ(X_{s,t}(x))` for both fields under common
/// noise (one Brownian path per replica, shared by all probes) and reports
/// the propagation constant and the squared semigroup gap.
#[allow(clippy::too_many_arguments)]
pub fn semigroup_perturbation_check<F: FlowField + ?Sized, G: FlowField + ?Sized>(
    f: &F,
    g: &G,
    dictionary: &[TestFunction],
    s: f64,
    t: f64,
    probes: &[Point],
    n_paths: usize,
    params: &FlowParams,
    seed: u64,
) -> Result<SemigroupReport> {
    let d = f.dim();
    if g.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: g.dim(),
        });
    }
    let steps = params.steps(t - s);
    let dt = (t - s) / steps as f64;
    // ends[r][p] = (X, X̃)
    let ends = (0..n_paths as u64)
        .into_par_iter()
        .map(|r| {
            let noise = BrownianPath::sample(seed, 0, r, d, dt, steps);
            probes
                .iter()
                .map(|x| {
                    let a = forward_path(f, s, t, &x[..d], &noise, params, false)?.end;
                    let b = forward_path(g, s, t, &x[..d], &noise, params, false)?.end;
                    Ok((a, b))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let np = probes.len();
    let mut rows = Vec::with_capacity(dictionary.len());
    for (k, phi) in dictionary.iter().enumerate() {
        let mut pa = vec![0.0; np];
        let mut pb = vec![0.0; np];
        for per in &ends {
            for (p, (a, b)) in per.iter().enumerate() {
                pa[p] += phi.eval(&a[..d]);
                pb[p] += phi.eval(&b[..d]);
            }
        }
        for p in 0..np {
            pa[p] /= n_paths as f64;
            pb[p] /= n_paths as f64;
        }
        let sup = pa.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut lip: f64 = 0.0;
        for p in 0..np {
            for q in p + 1..np {
                let dist = (0..d).map(|k| (probes[p][k] - probes[q][k]).powi(2)).sum::<f64>().sqrt();
                if dist > 0.0 {
                    lip = lip.max((pa[p] - pa[q]).abs() / dist);
                }
            }
        }
        let gap_sq = pa.iter().zip(&pb).map(|(a, b)| (a - b).powi(2)).fold(0.0, f64::max);
        rows.push(SemigroupRow {
            function: k,
            lb_norm: phi.lb_norm(),
            propagated_lb_norm: lip + sup,
            gap_sq,
        });
    }
    let lipschitz_constant = rows
        .iter()
        .filter(|r| !dictionary[r.function].is_constant() && r.lb_norm > 0.0)
        .map(|r| r.propagated_lb_norm / r.lb_norm)
        .fold(0.0, f64::max);
    let max_gap_sq = rows.iter().map(|r| r.gap_sq).fold(0.0, f64::max);
    Ok(SemigroupReport {
        rows,
        lipschitz_constant,
        max_gap_sq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64) -> Point {
        [x, 0.0]
    }

    fn wavy(dim: usize) -> AnalyticField {
        AnalyticField::new(
            dim,
            NoiseConvention::Sqrt2,
            move |_, x| {
                let mut m = [[0.0; MAX_DIM]; MAX_DIM];
                m[0][0] = 0.5 + 0.2 * x[0].sin();
                if dim == 2 {
                    m[1][1] = 0.5 + 0.2 * (x[0] * x[1]).cos() / (1.0 + x[1] * x[1]);
                    m[0][1] = 0.1 * x[1].cos();
                }
                m
            },
            move |_, x| {
                let mut b = [0.0; MAX_DIM];
                b[0] = -0.3 * x[0];
                if dim == 2 {
                    b[1] = 0.2 * x[0].sin() - 0.1 * x[1];
                }
                b
            },
        )
    }

    #[test]
    fn deterministic_translation() {
        let f = AnalyticField::constant(2, NoiseConvention::Sqrt2, 0.0, [1.0, -2.0]);
        let p = FlowParams::new(0.01);
        let noise = BrownianPath::sample(1, 0, 0, 2, 0.01, 50);
        let fw = forward_path(&f, 0.5, 1.0, &[0.3, 0.4], &noise, &p, false).unwrap();
        assert!((fw.end[0] - 0.8).abs() < 1e-12 && (fw.end[1] + 0.6).abs() < 1e-12);
        let noise = BrownianPath::sample(1, 0, 0, 2, 0.01, 100);
        let inv = inverse_path(&f, 1.0, &[0.3, 0.4], &noise, &p, false).unwrap();
        assert!((inv.end[0] + 0.7).abs() < 1e-12 && (inv.end[1] - 2.4).abs() < 1e-12);
        assert_eq!(inv.jacobian, identity(2));
        assert_eq!(inv.det_matrix, 1.0);
        assert_eq!(inv.det_ito, 1.0);
    }

    #[test]
    fn zero_span_is_identity() {
        let f = wavy(1);
        let noise = BrownianPath::sample(1, 0, 0, 1, 0.01, 0);
        let o = forward_path(&f, 0.3, 0.3, &[0.7], &noise, &FlowParams::new(0.01), false).unwrap();
        assert_eq!(o.end[0], 0.7);
    }

    #[test]
    fn constant_sigma_variance() {
        // S = [[1, 0.5], [0, 1]]: (SS*)_{00} = 1.25, (SS*)_{11} = 1
        let f = AnalyticField::new(
            2,
            NoiseConvention::Sqrt2,
            |_, _| [[1.0, 0.5], [0.0, 1.0]],
            |_, _| [0.0; MAX_DIM],
        );
        let p = FlowParams::new(0.1);
        let n = 40_000;
        let (mut v0, mut v1) = (0.0, 0.0);
        for r in 0..n {
            let noise = BrownianPath::sample(3, 0, r, 2, 0.1, 5);
            let o = forward_path(&f, 0.0, 0.5, &[0.0, 0.0], &noise, &p, false).unwrap();
            v0 += o.end[0] * o.end[0];
            v1 += o.end[1] * o.end[1];
        }
        let (v0, v1) = (v0 / n as f64, v1 / n as f64);
        assert!((v0 / (2.0 * 1.25 * 0.5) - 1.0).abs() < 0.03, "{v0}");
        assert!((v1 / (2.0 * 1.0 * 0.5) - 1.0).abs() < 0.03, "{v1}");
        let inv = inverse_path(&f, 0.5, &[0.0, 0.0], &BrownianPath::sample(3, 0, 0, 2, 0.1, 5), &p, false).unwrap();
        assert_eq!(inv.det_matrix, 1.0);
    }

    #[test]
    fn inverse_then_forward_returns_near_start() {
        let f = wavy(1);
        let t = 0.5;
        let fine = BrownianPath::sample(7, 0, 0, 1, 0.5 / 1024.0, 1024);
        let mut errs = Vec::new();
        for m in [8, 4, 1] {
            let mut e = 0.0;
            for r in 0..200 {
                let noise = BrownianPath::sample(7, 0, r, 1, t / 1024.0, 1024).coarsen(m).unwrap();
                let p = FlowParams::new(noise.dt);
                let z = inverse_path(&f, t, &[0.4], &noise, &p, false).unwrap().end;
                let x = forward_path(&f, 0.0, t, &z[..1], &noise, &p, false).unwrap().end;
                e += (x[0] - 0.4).abs();
            }
            errs.push(e / 200.0);
        }
        assert_eq!(fine.steps(), 1024);
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        assert!(errs[2] < 0.05);
    }

    #[test]
    fn variational_jacobian_matches_finite_differences() {
        for dim in [1, 2] {
            let f = wavy(dim);
            let p = FlowParams::new(1e-3);
            let noise = BrownianPath::sample(5, 0, 1, dim, 1e-3, 500);
            let y = [0.3, -0.2];
            let o = inverse_path(&f, 0.5, &y[..dim], &noise, &p, false).unwrap();
            let fd = inverse_fd_jacobian(&f, 0.5, &y[..dim], &noise, &p, 1e-5).unwrap();
            let scale = (0..dim).flat_map(|k| (0..dim).map(move |l| (k, l))).map(|(k, l)| o.jacobian[k][l].abs()).fold(0.0, f64::max);
            for k in 0..dim {
                for l in 0..dim {
                    assert!((o.jacobian[k][l] - fd[k][l]).abs() < 1e-4 * scale, "{dim} {k}{l}");
                }
            }
            assert!(o.det_gap < 0.01, "{}", o.det_gap);
            if dim == 1 {
                assert!((o.det_matrix - o.det_ito).abs() < 1e-9 * o.det_matrix);
            }
        }
    }

    #[test]
    fn density_trivial_cases() {
        let xi0 = |x: &[f64]| (-x[0] * x[0]).exp();
        let p = FlowParams::new(0.05);
        let still = AnalyticField::constant(1, NoiseConvention::Sqrt2, 0.0, [0.0; 2]);
        let rows = density_estimate(&still, &xi0, &[pt(0.3)], 1.0, 3, &p, 1).unwrap();
        assert!((rows[0].estimate - xi0(&[0.3])).abs() < 1e-15);
        assert!(rows[0].stderr < 1e-15);
        let grow = AnalyticField::constant(1, NoiseConvention::Sqrt2, 0.0, [0.0; 2]).with_killing(|_, _| 0.7);
        let rows = density_estimate(&grow, &xi0, &[pt(0.3)], 1.0, 3, &p, 1).unwrap();
        assert!((rows[0].estimate / ((0.7f64).exp() * xi0(&[0.3])) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn feynman_kac_trivial_cases() {
        use crate::grid::Grid;
        let grid = Grid::cube(1, 3.0, 60).unwrap();
        let init = GridField::from_fn(grid, 1, |_, x| 0.4 * (-x[0] * x[0]).exp());
        let m0 = init.mass(0);
        let p = FlowParams::new(0.1);
        let one = |_: &[f64]| 1.0;
        let f = wavy(1);
        let e = feynman_kac_functional(&f, &init, 0, &one, 0.5, 4, &p, 2).unwrap();
        assert!((e.mean - m0).abs() < 1e-12 && e.stderr < 1e-14);
        let g = AnalyticField::constant(1, NoiseConvention::Sqrt2, 0.0, [0.0; 2]).with_killing(|_, _| 0.5);
        let e = feynman_kac_functional(&g, &init, 0, &one, 1.0, 2, &p, 2).unwrap();
        assert!((e.mean / (m0 * 0.5f64.exp()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn semigroup_trivial_cases() {
        let f = wavy(1);
        let probes: Vec<Point> = [-1.0, 0.0, 0.5, 1.0].iter().map(|&x| pt(x)).collect();
        let dict = TestFunction::standard_dictionary(1, 2.0);
        let p = FlowParams::new(0.02);
        let r = semigroup_perturbation_check(&f, &f, &dict, 0.0, 0.5, &probes, 50, &p, 3).unwrap();
        assert_eq!(r.max_gap_sq, 0.0);
        assert!((r.rows[0].propagated_lb_norm - 1.0).abs() < 1e-15);
        assert!(r.lipschitz_constant > 0.0 && r.lipschitz_constant < 3.0);
    }

    #[test]
    fn semigroup_gap_shrinks_with_translation() {
        let shifted = |delta: f64| {
            AnalyticField::new(
                1,
                NoiseConvention::Sqrt2,
                move |_, x| [[0.5 + 0.2 * (x[0] - delta).sin(), 0.0], [0.0; 2]],
                move |_, x| [-0.3 * (x[0] - delta), 0.0],
            )
        };
        let base = shifted(0.0);
        let probes: Vec<Point> = [-1.0, 0.0, 1.0].iter().map(|&x| pt(x)).collect();
        let dict = TestFunction::standard_dictionary(1, 2.0);
        let p = FlowParams::new(0.02);
        let gaps: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&d| semigroup_perturbation_check(&base, &shifted(d), &dict, 0.0, 1.0, &probes, 100, &p, 4).unwrap().max_gap_sq)
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn coarsened_noise_sums_increments() {
        let b = BrownianPath::sample(1, 2, 3, 2, 0.01, 8);
        let c = b.coarsen(4).unwrap();
        assert_eq!(c.steps(), 2);
        assert!((c.increments[0] - (0..4).map(|n| b.increments[2 * n]).sum::<f64>()).abs() < 1e-15);
        assert!(b.coarsen(3).is_err());
    }
}
