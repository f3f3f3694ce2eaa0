//! Bounded-Lipschitz distances, moments and rate fits.
//!
//! `‖μ - ν‖ = sup { ⟨μ - ν, φ⟩ : Lip(φ) + sup|φ| ≤ 1 }`. On a finite support
//! the supremum is a linear program in the values `φ_i`, a Lipschitz budget
//! `L` and a sup budget `S`:
//!
//! ```text
//! max Σ w_i φ_i   s.t.  φ_i - φ_j ≤ L |z_i - z_j|,  |φ_i| ≤ S,  L + S ≤ 1
//! ```
//!
//! Any such `φ` extends to all of ℝ^d with the same `L` and `S` (McShane
//! extension, then clamping), so the program is exact. Splitting the budget
//! inside the program replaces a separate rescaling step: for `δ_0 - δ_h` in
//! one dimension the optimum is `min(Lh, 2S)` at `L = 2/(h+2)`.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::kernels::EmpiricalMeasure;
use crate::numerics::fit_line;
use crate::rng::{Purpose, Stream};

/// Signed finite measure `Σ w_i δ_{z_i}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscreteMeasure {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() != weights.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: weights.len() * dim,
                got: points.len(),
            });
        }
        if points.iter().chain(&weights).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("support and weights must be finite".into()));
        }
        Ok(Self { dim, points, weights })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            points: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn dirac(point: &[f64], mass: f64) -> Self {
        Self {
            dim: point.len(),
            points: point.to_vec(),
            weights: vec![mass],
        }
    }

    pub fn from_empirical(nu: &EmpiricalMeasure) -> Self {
        Self {
            dim: nu.dim,
            points: nu.points.clone(),
            weights: vec![nu.weight; nu.len()],
        }
    }

    /// Cells become atoms of mass `value · h^d` at their centres.
    pub fn from_grid(u: &GridField, species: usize) -> Self {
        let vol = u.grid.cell_volume();
        Self {
            dim: u.grid.dim,
            points: u.grid.centers_flat(),
            weights: u.values[species].iter().map(|v| v * vol).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            points: self.points.clone(),
            weights: self.weights.iter().map(|w| w * c).collect(),
        }
    }

    /// `μ + s ν` with coincident atoms merged and zero atoms dropped.
    pub fn combine(&self, other: &Self, s: f64) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let d = self.dim;
        let mut atoms: Vec<(&[f64], f64)> = Vec::with_capacity(self.len() + other.len());
        for i in 0..self.len() {
            atoms.push((self.point(i), self.weights[i]));
        }
        for i in 0..other.len() {
            atoms.push((other.point(i), s * other.weights[i]));
        }
        atoms.sort_by(|a, b| {
            for k in 0..d {
                match a.0[k].total_cmp(&b.0[k]) {
                    std::cmp::Ordering::Equal => continue,
                    o => return o,
                }
            }
            std::cmp::Ordering::Equal
        });
        let mut points = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        let mut last: Option<&[f64]> = None;
        for (p, w) in atoms {
            if last == Some(p) {
                *weights.last_mut().unwrap() += w;
            } else {
                points.extend_from_slice(p);
                weights.push(w);
                last = Some(p);
            }
        }
        let mut out = Self::empty(d);
        for (i, w) in weights.iter().enumerate() {
            if *w != 0.0 {
                out.points.extend_from_slice(&points[i * d..(i + 1) * d]);
                out.weights.push(*w);
            }
        }
        Ok(out)
    }
}

pub fn total_mass(mu: &DiscreteMeasure) -> f64 {
    mu.weights.iter().sum()
}

/// Per-axis `Σ w_i (z_i)_a^order`, order ∈ {0, 1, 2, 4}.
pub fn moments(mu: &DiscreteMeasure, order: u32) -> Result<Vec<f64>> {
    if !matches!(order, 0 | 1 | 2 | 4) {
        return Err(Error::InvalidParameter(format!("moment order {order} not in {{0,1,2,4}}")));
    }
    Ok((0..mu.dim)
        .map(|a| {
            (0..mu.len())
                .map(|i| mu.weights[i] * mu.points[i * mu.dim + a].powi(order as i32))
                .sum()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlMethod {
    ExactLp,
    Subgradient,
    DictionaryLowerBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlOptions {
    /// Nearest neighbours per atom in the sparsified program (d ≥ 2).
    pub knn: usize,
    /// Extra random pairs per atom (d ≥ 2).
    pub random_pairs: usize,
    /// Largest support for which the all-pairs program is used.
    pub dense_limit: usize,
    /// Largest support accepted by the exact method.
    pub max_support: usize,
    /// Constraint-generation rounds before falling back to dense.
    pub max_rounds: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Relative gap accepted between the sparse bound and its repair.
    pub tolerance: f64,
}

impl Default for BlOptions {
    fn default() -> Self {
        Self {
            knn: 8,
            random_pairs: 2,
            dense_limit: 2000,
            max_support: 50_000,
            max_rounds: 20,
            iterations: 4000,
            seed: 0,
            tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlResult {
    pub value: f64,
    pub method: BlMethod,
    /// Support of `μ - ν` (merged) and the test function found on it.
    pub support: DiscreteMeasure,
    pub certificate: Vec<f64>,
    pub lipschitz_budget: f64,
    pub sup_budget: f64,
    /// Upper bound minus `value`.
    pub gap: f64,
}

pub fn bl_distance(mu: &DiscreteMeasure, nu: &DiscreteMeasure, method: BlMethod) -> Result<BlResult> {
    bl_distance_with(mu, nu, method, &BlOptions::default())
}

pub fn bl_distance_with(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    method: BlMethod,
    opts: &BlOptions,
) -> Result<BlResult> {
    let diff = mu.combine(nu, -1.0)?;
    bl_norm(&diff, method, opts)
}

/// BL dual norm of a signed measure.
pub fn bl_norm(diff: &DiscreteMeasure, method: BlMethod, opts: &BlOptions) -> Result<BlResult> {
    let tv: f64 = diff.weights.iter().map(|w| w.abs()).sum();
    if diff.is_empty() || tv == 0.0 {
        return Ok(BlResult {
            value: 0.0,
            method,
            support: diff.clone(),
            certificate: vec![0.0; diff.len()],
            lipschitz_budget: 0.0,
            sup_budget: 0.0,
            gap: 0.0,
        });
    }
    match method {
        BlMethod::ExactLp => exact_lp(diff, tv, opts),
        BlMethod::Subgradient => subgradient(diff, tv, opts),
        BlMethod::DictionaryLowerBound => Ok(dictionary(diff, tv)),
    }
}

fn dist(m: &DiscreteMeasure, i: usize, j: usize) -> f64 {
    let (a, b) = (m.point(i), m.point(j));
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

struct LpSolution {
    phi: Vec<f64>,
    l: f64,
    s: f64,
    value: f64,
}

/// Solve the budgeted program over the given pair constraints. Weights are
/// normalised to unit total variation for conditioning.
fn solve_pairs(weights: &[f64], tv: f64, pairs: &[(usize, usize, f64)]) -> Result<LpSolution> {
    let n = weights.len();
    let nv = n + 2;
    let (li, si) = (n, n + 1);
    let mut rows = Vec::with_capacity(6 * pairs.len() + 4 * n + 4);
    let mut cols = Vec::with_capacity(rows.capacity());
    let mut vals = Vec::with_capacity(rows.capacity());
    let mut b = Vec::with_capacity(2 * pairs.len() + 2 * n + 3);
    let mut r = 0;
    for &(i, j, d) in pairs {
        rows.extend([r, r, r]);
        cols.extend([i, j, li]);
        vals.extend([1.0, -1.0, -d]);
        b.push(0.0);
        r += 1;
        rows.extend([r, r, r]);
        cols.extend([i, j, li]);
        vals.extend([-1.0, 1.0, -d]);
        b.push(0.0);
        r += 1;
    }
    for i in 0..n {
        rows.extend([r, r]);
        cols.extend([i, si]);
        vals.extend([1.0, -1.0]);
        b.push(0.0);
        r += 1;
        rows.extend([r, r]);
        cols.extend([i, si]);
        vals.extend([-1.0, -1.0]);
        b.push(0.0);
        r += 1;
    }
    rows.extend([r, r]);
    cols.extend([li, si]);
    vals.extend([1.0, 1.0]);
    b.push(1.0);
    r += 1;
    rows.push(r);
    cols.push(li);
    vals.push(-1.0);
    b.push(0.0);
    r += 1;
    rows.push(r);
    cols.push(si);
    vals.push(-1.0);
    b.push(0.0);
    r += 1;
    let a = CscMatrix::new_from_triplets(r, nv, rows, cols, vals);
    let p = CscMatrix::zeros((nv, nv));
    let mut q = vec![0.0; nv];
    for i in 0..n {
        q[i] = -weights[i] / tv;
    }
    let cones = [NonnegativeConeT(r)];
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-10)
        .tol_gap_rel(1e-10)
        .tol_feas(1e-10)
        .max_iter(400)
        .build()
        .map_err(|e| Error::Solver(format!("{e:?}")))?;
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
        .map_err(|e| Error::Solver(format!("{e:?}")))?;
    solver.solve();
    match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        s => return Err(Error::Solver(format!("status {s:?}"))),
    }
    let x = &solver.solution.x;
    let l = x[li].max(0.0);
    let s = x[si].max(0.0);
    Ok(LpSolution {
        phi: x[..n].to_vec(),
        l,
        s,
        value: -solver.solution.obj_val * tv,
    })
}

/// McShane lower envelope `min_j (φ_j + L d_ij)` clamped to `[-S, S]`,
/// plus the minimising index per atom. O(n²).
fn repair(m: &DiscreteMeasure, phi: &[f64], l: f64, s: f64) -> (Vec<f64>, Vec<usize>) {
    let n = phi.len();
    let mut out = vec![0.0; n];
    let mut arg = vec![0; n];
    for i in 0..n {
        let mut best = phi[i];
        let mut bj = i;
        for j in 0..n {
            let v = phi[j] + l * dist(m, i, j);
            if v < best {
                best = v;
                bj = j;
            }
        }
        out[i] = best.clamp(-s, s);
        arg[i] = bj;
    }
    (out, arg)
}

fn sorted_order_1d(m: &DiscreteMeasure) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| m.points[a].total_cmp(&m.points[b]));
    order
}

fn candidate_pairs(m: &DiscreteMeasure, opts: &BlOptions) -> Vec<(usize, usize, f64)> {
    let n = m.len();
    let mut pairs = std::collections::BTreeSet::new();
    // kNN via sorting on the first axis and scanning outward
    let order = sorted_order_1d(m);
    let mut pos = vec![0; n];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    for i in 0..n {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(opts.knn + 1);
        let p = pos[i];
        let (mut lo, mut hi) = (p, p + 1);
        loop {
            let worst = if best.len() == opts.knn { best[opts.knn - 1].0 } else { f64::INFINITY };
            let gap_lo = if lo > 0 { m.points[i * m.dim] - m.points[order[lo - 1] * m.dim] } else { f64::INFINITY };
            let gap_hi = if hi < n { m.points[order[hi] * m.dim] - m.points[i * m.dim] } else { f64::INFINITY };
            if gap_lo.min(gap_hi) > worst || (gap_lo.is_infinite() && gap_hi.is_infinite()) {
                break;
            }
            let j = if gap_lo <= gap_hi {
                lo -= 1;
                order[lo]
            } else {
                hi += 1;
                order[hi - 1]
            };
            let d = dist(m, i, j);
            if best.len() < opts.knn || d < worst {
                let at = best.partition_point(|e| e.0 <= d);
                best.insert(at, (d, j));
                best.truncate(opts.knn);
            }
        }
        for (_, j) in best {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let mut stream = Stream::keyed(opts.seed, Purpose::Sparsify, 0, n as u64, 0);
    for i in 0..n {
        for _ in 0..opts.random_pairs {
            let j = stream.index(n);
            if j != i {
                pairs.insert((i.min(j), i.max(j)));
            }
        }
    }
    pairs.into_iter().map(|(i, j)| (i, j, dist(m, i, j))).collect()
}

fn exact_lp(m: &DiscreteMeasure, tv: f64, opts: &BlOptions) -> Result<BlResult> {
    let n = m.len();
    if n > opts.max_support {
        return Err(Error::Solver(format!(
            "support of {n} atoms exceeds the exact-lp limit {}",
            opts.max_support
        )));
    }
    let finish = |sol: LpSolution, phi: Vec<f64>, gap: f64| {
        let value: f64 = m.weights.iter().zip(&phi).map(|(w, p)| w * p).sum();
        BlResult {
            value: value.max(0.0).min(sol.value.max(0.0)),
            method: BlMethod::ExactLp,
            support: m.clone(),
            certificate: phi,
            lipschitz_budget: sol.l,
            sup_budget: sol.s,
            gap,
        }
    };
    if m.dim == 1 {
        // on a line, adjacent constraints imply all others
        let order = sorted_order_1d(m);
        let pairs: Vec<_> = order.windows(2).map(|w| (w[0], w[1], dist(m, w[0], w[1]))).collect();
        let sol = solve_pairs(&m.weights, tv, &pairs)?;
        let phi: Vec<f64> = sol.phi.iter().map(|p| p.clamp(-sol.s, sol.s)).collect();
        return Ok(finish(sol, phi, 0.0));
    }
    let dense = |m: &DiscreteMeasure| -> Vec<(usize, usize, f64)> {
        let n = m.len();
        let mut v = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                v.push((i, j, dist(m, i, j)));
            }
        }
        v
    };
    if n <= opts.knn + 1 {
        let sol = solve_pairs(&m.weights, tv, &dense(m))?;
        let (phi, _) = repair(m, &sol.phi, sol.l, sol.s);
        return Ok(finish(sol, phi, 0.0));
    }
    let mut pairs = candidate_pairs(m, opts);
    let mut seen: std::collections::HashSet<(usize, usize)> = pairs.iter().map(|p| (p.0, p.1)).collect();
    for _ in 0..opts.max_rounds {
        let sol = solve_pairs(&m.weights, tv, &pairs)?;
        let (phi, arg) = repair(m, &sol.phi, sol.l, sol.s);
        let lower: f64 = m.weights.iter().zip(&phi).map(|(w, p)| w * p).sum();
        let gap = (sol.value - lower).max(0.0);
        if gap <= opts.tolerance * tv.max(1.0) {
            return Ok(finish(sol, phi, gap));
        }
        let mut added = 0;
        for (i, &j) in arg.iter().enumerate() {
            if j != i && seen.insert((i.min(j), i.max(j))) {
                pairs.push((i.min(j), i.max(j), dist(m, i, j)));
                added += 1;
            }
        }
        if added == 0 {
            break;
        }
    }
    if n <= opts.dense_limit {
        let sol = solve_pairs(&m.weights, tv, &dense(m))?;
        let (phi, _) = repair(m, &sol.phi, sol.l, sol.s);
        return Ok(finish(sol, phi, 0.0));
    }
    Err(Error::Solver(format!(
        "sparsified program did not close its gap and {n} atoms exceed the dense limit {}",
        opts.dense_limit
    )))
}

/// Envelope `clamp(min_j (θ_j + L d_ij), ±S)` with arg-min indices and a
/// clamp flag (-1, 0, +1).
fn envelope(m: &DiscreteMeasure, order: Option<&[usize]>, theta: &[f64], l: f64, s: f64) -> (Vec<f64>, Vec<usize>, Vec<i8>) {
    let n = theta.len();
    let mut val = vec![0.0; n];
    let mut arg: Vec<usize> = (0..n).collect();
    match order {
        Some(order) => {
            // two sweeps along the sorted line
            for (k, &i) in order.iter().enumerate() {
                val[i] = theta[i];
                if k > 0 {
                    let p = order[k - 1];
                    let cand = val[p] + l * (m.points[i] - m.points[p]);
                    if cand < val[i] {
                        val[i] = cand;
                        arg[i] = arg[p];
                    }
                }
            }
            for k in (0..n.saturating_sub(1)).rev() {
                let i = order[k];
                let p = order[k + 1];
                let cand = val[p] + l * (m.points[p] - m.points[i]);
                if cand < val[i] {
                    val[i] = cand;
                    arg[i] = arg[p];
                }
            }
        }
        None => {
            for i in 0..n {
                let mut best = theta[i];
                for j in 0..n {
                    let v = theta[j] + l * dist(m, i, j);
                    if v < best {
                        best = v;
                        arg[i] = j;
                    }
                }
                val[i] = best;
            }
        }
    }
    let mut flag = vec![0i8; n];
    for i in 0..n {
        if val[i] > s {
            val[i] = s;
            flag[i] = 1;
        } else if val[i] < -s {
            val[i] = -s;
            flag[i] = -1;
        }
    }
    (val, arg, flag)
}

/// Supergradient ascent on `θ` for a fixed split `(L, 1 - L)`.
fn ascend(
    m: &DiscreteMeasure,
    order: Option<&[usize]>,
    w: &[f64],
    l: f64,
    iterations: usize,
) -> (f64, Vec<f64>) {
    let n = w.len();
    let s = 1.0 - l;
    let mut theta: Vec<f64> = w.iter().map(|v| s * v.signum()).collect();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for it in 0..iterations {
        let (phi, arg, flag) = envelope(m, order, &theta, l, s);
        let value: f64 = w.iter().zip(&phi).map(|(a, b)| a * b).sum();
        if value > best.0 {
            best = (value, phi);
        }
        let mut g = vec![0.0; n];
        for i in 0..n {
            if flag[i] == 0 {
                g[arg[i]] += w[i];
            }
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let step = s.max(1e-3) / (1.0 + it as f64).sqrt();
        for i in 0..n {
            theta[i] += step * g[i] / norm;
        }
    }
    best
}

/// Golden-section search over the budget split, whose optimal value is
/// concave in `L`, with an inner supergradient ascent.
fn subgradient(m: &DiscreteMeasure, tv: f64, opts: &BlOptions) -> Result<BlResult> {
    let order = if m.dim == 1 { Some(sorted_order_1d(m)) } else { None };
    let w: Vec<f64> = m.weights.iter().map(|v| v / tv).collect();
    let evals = 24;
    let inner = (opts.iterations / evals).max(20);
    let mut cache: Vec<(f64, f64, Vec<f64>)> = Vec::new();
    let eval = |l: f64, cache: &mut Vec<(f64, f64, Vec<f64>)>| -> f64 {
        let (v, phi) = ascend(m, order.as_deref(), &w, l, inner);
        cache.push((v, l, phi));
        v
    };
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (0.0, 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = eval(c, &mut cache);
    let mut fd = eval(d, &mut cache);
    for _ in 0..evals - 2 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = eval(c, &mut cache);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = eval(d, &mut cache);
        }
    }
    // the endpoint L = 0 (constants) is always admissible
    let mass: f64 = w.iter().sum();
    cache.push((mass.abs(), 0.0, vec![mass.signum(); w.len()]));
    let (value, l, phi) = cache
        .into_iter()
        .max_by(|x, y| x.0.total_cmp(&y.0))
        .expect("at least one evaluation");
    let value = value.max(0.0) * tv;
    Ok(BlResult {
        value,
        method: BlMethod::Subgradient,
        support: m.clone(),
        certificate: phi,
        lipschitz_budget: l,
        sup_budget: 1.0 - l,
        gap: (tv - value).max(0.0),
    })
}

/// Test functions with known budgets: constants, tents and clamped ramps.
fn dictionary(m: &DiscreteMeasure, tv: f64) -> BlResult {
    let n = m.len();
    let d = m.dim;
    let mut best = (total_mass(m).abs(), vec![total_mass(m).signum(); n], 0.0, 1.0);
    let consider = |phi: Vec<f64>, l: f64, s: f64, best: &mut (f64, Vec<f64>, f64, f64)| {
        let v: f64 = m.weights.iter().zip(&phi).map(|(a, b)| a * b).sum();
        if v.abs() > best.0 {
            let sign = v.signum();
            *best = (v.abs(), phi.into_iter().map(|p| p * sign).collect(), l, s);
        }
    };
    // scale range from the support geometry
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for a in 0..d {
        let xs: Vec<f64> = (0..n).map(|i| m.points[i * d + a]).collect();
        let mn = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi = hi.max(mx - mn);
        let mut s = xs.clone();
        s.sort_by(f64::total_cmp);
        for wdw in s.windows(2) {
            if wdw[1] > wdw[0] {
                lo = lo.min(wdw[1] - wdw[0]);
            }
        }
    }
    if !lo.is_finite() {
        lo = 1.0;
    }
    let hi = hi.max(lo) * 2.0;
    let radii: Vec<f64> = (0..24).map(|k| lo * (hi / lo).powf(k as f64 / 23.0)).collect();
    let stride = (n / 200).max(1);
    for c in (0..n).step_by(stride) {
        for &rho in &radii {
            let height = rho / (1.0 + rho);
            let phi = (0..n).map(|i| height * (1.0 - dist(m, i, c) / rho).max(0.0)).collect();
            consider(phi, height / rho, height, &mut best);
        }
    }
    let dirs: Vec<Vec<f64>> = if d == 1 {
        vec![vec![1.0]]
    } else {
        (0..16)
            .map(|k| {
                let t = std::f64::consts::PI * k as f64 / 16.0;
                vec![t.cos(), t.sin()]
            })
            .collect()
    };
    for u in &dirs {
        let proj: Vec<f64> = (0..n).map(|i| (0..d).map(|a| u[a] * m.points[i * d + a]).sum()).collect();
        let mut sorted = proj.clone();
        sorted.sort_by(f64::total_cmp);
        for q in 0..=40 {
            let o = sorted[((n - 1) as f64 * q as f64 / 40.0).round() as usize];
            for k in 1..20 {
                let l = k as f64 / 20.0;
                let cap = 1.0 - l;
                let phi = proj.iter().map(|p| (l * (p - o)).clamp(-cap, cap)).collect();
                consider(phi, l, cap, &mut best);
            }
        }
    }
    let (value, phi, l, s) = best;
    BlResult {
        value,
        method: BlMethod::DictionaryLowerBound,
        support: m.clone(),
        certificate: phi,
        lipschitz_budget: l,
        sup_budget: s,
        gap: (tv - value).max(0.0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    /// 2.5% and 97.5% pairs-bootstrap quantiles of the slope.
    pub band: (f64, f64),
}

/// Least-squares slope of log(distance) against log(scale).
pub fn rate_fit(pairs: &[(f64, f64)], bootstrap: usize, seed: u64) -> Result<RateFit> {
    if pairs.len() < 3 {
        return Err(Error::InvalidParameter("rate fit needs at least 3 scales".into()));
    }
    if pairs.iter().any(|(s, d)| !(*s > 0.0) || !(*d > 0.0)) {
        return Err(Error::InvalidParameter("scales and distances must be > 0".into()));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let (a, b, se) = fit_line(&xs, &ys);
    let mut stream = Stream::keyed(seed, Purpose::Bootstrap, 0, 0, 0);
    let mut slopes = Vec::with_capacity(bootstrap);
    let n = xs.len();
    for _ in 0..bootstrap {
        let idx: Vec<usize> = (0..n).map(|_| stream.index(n)).collect();
        if idx.iter().all(|&i| xs[i] == xs[idx[0]]) {
            continue;
        }
        let bx: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
        let by: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
        slopes.push(fit_line(&bx, &by).1);
    }
    let band = if slopes.is_empty() {
        (b, b)
    } else {
        slopes.sort_by(f64::total_cmp);
        let q = |p: f64| slopes[((slopes.len() - 1) as f64 * p).round() as usize];
        (q(0.025), q(0.975))
    };
    Ok(RateFit {
        slope: b,
        intercept: a,
        stderr: se,
        band,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn exact(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        bl_distance(mu, nu, BlMethod::ExactLp).unwrap().value
    }

    #[test]
    fn two_diracs_on_a_line() {
        for h in [0.5, 1.0, 2.0, 5.0] {
            let v = exact(&DiscreteMeasure::dirac(&[0.0], 1.0), &DiscreteMeasure::dirac(&[h], 1.0));
            assert!((v - 2.0 * h / (h + 2.0)).abs() < 1e-6, "h={h}: {v}");
        }
    }

    #[test]
    fn trivial_cases() {
        let mu = DiscreteMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.25]).unwrap();
        assert_eq!(exact(&mu, &mu), 0.0);
        let zero = DiscreteMeasure::empty(1);
        assert!((exact(&DiscreteMeasure::dirac(&[0.0], 1.0), &zero) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn combine_merges_coincident_atoms() {
        let a = DiscreteMeasure::new(2, vec![0.0, 0.0, 1.0, 1.0], vec![1.0, 2.0]).unwrap();
        let b = DiscreteMeasure::new(2, vec![1.0, 1.0], vec![2.0]).unwrap();
        let c = a.combine(&b, -1.0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.weights, vec![1.0]);
    }

    #[test]
    fn sparse_program_matches_dense_in_2d() {
        let mut s = Stream::keyed(5, Purpose::Probe, 0, 0, 0);
        let n = 60;
        let pts: Vec<f64> = (0..2 * n).map(|_| 3.0 * s.uniform()).collect();
        let w: Vec<f64> = (0..n).map(|_| s.uniform() - 0.5).collect();
        let m = DiscreteMeasure::new(2, pts, w).unwrap();
        let tv: f64 = m.weights.iter().map(|v| v.abs()).sum();
        let sparse = bl_norm(&m, BlMethod::ExactLp, &BlOptions { knn: 3, random_pairs: 0, ..Default::default() }).unwrap();
        let mut all = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                all.push((i, j, dist(&m, i, j)));
            }
        }
        let dense = solve_pairs(&m.weights, tv, &all).unwrap();
        assert!((sparse.value - dense.value).abs() < 1e-7, "{} vs {}", sparse.value, dense.value);
    }

    #[test]
    fn adjacent_pairs_match_dense_in_1d() {
        let mut s = Stream::keyed(6, Purpose::Probe, 0, 0, 0);
        let n = 40;
        let m = DiscreteMeasure::new(
            1,
            (0..n).map(|_| 4.0 * s.uniform()).collect(),
            (0..n).map(|_| s.uniform() - 0.45).collect(),
        )
        .unwrap();
        let tv: f64 = m.weights.iter().map(|v| v.abs()).sum();
        let mut all = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                all.push((i, j, dist(&m, i, j)));
            }
        }
        let dense = solve_pairs(&m.weights, tv, &all).unwrap();
        let fast = bl_norm(&m, BlMethod::ExactLp, &BlOptions::default()).unwrap();
        assert!((dense.value - fast.value).abs() < 1e-7);
    }

    #[test]
    fn lower_bounds_do_not_exceed_exact() {
        let mut s = Stream::keyed(8, Purpose::Probe, 0, 0, 0);
        for dim in [1usize, 2] {
            let n = 50;
            let m = DiscreteMeasure::new(
                dim,
                (0..n * dim).map(|_| 2.0 * s.uniform()).collect(),
                (0..n).map(|_| s.uniform() - 0.5).collect(),
            )
            .unwrap();
            let ex = bl_norm(&m, BlMethod::ExactLp, &BlOptions::default()).unwrap().value;
            let dict = bl_norm(&m, BlMethod::DictionaryLowerBound, &BlOptions::default()).unwrap().value;
            let sg = bl_norm(&m, BlMethod::Subgradient, &BlOptions::default()).unwrap().value;
            assert!(dict <= ex + 1e-9, "{dict} > {ex}");
            assert!(sg <= ex + 1e-9, "{sg} > {ex}");
            assert!(sg >= 0.9 * ex, "subgradient {sg} far below {ex}");
        }
    }

    #[test]
    fn moments_and_mass() {
        let m = DiscreteMeasure::new(1, vec![-1.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(moments(&m, 1).unwrap(), vec![0.0]);
        assert_eq!(moments(&m, 2).unwrap(), vec![2.0]);
        assert_eq!(moments(&m, 0).unwrap(), vec![2.0]);
        assert!(moments(&m, 3).is_err());
        let nu = EmpiricalMeasure::new(1, vec![0.0; 30], 1.0 / 1000.0, 0).unwrap();
        assert_relative_eq!(total_mass(&DiscreteMeasure::from_empirical(&nu)), 0.03, epsilon = 1e-15);
    }

    #[test]
    fn rate_fit_examples() {
        let lin: Vec<_> = [0.4, 0.2, 0.1, 0.05].iter().map(|e| (*e, 3.0 * e)).collect();
        let f = rate_fit(&lin, 500, 1).unwrap();
        assert_relative_eq!(f.slope, 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.band.0, 1.0, epsilon = 1e-9);
        let quad: Vec<_> = [0.4, 0.2, 0.1].iter().map(|e| (*e, e * e)).collect();
        assert_relative_eq!(rate_fit(&quad, 100, 1).unwrap().slope, 2.0, epsilon = 1e-12);
        assert!(rate_fit(&lin[..2], 10, 1).is_err());
        assert!(rate_fit(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)], 10, 1).is_err());
    }
}
