//! Explicit finite-difference solver for the nonlocal cross-diffusion system
//!
//! ```text
//! ∂_t u^i = Σ_kl ∂²_kl (D^i_kl u^i) - Σ_k ∂_k (b^i_k u^i) + (r_i - Σ_j C^{ij} * u^j) u^i
//! ```
//!
//! with `D^i = (κ²/2) σ^i (σ^i)*` evaluated at `(x, G^{i·} * u)` and `b^i` at
//! `(x, H^{i·} * u)`. In local mode the competition term is `Σ_j c^{ij} u^j`.
//! Zero Dirichlet data outside the box.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, GridField};
use crate::kernels::GridConvolver;
use crate::model::{mat_mul_transpose, CoefficientModel, MAX_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompetitionMode {
    /// Competition through the kernels C^{ij}.
    Kernel,
    /// Pointwise competition with the constants c^{ij}.
    Local,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverParams {
    pub dt: f64,
    pub t_end: f64,
    pub mode: CompetitionMode,
    pub snapshots: Vec<f64>,
    #[serde(default = "default_safety")]
    pub cfl_safety: f64,
    /// Width, in cells, of the band where boundary mass is measured.
    #[serde(default = "default_band")]
    pub boundary_band: usize,
    /// Boundary-band mass fraction above which the run is flagged.
    #[serde(default = "default_leak")]
    pub leak_threshold: f64,
}

fn default_safety() -> f64 {
    0.9
}
fn default_band() -> usize {
    2
}
fn default_leak() -> f64 {
    1e-6
}

impl SolverParams {
    pub fn new(dt: f64, t_end: f64, mode: CompetitionMode, snapshots: Vec<f64>) -> Self {
        Self {
            dt,
            t_end,
            mode,
            snapshots,
            cfl_safety: default_safety(),
            boundary_band: default_band(),
            leak_threshold: default_leak(),
        }
    }
}

/// Coefficient fields on the grid for one state.
#[derive(Clone, Debug)]
pub struct CoefficientFields {
    /// `(G^{ij} * u^j)` per species i, then j, per cell.
    pub g_conv: Vec<Vec<Vec<f64>>>,
    pub h_conv: Vec<Vec<Vec<f64>>>,
    /// Killing rate `r_i - Σ_j C^{ij} * u^j` (or `c^{ij} u^j` in local mode).
    pub growth: Vec<Vec<f64>>,
}

pub struct PdeSolver {
    model: CoefficientModel,
    grid: Grid,
    params: SolverParams,
    g: Vec<Vec<Option<GridConvolver>>>,
    h: Vec<Vec<Option<GridConvolver>>>,
    c: Vec<Vec<Option<GridConvolver>>>,
    rates: Vec<Vec<f64>>,
    gscale: f64,
    /// Largest stable step, given the probed sup of the diffusion.
    pub dt_bound: f64,
}

impl std::fmt::Debug for PdeSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PdeSolver")
            .field("grid", &self.grid)
            .field("params", &self.params)
            .field("dt_bound", &self.dt_bound)
            .finish()
    }
}

fn sup_bound_of_mass(init: &GridField, model: &CoefficientModel, t: f64) -> f64 {
    init.masses()
        .iter()
        .enumerate()
        .map(|(i, m)| m * (model.rate_bound(i) * t).exp())
        .fold(0.0, f64::max)
}

impl PdeSolver {
    /// Builds the solver and checks the explicit stability bound against a
    /// probe of sup D over the box and the admissible measure arguments.
    pub fn new(model: &CoefficientModel, init: &GridField, params: SolverParams) -> Result<Self> {
        let grid = init.grid.clone();
        let m = model.num_species();
        if grid.dim != model.dim {
            return Err(Error::DimensionMismatch {
                expected: model.dim,
                got: grid.dim,
            });
        }
        if init.species() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: init.species(),
            });
        }
        if !(params.dt > 0.0) || !(params.t_end > 0.0) {
            return invalid("dt and t_end must be > 0");
        }
        if params.snapshots.iter().any(|t| *t < 0.0 || *t > params.t_end + 1e-12) {
            return invalid("snapshot times must lie in [0, T]");
        }
        if params.snapshots.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("snapshot times must be strictly increasing");
        }
        if params.mode == CompetitionMode::Local && model.local_competition.is_none() {
            return invalid("local mode needs local competition constants");
        }
        let build = |mat: &Vec<Vec<crate::kernels::KernelSpec>>, needed: &dyn Fn(usize) -> bool| {
            mat.iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .map(|k| {
                            if needed(i) {
                                GridConvolver::new(k, &grid).map(Some)
                            } else {
                                Ok(None)
                            }
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        };
        let g = build(&model.g, &|i| model.species[i].sigma_uses_measure())?;
        let h = build(&model.h, &|i| model.species[i].drift_uses_measure())?;
        let c = build(&model.c, &|_| params.mode == CompetitionMode::Kernel)?;
        let rates = (0..m)
            .map(|i| (0..grid.len()).map(|cell| model.rate(i, &grid.center(cell)[..grid.dim])).collect())
            .collect();
        let gscale = model.convention.generator_scale();

        // probe sup D: cells × measure arguments up to the a-priori bound
        let vmax = (0..m)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| model.g[i][j].sup())
            .fold(0.0, f64::max)
            * sup_bound_of_mass(init, model, params.t_end)
            * 1.05;
        let mut sup_d: f64 = 0.0;
        let stride = (grid.len() / 4000).max(1);
        let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
        for i in 0..m {
            for cell in (0..grid.len()).step_by(stride) {
                let x = grid.center(cell);
                for lv in levels {
                    let v = vec![lv * vmax; m];
                    let a = mat_mul_transpose(&model.sigma(i, &x[..grid.dim], &v), grid.dim);
                    for k in 0..grid.dim {
                        sup_d = sup_d.max(gscale * a[k][k]);
                    }
                }
            }
        }
        let hmin = (0..grid.dim).map(|k| grid.spacing(k)).fold(f64::INFINITY, f64::min);
        let dt_bound = if sup_d > 0.0 {
            params.cfl_safety * hmin * hmin / (2.0 * grid.dim as f64 * sup_d)
        } else {
            f64::INFINITY
        };
        if params.dt > dt_bound {
            return Err(Error::Cfl {
                dt: params.dt,
                bound: dt_bound,
            });
        }
        Ok(Self {
            model: model.clone(),
            grid,
            params,
            g,
            h,
            c,
            rates,
            gscale,
            dt_bound,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn model(&self) -> &CoefficientModel {
        &self.model
    }

    pub fn params(&self) -> &SolverParams {
        &self.params
    }

    fn convolve_all(&self, convs: &[Vec<Option<GridConvolver>>], u: &GridField) -> Vec<Vec<Vec<f64>>> {
        convs
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, c)| match c {
                        Some(c) => c.apply(&u.values[j]),
                        None => Vec::new(),
                    })
                    .collect()
            })
            .collect()
    }

    /// Convolved arguments and killing rates for state `u`.
    pub fn coefficient_fields(&self, u: &GridField) -> CoefficientFields {
        let m = self.model.num_species();
        let n = self.grid.len();
        let g_conv = self.convolve_all(&self.g, u);
        let h_conv = self.convolve_all(&self.h, u);
        let mut growth = self.rates.clone();
        match self.params.mode {
            CompetitionMode::Kernel => {
                let cc = self.convolve_all(&self.c, u);
                for i in 0..m {
                    for j in 0..m {
                        for cell in 0..n {
                            growth[i][cell] -= cc[i][j][cell];
                        }
                    }
                }
            }
            CompetitionMode::Local => {
                let lc = self.model.local_competition.as_ref().expect("checked in new");
                for i in 0..m {
                    for j in 0..m {
                        for cell in 0..n {
                            growth[i][cell] -= lc[i][j] * u.values[j][cell];
                        }
                    }
                }
            }
        }
        CoefficientFields {
            g_conv,
            h_conv,
            growth,
        }
    }

    fn args(conv: &[Vec<f64>], cell: usize, m: usize) -> Vec<f64> {
        (0..m)
            .map(|j| conv.get(j).and_then(|c| c.get(cell)).copied().unwrap_or(0.0))
            .collect()
    }

    /// Time derivative of every species at every cell; also returns the
    /// largest diagonal diffusion seen, for the runtime stability check.
    pub fn rhs_with_sup(&self, u: &GridField) -> (Vec<Vec<f64>>, f64) {
        let g = &self.grid;
        let d = g.dim;
        let m = self.model.num_species();
        let n = g.len();
        let fields = self.coefficient_fields(u);
        let n0 = g.cells[0];
        let n1 = if d > 1 { g.cells[1] } else { 1 };
        let h0 = g.spacing(0);
        let h1 = if d > 1 { g.spacing(1) } else { 1.0 };
        let mut out = Vec::with_capacity(m);
        let mut sup_d: f64 = 0.0;
        for i in 0..m {
            let ui = &u.values[i];
            // products D_kl u and b_k u at every cell
            let mut p = vec![[[0.0; MAX_DIM]; MAX_DIM]; n];
            let mut q = vec![[0.0; MAX_DIM]; n];
            let sig_const = !self.model.species[i].sigma_uses_measure();
            let drift_const = !self.model.species[i].drift_uses_measure();
            for cell in 0..n {
                let x = g.center(cell);
                let v = if sig_const { Vec::new() } else { Self::args(&fields.g_conv[i], cell, m) };
                let a = mat_mul_transpose(&self.model.sigma(i, &x[..d], &v), d);
                for k in 0..d {
                    sup_d = sup_d.max(self.gscale * a[k][k]);
                    for l in 0..d {
                        p[cell][k][l] = self.gscale * a[k][l] * ui[cell];
                    }
                }
                let w = if drift_const { Vec::new() } else { Self::args(&fields.h_conv[i], cell, m) };
                let b = self.model.drift(i, &x[..d], &w);
                for k in 0..d {
                    q[cell][k] = b[k] * ui[cell];
                }
            }
            let at = |a: isize, b: isize| -> Option<usize> {
                if a < 0 || b < 0 || a >= n0 as isize || b >= n1 as isize {
                    None
                } else {
                    Some(a as usize * n1 + b as usize)
                }
            };
            let mut du = vec![0.0; n];
            for a in 0..n0 as isize {
                for b in 0..n1 as isize {
                    let c = at(a, b).unwrap();
                    let pv = |cell: Option<usize>, k: usize, l: usize| cell.map_or(0.0, |c| p[c][k][l]);
                    let qv = |cell: Option<usize>, k: usize| cell.map_or(0.0, |c| q[c][k]);
                    let mut s = (pv(at(a + 1, b), 0, 0) - 2.0 * p[c][0][0] + pv(at(a - 1, b), 0, 0)) / (h0 * h0);
                    s -= (qv(at(a + 1, b), 0) - qv(at(a - 1, b), 0)) / (2.0 * h0);
                    if d > 1 {
                        s += (pv(at(a, b + 1), 1, 1) - 2.0 * p[c][1][1] + pv(at(a, b - 1), 1, 1)) / (h1 * h1);
                        // ∂²_01 (P_01) + ∂²_10 (P_10), four-point stencil
                        let mixed = |k: usize, l: usize| {
                            (pv(at(a + 1, b + 1), k, l) - pv(at(a + 1, b - 1), k, l) - pv(at(a - 1, b + 1), k, l)
                                + pv(at(a - 1, b - 1), k, l))
                                / (4.0 * h0 * h1)
                        };
                        s += mixed(0, 1) + mixed(1, 0);
                        s -= (qv(at(a, b + 1), 1) - qv(at(a, b - 1), 1)) / (2.0 * h1);
                    }
                    s += fields.growth[i][c] * ui[c];
                    du[c] = s;
                }
            }
            out.push(du);
        }
        (out, sup_d)
    }

    pub fn rhs(&self, u: &GridField) -> Vec<Vec<f64>> {
        self.rhs_with_sup(u).0
    }

    /// One explicit Euler step. Negative values are clamped to zero; the
    /// clamped mass per species is returned.
    pub fn step(&self, u: &mut GridField, dt: f64) -> Result<Vec<f64>> {
        let (du, sup_d) = self.rhs_with_sup(u);
        let hmin = (0..self.grid.dim).map(|k| self.grid.spacing(k)).fold(f64::INFINITY, f64::min);
        if sup_d > 0.0 {
            let bound = self.params.cfl_safety * hmin * hmin / (2.0 * self.grid.dim as f64 * sup_d);
            if dt > bound * (1.0 + 1e-12) {
                return Err(Error::Cfl { dt, bound });
            }
        }
        let vol = self.grid.cell_volume();
        let mut clamped = vec![0.0; u.species()];
        for (i, vals) in u.values.iter_mut().enumerate() {
            for (v, d) in vals.iter_mut().zip(&du[i]) {
                *v += dt * d;
                if !v.is_finite() {
                    return Err(Error::Numerical(format!("non-finite density at t = {}", u.time)));
                }
                if *v < 0.0 {
                    clamped[i] += -*v * vol;
                    *v = 0.0;
                }
            }
        }
        u.time += dt;
        Ok(clamped)
    }

    /// Integrate to `t_end`, recording the requested snapshots exactly.
    pub fn solve(&self, init: &GridField) -> Result<PdeRun> {
        let mut u = init.clone();
        u.time = 0.0;
        let m = u.species();
        let mut snapshots = Vec::with_capacity(self.params.snapshots.len());
        let mut clamp_mass = vec![0.0; m];
        let mut max_boundary: f64 = 0.0;
        let mut steps = 0usize;
        let mut targets = self.params.snapshots.clone();
        if targets.last().is_none_or(|t| *t < self.params.t_end - 1e-12) {
            targets.push(self.params.t_end);
        }
        let record = |u: &GridField, max_b: &mut f64| {
            let total: f64 = u.masses().iter().sum();
            if total > 0.0 {
                let b: f64 = (0..m).map(|i| u.boundary_mass(i, self.params.boundary_band)).sum();
                *max_b = max_b.max(b / total);
            }
        };
        record(&u, &mut max_boundary);
        for (k, &target) in targets.iter().enumerate() {
            while u.time < target - 1e-12 {
                let h = self.params.dt.min(target - u.time);
                let c = self.step(&mut u, h)?;
                for i in 0..m {
                    clamp_mass[i] += c[i];
                }
                steps += 1;
                if steps.is_multiple_of(16) {
                    record(&u, &mut max_boundary);
                }
            }
            u.time = target;
            record(&u, &mut max_boundary);
            if k < self.params.snapshots.len() {
                snapshots.push(u.clone());
            }
        }
        let initial_mass: f64 = init.masses().iter().sum();
        let clamped: f64 = clamp_mass.iter().sum();
        Ok(PdeRun {
            snapshots,
            final_state: u,
            clamp_mass,
            clamp_fraction: if initial_mass > 0.0 { clamped / initial_mass } else { 0.0 },
            max_boundary_fraction: max_boundary,
            leak_flagged: max_boundary > self.params.leak_threshold,
            steps,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PdeRun {
    pub snapshots: Vec<GridField>,
    pub final_state: GridField,
    /// Mass removed by clamping negatives, per species.
    pub clamp_mass: Vec<f64>,
    pub clamp_fraction: f64,
    /// Largest boundary-band mass fraction seen.
    pub max_boundary_fraction: f64,
    pub leak_flagged: bool,
    pub steps: usize,
}

pub fn solve(model: &CoefficientModel, init: &GridField, params: SolverParams) -> Result<PdeRun> {
    PdeSolver::new(model, init, params)?.solve(init)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MassBoundRow {
    pub time: f64,
    pub species: usize,
    pub mass: f64,
    pub bound: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MassBoundReport {
    pub rows: Vec<MassBoundRow>,
    pub ok: bool,
}

/// Checks `⟨u^i_t, 1⟩ ≤ e^{r̄_i t} ⟨u^i_0, 1⟩ + budget` at every snapshot.
pub fn mass_bound_check(
    initial: &GridField,
    snapshots: &[GridField],
    model: &CoefficientModel,
    budget: f64,
) -> MassBoundReport {
    let mut rows = Vec::new();
    for s in snapshots {
        for i in 0..s.species() {
            let bound = (model.rate_bound(i) * s.time).exp() * initial.mass(i) + budget;
            let mass = s.mass(i);
            rows.push(MassBoundRow {
                time: s.time,
                species: i,
                mass,
                bound,
                ok: mass <= bound,
            });
        }
    }
    let ok = rows.iter().all(|r| r.ok);
    MassBoundReport { rows, ok }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{DensitySpec, InitSpec, SpeciesInit};
    use crate::model::{DriftSpec, RateSpec, SigmaSpec, SpeciesSpec};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn species(sigma: f64, rate: f64) -> SpeciesSpec {
        SpeciesSpec {
            sigma: SigmaSpec::Constant { scale: sigma },
            drift: DriftSpec::Zero,
            rate: RateSpec::Constant { value: rate },
            rate_bound: rate,
        }
    }

    fn gaussian_init(dim: usize, std: f64) -> InitSpec {
        InitSpec {
            species: vec![SpeciesInit {
                mass: 1.0,
                density: DensitySpec::Gaussian {
                    mean: vec![0.0; dim],
                    std,
                },
            }],
        }
    }

    #[test]
    fn zero_state_has_zero_rhs() {
        let model = CoefficientModel::homogeneous(1, vec![species(1.0, 1.0)], vec![vec![1.0]]).unwrap();
        let grid = Grid::cube(1, 5.0, 50).unwrap();
        let u = GridField::zeros(grid, 1);
        let s = PdeSolver::new(&model, &u, SolverParams::new(1e-3, 1.0, CompetitionMode::Kernel, vec![])).unwrap();
        assert!(s.rhs(&u)[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn laplacian_of_gaussian_is_second_order() {
        // D = (κ²/2) σ² = 1 with σ = 1 under the √2 convention
        let model = CoefficientModel::homogeneous(1, vec![species(1.0, 0.0)], vec![vec![0.0]]).unwrap();
        let err = |n: usize| {
            let grid = Grid::cube(1, 8.0, n).unwrap();
            let u = gaussian_init(1, 1.0).discretize(&grid);
            let s = PdeSolver::new(&model, &u, SolverParams::new(1e-6, 1.0, CompetitionMode::Kernel, vec![])).unwrap();
            let du = s.rhs(&u);
            let scale = u.mass(0) / (2.0 * PI).sqrt();
            (0..grid.len())
                .map(|c| {
                    let x = grid.center(c)[0];
                    (du[0][c] - scale * (x * x - 1.0) * (-0.5 * x * x).exp()).abs()
                })
                .fold(0.0, f64::max)
        };
        let ratio = err(160) / err(320);
        assert!((3.4..=4.6).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn pure_reaction_is_exponential() {
        let model = CoefficientModel::homogeneous(1, vec![species(0.0, 0.7)], vec![vec![0.0]]).unwrap();
        let grid = Grid::cube(1, 5.0, 50).unwrap();
        let u0 = gaussian_init(1, 1.0).discretize(&grid);
        let s = PdeSolver::new(&model, &u0, SolverParams::new(1e-3, 1.0, CompetitionMode::Kernel, vec![])).unwrap();
        let du = s.rhs(&u0);
        for c in 0..grid.len() {
            assert_relative_eq!(du[0][c], 0.7 * u0.values[0][c], max_relative = 1e-14);
        }
        let dt = 1e-5;
        let run = solve(&model, &u0, SolverParams::new(dt, 1.0, CompetitionMode::Kernel, vec![1.0])).unwrap();
        // explicit Euler: (1 + r dt)^n, close to e^{rt} up to O(dt)
        let m = run.snapshots[0].mass(0);
        assert!((m / (0.7f64).exp() - 1.0).abs() < 1e-5);
        let report = mass_bound_check(&u0, &run.snapshots, &model, 1e-4);
        assert!(report.ok);
    }

    #[test]
    fn heat_equation_variance_slope() {
        let model = CoefficientModel::homogeneous(1, vec![species(0.5, 0.0)], vec![vec![0.0]]).unwrap();
        let grid = Grid::cube(1, 10.0, 400).unwrap();
        let u0 = gaussian_init(1, 0.5).discretize(&grid);
        let run = solve(&model, &u0, SolverParams::new(1e-3, 2.0, CompetitionMode::Kernel, vec![1.0, 2.0])).unwrap();
        let var = |u: &GridField| u.integrate(0, |x| x[0] * x[0]) / u.mass(0);
        // generator σ² ∂² ⇒ Var grows at rate 2σ² = 0.5
        let slope = var(&run.snapshots[1]) - var(&run.snapshots[0]);
        assert!((slope - 0.5).abs() < 0.02 * 0.5, "slope {slope}");
        assert!(!run.leak_flagged);
        assert!(run.clamp_fraction < 1e-6);
    }

    #[test]
    fn cfl_violation_rejected() {
        let model = CoefficientModel::homogeneous(1, vec![species(1.0, 0.0)], vec![vec![0.0]]).unwrap();
        let grid = Grid::cube(1, 5.0, 100).unwrap();
        let u0 = gaussian_init(1, 1.0).discretize(&grid);
        let err = PdeSolver::new(&model, &u0, SolverParams::new(0.1, 1.0, CompetitionMode::Kernel, vec![])).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn competition_gives_strict_inequality_and_no_birth_means_decay() {
        let model = CoefficientModel::homogeneous(1, vec![species(0.3, 1.0)], vec![vec![2.0]]).unwrap();
        let grid = Grid::cube(1, 8.0, 80).unwrap();
        let u0 = gaussian_init(1, 1.0).discretize(&grid);
        let run = solve(&model, &u0, SolverParams::new(1e-3, 1.0, CompetitionMode::Kernel, vec![0.5, 1.0])).unwrap();
        let rep = mass_bound_check(&u0, &run.snapshots, &model, 0.0);
        assert!(rep.rows.iter().all(|r| r.mass < r.bound));

        let decay = CoefficientModel::homogeneous(1, vec![species(0.3, 0.0)], vec![vec![1.0]]).unwrap();
        let run = solve(&decay, &u0, SolverParams::new(1e-3, 1.0, CompetitionMode::Kernel, vec![0.25, 0.5, 1.0])).unwrap();
        let masses: Vec<f64> = run.snapshots.iter().map(|s| s.mass(0)).collect();
        assert!(masses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn local_mode_keeps_uniform_data_uniform_in_the_interior() {
        let model = CoefficientModel::homogeneous(2, vec![species(0.5, 1.0)], vec![vec![1.0]]).unwrap();
        let grid = Grid::cube(2, 2.0, 24).unwrap();
        let u0 = GridField::from_fn(grid.clone(), 1, |_, _| 0.3);
        let s = PdeSolver::new(&model, &u0, SolverParams::new(1e-3, 1.0, CompetitionMode::Local, vec![])).unwrap();
        let du = s.rhs(&u0);
        for c in 0..grid.len() {
            if !grid.is_boundary_band(c, 1) {
                assert_relative_eq!(du[0][c], 0.3 * (1.0 - 0.3), max_relative = 1e-12);
            }
        }
    }
}
