//! The four canonical studies and the single-run verbs behind the CLI.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crossdiff_core::flow::{density_estimate_paired, sample_bundle, FlowParams, FrozenCoefficients};
use crossdiff_core::grid::{Grid, GridField};
use crossdiff_core::ibm::simulate;
use crossdiff_core::init::InitSpec;
use crossdiff_core::io::{density_csv, encode_dump, encode_field, field_csv, snapshot_csv, DumpHeader};
use crossdiff_core::metrics::{bl_distance, rate_fit, BlMethod, DiscreteMeasure, RateFit};
use crossdiff_core::model::{CoefficientModel, ProbeSpec};
use crossdiff_core::pde::{mass_bound_check, CompetitionMode, PdeRun, PdeSolver, SolverParams};
use crossdiff_core::rng::derive_seed;
use crossdiff_core::{Error, Result};

use crate::config::{Format, LoadedConfig};
use crate::output::{sha256_hex, Output};

/// Outcome of one command: a JSON summary and named acceptance checks.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Report {
    pub summary: serde_json::Value,
    pub acceptance: Vec<(String, bool)>,
}

fn cache_scope(cfg: &LoadedConfig, seed: u64, study: &str) -> Result<String> {
    let canon = serde_json::to_vec(&cfg.config)?;
    Ok(format!("{study}:{}:{seed}", sha256_hex(&canon)))
}

pub fn run_pde(
    model: &CoefficientModel,
    init: &InitSpec,
    grid: &Grid,
    params: SolverParams,
) -> Result<(PdeSolver, GridField, PdeRun)> {
    let u0 = init.discretize(grid);
    let solver = PdeSolver::new(model, &u0, params)?;
    let run = solver.solve(&u0)?;
    Ok((solver, u0, run))
}

/// Σ_i BL(μ^i, ν^i) over species.
pub fn species_distance(a: &[DiscreteMeasure], b: &[DiscreteMeasure]) -> Result<f64> {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += bl_distance(x, y, BlMethod::ExactLp)?.value;
    }
    Ok(s)
}

pub fn grid_measures(u: &GridField) -> Vec<DiscreteMeasure> {
    (0..u.species()).map(|i| DiscreteMeasure::from_grid(u, i)).collect()
}

fn fmt_row(values: &[String]) -> String {
    let mut s = values.join(",");
    s.push('\n');
    s
}

pub fn validate(cfg: &LoadedConfig) -> Result<Report> {
    let model = cfg.model()?;
    let half = cfg
        .config
        .pde
        .as_ref()
        .map(|p| {
            p.grid
                .lower
                .iter()
                .chain(&p.grid.upper)
                .fold(0.0f64, |a, v| a.max(v.abs()))
        })
        .unwrap_or(5.0);
    let total: f64 = cfg.config.init.species.iter().map(|s| s.mass).sum();
    let mut probe = ProbeSpec::cube(model.dim, half, 2.0 * total.max(1.0), 256);
    probe.seed = cfg.seed();
    let report = model.validate(&probe);
    Ok(Report {
        acceptance: vec![("assumptions".into(), report.ok())],
        summary: serde_json::to_value(&report)?,
    })
}

pub fn simulate_ibm(cfg: &LoadedConfig, out: &Output, seed: u64) -> Result<Report> {
    let model = cfg.model()?;
    let k = *cfg.ibm()?.k.first().ok_or_else(|| Error::InvalidParameter("ibm.k is empty".into()))?;
    let params = cfg.sim_params(k, seed)?;
    let traj = simulate(&model, &cfg.config.init, &params)?;
    if cfg.wants(Format::Csv) {
        out.write("ibm_snapshots.csv", snapshot_csv(&traj.snapshots).as_bytes())?;
    }
    let masses: Vec<(f64, Vec<f64>)> = traj.snapshots.iter().map(|s| (s.time, s.masses())).collect();
    Ok(Report {
        summary: serde_json::json!({
            "params": params,
            "births": traj.births,
            "deaths": traj.deaths,
            "rejected": traj.rejected,
            "initial_counts": traj.initial_counts,
            "final_counts": (0..model.num_species()).map(|i| traj.final_state.count(i)).collect::<Vec<_>>(),
            "masses": masses,
            "rng": traj.rng,
        }),
        acceptance: vec![("counters".into(), traj.counters_consistent())],
    })
}

pub fn solve_pde(cfg: &LoadedConfig, out: &Output) -> Result<Report> {
    let model = cfg.model()?;
    let pde = cfg.pde()?;
    let grid = pde.grid.build()?;
    let (_, u0, run) = run_pde(&model, &cfg.config.init, &grid, cfg.solver_params(cfg.mode()?, pde.snapshots.clone())?)?;
    for (k, s) in run.snapshots.iter().enumerate() {
        if cfg.wants(Format::Csv) {
            out.write(&format!("field_{k:03}.csv"), field_csv(s).as_bytes())?;
        }
        if cfg.wants(Format::Binary) {
            out.write(&format!("field_{k:03}.bin"), &encode_field(s)?)?;
        }
    }
    let bound = mass_bound_check(&u0, &run.snapshots, &model, 1e-4);
    let mut masses = String::from("t,species,mass,bound\n");
    for r in &bound.rows {
        let _ = writeln!(masses, "{},{},{},{}", r.time, r.species, r.mass, r.bound);
    }
    if cfg.wants(Format::Csv) {
        out.write("masses.csv", masses.as_bytes())?;
    }
    Ok(Report {
        summary: serde_json::json!({
            "steps": run.steps,
            "clamp_fraction": run.clamp_fraction,
            "max_boundary_fraction": run.max_boundary_fraction,
            "leak_flagged": run.leak_flagged,
            "final_masses": run.final_state.masses(),
        }),
        acceptance: vec![("mass_bound".into(), bound.ok), ("no_leak".into(), !run.leak_flagged)],
    })
}

pub fn flow_bundle(cfg: &LoadedConfig, out: &Output, seed: u64) -> Result<Report> {
    let (frozen, _) = frozen_from_config(cfg)?;
    let f = cfg.flow()?;
    let probes = cfg.probes()?;
    let bundle = sample_bundle(&frozen, f.t, &probes, f.bundle_replicas, &FlowParams::new(f.dt), seed)?;
    let (shape, data) = bundle.flatten();
    let header = DumpHeader {
        kind: "flow-bundle".into(),
        shape,
        meta: serde_json::json!({ "dim": bundle.dim, "t": bundle.t, "dt": bundle.dt,
            "columns": "forward, inverse, jacobian (row-major), det" }),
    };
    out.write("flow_bundle.bin", &encode_dump(&header, &data)?)?;
    let min_det = bundle
        .entries
        .iter()
        .flat_map(|e| e.det_matrix.iter().copied())
        .fold(f64::INFINITY, f64::min);
    Ok(Report {
        summary: serde_json::json!({ "paths": bundle.entries.len(), "min_det": min_det }),
        acceptance: vec![("det_positive".into(), min_det > 0.0)],
    })
}

/// Frozen coefficients along the configured PDE, with snapshots every
/// `≤ 10 δt` up to the flow horizon.
fn frozen_from_config(cfg: &LoadedConfig) -> Result<(FrozenCoefficients, PdeRun)> {
    let model = cfg.model()?;
    let pde = cfg.pde()?;
    let f = cfg.flow()?;
    let grid = pde.grid.build()?;
    let times = dense_times(f.t, 10.0 * pde.dt);
    let mut params = cfg.solver_params(cfg.mode()?, times)?;
    params.t_end = f.t;
    let (solver, _, run) = run_pde(&model, &cfg.config.init, &grid, params)?;
    let frozen = FrozenCoefficients::from_pde(&solver, &run.snapshots, f.species)?;
    Ok((frozen, run))
}

fn dense_times(t: f64, spacing: f64) -> Vec<f64> {
    let n = (t / spacing - 1e-9).ceil().max(1.0) as usize;
    (0..=n).map(|k| t * k as f64 / n as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaResult {
    /// Σ_i BL distance to the PDE at each snapshot time.
    pub distances: Vec<f64>,
    pub masses: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LargeKRow {
    pub k: u64,
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
    pub band: (f64, f64),
    pub mean_masses: Vec<f64>,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, (v / n).sqrt())
}

pub fn study_large_k(cfg: &LoadedConfig, out: &Output, seed: u64) -> Result<Report> {
    let model = cfg.model()?;
    let ibm = cfg.ibm()?;
    let pde = cfg.pde()?;
    if ibm.k.is_empty() || ibm.snapshots.is_empty() {
        return Err(Error::InvalidParameter("study-large-k needs ibm.k and ibm.snapshots".into()));
    }
    let grid = pde.grid.build()?;
    let mut params = cfg.solver_params(cfg.mode()?, ibm.snapshots.clone())?;
    params.t_end = ibm.t_end;
    let (_, _, run) = run_pde(&model, &cfg.config.init, &grid, params)?;
    let targets: Vec<Vec<DiscreteMeasure>> = run.snapshots.iter().map(grid_measures).collect();
    let scope = cache_scope(cfg, seed, "large-k")?;
    let mut ks = ibm.k.clone();
    ks.sort_unstable();
    let mut rows = Vec::new();
    let mut csv = String::from("K,t,mean_distance,stderr,band_lo,band_hi,mean_total_mass\n");
    for &k in &ks {
        let reps = (0..ibm.replicas)
            .into_par_iter()
            .map(|r| {
                out.cached(&(&scope, k, r), || {
                    let params = cfg.sim_params(k, derive_seed(seed, 0x4b, k, r))?;
                    let traj = simulate(&model, &cfg.config.init, &params)?;
                    let mut distances = Vec::new();
                    let mut masses = Vec::new();
                    for (snap, target) in traj.snapshots.iter().zip(&targets) {
                        let emp: Vec<DiscreteMeasure> =
                            snap.measures.iter().map(DiscreteMeasure::from_empirical).collect();
                        distances.push(species_distance(&emp, target)?);
                        masses.push(snap.masses());
                    }
                    Ok(ReplicaResult { distances, masses })
                })
            })
            .collect::<Result<Vec<ReplicaResult>>>()?;
        for (ti, &t) in ibm.snapshots.iter().enumerate() {
            let ds: Vec<f64> = reps.iter().map(|r| r.distances[ti]).collect();
            let (mean, se) = mean_se(&ds);
            let mean_masses: Vec<f64> = (0..model.num_species())
                .map(|i| reps.iter().map(|r| r.masses[ti][i]).sum::<f64>() / reps.len() as f64)
                .collect();
            let row = LargeKRow {
                k,
                t,
                mean,
                stderr: se,
                band: (mean - 1.96 * se, mean + 1.96 * se),
                mean_masses,
            };
            csv.push_str(&fmt_row(&[
                k.to_string(),
                t.to_string(),
                mean.to_string(),
                se.to_string(),
                row.band.0.to_string(),
                row.band.1.to_string(),
                row.mean_masses.iter().sum::<f64>().to_string(),
            ]));
            rows.push(row);
        }
    }
    out.write("large_k.csv", csv.as_bytes())?;
    let t_last = *ibm.snapshots.last().unwrap();
    let finals: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.t == t_last)
        .map(|r| (r.k as f64, r.mean))
        .collect();
    let monotone = finals.windows(2).all(|w| w[1].1 < w[0].1);
    let fit = if finals.len() >= 3 && finals.iter().all(|p| p.1 > 0.0) {
        Some(rate_fit(&finals, 400, seed)?)
    } else {
        None
    };
    Ok(Report {
        summary: serde_json::json!({
            "rows": rows,
            "final_time": t_last,
            "slope": fit,
            "pde_masses": run.snapshots.iter().map(|s| s.masses()).collect::<Vec<_>>(),
        }),
        acceptance: vec![("distance_decreasing_in_k".into(), monotone)],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiracPoint {
    pub eps: f64,
    pub series: Vec<f64>,
    pub sup: f64,
}

pub fn study_dirac(cfg: &LoadedConfig, out: &Output, seed: u64) -> Result<Report> {
    let model = cfg.model()?;
    let pde = cfg.pde()?;
    if pde.epsilons.is_empty() {
        return Err(Error::InvalidParameter("study-dirac needs pde.epsilons".into()));
    }
    let gamma_name = pde
        .mollifier
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("study-dirac needs pde.mollifier".into()))?;
    let gamma = cfg.kernel(gamma_name, model.dim)?;
    for s in &cfg.config.init.species {
        if !s.density.is_smooth() {
            return Err(Error::InvalidParameter(
                "study-dirac needs initial densities with bounded derivatives".into(),
            ));
        }
    }
    let grid = pde.grid.build()?;
    let scope = cache_scope(cfg, seed, "dirac")?;
    let (_, _, local) = run_pde(
        &model,
        &cfg.config.init,
        &grid,
        cfg.solver_params(CompetitionMode::Local, pde.snapshots.clone())?,
    )?;
    let local_m: Vec<Vec<DiscreteMeasure>> = local.snapshots.iter().map(grid_measures).collect();
    let points = pde
        .epsilons
        .iter()
        .map(|&eps| {
            out.cached(&(&scope, eps.to_bits()), || {
                let m = model.with_mollified_competition(&gamma, eps)?;
                let (_, _, run) = run_pde(
                    &m,
                    &cfg.config.init,
                    &grid,
                    cfg.solver_params(CompetitionMode::Kernel, pde.snapshots.clone())?,
                )?;
                let series = run
                    .snapshots
                    .iter()
                    .zip(&local_m)
                    .map(|(s, l)| species_distance(&grid_measures(s), l))
                    .collect::<Result<Vec<f64>>>()?;
                let sup = series.iter().cloned().fold(0.0, f64::max);
                Ok(DiracPoint { eps, series, sup })
            })
        })
        .collect::<Result<Vec<DiracPoint>>>()?;
    let mut csv = String::from("eps,sup_distance\n");
    let mut series = String::from("eps,t,distance\n");
    for p in &points {
        let _ = writeln!(csv, "{},{}", p.eps, p.sup);
        for (t, d) in pde.snapshots.iter().zip(&p.series) {
            let _ = writeln!(series, "{},{},{}", p.eps, t, d);
        }
    }
    out.write("dirac.csv", csv.as_bytes())?;
    out.write("dirac_series.csv", series.as_bytes())?;
    let vanish = points.iter().all(|p| p.sup < 1e-10);
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.eps, p.sup)).collect();
    let fit: Option<RateFit> = if !vanish && pairs.len() >= 3 && pairs.iter().all(|p| p.1 > 0.0) {
        Some(rate_fit(&pairs, 400, seed)?)
    } else {
        None
    };
    let rate_ok = vanish || fit.as_ref().is_some_and(|f| (f.slope - 1.0).abs() <= 0.3);
    Ok(Report {
        summary: serde_json::json!({
            "points": points,
            "slope": fit,
            "distances_vanish": vanish,
        }),
        acceptance: vec![("rate_slope_1_pm_0.3".into(), rate_ok)],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowProbeRow {
    pub y: Vec<f64>,
    pub estimate: f64,
    pub stderr: f64,
    pub pde: f64,
    /// |u_h - u_{2h}| at the probe.
    pub pde_budget: f64,
    /// |E Ψ_{2Δt} - E Ψ_{Δt}| under common noise.
    pub flow_budget: f64,
    pub pass: bool,
}

pub fn study_flow(cfg: &LoadedConfig, out: &Output, seed: u64) -> Result<Report> {
    let model = cfg.model()?;
    let pde = cfg.pde()?;
    let f = cfg.flow()?;
    let i = f.species;
    let (frozen, run) = frozen_from_config(cfg)?;
    let fine = run.snapshots.last().unwrap();
    let coarse_grid = {
        let g = pde.grid.build()?;
        Grid::new(g.lower.clone(), g.upper.clone(), g.cells.iter().map(|c| c / 2).collect())?
    };
    let mut cparams = cfg.solver_params(cfg.mode()?, vec![f.t])?;
    cparams.t_end = f.t;
    let (_, _, coarse) = run_pde(&model, &cfg.config.init, &coarse_grid, cparams)?;
    let coarse = coarse.snapshots.last().unwrap();
    let init = &cfg.config.init;
    let xi0 = |x: &[f64]| init.density(i, x);
    let probes = cfg.probes()?;
    let paired = density_estimate_paired(&frozen, &xi0, &probes, f.t, f.paths, &FlowParams::new(f.dt), seed)?;
    let rows: Vec<FlowProbeRow> = paired
        .iter()
        .zip(&probes)
        .map(|(p, y)| {
            let u = fine.interpolate(i, &y[..model.dim]);
            let pde_budget = (u - coarse.interpolate(i, &y[..model.dim])).abs();
            let flow_budget = p.difference.mean.abs();
            let tol = 3.0 * p.fine.stderr + pde_budget + flow_budget;
            FlowProbeRow {
                y: p.fine.y.clone(),
                estimate: p.fine.estimate,
                stderr: p.fine.stderr,
                pde: u,
                pde_budget,
                flow_budget,
                pass: (p.fine.estimate - u).abs() <= tol,
            }
        })
        .collect();
    out.write(
        "flow_density.csv",
        density_csv(&paired.iter().map(|p| p.fine.clone()).collect::<Vec<_>>()).as_bytes(),
    )?;
    let mut cmp = String::from("probe,estimate,stderr,pde,pde_budget,flow_budget,pass\n");
    for (k, r) in rows.iter().enumerate() {
        let _ = writeln!(
            cmp,
            "{k},{},{},{},{},{},{}",
            r.estimate, r.stderr, r.pde, r.pde_budget, r.flow_budget, r.pass
        );
    }
    out.write("flow_vs_pde.csv", cmp.as_bytes())?;
    let ok = rows.iter().all(|r| r.pass);
    Ok(Report {
        summary: serde_json::json!({ "rows": rows }),
        acceptance: vec![("density_within_3se_plus_budget".into(), ok)],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniquenessRow {
    pub delta: f64,
    pub initial_distance: f64,
    pub series: Vec<f64>,
    pub terminal_ratio: f64,
}

pub fn study_uniqueness(cfg: &LoadedConfig, out: &Output) -> Result<Report> {
    let model = cfg.model()?;
    let pde = cfg.pde()?;
    let u = cfg.uniqueness()?;
    if u.deltas.is_empty() {
        return Err(Error::InvalidParameter("uniqueness.deltas is empty".into()));
    }
    let norm = u.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm.is_nan() || norm <= 0.0 {
        return Err(Error::InvalidParameter("uniqueness.direction must be nonzero".into()));
    }
    let grid = pde.grid.build()?;
    let params = || cfg.solver_params(cfg.mode()?, pde.snapshots.clone());
    let (_, u0, base) = run_pde(&model, &cfg.config.init, &grid, params()?)?;
    let base_m: Vec<Vec<DiscreteMeasure>> = base.snapshots.iter().map(grid_measures).collect();
    let u0_m = grid_measures(&u0);
    let run_from = |init: &InitSpec| -> Result<(f64, Vec<f64>)> {
        let (_, v0, run) = run_pde(&model, init, &grid, params()?)?;
        let d0 = species_distance(&grid_measures(&v0), &u0_m)?;
        let series = run
            .snapshots
            .iter()
            .zip(&base_m)
            .map(|(s, b)| species_distance(&grid_measures(s), b))
            .collect::<Result<Vec<f64>>>()?;
        Ok((d0, series))
    };
    let (_, same) = run_from(&cfg.config.init)?;
    let identical_max = same.iter().cloned().fold(0.0, f64::max);
    let mut rows = Vec::new();
    let mut csv = String::from("delta,t,distance\n");
    for (t, d) in pde.snapshots.iter().zip(&same) {
        let _ = writeln!(csv, "0,{t},{d}");
    }
    for &delta in &u.deltas {
        let shift: Vec<f64> = u.direction.iter().map(|v| delta * v / norm).collect();
        let (d0, series) = run_from(&cfg.config.init.shifted(&shift))?;
        for (t, d) in pde.snapshots.iter().zip(&series) {
            let _ = writeln!(csv, "{delta},{t},{d}");
        }
        rows.push(UniquenessRow {
            delta,
            initial_distance: d0,
            terminal_ratio: series.last().copied().unwrap_or(d0) / delta,
            series,
        });
    }
    out.write("uniqueness.csv", csv.as_bytes())?;
    let ratios: Vec<f64> = rows.iter().map(|r| r.terminal_ratio).collect();
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), r| (a.min(*r), b.max(*r)));
    let stable = lo > 0.0 && hi / lo <= 2.0;
    // envelope d(t) ≤ d(0) e^{C t}: least-squares C through the origin
    let (mut num, mut den) = (0.0, 0.0);
    for r in &rows {
        for (t, d) in pde.snapshots.iter().zip(&r.series) {
            if *t > 0.0 && *d > 0.0 && r.initial_distance > 0.0 {
                num += t * (d / r.initial_distance).ln();
                den += t * t;
            }
        }
    }
    let growth = if den > 0.0 { num / den } else { 0.0 };
    let envelope = rows.iter().all(|r| {
        pde.snapshots
            .iter()
            .zip(&r.series)
            .all(|(t, d)| *d <= r.initial_distance * (growth.max(0.0) * t).exp() * 1.5 + 1e-12)
    });
    Ok(Report {
        summary: serde_json::json!({
            "identical_max_distance": identical_max,
            "rows": rows,
            "ratio_spread": if lo > 0.0 { hi / lo } else { f64::INFINITY },
            "stability_constant": hi,
            "growth_rate": growth,
            "envelope_holds": envelope,
        }),
        acceptance: vec![
            ("identical_data_distance_le_1e-8".into(), identical_max <= 1e-8),
            ("ratio_stable_within_2".into(), stable),
        ],
    })
}
