//! Individual-based simulation of the K-scaled population process.
//!
//! Each particle of species i carries mass 1/K, diffuses as
//! `dX = b^i(X, H^{i·} * ν) dt + κ σ^i(X, G^{i·} * ν) dB`, gives birth to a
//! co-located clone at rate `r_i(X)` and dies at rate `Σ_j C^{ij} * ν^j (X)`.
//!
//! Two schemes: operator splitting with step-start frozen rates, and exact
//! event times by thinning against the bound `r̄_i + Σ_j sup C^{ij} m_j`.
//! In the thinned scheme positions advance on the `dt` grid and events
//! between grid points see the positions of the last grid point.
//! All randomness is drawn from streams keyed by particle id and step, so
//! results do not depend on storage order or worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::init::InitSpec;
use crate::kernels::{convolve_points, EmpiricalMeasure, KernelSpec, NeighborIndex};
use crate::model::{CoefficientModel, Point, MAX_DIM};
use crate::rng::{Purpose, RngDescriptor, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Splitting,
    ThinnedEvents,
}

/// How convolutions against the particle cloud are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvolutionMode {
    /// Direct O(N) sum per query.
    Exact,
    /// Sorted-axis window search (exact for compactly supported kernels,
    /// Gaussian tails dropped past the cutoff).
    #[default]
    Indexed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub t_end: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub seed: u64,
    pub snapshots: Vec<f64>,
    /// Charge capacity K.
    pub k: u64,
    #[serde(default = "default_ceiling")]
    pub population_ceiling: usize,
    #[serde(default)]
    pub convolution: ConvolutionMode,
}

fn default_ceiling() -> usize {
    5_000_000
}

impl SimParams {
    pub fn new(t_end: f64, dt: f64, scheme: Scheme, seed: u64, snapshots: Vec<f64>, k: u64) -> Self {
        Self {
            t_end,
            dt,
            scheme,
            seed,
            snapshots,
            k,
            population_ceiling: default_ceiling(),
            convolution: ConvolutionMode::default(),
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.dt <= self.t_end) {
            return invalid("need 0 < dt <= T");
        }
        if self.k == 0 {
            return invalid("K must be positive");
        }
        if self.snapshots.iter().any(|t| *t < 0.0 || *t > self.t_end + 1e-12) {
            return invalid("snapshot times must lie in [0, T]");
        }
        if self.snapshots.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("snapshot times must be strictly increasing");
        }
        Ok(())
    }
}

/// Particles of one species, sorted by id.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SpeciesPopulation {
    pub positions: Vec<f64>,
    pub ids: Vec<u64>,
}

impl SpeciesPopulation {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn sort_by_id(&mut self, dim: usize) {
        if self.ids.windows(2).all(|w| w[0] < w[1]) {
            return;
        }
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by_key(|&n| self.ids[n]);
        let ids = order.iter().map(|&n| self.ids[n]).collect();
        let mut pos = Vec::with_capacity(self.positions.len());
        for &n in &order {
            pos.extend_from_slice(&self.positions[n * dim..(n + 1) * dim]);
        }
        self.ids = ids;
        self.positions = pos;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PopulationState {
    pub dim: usize,
    pub k: u64,
    pub time: f64,
    pub species: Vec<SpeciesPopulation>,
    pub next_id: u64,
}

impl PopulationState {
    pub fn weight(&self) -> f64 {
        1.0 / self.k as f64
    }

    pub fn count(&self, i: usize) -> usize {
        self.species[i].len()
    }

    pub fn total_count(&self) -> usize {
        self.species.iter().map(|s| s.len()).sum()
    }

    pub fn mass(&self, i: usize) -> f64 {
        self.count(i) as f64 * self.weight()
    }

    pub fn empirical(&self, i: usize) -> EmpiricalMeasure {
        EmpiricalMeasure {
            dim: self.dim,
            points: self.species[i].positions.clone(),
            weight: self.weight(),
            species: i,
        }
    }

    fn normalize(&mut self) {
        let d = self.dim;
        for s in &mut self.species {
            s.sort_by_id(d);
        }
    }
}

/// `N_i = round(m_i K)` i.i.d. draws from each species' density.
pub fn sample_initial(init: &InitSpec, dim: usize, k: u64, seed: u64) -> Result<PopulationState> {
    init.check(dim)?;
    if k == 0 {
        return invalid("K must be positive");
    }
    let mut next_id = 0u64;
    let mut species = Vec::with_capacity(init.species.len());
    for (i, s) in init.species.iter().enumerate() {
        let n = (s.mass * k as f64).round() as usize;
        let mut stream = Stream::keyed(seed, Purpose::Initial, i as u32, 0, 0);
        let mut pop = SpeciesPopulation {
            positions: Vec::with_capacity(n * dim),
            ids: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let p = s.density.sample(&mut stream);
            pop.positions.extend_from_slice(&p[..dim]);
            pop.ids.push(next_id);
            next_id += 1;
        }
        species.push(pop);
    }
    Ok(PopulationState {
        dim,
        k,
        time: 0.0,
        species,
        next_id,
    })
}

/// Convolution evaluator against a frozen state.
struct Frozen<'a> {
    dim: usize,
    weight: f64,
    state: &'a PopulationState,
    index: Option<Vec<NeighborIndex>>,
}

impl<'a> Frozen<'a> {
    fn new(state: &'a PopulationState, mode: ConvolutionMode) -> Self {
        let index = match mode {
            ConvolutionMode::Exact => None,
            ConvolutionMode::Indexed => Some(
                state
                    .species
                    .iter()
                    .map(|s| NeighborIndex::new(state.dim, &s.positions, state.weight()))
                    .collect(),
            ),
        };
        Self {
            dim: state.dim,
            weight: state.weight(),
            state,
            index,
        }
    }

    #[inline]
    fn conv(&self, k: &KernelSpec, j: usize, x: &[f64]) -> f64 {
        match &self.index {
            Some(ix) => ix[j].convolve(k, x),
            None => convolve_points(k, self.dim, &self.state.species[j].positions, self.weight, x),
        }
    }

    fn args(&self, row: &[KernelSpec], x: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, k)| self.conv(k, j, x)).collect()
    }

    fn death_rate(&self, model: &CoefficientModel, i: usize, x: &[f64]) -> f64 {
        model.c[i].iter().enumerate().map(|(j, k)| self.conv(k, j, x)).sum()
    }
}

/// Euler–Maruyama move of particle `n` of species `i` over `dt` against the
/// frozen state.
#[inline]
#[allow(clippy::too_many_arguments)]
fn moved(
    model: &CoefficientModel,
    frozen: &Frozen,
    i: usize,
    x: &[f64],
    id: u64,
    dt: f64,
    seed: u64,
    step: u64,
) -> Point {
    let d = model.dim;
    let sp = &model.species[i];
    let v = if sp.sigma_uses_measure() { frozen.args(&model.g[i], x) } else { Vec::new() };
    let w = if sp.drift_uses_measure() { frozen.args(&model.h[i], x) } else { Vec::new() };
    let s = model.sigma(i, x, &v);
    let b = model.drift(i, x, &w);
    let mut stream = Stream::keyed(seed, Purpose::Diffuse, i as u32, id, step);
    let mut xi = [0.0; MAX_DIM];
    for q in 0..d {
        xi[q] = stream.normal();
    }
    let kappa = model.noise_factor() * dt.sqrt();
    let mut out = [0.0; MAX_DIM];
    for k in 0..d {
        let noise: f64 = (0..d).map(|q| s[k][q] * xi[q]).sum();
        out[k] = x[k] + b[k] * dt + kappa * noise;
    }
    out
}

/// One diffusion step for every particle, coefficients frozen at the step
/// start. `step` keys the noise.
pub fn step_diffuse(
    state: &PopulationState,
    model: &CoefficientModel,
    dt: f64,
    seed: u64,
    step: u64,
    mode: ConvolutionMode,
) -> Result<PopulationState> {
    let mut start = state.clone();
    start.normalize();
    let d = start.dim;
    let frozen = Frozen::new(&start, mode);
    let mut next = start.clone();
    for (i, pop) in next.species.iter_mut().enumerate() {
        let src = &start.species[i];
        let new_pos: Vec<f64> = (0..src.len())
            .into_par_iter()
            .flat_map_iter(|n| {
                let p = moved(model, &frozen, i, &src.positions[n * d..(n + 1) * d], src.ids[n], dt, seed, step);
                p.into_iter().take(d)
            })
            .collect();
        if new_pos.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite particle position in species {i} at t = {}",
                state.time + dt
            )));
        }
        pop.positions = new_pos;
    }
    next.time += dt;
    Ok(next)
}

/// Births and deaths over `dt` with rates frozen at the step start. Returns
/// the new state and per-species (births, deaths).
pub fn step_demography(
    state: &PopulationState,
    model: &CoefficientModel,
    dt: f64,
    seed: u64,
    step: u64,
    mode: ConvolutionMode,
) -> Result<(PopulationState, Vec<(u64, u64)>)> {
    let mut start = state.clone();
    start.normalize();
    let d = start.dim;
    let frozen = Frozen::new(&start, mode);
    let mut next = start.clone();
    let mut counts = Vec::with_capacity(start.species.len());
    for (i, src) in start.species.iter().enumerate() {
        let fates: Vec<(bool, bool)> = (0..src.len())
            .into_par_iter()
            .map(|n| {
                let x = &src.positions[n * d..(n + 1) * d];
                let id = src.ids[n];
                let r = model.rate(i, x);
                let death = frozen.death_rate(model, i, x);
                let born = r > 0.0
                    && Stream::keyed(seed, Purpose::Birth, i as u32, id, step).uniform() < -(-r * dt).exp_m1();
                let dies = death > 0.0
                    && Stream::keyed(seed, Purpose::Death, i as u32, id, step).uniform() < -(-death * dt).exp_m1();
                (born, dies)
            })
            .collect();
        let pop = &mut next.species[i];
        pop.positions.clear();
        pop.ids.clear();
        let (mut nb, mut nd) = (0u64, 0u64);
        for (n, (_, dies)) in fates.iter().enumerate() {
            if *dies {
                nd += 1;
            } else {
                pop.positions.extend_from_slice(&src.positions[n * d..(n + 1) * d]);
                pop.ids.push(src.ids[n]);
            }
        }
        // clones in parent-id order, placed at the parent's position
        for (n, (born, _)) in fates.iter().enumerate() {
            if *born {
                nb += 1;
                pop.positions.extend_from_slice(&src.positions[n * d..(n + 1) * d]);
                pop.ids.push(next.next_id);
                next.next_id += 1;
            }
        }
        counts.push((nb, nd));
    }
    Ok((next, counts))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Snapshot {
    pub time: f64,
    pub measures: Vec<EmpiricalMeasure>,
    pub ids: Vec<Vec<u64>>,
}

impl Snapshot {
    fn of(state: &PopulationState) -> Self {
        Self {
            time: state.time,
            measures: (0..state.species.len()).map(|i| state.empirical(i)).collect(),
            ids: state.species.iter().map(|s| s.ids.clone()).collect(),
        }
    }

    pub fn masses(&self) -> Vec<f64> {
        self.measures.iter().map(|m| m.mass()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub births: Vec<u64>,
    pub deaths: Vec<u64>,
    /// Candidate events rejected by thinning.
    pub rejected: u64,
    pub initial_counts: Vec<usize>,
    pub final_state: PopulationState,
    pub rng: RngDescriptor,
    pub scheme: Scheme,
}

impl Trajectory {
    /// `N_i(T) = N_i(0) + births_i - deaths_i` for every species.
    pub fn counters_consistent(&self) -> bool {
        (0..self.births.len()).all(|i| {
            self.initial_counts[i] as i128 + self.births[i] as i128 - self.deaths[i] as i128
                == self.final_state.count(i) as i128
        })
    }
}

fn guard(state: &PopulationState, ceiling: usize) -> Result<()> {
    let n = state.total_count();
    if n > ceiling {
        return Err(Error::PopulationExplosion { count: n, ceiling });
    }
    Ok(())
}

pub fn simulate(model: &CoefficientModel, init: &InitSpec, params: &SimParams) -> Result<Trajectory> {
    params.check()?;
    let state = sample_initial(init, model.dim, params.k, params.seed)?;
    if state.species.len() != model.num_species() {
        return Err(Error::DimensionMismatch {
            expected: model.num_species(),
            got: state.species.len(),
        });
    }
    simulate_from(model, state, params)
}

pub fn simulate_from(model: &CoefficientModel, state: PopulationState, params: &SimParams) -> Result<Trajectory> {
    params.check()?;
    match params.scheme {
        Scheme::Splitting => run_splitting(model, state, params),
        Scheme::ThinnedEvents => run_thinned(model, state, params),
    }
}

fn stops(params: &SimParams) -> Vec<(f64, bool)> {
    let mut v: Vec<(f64, bool)> = params.snapshots.iter().map(|t| (*t, true)).collect();
    if v.last().is_none_or(|(t, _)| *t < params.t_end - 1e-12) {
        v.push((params.t_end, false));
    }
    v
}

fn run_splitting(model: &CoefficientModel, mut state: PopulationState, params: &SimParams) -> Result<Trajectory> {
    let m = model.num_species();
    let initial_counts = (0..m).map(|i| state.count(i)).collect();
    let mut births = vec![0u64; m];
    let mut deaths = vec![0u64; m];
    let mut snapshots = Vec::new();
    let mut step = 0u64;
    for (target, record) in stops(params) {
        while state.time < target - 1e-12 {
            let h = params.dt.min(target - state.time);
            let diffused = step_diffuse(&state, model, h, params.seed, step, params.convolution)?;
            let (next, counts) = step_demography(&diffused, model, h, params.seed, step, params.convolution)?;
            for (i, (b, d)) in counts.into_iter().enumerate() {
                births[i] += b;
                deaths[i] += d;
            }
            state = next;
            step += 1;
            guard(&state, params.population_ceiling)?;
        }
        state.time = target;
        if record {
            snapshots.push(Snapshot::of(&state));
        }
    }
    Ok(Trajectory {
        snapshots,
        births,
        deaths,
        rejected: 0,
        initial_counts,
        final_state: state,
        rng: RngDescriptor::philox(params.seed),
        scheme: Scheme::Splitting,
    })
}

/// Per-species thinning bound `r̄_i + Σ_j sup C^{ij} m_j`.
fn event_bounds(model: &CoefficientModel, state: &PopulationState) -> Vec<f64> {
    (0..model.num_species())
        .map(|i| {
            model.rate_bound(i)
                + (0..model.num_species())
                    .map(|j| model.competition_sup(i, j) * state.mass(j))
                    .sum::<f64>()
        })
        .collect()
}

fn diffuse_until(
    model: &CoefficientModel,
    state: &mut PopulationState,
    target: f64,
    params: &SimParams,
    step: &mut u64,
) -> Result<()> {
    while state.time < target - 1e-15 {
        let h = params.dt.min(target - state.time);
        *state = step_diffuse(state, model, h, params.seed, *step, params.convolution)?;
        *step += 1;
    }
    state.time = target;
    Ok(())
}

fn run_thinned(model: &CoefficientModel, mut state: PopulationState, params: &SimParams) -> Result<Trajectory> {
    let m = model.num_species();
    state.normalize();
    let d = state.dim;
    let initial_counts = (0..m).map(|i| state.count(i)).collect();
    let mut births = vec![0u64; m];
    let mut deaths = vec![0u64; m];
    let mut rejected = 0u64;
    let mut snapshots = Vec::new();
    let mut step = 0u64;
    let mut event = 0u64;
    // event clock; positions live on the diffusion grid `state.time`
    let mut now = state.time;
    for (target, record) in stops(params) {
        loop {
            let bounds = event_bounds(model, &state);
            let weights: Vec<f64> = (0..m).map(|i| state.count(i) as f64 * bounds[i]).collect();
            let total: f64 = weights.iter().sum();
            let mut clock = Stream::keyed(params.seed, Purpose::Clock, 0, 0, event);
            event += 1;
            let candidate = if total > 0.0 { now + clock.exponential(total) } else { f64::INFINITY };
            if candidate >= target {
                // memoryless: discard the candidate and restart from the stop
                diffuse_until(model, &mut state, target, params, &mut step)?;
                now = target;
                break;
            }
            while state.time + params.dt <= candidate {
                state = step_diffuse(&state, model, params.dt, params.seed, step, params.convolution)?;
                step += 1;
            }
            now = candidate;
            let mut u = clock.uniform() * total;
            let mut i = m - 1;
            for (s, w) in weights.iter().enumerate() {
                if u < *w {
                    i = s;
                    break;
                }
                u -= w;
            }
            let n = clock.index(state.count(i));
            let theta = clock.uniform() * bounds[i];
            let x: Vec<f64> = state.species[i].positions[n * d..(n + 1) * d].to_vec();
            let r = model.rate(i, &x);
            let frozen = Frozen::new(&state, ConvolutionMode::Exact);
            let death = frozen.death_rate(model, i, &x);
            if r + death > bounds[i] * (1.0 + 1e-9) + 1e-12 {
                return Err(Error::Numerical(format!(
                    "event rate {} exceeds the thinning bound {} (declared r̄ too small?)",
                    r + death,
                    bounds[i]
                )));
            }
            let pop = &mut state.species[i];
            if theta < r {
                pop.positions.extend_from_slice(&x);
                pop.ids.push(state.next_id);
                state.next_id += 1;
                births[i] += 1;
            } else if theta < r + death {
                pop.positions.drain(n * d..(n + 1) * d);
                pop.ids.remove(n);
                deaths[i] += 1;
            } else {
                rejected += 1;
            }
            guard(&state, params.population_ceiling)?;
        }
        if record {
            snapshots.push(Snapshot::of(&state));
        }
    }
    Ok(Trajectory {
        snapshots,
        births,
        deaths,
        rejected,
        initial_counts,
        final_state: state,
        rng: RngDescriptor::philox(params.seed),
        scheme: Scheme::ThinnedEvents,
    })
}
