//! Coefficient model: per-species diffusion σ^i, drift b^i, birth rate r_i
//! and the interaction kernel matrices G, H, C.
//!
//! σ^i takes `(x, v)` with `v_j = (G^{ij} * u^j)(x)`, b^i takes `(x, w)` with
//! `w_j = (H^{ij} * u^j)(x)`. Measure arguments are clamped at 0 before use.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::KernelSpec;
use crate::numerics::LinearTable;
use crate::rng::{Purpose, Stream};

pub const MAX_DIM: usize = 2;
pub type Point = [f64; MAX_DIM];
pub type Mat = [[f64; MAX_DIM]; MAX_DIM];

/// Scaling of the Brownian term: `dX = b dt + κ σ dB`.
///
/// With `Sqrt2` (κ = √2) the generator is `Σ a_kl ∂²_kl` with `a = σσ*`;
/// with `Unit` it is `½ Σ a_kl ∂²_kl`. The PDE and the flows read the same
/// switch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseConvention {
    #[default]
    Sqrt2,
    Unit,
}

impl NoiseConvention {
    pub fn factor(self) -> f64 {
        match self {
            NoiseConvention::Sqrt2 => SQRT_2,
            NoiseConvention::Unit => 1.0,
        }
    }

    /// Coefficient multiplying `σσ*` in the second-order term of the PDE.
    pub fn generator_scale(self) -> f64 {
        let k = self.factor();
        0.5 * k * k
    }
}

#[inline]
fn saturation(s: f64, half: f64) -> f64 {
    s / (half + s)
}

#[inline]
fn weighted_sum(weights: &[f64], v: &[f64]) -> f64 {
    weights.iter().zip(v).map(|(w, x)| w * x.max(0.0)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SigmaSpec {
    /// σ = scale · I.
    Constant { scale: f64 },
    /// Fixed d×d matrix.
    Matrix { rows: Vec<Vec<f64>> },
    /// σ = I · sqrt(floor + amplitude · s/(half_saturation + s)), s = Σ w_j v_j.
    IsotropicSaturating {
        floor: f64,
        amplitude: f64,
        half_saturation: f64,
        weights: Vec<f64>,
    },
    /// σ = I · base · (1 + spatial·sin(x₁/length)) · (1 + crowding · s/(1+s)).
    Modulated {
        base: f64,
        spatial: f64,
        length: f64,
        crowding: f64,
        weights: Vec<f64>,
    },
    /// σ = I · table(s), end values held outside the table.
    Tabulated { table: LinearTable, weights: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftSpec {
    Zero,
    Constant { vector: Vec<f64> },
    /// b = -strength · (x - center) / (1 + crowding · s), s = Σ w_j w'_j.
    Attraction {
        strength: f64,
        center: Vec<f64>,
        crowding: f64,
        weights: Vec<f64>,
    },
    /// b = (table(x₁), 0).
    Tabulated { table: LinearTable },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RateSpec {
    Constant { value: f64 },
    /// r = base + slope · x₁.
    Affine { base: f64, slope: f64 },
    /// r = base + amplitude · exp(-|x - center|² / (2 width²)).
    Bump {
        base: f64,
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
    },
    /// r = table(x₁).
    Tabulated { table: LinearTable },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesSpec {
    pub sigma: SigmaSpec,
    pub drift: DriftSpec,
    pub rate: RateSpec,
    /// Declared bound r̄_i.
    pub rate_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefficientModel {
    pub dim: usize,
    pub species: Vec<SpeciesSpec>,
    /// G^{ij}: kernels entering σ^i.
    pub g: Vec<Vec<KernelSpec>>,
    /// H^{ij}: kernels entering b^i.
    pub h: Vec<Vec<KernelSpec>>,
    /// C^{ij}: competition kernels.
    pub c: Vec<Vec<KernelSpec>>,
    /// Local competition constants c^{ij}, used in local mode.
    pub local_competition: Option<Vec<Vec<f64>>>,
    pub convention: NoiseConvention,
    /// Declared Lipschitz constant L.
    pub lipschitz_bound: f64,
    /// Declared growth constant C_M.
    pub growth_bound: f64,
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::InvalidParameter(format!(
            "{what}: expected {expected} entries, got {got}"
        )));
    }
    Ok(())
}

impl SpeciesSpec {
    fn check(&self, dim: usize, m: usize) -> Result<()> {
        match &self.sigma {
            SigmaSpec::Constant { scale } if !scale.is_finite() => return invalid("sigma scale must be finite"),
            SigmaSpec::Matrix { rows } => {
                check_len("sigma rows", rows.len(), dim)?;
                for r in rows {
                    check_len("sigma row", r.len(), dim)?;
                }
            }
            SigmaSpec::IsotropicSaturating {
                floor,
                amplitude,
                half_saturation,
                weights,
            } => {
                check_len("sigma weights", weights.len(), m)?;
                if *floor < 0.0 || *amplitude < 0.0 || !(*half_saturation > 0.0) {
                    return invalid("isotropic-saturating needs floor, amplitude >= 0 and half_saturation > 0");
                }
                if weights.iter().any(|w| *w < 0.0) {
                    return invalid("saturation weights must be >= 0");
                }
            }
            SigmaSpec::Modulated {
                spatial,
                length,
                crowding,
                weights,
                ..
            } => {
                check_len("sigma weights", weights.len(), m)?;
                if !(*length > 0.0) || spatial.abs() >= 1.0 || *crowding < 0.0 {
                    return invalid("modulated sigma needs length > 0, |spatial| < 1, crowding >= 0");
                }
                if weights.iter().any(|w| *w < 0.0) {
                    return invalid("modulation weights must be >= 0");
                }
            }
            SigmaSpec::Tabulated { weights, .. } => check_len("sigma weights", weights.len(), m)?,
            _ => {}
        }
        match &self.drift {
            DriftSpec::Constant { vector } => check_len("drift vector", vector.len(), dim)?,
            DriftSpec::Attraction {
                center,
                weights,
                crowding,
                ..
            } => {
                check_len("attraction center", center.len(), dim)?;
                check_len("drift weights", weights.len(), m)?;
                if *crowding < 0.0 || weights.iter().any(|w| *w < 0.0) {
                    return invalid("attraction crowding and weights must be >= 0");
                }
            }
            _ => {}
        }
        match &self.rate {
            RateSpec::Bump { center, width, .. } => {
                check_len("rate center", center.len(), dim)?;
                if !(*width > 0.0) {
                    return invalid("rate bump width must be > 0");
                }
            }
            RateSpec::Constant { value } if !value.is_finite() => return invalid("rate must be finite"),
            _ => {}
        }
        if !(self.rate_bound >= 0.0) || !self.rate_bound.is_finite() {
            return invalid("rate bound must be finite and >= 0");
        }
        Ok(())
    }

    pub fn sigma_uses_measure(&self) -> bool {
        !matches!(self.sigma, SigmaSpec::Constant { .. } | SigmaSpec::Matrix { .. })
    }

    pub fn drift_uses_measure(&self) -> bool {
        matches!(self.drift, DriftSpec::Attraction { crowding, .. } if crowding != 0.0)
    }

    pub fn sigma(&self, dim: usize, x: &[f64], v: &[f64]) -> Mat {
        let iso = |s: f64| {
            let mut m = [[0.0; MAX_DIM]; MAX_DIM];
            for k in 0..dim {
                m[k][k] = s;
            }
            m
        };
        match &self.sigma {
            SigmaSpec::Constant { scale } => iso(*scale),
            SigmaSpec::Matrix { rows } => {
                let mut m = [[0.0; MAX_DIM]; MAX_DIM];
                for k in 0..dim {
                    for l in 0..dim {
                        m[k][l] = rows[k][l];
                    }
                }
                m
            }
            SigmaSpec::IsotropicSaturating {
                floor,
                amplitude,
                half_saturation,
                weights,
            } => {
                let s = weighted_sum(weights, v);
                iso((floor + amplitude * saturation(s, *half_saturation)).sqrt())
            }
            SigmaSpec::Modulated {
                base,
                spatial,
                length,
                crowding,
                weights,
            } => {
                let s = weighted_sum(weights, v);
                iso(base * (1.0 + spatial * (x[0] / length).sin()) * (1.0 + crowding * saturation(s, 1.0)))
            }
            SigmaSpec::Tabulated { table, weights } => iso(table.eval_clamped(weighted_sum(weights, v))),
        }
    }

    pub fn drift(&self, dim: usize, x: &[f64], w: &[f64]) -> Point {
        let mut out = [0.0; MAX_DIM];
        match &self.drift {
            DriftSpec::Zero => {}
            DriftSpec::Constant { vector } => out[..dim].copy_from_slice(&vector[..dim]),
            DriftSpec::Attraction {
                strength,
                center,
                crowding,
                weights,
            } => {
                let damp = 1.0 / (1.0 + crowding * weighted_sum(weights, w));
                for k in 0..dim {
                    out[k] = -strength * (x[k] - center[k]) * damp;
                }
            }
            DriftSpec::Tabulated { table } => out[0] = table.eval_clamped(x[0]),
        }
        out
    }

    /// Birth rate before clamping at 0.
    pub fn raw_rate(&self, x: &[f64]) -> f64 {
        match &self.rate {
            RateSpec::Constant { value } => *value,
            RateSpec::Affine { base, slope } => base + slope * x[0],
            RateSpec::Bump {
                base,
                amplitude,
                center,
                width,
            } => {
                let r2: f64 = center.iter().zip(x).map(|(c, y)| (y - c).powi(2)).sum();
                base + amplitude * (-0.5 * r2 / (width * width)).exp()
            }
            RateSpec::Tabulated { table } => table.eval_clamped(x[0]),
        }
    }

    #[inline]
    pub fn rate(&self, x: &[f64]) -> f64 {
        self.raw_rate(x).max(0.0)
    }

    pub fn rate_is_constant(&self) -> bool {
        matches!(self.rate, RateSpec::Constant { .. })
    }
}

pub fn mat_mul_transpose(s: &Mat, dim: usize) -> Mat {
    let mut a = [[0.0; MAX_DIM]; MAX_DIM];
    for k in 0..dim {
        for l in 0..dim {
            a[k][l] = (0..dim).map(|q| s[k][q] * s[l][q]).sum();
        }
    }
    a
}

fn frobenius(m: &Mat) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

impl CoefficientModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        species: Vec<SpeciesSpec>,
        g: Vec<Vec<KernelSpec>>,
        h: Vec<Vec<KernelSpec>>,
        c: Vec<Vec<KernelSpec>>,
        local_competition: Option<Vec<Vec<f64>>>,
        convention: NoiseConvention,
    ) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return invalid(format!("dimension {dim} not in 1..={MAX_DIM}"));
        }
        let m = species.len();
        if m == 0 {
            return invalid("at least one species required");
        }
        for s in &species {
            s.check(dim, m)?;
        }
        for (name, mat) in [("G", &g), ("H", &h), ("C", &c)] {
            check_len(name, mat.len(), m)?;
            for row in mat {
                check_len(name, row.len(), m)?;
                for k in row {
                    if k.dim != dim {
                        return Err(Error::DimensionMismatch {
                            expected: dim,
                            got: k.dim,
                        });
                    }
                }
            }
        }
        if let Some(lc) = &local_competition {
            check_len("local competition", lc.len(), m)?;
            for row in lc {
                check_len("local competition", row.len(), m)?;
                if row.iter().any(|v| !(*v >= 0.0)) {
                    return invalid("local competition constants must be >= 0");
                }
            }
        }
        Ok(Self {
            dim,
            species,
            g,
            h,
            c,
            local_competition,
            convention,
            lipschitz_bound: f64::INFINITY,
            growth_bound: f64::INFINITY,
        })
    }

    /// Model with constant G, H kernels and constant competition `c^{ij}`.
    pub fn homogeneous(dim: usize, species: Vec<SpeciesSpec>, competition: Vec<Vec<f64>>) -> Result<Self> {
        let m = species.len();
        let one = KernelSpec::constant(dim, 1.0)?;
        let ones = vec![vec![one; m]; m];
        let c = competition
            .iter()
            .map(|row| row.iter().map(|v| KernelSpec::constant(dim, *v)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            dim,
            species,
            ones.clone(),
            ones,
            c,
            Some(competition),
            NoiseConvention::Sqrt2,
        )
    }

    pub fn with_declared_bounds(mut self, lipschitz: f64, growth: f64) -> Self {
        self.lipschitz_bound = lipschitz;
        self.growth_bound = growth;
        self
    }

    pub fn with_convention(mut self, convention: NoiseConvention) -> Self {
        self.convention = convention;
        self
    }

    pub fn num_species(&self) -> usize {
        self.species.len()
    }

    pub fn noise_factor(&self) -> f64 {
        self.convention.factor()
    }

    #[inline]
    pub fn sigma(&self, i: usize, x: &[f64], v: &[f64]) -> Mat {
        self.species[i].sigma(self.dim, x, v)
    }

    #[inline]
    pub fn drift(&self, i: usize, x: &[f64], w: &[f64]) -> Point {
        self.species[i].drift(self.dim, x, w)
    }

    #[inline]
    pub fn rate(&self, i: usize, x: &[f64]) -> f64 {
        self.species[i].rate(x)
    }

    pub fn rate_bound(&self, i: usize) -> f64 {
        self.species[i].rate_bound
    }

    /// a^i = σ^i (σ^i)*.
    pub fn diffusion_matrix(&self, i: usize, x: &[f64], v: &[f64]) -> Result<Mat> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().chain(v).any(|t| !t.is_finite()) {
            return invalid("non-finite argument to diffusion_matrix");
        }
        Ok(mat_mul_transpose(&self.sigma(i, x, v), self.dim))
    }

    /// sup of the competition kernel C^{ij}.
    pub fn competition_sup(&self, i: usize, j: usize) -> f64 {
        self.c[i][j].sup()
    }

    /// Replace C^{ij} by c^{ij} γ_ε.
    pub fn with_mollified_competition(&self, gamma: &KernelSpec, eps: f64) -> Result<Self> {
        let lc = self
            .local_competition
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("local competition constants required".into()))?;
        let base = gamma.mollify(eps)?;
        let mut out = self.clone();
        out.c = lc
            .iter()
            .map(|row| row.iter().map(|v| base.scaled(*v)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(out)
    }

    /// Monte-Carlo check of the standing assumptions on a probe box.
    pub fn validate(&self, probe: &ProbeSpec) -> ValidationReport {
        validate_model(self, probe)
    }
}

/// Where and how densely to probe a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Measure arguments are probed in [0, v_max]^M.
    pub v_max: f64,
    pub samples: usize,
    pub seed: u64,
    /// Finite-difference step, relative to the box scale.
    pub fd_step: f64,
}

impl ProbeSpec {
    pub fn cube(dim: usize, half: f64, v_max: f64, samples: usize) -> Self {
        Self {
            lower: vec![-half; dim],
            upper: vec![half; dim],
            v_max,
            samples,
            seed: 0,
            fd_step: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeciesReport {
    /// Sampled Lipschitz constant of σ^i in (x, v), Frobenius norm.
    pub sigma_lipschitz: f64,
    /// Sampled Lipschitz constant of a^i in (x, v).
    pub diffusion_lipschitz: f64,
    pub drift_lipschitz: f64,
    /// max |σ(x,v)| / (1 + |x|) over the probes.
    pub growth_affine: f64,
    /// True when σ does not vanish at x = 0, which the linear bound |σ| ≤ C_M|x| would require.
    pub growth_linear_violated: bool,
    pub rate_min: f64,
    pub rate_max: f64,
    pub rate_bound: f64,
    pub min_eigenvalue: f64,
    pub lipschitz_ok: bool,
    pub growth_ok: bool,
    pub rate_ok: bool,
    pub psd_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelReport {
    pub name: String,
    pub min_value: f64,
    pub max_value: f64,
    pub declared_sup: f64,
    pub sampled_lipschitz: f64,
    pub declared_lipschitz: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub species: Vec<SpeciesReport>,
    pub kernels: Vec<KernelReport>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.species
            .iter()
            .all(|s| s.lipschitz_ok && s.growth_ok && s.rate_ok && s.psd_ok)
            && self.kernels.iter().all(|k| k.ok)
    }

    pub fn max_lipschitz(&self) -> f64 {
        self.species
            .iter()
            .map(|s| s.sigma_lipschitz.max(s.drift_lipschitz))
            .fold(0.0, f64::max)
    }
}

/// Largest singular value of a `rows × cols` matrix given column-major by
/// `cols` column vectors.
fn spectral_norm(columns: &[Vec<f64>]) -> f64 {
    let n = columns.len();
    if n == 0 {
        return 0.0;
    }
    // Gram matrix, then power iteration.
    let mut gram = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            gram[a * n + b] = columns[a].iter().zip(&columns[b]).map(|(x, y)| x * y).sum();
        }
    }
    let mut v = vec![1.0; n];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w: Vec<f64> = (0..n).map(|a| (0..n).map(|b| gram[a * n + b] * v[b]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next: f64 = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= 1e-12 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}

/// Sup over probes of the spectral norm of the finite-difference Jacobian of
/// `f : (x, v) -> ℝ^k`.
fn sampled_lipschitz<F>(dim: usize, m: usize, probes: &[(Point, Vec<f64>)], step: f64, f: F) -> f64
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let mut best: f64 = 0.0;
    for (x, v) in probes {
        let mut cols = Vec::with_capacity(dim + m);
        for a in 0..dim + m {
            let (mut xp, mut xm) = (*x, *x);
            let (mut vp, mut vm) = (v.clone(), v.clone());
            let denom;
            if a < dim {
                xp[a] += step;
                xm[a] -= step;
                denom = 2.0 * step;
            } else {
                let j = a - dim;
                vp[j] += step;
                // one-sided at the boundary of the admissible cone v >= 0
                if v[j] >= step {
                    vm[j] -= step;
                    denom = 2.0 * step;
                } else {
                    denom = step;
                }
            }
            let fp = f(&xp[..dim], &vp);
            let fm = f(&xm[..dim], &vm);
            cols.push(fp.iter().zip(&fm).map(|(p, q)| (p - q) / denom).collect());
        }
        best = best.max(spectral_norm(&cols));
    }
    best
}

fn probe_points(model: &CoefficientModel, probe: &ProbeSpec) -> Vec<(Point, Vec<f64>)> {
    let dim = model.dim;
    let m = model.num_species();
    let mut stream = Stream::keyed(probe.seed, Purpose::Probe, 0, 0, 0);
    let mut out = Vec::with_capacity(probe.samples + (1 << (dim + m)));
    // box corners (including v = 0), then the origin, then random points
    for mask in 0..(1usize << (dim + m)) {
        let mut x = [0.0; MAX_DIM];
        for k in 0..dim {
            x[k] = if mask >> k & 1 == 1 { probe.upper[k] } else { probe.lower[k] };
        }
        let v = (0..m)
            .map(|j| if mask >> (dim + j) & 1 == 1 { probe.v_max } else { 0.0 })
            .collect();
        out.push((x, v));
    }
    out.push(([0.0; MAX_DIM], vec![0.0; m]));
    for _ in 0..probe.samples {
        let mut x = [0.0; MAX_DIM];
        for k in 0..dim {
            x[k] = probe.lower[k] + (probe.upper[k] - probe.lower[k]) * stream.uniform();
        }
        let v = (0..m).map(|_| probe.v_max * stream.uniform()).collect();
        out.push((x, v));
    }
    out
}

fn validate_model(model: &CoefficientModel, probe: &ProbeSpec) -> ValidationReport {
    let dim = model.dim;
    let m = model.num_species();
    let probes = probe_points(model, probe);
    let scale = (0..dim)
        .map(|k| probe.upper[k] - probe.lower[k])
        .fold(probe.v_max, f64::max)
        .max(1.0);
    let step = probe.fd_step * scale;
    let flat = |mat: Mat| -> Vec<f64> { mat.iter().flatten().copied().collect() };
    let mut species = Vec::with_capacity(m);
    for i in 0..m {
        let sigma_l = sampled_lipschitz(dim, m, &probes, step, |x, v| flat(model.sigma(i, x, v)));
        let diff_l = sampled_lipschitz(dim, m, &probes, step, |x, v| {
            flat(mat_mul_transpose(&model.sigma(i, x, v), dim))
        });
        let drift_l = sampled_lipschitz(dim, m, &probes, step, |x, w| model.drift(i, x, w)[..dim].to_vec());
        let mut growth: f64 = 0.0;
        let mut at_origin: f64 = 0.0;
        let mut rmin = f64::INFINITY;
        let mut rmax = f64::NEG_INFINITY;
        let mut min_eig = f64::INFINITY;
        for (x, v) in &probes {
            let s = model.sigma(i, &x[..dim], v);
            let norm_x = x[..dim].iter().map(|t| t * t).sum::<f64>().sqrt();
            growth = growth.max(frobenius(&s) / (1.0 + norm_x));
            if norm_x == 0.0 {
                at_origin = at_origin.max(frobenius(&s));
            }
            let r = model.species[i].raw_rate(&x[..dim]);
            rmin = rmin.min(r);
            rmax = rmax.max(r);
            let a = mat_mul_transpose(&s, dim);
            let eig = if dim == 1 {
                a[0][0]
            } else {
                let tr = a[0][0] + a[1][1];
                let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
                0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt())
            };
            min_eig = min_eig.min(eig);
        }
        let rbar = model.rate_bound(i);
        let tol = 1e-6;
        species.push(SpeciesReport {
            sigma_lipschitz: sigma_l,
            diffusion_lipschitz: diff_l,
            drift_lipschitz: drift_l,
            growth_affine: growth,
            growth_linear_violated: at_origin > 0.0,
            rate_min: rmin,
            rate_max: rmax,
            rate_bound: rbar,
            min_eigenvalue: min_eig,
            lipschitz_ok: sigma_l.is_finite()
                && drift_l.is_finite()
                && sigma_l.max(drift_l) <= model.lipschitz_bound * (1.0 + tol) + tol,
            growth_ok: growth <= model.growth_bound * (1.0 + tol),
            rate_ok: rmin >= 0.0 && rmax <= rbar * (1.0 + tol),
            psd_ok: min_eig >= -1e-10,
        });
    }
    let mut kernels = Vec::new();
    let mut stream = Stream::keyed(probe.seed, Purpose::Probe, 1, 0, 0);
    for (name, mat) in [("G", &model.g), ("H", &model.h), ("C", &model.c)] {
        for (i, row) in mat.iter().enumerate() {
            for (j, k) in row.iter().enumerate() {
                let reach = k.reach().unwrap_or(1.0);
                let mut lo = f64::INFINITY;
                let mut hi: f64 = 0.0;
                let mut lip: f64 = 0.0;
                for n in 0..probe.samples.max(64) {
                    let mut x = [0.0; MAX_DIM];
                    let mut y = [0.0; MAX_DIM];
                    for a in 0..dim {
                        x[a] = if n == 0 { 0.0 } else { reach * (2.0 * stream.uniform() - 1.0) };
                        y[a] = x[a] + 1e-3 * reach * (2.0 * stream.uniform() - 1.0);
                    }
                    let kx = k.eval(&x[..dim]);
                    let ky = k.eval(&y[..dim]);
                    lo = lo.min(kx);
                    hi = hi.max(kx);
                    let dxy = (0..dim).map(|a| (x[a] - y[a]).powi(2)).sum::<f64>().sqrt();
                    if dxy > 0.0 {
                        lip = lip.max((kx - ky).abs() / dxy);
                    }
                }
                let ok = lo >= 0.0
                    && hi <= k.sup() * (1.0 + 1e-12)
                    && (lip <= k.lipschitz() * (1.0 + 1e-6) + 1e-12);
                kernels.push(KernelReport {
                    name: format!("{name}[{i}][{j}]"),
                    min_value: lo,
                    max_value: hi,
                    declared_sup: k.sup(),
                    sampled_lipschitz: lip,
                    declared_lipschitz: k.lipschitz(),
                    ok,
                });
            }
        }
    }
    ValidationReport { species, kernels }
}

/// Built-in coefficient families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BuiltinFamily {
    /// a^i = I·(floor + amplitude Ψ(Σ_j v_j)), Ψ(s) = s/(half_saturation + s).
    IsotropicSaturating {
        dim: usize,
        species: usize,
        floor: f64,
        amplitude: f64,
        half_saturation: f64,
        rate: f64,
        competition: Vec<Vec<f64>>,
        /// Gaussian bandwidth of G; constant kernels (total-mass dependence) when absent.
        interaction_range: Option<f64>,
    },
    ConstantCoefficients {
        dim: usize,
        species: usize,
        sigma: f64,
        rate: f64,
        competition: Vec<Vec<f64>>,
    },
    AttractionDrift {
        dim: usize,
        species: usize,
        sigma: f64,
        strength: f64,
        crowding: f64,
        rate: f64,
        competition: Vec<Vec<f64>>,
        interaction_range: Option<f64>,
    },
}

impl BuiltinFamily {
    pub fn instantiate(&self) -> Result<CoefficientModel> {
        let (dim, m, competition, rate, range) = match self {
            BuiltinFamily::IsotropicSaturating {
                dim,
                species,
                competition,
                rate,
                interaction_range,
                ..
            } => (*dim, *species, competition, *rate, *interaction_range),
            BuiltinFamily::ConstantCoefficients {
                dim,
                species,
                competition,
                rate,
                ..
            } => (*dim, *species, competition, *rate, None),
            BuiltinFamily::AttractionDrift {
                dim,
                species,
                competition,
                rate,
                interaction_range,
                ..
            } => (*dim, *species, competition, *rate, *interaction_range),
        };
        let sp = |sigma: SigmaSpec, drift: DriftSpec| SpeciesSpec {
            sigma,
            drift,
            rate: RateSpec::Constant { value: rate },
            rate_bound: rate.max(0.0),
        };
        let specs: Vec<SpeciesSpec> = (0..m)
            .map(|_| match self {
                BuiltinFamily::IsotropicSaturating {
                    floor,
                    amplitude,
                    half_saturation,
                    ..
                } => sp(
                    SigmaSpec::IsotropicSaturating {
                        floor: *floor,
                        amplitude: *amplitude,
                        half_saturation: *half_saturation,
                        weights: vec![1.0; m],
                    },
                    DriftSpec::Zero,
                ),
                BuiltinFamily::ConstantCoefficients { sigma, .. } => {
                    sp(SigmaSpec::Constant { scale: *sigma }, DriftSpec::Zero)
                }
                BuiltinFamily::AttractionDrift {
                    sigma,
                    strength,
                    crowding,
                    ..
                } => sp(
                    SigmaSpec::Constant { scale: *sigma },
                    DriftSpec::Attraction {
                        strength: *strength,
                        center: vec![0.0; dim],
                        crowding: *crowding,
                        weights: vec![1.0; m],
                    },
                ),
            })
            .collect();
        let mut model = CoefficientModel::homogeneous(dim, specs, competition.clone())?;
        if let Some(r) = range {
            let k = KernelSpec::gaussian(dim, r, 1.0)?;
            model.g = vec![vec![k.clone(); m]; m];
            model.h = vec![vec![k; m]; m];
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn saturating(floor: f64) -> CoefficientModel {
        BuiltinFamily::IsotropicSaturating {
            dim: 1,
            species: 1,
            floor,
            amplitude: 1.0,
            half_saturation: 1.0,
            rate: 1.0,
            competition: vec![vec![1.0]],
            interaction_range: None,
        }
        .instantiate()
        .unwrap()
    }

    #[test]
    fn diffusion_matrix_examples() {
        let m = BuiltinFamily::ConstantCoefficients {
            dim: 2,
            species: 1,
            sigma: 1.0,
            rate: 0.0,
            competition: vec![vec![0.0]],
        }
        .instantiate()
        .unwrap();
        let a = m.diffusion_matrix(0, &[0.3, -2.0], &[0.7]).unwrap();
        assert_eq!(a, [[1.0, 0.0], [0.0, 1.0]]);

        let sat = BuiltinFamily::IsotropicSaturating {
            dim: 2,
            species: 2,
            floor: 0.0,
            amplitude: 1.0,
            half_saturation: 1.0,
            rate: 0.0,
            competition: vec![vec![0.0; 2]; 2],
            interaction_range: None,
        }
        .instantiate()
        .unwrap();
        let a = sat.diffusion_matrix(1, &[0.0, 0.0], &[0.25, 0.75]).unwrap();
        assert_relative_eq!(a[0][0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(a[1][1], 0.5, epsilon = 1e-14);
        assert_eq!(a[0][1], 0.0);

        let zero = BuiltinFamily::ConstantCoefficients {
            dim: 1,
            species: 1,
            sigma: 0.0,
            rate: 0.0,
            competition: vec![vec![0.0]],
        }
        .instantiate()
        .unwrap();
        assert_eq!(zero.diffusion_matrix(0, &[1.0], &[1.0]).unwrap()[0][0], 0.0);
        assert!(zero.diffusion_matrix(0, &[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn negative_measure_arguments_are_clamped() {
        let m = saturating(0.0);
        assert_eq!(m.sigma(0, &[0.0], &[-1e-12]), m.sigma(0, &[0.0], &[0.0]));
    }

    #[test]
    fn constant_family_validates_with_zero_lipschitz() {
        let m = BuiltinFamily::ConstantCoefficients {
            dim: 2,
            species: 2,
            sigma: 0.7,
            rate: 1.0,
            competition: vec![vec![1.0, 0.5], vec![0.5, 1.0]],
        }
        .instantiate()
        .unwrap()
        .with_declared_bounds(0.0, 1.0);
        let rep = m.validate(&ProbeSpec::cube(2, 5.0, 3.0, 200));
        assert!(rep.ok(), "{rep:?}");
        for s in &rep.species {
            assert_eq!(s.sigma_lipschitz, 0.0);
            assert_eq!(s.drift_lipschitz, 0.0);
            assert!(s.growth_linear_violated);
        }
    }

    #[test]
    fn unbounded_rate_is_flagged() {
        let sp = SpeciesSpec {
            sigma: SigmaSpec::Constant { scale: 1.0 },
            drift: DriftSpec::Zero,
            rate: RateSpec::Affine { base: 1.0, slope: 1.0 },
            rate_bound: 1.0,
        };
        let m = CoefficientModel::homogeneous(1, vec![sp], vec![vec![0.0]]).unwrap();
        let rep = m.validate(&ProbeSpec::cube(1, 10.0, 1.0, 100));
        assert!(!rep.species[0].rate_ok);
        assert_relative_eq!(rep.species[0].rate_max, 11.0);
        assert!(!rep.ok());
    }

    #[test]
    fn saturating_lipschitz_estimates() {
        // a = Ψ(v) with Ψ(s) = s/(1+s): Lipschitz constant Ψ'(0) = 1
        let rep = saturating(0.0).validate(&ProbeSpec::cube(1, 2.0, 4.0, 200));
        assert!((rep.species[0].diffusion_lipschitz - 1.0).abs() < 0.1);
        // σ = sqrt(f + Ψ): Lipschitz constant 1/(2 sqrt f) at v = 0
        let f = 0.25;
        let rep = saturating(f).validate(&ProbeSpec::cube(1, 2.0, 4.0, 200));
        let analytic = 1.0 / (2.0 * f64::sqrt(f));
        assert!((rep.species[0].sigma_lipschitz - analytic).abs() < 0.1 * analytic);
    }

    #[test]
    fn total_mass_dependence_with_constant_kernels() {
        use crate::kernels::convolve_points;
        let m = saturating(0.1);
        let k = &m.g[0][0];
        let a = [0.0, 1.0, 2.0, 3.0];
        let b = [-5.0, 0.2, 0.3, 9.0];
        let va = convolve_points(k, 1, &a, 0.25, &[0.5]);
        let vb = convolve_points(k, 1, &b, 0.25, &[0.5]);
        assert_eq!(m.sigma(0, &[0.5], &[va]), m.sigma(0, &[0.5], &[vb]));
    }

    #[test]
    fn mollified_competition_keeps_constants() {
        let m = saturating(0.1);
        let g = KernelSpec::gaussian(1, 1.0, 1.0).unwrap();
        let mm = m.with_mollified_competition(&g, 0.1).unwrap();
        assert_relative_eq!(mm.c[0][0].mass(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(mm.c[0][0].bandwidth, 0.1);
    }

    #[test]
    fn shape_errors() {
        let sp = SpeciesSpec {
            sigma: SigmaSpec::Matrix { rows: vec![vec![1.0]] },
            drift: DriftSpec::Zero,
            rate: RateSpec::Constant { value: 0.0 },
            rate_bound: 0.0,
        };
        assert!(CoefficientModel::homogeneous(2, vec![sp], vec![vec![0.0]]).is_err());
    }
}
