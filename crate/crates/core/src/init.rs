//! Initial data: per-species mass and a samplable unit-mass density.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{Grid, GridField};
use crate::model::{Point, MAX_DIM};
use crate::numerics::{integrate, unit_sphere_area};
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySpec {
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
    /// Isotropic normal.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// `exp(-1/(1-r²))`, r = |x - center|/radius, normalised. Smooth with
    /// compact support.
    SmoothBump { center: Vec<f64>, radius: f64 },
}

fn bump_mass_unit(dim: usize) -> f64 {
    unit_sphere_area(dim)
        * integrate(
            |r| {
                if r < 1.0 {
                    (-1.0 / (1.0 - r * r)).exp() * r.powi(dim as i32 - 1)
                } else {
                    0.0
                }
            },
            0.0,
            1.0,
            64,
        )
}

impl DensitySpec {
    pub fn dim(&self) -> usize {
        match self {
            DensitySpec::Uniform { lower, .. } => lower.len(),
            DensitySpec::Gaussian { mean, .. } => mean.len(),
            DensitySpec::SmoothBump { center, .. } => center.len(),
        }
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || d > MAX_DIM {
            return invalid(format!("density dimension {d} not in 1..={MAX_DIM}"));
        }
        match self {
            DensitySpec::Uniform { lower, upper } => {
                if upper.len() != d || lower.iter().zip(upper).any(|(a, b)| !(b > a)) {
                    return invalid("uniform density needs upper > lower on every axis");
                }
            }
            DensitySpec::Gaussian { std, .. } => {
                if !(*std > 0.0) {
                    return invalid("gaussian std must be > 0");
                }
            }
            DensitySpec::SmoothBump { radius, .. } => {
                if !(*radius > 0.0) {
                    return invalid("bump radius must be > 0");
                }
            }
        }
        Ok(())
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        match self {
            DensitySpec::Uniform { lower, upper } => {
                let mut vol = 1.0;
                for k in 0..d {
                    if x[k] < lower[k] || x[k] > upper[k] {
                        return 0.0;
                    }
                    vol *= upper[k] - lower[k];
                }
                1.0 / vol
            }
            DensitySpec::Gaussian { mean, std } => {
                let r2: f64 = (0..d).map(|k| (x[k] - mean[k]).powi(2)).sum();
                (-0.5 * r2 / (std * std)).exp() / (2.0 * PI * std * std).powf(d as f64 / 2.0)
            }
            DensitySpec::SmoothBump { center, radius } => {
                let r2: f64 = (0..d).map(|k| (x[k] - center[k]).powi(2)).sum::<f64>() / (radius * radius);
                if r2 >= 1.0 {
                    0.0
                } else {
                    (-1.0 / (1.0 - r2)).exp() / (bump_mass_unit(d) * radius.powi(d as i32))
                }
            }
        }
    }

    /// Gradient sup bound is finite for every family except the uniform
    /// box, which is discontinuous.
    pub fn is_smooth(&self) -> bool {
        !matches!(self, DensitySpec::Uniform { .. })
    }

    pub fn sample(&self, stream: &mut Stream) -> Point {
        let d = self.dim();
        let mut p = [0.0; MAX_DIM];
        match self {
            DensitySpec::Uniform { lower, upper } => {
                for k in 0..d {
                    p[k] = lower[k] + (upper[k] - lower[k]) * stream.uniform();
                }
            }
            DensitySpec::Gaussian { mean, std } => {
                for k in 0..d {
                    p[k] = mean[k] + std * stream.normal();
                }
            }
            DensitySpec::SmoothBump { center, radius } => loop {
                // rejection from the bounding cube against the peak e^{-1}
                let mut r2 = 0.0;
                let mut u = [0.0; MAX_DIM];
                for k in 0..d {
                    u[k] = 2.0 * stream.uniform() - 1.0;
                    r2 += u[k] * u[k];
                }
                if r2 >= 1.0 {
                    continue;
                }
                let accept = (1.0 - 1.0 / (1.0 - r2)).exp();
                if stream.uniform() < accept {
                    for k in 0..d {
                        p[k] = center[k] + radius * u[k];
                    }
                    break;
                }
            },
        }
        p
    }

    pub fn mean(&self) -> Point {
        let mut p = [0.0; MAX_DIM];
        let d = self.dim();
        match self {
            DensitySpec::Uniform { lower, upper } => {
                for k in 0..d {
                    p[k] = 0.5 * (lower[k] + upper[k]);
                }
            }
            DensitySpec::Gaussian { mean, .. } => p[..d].copy_from_slice(mean),
            DensitySpec::SmoothBump { center, .. } => p[..d].copy_from_slice(center),
        }
        p
    }

    /// Same density translated by `delta`.
    pub fn shifted(&self, delta: &[f64]) -> Self {
        let add = |v: &[f64]| v.iter().zip(delta).map(|(a, b)| a + b).collect::<Vec<_>>();
        match self {
            DensitySpec::Uniform { lower, upper } => DensitySpec::Uniform {
                lower: add(lower),
                upper: add(upper),
            },
            DensitySpec::Gaussian { mean, std } => DensitySpec::Gaussian {
                mean: add(mean),
                std: *std,
            },
            DensitySpec::SmoothBump { center, radius } => DensitySpec::SmoothBump {
                center: add(center),
                radius: *radius,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesInit {
    pub mass: f64,
    pub density: DensitySpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub species: Vec<SpeciesInit>,
}

impl InitSpec {
    pub fn check(&self, dim: usize) -> Result<()> {
        for s in &self.species {
            if !(s.mass >= 0.0) || !s.mass.is_finite() {
                return invalid("initial mass must be finite and >= 0");
            }
            s.density.check()?;
            if s.density.dim() != dim {
                return invalid(format!("initial density has dimension {}, model {dim}", s.density.dim()));
            }
        }
        Ok(())
    }

    /// Initial density of species `i` (mass included) at `x`.
    pub fn density(&self, i: usize, x: &[f64]) -> f64 {
        self.species[i].mass * self.species[i].density.pdf(x)
    }

    /// Cell-centre samples, rescaled so each species' grid mass equals its
    /// target mass exactly.
    pub fn discretize(&self, grid: &Grid) -> GridField {
        let mut field = GridField::from_fn(grid.clone(), self.species.len(), |i, x| {
            self.species[i].density.pdf(&x[..grid.dim])
        });
        for (i, s) in self.species.iter().enumerate() {
            let m = field.mass(i);
            let f = if m > 0.0 { s.mass / m } else { 0.0 };
            for v in field.values[i].iter_mut() {
                *v *= f;
            }
        }
        field
    }

    pub fn shifted(&self, delta: &[f64]) -> Self {
        Self {
            species: self
                .species
                .iter()
                .map(|s| SpeciesInit {
                    mass: s.mass,
                    density: s.density.shifted(delta),
                })
                .collect(),
        }
    }
}
