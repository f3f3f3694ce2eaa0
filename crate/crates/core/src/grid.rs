//! Uniform cell-centred box grids in d = 1, 2 and per-species fields on them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{Point, MAX_DIM};

/// Cell-centred uniform grid on a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let dim = lower.len();
        if dim == 0 || dim > MAX_DIM {
            return invalid(format!("grid dimension {dim} not in 1..={MAX_DIM}"));
        }
        if upper.len() != dim || cells.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: upper.len().min(cells.len()),
            });
        }
        for k in 0..dim {
            if !(upper[k] > lower[k]) || !lower[k].is_finite() || !upper[k].is_finite() {
                return invalid("grid box must have upper > lower on every axis");
            }
            if cells[k] < 4 {
                return invalid("grid needs at least 4 cells per axis");
            }
        }
        Ok(Self {
            dim,
            lower,
            upper,
            cells,
        })
    }

    /// Symmetric box [-half, half]^d with `n` cells per axis.
    pub fn cube(dim: usize, half: f64, n: usize) -> Result<Self> {
        Self::new(vec![-half; dim], vec![half; dim], vec![n; dim])
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.cells[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|k| self.spacing(k)).product()
    }

    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major multi-index of a flat cell index (last axis fastest).
    pub fn unflatten(&self, idx: usize) -> [usize; MAX_DIM] {
        if self.dim == 1 {
            [idx, 0]
        } else {
            [idx / self.cells[1], idx % self.cells[1]]
        }
    }

    pub fn flatten(&self, ij: [usize; MAX_DIM]) -> usize {
        if self.dim == 1 {
            ij[0]
        } else {
            ij[0] * self.cells[1] + ij[1]
        }
    }

    pub fn axis_center(&self, axis: usize, i: usize) -> f64 {
        self.lower[axis] + (i as f64 + 0.5) * self.spacing(axis)
    }

    pub fn center(&self, idx: usize) -> Point {
        let ij = self.unflatten(idx);
        let mut p = [0.0; MAX_DIM];
        for k in 0..self.dim {
            p[k] = self.axis_center(k, ij[k]);
        }
        p
    }

    /// Cell centres as a flat coordinate array of length `len() * dim`.
    pub fn centers_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.dim);
        for idx in 0..self.len() {
            out.extend_from_slice(&self.center(idx)[..self.dim]);
        }
        out
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self == other
    }

    /// Flat indices of cells within `band` cells of the boundary.
    pub fn is_boundary_band(&self, idx: usize, band: usize) -> bool {
        let ij = self.unflatten(idx);
        (0..self.dim).any(|k| ij[k] < band || ij[k] + band >= self.cells[k])
    }
}

/// Per-species densities sampled at cell centres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub grid: Grid,
    pub time: f64,
    pub values: Vec<Vec<f64>>,
}

impl GridField {
    pub fn zeros(grid: Grid, species: usize) -> Self {
        let n = grid.len();
        Self {
            grid,
            time: 0.0,
            values: vec![vec![0.0; n]; species],
        }
    }

    pub fn from_values(grid: Grid, values: Vec<Vec<f64>>) -> Result<Self> {
        for v in &values {
            if v.len() != grid.len() {
                return Err(Error::DimensionMismatch {
                    expected: grid.len(),
                    got: v.len(),
                });
            }
        }
        Ok(Self {
            grid,
            time: 0.0,
            values,
        })
    }

    pub fn from_fn<F: Fn(usize, &Point) -> f64>(grid: Grid, species: usize, f: F) -> Self {
        let values = (0..species)
            .map(|i| (0..grid.len()).map(|c| f(i, &grid.center(c))).collect())
            .collect();
        Self {
            grid,
            time: 0.0,
            values,
        }
    }

    pub fn species(&self) -> usize {
        self.values.len()
    }

    /// Midpoint-rule mass of species `i`.
    pub fn mass(&self, i: usize) -> f64 {
        self.values[i].iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn masses(&self) -> Vec<f64> {
        (0..self.species()).map(|i| self.mass(i)).collect()
    }

    /// Mass of species `i` within `band` cells of the boundary.
    pub fn boundary_mass(&self, i: usize, band: usize) -> f64 {
        let v = &self.values[i];
        (0..v.len())
            .filter(|&c| self.grid.is_boundary_band(c, band))
            .map(|c| v[c].abs())
            .sum::<f64>()
            * self.grid.cell_volume()
    }

    /// Midpoint-rule integral ∫ φ u^i.
    pub fn integrate<F: Fn(&Point) -> f64>(&self, i: usize, phi: F) -> f64 {
        self.values[i]
            .iter()
            .enumerate()
            .map(|(c, u)| u * phi(&self.grid.center(c)))
            .sum::<f64>()
            * self.grid.cell_volume()
    }

    /// Multilinear interpolation between cell centres; zero outside the
    /// outermost centres.
    pub fn interpolate(&self, i: usize, x: &[f64]) -> f64 {
        let g = &self.grid;
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for k in 0..g.dim {
            let u = (x[k] - g.lower[k]) / g.spacing(k) - 0.5;
            if !(u >= 0.0) || u > (g.cells[k] - 1) as f64 {
                return 0.0;
            }
            let b = (u.floor() as usize).min(g.cells[k] - 2);
            base[k] = b;
            frac[k] = u - b as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << g.dim) {
            let mut ij = base;
            let mut w = 1.0;
            for k in 0..g.dim {
                if corner >> k & 1 == 1 {
                    ij[k] += 1;
                    w *= frac[k];
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            acc += w * self.values[i][g.flatten(ij)];
        }
        acc
    }

    pub fn min_value(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_reproduces_affine_fields() {
        let g = Grid::new(vec![-1.0, 0.0], vec![1.0, 2.0], vec![8, 5]).unwrap();
        let f = GridField::from_fn(g, 1, |_, x| 1.0 + 2.0 * x[0] - 0.5 * x[1]);
        for x in [[0.1, 0.7], [-0.8, 1.6], [0.87, 0.2]] {
            assert!((f.interpolate(0, &x) - (1.0 + 2.0 * x[0] - 0.5 * x[1])).abs() < 1e-12);
        }
        assert_eq!(f.interpolate(0, &[0.99, 1.0]), 0.0);
        let g1 = Grid::cube(1, 1.0, 10).unwrap();
        let f1 = GridField::from_fn(g1, 1, |_, x| 3.0 * x[0]);
        assert!((f1.interpolate(0, &[0.33]) - 0.99).abs() < 1e-12);
    }

    #[test]
    fn flatten_round_trips() {
        let g = Grid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![4, 6]).unwrap();
        for idx in 0..g.len() {
            assert_eq!(g.flatten(g.unflatten(idx)), idx);
        }
        assert!(g.is_boundary_band(0, 1));
        assert!(!g.is_boundary_band(g.flatten([2, 3]), 1));
    }
}
