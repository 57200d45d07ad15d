//! Jump intensity measures on `R^n \ {0}`.
//!
//! A [`JumpMeasure`] is stored as a list of weighted quadrature nodes. For
//! atomic measures the nodes are the atoms themselves and every functional is
//! an exact finite sum; density measures are discretised once with the
//! midpoint rule on a tensor lattice (error `O(h^2)`), after which the same
//! sums apply. The moment class used throughout the crate is
//! `M_p = { ν : ∫ |y|² ∨ |y|^p ν(dy) < ∞ }`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Point mass `mass · δ_location`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub location: Vec<f64>,
    pub mass: f64,
}

impl Atom {
    pub fn new(location: Vec<f64>, mass: f64) -> Self {
        Self { location, mass }
    }
}

/// Density sampled at the cell midpoints of a box lattice.
///
/// `values` is row-major with the last axis varying fastest. Cells whose
/// midpoint lies in the closed ball of radius `exclude_radius` are dropped;
/// their second-order contribution can be supplied as `small_jump_cov`
/// (the matrix `∫_{|y|≤ε} y yᵀ ν(dy)`), which generators and simulators treat
/// as extra diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub cells: Vec<usize>,
    pub values: Vec<f64>,
    pub exclude_radius: f64,
    pub small_jump_cov: Option<DMatrix<f64>>,
}

impl DensityGrid {
    /// Samples `density` at every cell midpoint of the box `[lo, hi]`.
    pub fn from_fn<F>(lo: Vec<f64>, hi: Vec<f64>, cells: Vec<usize>, exclude_radius: f64, density: F) -> Self
    where
        F: Fn(&[f64]) -> f64,
    {
        let total: usize = cells.iter().product();
        let mut values = Vec::with_capacity(total);
        let mut point = vec![0.0; cells.len()];
        for flat in 0..total {
            midpoint(&lo, &hi, &cells, flat, &mut point);
            values.push(density(&point));
        }
        Self {
            lo,
            hi,
            cells,
            values,
            exclude_radius,
            small_jump_cov: None,
        }
    }

    pub fn with_small_jump_cov(mut self, cov: DMatrix<f64>) -> Self {
        self.small_jump_cov = Some(cov);
        self
    }

    fn cell_widths(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(&self.cells)
            .map(|((lo, hi), n)| (hi - lo) / *n as f64)
            .collect()
    }
}

fn midpoint(lo: &[f64], hi: &[f64], cells: &[usize], mut flat: usize, out: &mut [f64]) {
    for axis in (0..cells.len()).rev() {
        let idx = flat % cells[axis];
        flat /= cells[axis];
        let width = (hi[axis] - lo[axis]) / cells[axis] as f64;
        out[axis] = lo[axis] + (idx as f64 + 0.5) * width;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeasureKind {
    Zero,
    Atomic(Vec<Atom>),
    DensityGrid(DensityGrid),
}

/// Total mass `ν(R^n \ {0})` as seen by the quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalMass {
    pub value: f64,
    /// Set when the density reaches the origin without an excluded ball, so
    /// the reported value may miss an unbounded singularity.
    pub possibly_infinite: bool,
}

/// A jump intensity measure `ν` on `R^n \ {0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpMeasure {
    dim: usize,
    kind: MeasureKind,
    points: Vec<f64>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
    cell_widths: Option<Vec<f64>>,
    touches_origin: bool,
}

impl JumpMeasure {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            kind: MeasureKind::Zero,
            points: Vec::new(),
            weights: Vec::new(),
            cumulative: Vec::new(),
            cell_widths: None,
            touches_origin: false,
        }
    }

    pub fn atomic(dim: usize, atoms: Vec<Atom>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Structure("dimension must be positive".into()));
        }
        let mut points = Vec::with_capacity(atoms.len() * dim);
        let mut weights = Vec::with_capacity(atoms.len());
        for (i, atom) in atoms.iter().enumerate() {
            if atom.location.len() != dim {
                return Err(Error::Structure(format!(
                    "atoms[{i}] has dimension {}, expected {dim}",
                    atom.location.len()
                )));
            }
            if atom.location.iter().any(|v| !v.is_finite()) {
                return Err(Error::Structure(format!("atoms[{i}] has a non-finite location")));
            }
            if atom.location.iter().all(|v| *v == 0.0) {
                return Err(Error::Structure(format!("atoms[{i}] sits at the origin")));
            }
            if !atom.mass.is_finite() || atom.mass < 0.0 {
                return Err(Error::Structure(format!("atoms[{i}] has invalid mass {}", atom.mass)));
            }
            points.extend_from_slice(&atom.location);
            weights.push(atom.mass);
        }
        let cumulative = running_sum(&weights);
        Ok(Self {
            dim,
            kind: MeasureKind::Atomic(atoms),
            points,
            weights,
            cumulative,
            cell_widths: None,
            touches_origin: false,
        })
    }

    pub fn density(grid: DensityGrid) -> Result<Self> {
        let dim = grid.cells.len();
        if dim == 0 || grid.lo.len() != dim || grid.hi.len() != dim {
            return Err(Error::Structure("density box dimensions disagree".into()));
        }
        if grid.cells.contains(&0) {
            return Err(Error::Structure("density lattice needs at least one cell per axis".into()));
        }
        for axis in 0..dim {
            if !(grid.lo[axis] < grid.hi[axis]) {
                return Err(Error::Structure(format!("density box axis {axis} has lo >= hi")));
            }
        }
        let total: usize = grid.cells.iter().product();
        if grid.values.len() != total {
            return Err(Error::Structure(format!(
                "density has {} values for {total} cells",
                grid.values.len()
            )));
        }
        if !(grid.exclude_radius >= 0.0) {
            return Err(Error::Structure("excluded radius must be non-negative".into()));
        }
        if let Some(cov) = &grid.small_jump_cov {
            if cov.nrows() != dim || cov.ncols() != dim {
                return Err(Error::Structure("small-jump covariance has wrong shape".into()));
            }
        }
        let widths = grid.cell_widths();
        let volume: f64 = widths.iter().product();
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut touches_origin = false;
        let mut center = vec![0.0; dim];
        for (flat, &value) in grid.values.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::Structure(format!("density value {value} at cell {flat}")));
            }
            if value == 0.0 {
                continue;
            }
            midpoint(&grid.lo, &grid.hi, &grid.cells, flat, &mut center);
            let radius = norm(&center);
            if radius <= grid.exclude_radius {
                if radius == 0.0 && grid.exclude_radius == 0.0 {
                    return Err(Error::Structure(format!(
                        "density cell {flat} is centred at the origin"
                    )));
                }
                continue;
            }
            if grid.exclude_radius == 0.0
                && center
                    .iter()
                    .zip(&widths)
                    .all(|(c, w)| c.abs() <= 0.5 * w + 1e-15)
            {
                touches_origin = true;
            }
            points.extend_from_slice(&center);
            weights.push(value * volume);
        }
        let cumulative = running_sum(&weights);
        Ok(Self {
            dim,
            kind: MeasureKind::DensityGrid(grid),
            points,
            weights,
            cumulative,
            cell_widths: Some(widths),
            touches_origin,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &MeasureKind {
        &self.kind
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| *w == 0.0) && self.small_jump_cov().is_none()
    }

    /// Quadrature nodes `(y, weight)`.
    pub fn nodes(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.points
            .chunks_exact(self.dim.max(1))
            .zip(self.weights.iter().copied())
    }

    pub fn small_jump_cov(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            MeasureKind::DensityGrid(g) => g.small_jump_cov.as_ref(),
            _ => None,
        }
    }

    /// Multiplies every mass (and the small-jump covariance) by `c ≥ 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::Invalid(format!("scale factor {c}")));
        }
        match &self.kind {
            MeasureKind::Zero => Ok(self.clone()),
            MeasureKind::Atomic(atoms) => Self::atomic(
                self.dim,
                atoms
                    .iter()
                    .map(|a| Atom::new(a.location.clone(), a.mass * c))
                    .collect(),
            ),
            MeasureKind::DensityGrid(g) => {
                let mut g = g.clone();
                g.values.iter_mut().for_each(|v| *v *= c);
                g.small_jump_cov = g.small_jump_cov.map(|m| m * c);
                Self::density(g)
            }
        }
    }

    /// `∫ |y|² ∨ |y|^p ν(dy)`.
    pub fn moment_functional(&self, p: f64) -> Result<f64> {
        check_order(p)?;
        let mut acc = 0.0;
        for (y, w) in self.nodes() {
            let r = norm(y);
            acc += w * (r * r).max(r.powf(p));
        }
        if let Some(cov) = self.small_jump_cov() {
            acc += cov.trace();
        }
        finite_or_diverged(acc, "moment functional")
    }

    /// Membership test for `M_p`. Structural problems are reported at
    /// construction, so this only answers whether the integral is finite.
    pub fn validate_mp(&self, p: f64) -> Result<bool> {
        match self.moment_functional(p) {
            Ok(_) => Ok(true),
            Err(Error::Divergence(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    /// `M_ij = ∫ y_i y_j ν(dy)`.
    pub fn second_moment_matrix(&self) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (y, w) in self.nodes() {
            for i in 0..self.dim {
                for j in 0..self.dim {
                    m[(i, j)] += w * y[i] * y[j];
                }
            }
        }
        if let Some(cov) = self.small_jump_cov() {
            m += cov;
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("second moment matrix".into()));
        }
        Ok(m)
    }

    /// `∫ y ν(dy)`, the compensator drift per unit time.
    pub fn first_moment(&self) -> Result<Vec<f64>> {
        let mut m = vec![0.0; self.dim];
        for (y, w) in self.nodes() {
            for (mi, yi) in m.iter_mut().zip(y) {
                *mi += w * yi;
            }
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("first moment".into()));
        }
        Ok(m)
    }

    /// `∫ F(y) ν(dy)` over the quadrature nodes.
    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.nodes().map(|(y, w)| w * f(y)).sum()
    }

    pub fn total_mass(&self) -> TotalMass {
        TotalMass {
            value: self.cumulative.last().copied().unwrap_or(0.0),
            possibly_infinite: self.touches_origin,
        }
    }

    /// Draws a jump size with law `ν / ν(R^n)`.
    ///
    /// Density measures pick a cell by inverse CDF and jitter uniformly
    /// inside it.
    pub fn sample_jump<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.sample_jump_into(rng, &mut out)?;
        Ok(out)
    }

    pub fn sample_jump_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) -> Result<()> {
        let mass = self.total_mass();
        if !(mass.value > 0.0) || !mass.value.is_finite() || mass.possibly_infinite {
            return Err(Error::UnsupportedMeasure(format!(
                "cannot sample a measure with total mass {}{}",
                mass.value,
                if mass.possibly_infinite { " (possibly infinite)" } else { "" }
            )));
        }
        let target = rng.random::<f64>() * mass.value;
        let idx = self
            .cumulative
            .partition_point(|c| *c <= target)
            .min(self.weights.len() - 1);
        let y = &self.points[idx * self.dim..(idx + 1) * self.dim];
        out.copy_from_slice(y);
        if let Some(widths) = &self.cell_widths {
            for (o, w) in out.iter_mut().zip(widths) {
                *o += (rng.random::<f64>() - 0.5) * w;
            }
        }
        Ok(())
    }
}

/// Serializable description of a jump measure, as used in configuration
/// files: `{"kind":"atomic","atoms":[[[y...],mass],...]}`,
/// `{"kind":"density",...}` or `{"kind":"zero"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    Zero,
    Atomic {
        atoms: Vec<(Vec<f64>, f64)>,
    },
    Density {
        lo: Vec<f64>,
        hi: Vec<f64>,
        cells: Vec<usize>,
        #[serde(default)]
        values: Option<Vec<f64>>,
        #[serde(default)]
        constant: Option<f64>,
        #[serde(default)]
        exclude_radius: f64,
        #[serde(default)]
        small_jump_cov: Option<Vec<Vec<f64>>>,
    },
}

impl MeasureSpec {
    pub fn build(&self, dim: usize) -> Result<JumpMeasure> {
        match self {
            MeasureSpec::Zero => Ok(JumpMeasure::zero(dim)),
            MeasureSpec::Atomic { atoms } => JumpMeasure::atomic(
                dim,
                atoms
                    .iter()
                    .map(|(loc, mass)| Atom::new(loc.clone(), *mass))
                    .collect(),
            ),
            MeasureSpec::Density {
                lo,
                hi,
                cells,
                values,
                constant,
                exclude_radius,
                small_jump_cov,
            } => {
                if cells.len() != dim {
                    return Err(Error::Structure(format!(
                        "cells has {} axes, expected {dim}",
                        cells.len()
                    )));
                }
                let total: usize = cells.iter().product();
                let values = match (values, constant) {
                    (Some(v), None) => v.clone(),
                    (None, Some(c)) => vec![*c; total],
                    _ => {
                        return Err(Error::Structure(
                            "density needs exactly one of `values` or `constant`".into(),
                        ))
                    }
                };
                let cov = match small_jump_cov {
                    Some(rows) => Some(matrix_from_rows(rows, dim)?),
                    None => None,
                };
                JumpMeasure::density(DensityGrid {
                    lo: lo.clone(),
                    hi: hi.clone(),
                    cells: cells.clone(),
                    values,
                    exclude_radius: *exclude_radius,
                    small_jump_cov: cov,
                })
            }
        }
    }
}

pub fn matrix_from_rows(rows: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            got: rows.len(),
        });
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

fn check_order(p: f64) -> Result<()> {
    if !(p >= 2.0) || !p.is_finite() {
        return Err(Error::Invalid(format!("moment order p={p} must be a finite real >= 2")));
    }
    Ok(())
}

fn finite_or_diverged(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence(format!("{what} accumulated to {v}")))
    }
}

fn running_sum(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

pub(crate) fn norm(y: &[f64]) -> f64 {
    y.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn atoms1(list: &[(f64, f64)]) -> JumpMeasure {
        JumpMeasure::atomic(1, list.iter().map(|(y, m)| Atom::new(vec![*y], *m)).collect()).unwrap()
    }

    fn uniform_1d(c: f64, cells: usize) -> JumpMeasure {
        JumpMeasure::density(DensityGrid::from_fn(vec![1.0], vec![2.0], vec![cells], 0.0, |_| c)).unwrap()
    }

    #[test]
    fn zero_measure_is_in_every_class() {
        let z = JumpMeasure::zero(2);
        assert!(z.validate_mp(2.0).unwrap());
        assert_eq!(z.moment_functional(5.0).unwrap(), 0.0);
        assert_eq!(z.total_mass().value, 0.0);
        assert_eq!(z.second_moment_matrix().unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn single_atom_functionals() {
        let nu = atoms1(&[(2.0, 1.0)]);
        assert!(nu.validate_mp(2.0).unwrap());
        assert_eq!(nu.moment_functional(2.0).unwrap(), 4.0);
        assert_eq!(nu.moment_functional(3.0).unwrap(), 8.0);
        let small = atoms1(&[(0.5, 1.0)]);
        assert_eq!(small.moment_functional(4.0).unwrap(), 0.25);
    }

    #[test]
    fn atom_at_origin_is_structural() {
        let err = JumpMeasure::atomic(1, vec![Atom::new(vec![0.0], 1.0)]).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
    }

    #[test]
    fn order_below_two_is_rejected() {
        assert!(matches!(atoms1(&[(1.0, 1.0)]).validate_mp(1.5), Err(Error::Invalid(_))));
    }

    #[test]
    fn second_moments() {
        let nu = JumpMeasure::atomic(2, vec![Atom::new(vec![1.0, 0.0], 2.0)]).unwrap();
        let m = nu.second_moment_matrix().unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let sym = atoms1(&[(1.0, 1.0), (-1.0, 1.0)]);
        assert_eq!(sym.second_moment_matrix().unwrap()[(0, 0)], 2.0);
    }

    #[test]
    fn total_masses() {
        assert_eq!(atoms1(&[(2.0, 1.0), (-1.0, 0.5)]).total_mass().value, 1.5);
        let d = uniform_1d(3.0, 1000);
        assert!((d.total_mass().value - 3.0).abs() < 1e-12);
        assert!(!d.total_mass().possibly_infinite);
    }

    #[test]
    fn density_quadrature_matches_closed_form() {
        // midpoint error is h^2/12 for ∫ y^2 on [1,2]
        let d = uniform_1d(1.0, 20_000);
        let got = d.moment_functional(2.0).unwrap();
        assert!((got - 7.0 / 3.0).abs() < 1e-8, "{got}");
    }

    #[test]
    fn density_touching_origin_is_flagged() {
        let d = JumpMeasure::density(DensityGrid::from_fn(vec![-1.0], vec![1.0], vec![10], 0.0, |y| {
            1.0 / y[0].abs()
        }))
        .unwrap();
        assert!(d.total_mass().possibly_infinite);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(d.sample_jump(&mut rng), Err(Error::UnsupportedMeasure(_))));
        let cut = JumpMeasure::density(DensityGrid::from_fn(vec![-1.0], vec![1.0], vec![10], 0.15, |y| {
            1.0 / y[0].abs()
        }))
        .unwrap();
        assert!(!cut.total_mass().possibly_infinite);
    }

    #[test]
    fn sampling_degenerate_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let nu = atoms1(&[(2.0, 1.0)]);
        for _ in 0..100 {
            assert_eq!(nu.sample_jump(&mut rng).unwrap(), vec![2.0]);
        }
        let sym = atoms1(&[(1.0, 1.0), (-1.0, 1.0)]);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| sym.sample_jump(&mut rng).unwrap()[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn sampling_uniform_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = uniform_1d(1.0, 50);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| d.sample_jump(&mut rng).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let se = (1.0f64 / 12.0).sqrt() / (n as f64).sqrt();
        assert!((mean - 1.5).abs() < 3.0 * se, "{mean}");
        assert!(draws.iter().all(|y| (1.0..=2.0).contains(y)));
    }

    #[test]
    fn zero_mass_cannot_be_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            JumpMeasure::zero(1).sample_jump(&mut rng),
            Err(Error::UnsupportedMeasure(_))
        ));
    }

    #[test]
    fn spec_round_trip_from_config_shape() {
        let spec = MeasureSpec::Atomic {
            atoms: vec![(vec![2.0], 1.0), (vec![-1.0], 0.5)],
        };
        let nu = spec.build(1).unwrap();
        assert_eq!(nu.total_mass().value, 1.5);
        let dens = MeasureSpec::Density {
            lo: vec![1.0],
            hi: vec![2.0],
            cells: vec![10],
            values: None,
            constant: Some(3.0),
            exclude_radius: 0.0,
            small_jump_cov: None,
        };
        assert!((dens.build(1).unwrap().total_mass().value - 3.0).abs() < 1e-12);
    }
}
