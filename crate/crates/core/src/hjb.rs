//! Grid solver for the HJB integro-differential equation
//!
//! ```text
//! inf_a { L^a φ(x) − q(x, a) φ(x) + f(x, a) } = 0
//! ```
//!
//! on uniform 1-D and 2-D grids, by policy iteration. The first derivative is
//! upwinded by the sign of the effective drift, the second derivative is
//! central, and jumps couple to `φ(x + y)` through linear interpolation inside
//! the grid and a least-squares polynomial tail outside it.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::error::{Error, Result};
use crate::generator::ScalarField;
use crate::measures::norm;
use crate::problem::{ActionSet, HjbProblem};

/// Largest system solved by dense LU; bigger ones use BiCGSTAB.
pub const DENSE_LIMIT: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.hi
        } else {
            self.lo + i as f64 * self.spacing()
        }
    }
}

/// Uniform tensor grid in one or two dimensions. Flat indices run with the
/// last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::Invalid(format!("grids are 1-D or 2-D, got {} axes", axes.len())));
        }
        for (k, a) in axes.iter().enumerate() {
            if !(a.lo < a.hi) || !a.lo.is_finite() || !a.hi.is_finite() {
                return Err(Error::Invalid(format!("axis {k}: need lo < hi, got [{}, {}]", a.lo, a.hi)));
            }
            if a.nodes < 16 {
                return Err(Error::Invalid(format!("axis {k}: need at least 16 nodes, got {}", a.nodes)));
            }
        }
        Ok(Self { axes })
    }

    pub fn uniform_1d(lo: f64, hi: f64, nodes: usize) -> Result<Self> {
        Self::new(vec![Axis { lo, hi, nodes }])
    }

    pub fn uniform_2d(x: (f64, f64, usize), y: (f64, f64, usize)) -> Result<Self> {
        Self::new(vec![
            Axis {
                lo: x.0,
                hi: x.1,
                nodes: x.2,
            },
            Axis {
                lo: y.0,
                hi: y.1,
                nodes: y.2,
            },
        ])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.axes[axis].spacing()
    }

    pub fn multi_index(&self, flat: usize) -> [usize; 2] {
        match self.axes.len() {
            1 => [flat, 0],
            _ => [flat / self.axes[1].nodes, flat % self.axes[1].nodes],
        }
    }

    pub fn flat(&self, idx: [usize; 2]) -> usize {
        match self.axes.len() {
            1 => idx[0],
            _ => idx[0] * self.axes[1].nodes + idx[1],
        }
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        let idx = self.multi_index(flat);
        self.axes
            .iter()
            .enumerate()
            .map(|(k, a)| a.coordinate(idx[k]))
            .collect()
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.axes.iter().zip(x).all(|(a, v)| *v >= a.lo && *v <= a.hi)
    }

    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let mut idx = [0usize; 2];
        for (k, a) in self.axes.iter().enumerate() {
            let t = ((x[k] - a.lo) / a.spacing()).round();
            idx[k] = t.clamp(0.0, (a.nodes - 1) as f64) as usize;
        }
        self.flat(idx)
    }

    /// Number of nodes per side used by the tail fit on `axis`.
    pub fn tail_width(&self, axis: usize, degree: u32) -> usize {
        let n = self.axes[axis].nodes;
        ((n as f64 * 0.1).ceil() as usize).max(degree as usize + 2).min(n)
    }

    /// Whether `flat` lies at least `margin` nodes away from every edge.
    pub fn is_interior(&self, flat: usize, margin: usize) -> bool {
        let idx = self.multi_index(flat);
        self.axes
            .iter()
            .enumerate()
            .all(|(k, a)| idx[k] >= margin && idx[k] + margin < a.nodes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
struct SideFit {
    nodes: Vec<usize>,
    origin: f64,
    scale: f64,
    /// `(degree + 1) × m` least-squares projector onto polynomial coefficients.
    projector: DMatrix<f64>,
}

impl SideFit {
    fn new(axis: &Axis, side: Side, width: usize, degree: u32) -> Self {
        let n = axis.nodes;
        let nodes: Vec<usize> = match side {
            Side::Lower => (0..width).collect(),
            Side::Upper => (n - width..n).collect(),
        };
        let origin = match side {
            Side::Lower => axis.lo,
            Side::Upper => axis.hi,
        };
        let scale = width as f64 * axis.spacing();
        let cols = degree as usize + 1;
        let v = DMatrix::from_fn(width, cols, |r, c| ((axis.coordinate(nodes[r]) - origin) / scale).powi(c as i32));
        let projector = v
            .pseudo_inverse(1e-13)
            .expect("Vandermonde pseudo-inverse with positive epsilon");
        Self {
            nodes,
            origin,
            scale,
            projector,
        }
    }

    fn weights(&self, x: f64, out: &mut Vec<(usize, f64)>) {
        let t = (x - self.origin) / self.scale;
        let powers: Vec<f64> = (0..self.projector.nrows()).map(|d| t.powi(d as i32)).collect();
        for (j, node) in self.nodes.iter().enumerate() {
            let w: f64 = powers.iter().enumerate().map(|(d, p)| p * self.projector[(d, j)]).sum();
            out.push((*node, w));
        }
    }

    fn coefficients(&self, values: &[f64]) -> Vec<f64> {
        (0..self.projector.nrows())
            .map(|d| {
                self.nodes
                    .iter()
                    .enumerate()
                    .map(|(j, _)| self.projector[(d, j)] * values[j])
                    .sum()
            })
            .collect()
    }
}

/// Evaluation of grid functions off the grid: linear interpolation inside,
/// polynomial extrapolation of degree `q_growth` outside. Every evaluation is
/// a fixed linear combination of node values.
#[derive(Debug, Clone)]
pub struct Extension {
    grid: Grid,
    degree: u32,
    fits: Vec<[SideFit; 2]>,
}

impl Extension {
    pub fn new(grid: &Grid, degree: u32) -> Self {
        let fits = grid
            .axes
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let w = grid.tail_width(k, degree);
                [SideFit::new(a, Side::Lower, w, degree), SideFit::new(a, Side::Upper, w, degree)]
            })
            .collect();
        Self {
            grid: grid.clone(),
            degree,
            fits,
        }
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    fn axis_weights(&self, axis: usize, x: f64, out: &mut Vec<(usize, f64)>) {
        let a = &self.grid.axes[axis];
        if x < a.lo {
            self.fits[axis][0].weights(x, out);
        } else if x > a.hi {
            self.fits[axis][1].weights(x, out);
        } else {
            let t = (x - a.lo) / a.spacing();
            let i = (t.floor() as usize).min(a.nodes - 2);
            let frac = t - i as f64;
            if frac != 1.0 {
                out.push((i, 1.0 - frac));
            }
            if frac != 0.0 {
                out.push((i + 1, frac));
            }
        }
    }

    /// Flat node indices and weights representing the value at `x`.
    pub fn point_weights(&self, x: &[f64], out: &mut Vec<(usize, f64)>) {
        let mut w0 = Vec::with_capacity(8);
        self.axis_weights(0, x[0], &mut w0);
        if self.grid.dim() == 1 {
            out.extend(w0);
            return;
        }
        let mut w1 = Vec::with_capacity(8);
        self.axis_weights(1, x[1], &mut w1);
        for (i, a) in &w0 {
            for (j, b) in &w1 {
                out.push((self.grid.flat([*i, *j]), a * b));
            }
        }
    }

    pub fn evaluate(&self, values: &[f64], x: &[f64]) -> f64 {
        let mut w = Vec::with_capacity(16);
        self.point_weights(x, &mut w);
        w.iter().map(|(j, c)| c * values[*j]).sum()
    }
}

/// Least-squares tail fit of a value field along one axis and side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub axis: usize,
    pub side: Side,
    /// Coefficients in `t = (x − edge)/(width · h)`, lowest degree first. In
    /// 2-D these belong to the grid line through the middle of the other axis.
    pub coefficients: Vec<f64>,
    /// Largest fit residual over the fitted nodes (all lines in 2-D).
    pub residual: f64,
}

/// Node values on a grid with polynomial tail extension.
#[derive(Debug, Clone)]
pub struct ValueField {
    values: Vec<f64>,
    q_growth: u32,
    ext: Arc<Extension>,
    tails: Vec<TailFit>,
}

impl ValueField {
    pub fn new(grid: &Grid, values: Vec<f64>, q_growth: u32) -> Result<Self> {
        Self::with_extension(Arc::new(Extension::new(grid, q_growth)), values)
    }

    pub fn from_fn(grid: &Grid, q_growth: u32, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = grid.points().map(|x| f(&x)).collect();
        Self::new(grid, values, q_growth)
    }

    fn with_extension(ext: Arc<Extension>, values: Vec<f64>) -> Result<Self> {
        if values.len() != ext.grid.len() {
            return Err(Error::Dimension {
                expected: ext.grid.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("value at node {i} is not finite")));
        }
        let tails = tail_fits(&ext, &values);
        Ok(Self {
            values,
            q_growth: ext.degree,
            ext,
            tails,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.ext.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn q_growth(&self) -> u32 {
        self.q_growth
    }

    pub fn tails(&self) -> &[TailFit] {
        &self.tails
    }

    pub fn tail_residual(&self) -> f64 {
        self.tails.iter().map(|t| t.residual).fold(0.0, f64::max)
    }

    pub fn at(&self, x: &[f64]) -> f64 {
        self.ext.evaluate(&self.values, x)
    }

    pub fn is_nonnegative(&self, tol: f64) -> bool {
        self.values.iter().all(|v| *v >= -tol)
    }

    /// Sup-norm distance to `other` over nodes where `mask` holds.
    pub fn sup_distance(&self, other: &[f64], mask: impl Fn(&[f64]) -> bool) -> f64 {
        self.grid()
            .points()
            .zip(self.values.iter().zip(other))
            .filter(|(x, _)| mask(x))
            .map(|(_, (a, b))| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Highest polynomial degree with a non-negligible coefficient when the
    /// outer nodes are fitted with degree `q_growth + 2`.
    pub fn fitted_tail_degree(&self, rel_tol: f64) -> u32 {
        let grid = self.grid();
        let degree = self.q_growth + 2;
        let mut worst = 0;
        for (k, axis) in grid.axes.iter().enumerate() {
            let width = grid.tail_width(k, degree);
            if width < degree as usize + 2 {
                continue;
            }
            for side in [Side::Lower, Side::Upper] {
                let fit = SideFit::new(axis, side, width, degree);
                for line in lines(grid, k, &fit.nodes) {
                    let vals: Vec<f64> = line.iter().map(|j| self.values[*j]).collect();
                    let c = fit.coefficients(&vals);
                    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
                    let d = c.iter().rposition(|v| v.abs() > rel_tol * scale).unwrap_or(0) as u32;
                    worst = worst.max(d);
                }
            }
        }
        worst
    }
}

/// For each grid line along `axis`, the flat indices of `nodes` on it.
fn lines(grid: &Grid, axis: usize, nodes: &[usize]) -> Vec<Vec<usize>> {
    if grid.dim() == 1 {
        return vec![nodes.to_vec()];
    }
    let other = 1 - axis;
    (0..grid.axes[other].nodes)
        .map(|o| {
            nodes
                .iter()
                .map(|&i| {
                    let mut idx = [0; 2];
                    idx[axis] = i;
                    idx[other] = o;
                    grid.flat(idx)
                })
                .collect()
        })
        .collect()
}

fn tail_fits(ext: &Extension, values: &[f64]) -> Vec<TailFit> {
    let grid = &ext.grid;
    let mut out = Vec::new();
    for (k, sides) in ext.fits.iter().enumerate() {
        for (fit, side) in sides.iter().zip([Side::Lower, Side::Upper]) {
            let all = lines(grid, k, &fit.nodes);
            let mid = all.len() / 2;
            let mut residual = 0.0f64;
            let mut coefficients = Vec::new();
            for (li, line) in all.iter().enumerate() {
                let vals: Vec<f64> = line.iter().map(|j| values[*j]).collect();
                let c = fit.coefficients(&vals);
                for (r, node) in fit.nodes.iter().enumerate() {
                    let t = (grid.axes[k].coordinate(*node) - fit.origin) / fit.scale;
                    let p: f64 = c.iter().rev().fold(0.0, |acc, ci| acc * t + ci);
                    residual = residual.max((p - vals[r]).abs());
                }
                if li == mid {
                    coefficients = c;
                }
            }
            out.push(TailFit {
                axis: k,
                side,
                coefficients,
                residual,
            });
        }
    }
    out
}

impl ScalarField for ValueField {
    fn dim(&self) -> usize {
        self.grid().dim()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.at(x))
    }

    fn gradient(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        let mut g = Vec::with_capacity(x.len());
        let mut p = x.to_vec();
        for k in 0..x.len() {
            let h = self.grid().spacing(k);
            p[k] = x[k] + h;
            let up = self.at(&p);
            p[k] = x[k] - h;
            let down = self.at(&p);
            p[k] = x[k];
            g.push((up - down) / (2.0 * h));
        }
        Ok(Some(g))
    }

    fn hessian(&self, x: &[f64]) -> Result<Option<DMatrix<f64>>> {
        let n = x.len();
        let centre = self.at(x);
        let mut hess = DMatrix::zeros(n, n);
        let mut p = x.to_vec();
        for k in 0..n {
            let hk = self.grid().spacing(k);
            p[k] = x[k] + hk;
            let up = self.at(&p);
            p[k] = x[k] - hk;
            let down = self.at(&p);
            p[k] = x[k];
            hess[(k, k)] = (up - 2.0 * centre + down) / (hk * hk);
            for l in 0..k {
                let hl = self.grid().spacing(l);
                let mut corner = |sk: f64, sl: f64| {
                    p[k] = x[k] + sk * hk;
                    p[l] = x[l] + sl * hl;
                    let v = self.at(&p);
                    p[k] = x[k];
                    p[l] = x[l];
                    v
                };
                let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                    / (4.0 * hk * hl);
                hess[(k, l)] = v;
                hess[(l, k)] = v;
            }
        }
        Ok(Some(hess))
    }

    fn growth_degree(&self) -> Option<u32> {
        Some(self.q_growth)
    }
}

/// Action chosen at one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    /// Flat action index (`base × lattice`).
    pub action: usize,
    pub base: usize,
    /// Drift in force, including lattice refinement.
    pub mu: Vec<f64>,
}

/// Markov control tabulated on grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    grid: Grid,
    choices: Vec<Choice>,
}

impl PolicyTable {
    pub fn new(grid: &Grid, choices: Vec<Choice>, actions: &ActionSet) -> Result<Self> {
        if choices.len() != grid.len() {
            return Err(Error::Dimension {
                expected: grid.len(),
                got: choices.len(),
            });
        }
        let table = Self {
            grid: grid.clone(),
            choices,
        };
        table.validate(actions)?;
        Ok(table)
    }

    /// The same flat action index at every node.
    pub fn uniform(grid: &Grid, actions: &ActionSet, index: usize) -> Result<Self> {
        if index >= actions.len() {
            return Err(Error::Invalid(format!("action index {index} out of range")));
        }
        let (base, k) = actions.split(index);
        let mu: Vec<f64> = actions.drift(base, k).iter().copied().collect();
        let choice = Choice {
            action: index,
            base,
            mu,
        };
        Self::new(grid, vec![choice; grid.len()], actions)
    }

    /// Nodewise drift from `mu_of(x)` on top of base action `base`.
    pub fn from_drift(
        grid: &Grid,
        actions: &ActionSet,
        base: usize,
        mu_of: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        let lattice_len = actions.lattice_len();
        let choices = grid
            .points()
            .map(|x| {
                let mu = mu_of(&x);
                let lattice = match &actions.drift_lattice {
                    Some(l) => {
                        let idx: Vec<usize> = (0..l.dim())
                            .map(|d| {
                                let h = l.spacing(d);
                                let off = mu[d] - actions.base[base].mu[d] - l.lo[d];
                                if h > 0.0 {
                                    ((off / h).round().max(0.0) as usize).min(l.points[d] - 1)
                                } else {
                                    0
                                }
                            })
                            .collect();
                        l.flat_index(&idx)
                    }
                    None => 0,
                };
                Choice {
                    action: base * lattice_len + lattice,
                    base,
                    mu,
                }
            })
            .collect();
        Self::new(grid, choices, actions)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn choices(&self) -> &[Choice] {
        &self.choices
    }

    pub fn action_at_node(&self, actions: &ActionSet, node: usize) -> Action {
        let c = &self.choices[node];
        actions.base[c.base].with_mu(DVector::from_vec(c.mu.clone()))
    }

    /// Action of the nearest node to `x`.
    pub fn action_at(&self, actions: &ActionSet, x: &[f64]) -> Action {
        self.action_at_node(actions, self.grid.nearest_node(x))
    }

    pub fn validate(&self, actions: &ActionSet) -> Result<()> {
        for (i, c) in self.choices.iter().enumerate() {
            if c.action >= actions.len() {
                return Err(Error::Invalid(format!("node {i}: action {} not in the action set", c.action)));
            }
            let (base, _) = actions.split(c.action);
            if base != c.base || c.mu.len() != actions.base[base].dim() {
                return Err(Error::Invalid(format!("node {i}: inconsistent action record")));
            }
            let offset: Vec<f64> = c.mu.iter().zip(actions.base[base].mu.iter()).map(|(m, b)| m - b).collect();
            match &actions.drift_lattice {
                Some(l) => {
                    for d in 0..l.dim() {
                        let slack = 1e-9 * (1.0 + l.hi[d].abs().max(l.lo[d].abs()));
                        if offset[d] < l.lo[d] - slack || offset[d] > l.hi[d] + slack {
                            return Err(Error::Invalid(format!(
                                "node {i}: drift {} outside the lattice hull",
                                c.mu[d]
                            )));
                        }
                    }
                }
                None => {
                    if offset.iter().any(|v| *v != 0.0) {
                        return Err(Error::Invalid(format!("node {i}: drift differs from the base action")));
                    }
                }
            }
        }
        Ok(())
    }
}

type Row = Vec<(usize, f64)>;

fn compress(row: &mut Row) {
    row.sort_unstable_by_key(|(j, _)| *j);
    let mut out: Row = Vec::with_capacity(row.len());
    for &(j, c) in row.iter() {
        match out.last_mut() {
            Some((k, v)) if *k == j => *v += c,
            _ => out.push((j, c)),
        }
    }
    *row = out;
}

/// Discrete generator rows.
struct Assembler<'a> {
    prob: &'a HjbProblem,
    grid: &'a Grid,
    ext: &'a Extension,
    split: f64,
}

impl<'a> Assembler<'a> {
    fn new(prob: &'a HjbProblem, grid: &'a Grid, ext: &'a Extension) -> Self {
        let hmax = (0..grid.dim()).map(|k| grid.spacing(k)).fold(0.0, f64::max);
        Self {
            prob,
            grid,
            ext,
            split: 2.0 * hmax,
        }
    }

    fn add_offset(&self, idx: [usize; 2], off: [i64; 2], coef: f64, row: &mut Row) {
        let mut target = [0usize; 2];
        let mut inside = true;
        for (k, a) in self.grid.axes.iter().enumerate() {
            let t = idx[k] as i64 + off[k];
            if t < 0 || t >= a.nodes as i64 {
                inside = false;
            } else {
                target[k] = t as usize;
            }
        }
        if inside {
            row.push((self.grid.flat(target), coef));
            return;
        }
        let x: Vec<f64> = self
            .grid
            .axes
            .iter()
            .enumerate()
            .map(|(k, a)| a.lo + (idx[k] as i64 + off[k]) as f64 * a.spacing())
            .collect();
        let start = row.len();
        self.ext.point_weights(&x, row);
        for e in &mut row[start..] {
            e.1 *= coef;
        }
    }

    /// Row of the discrete `L^a` at `node`.
    fn row(&self, node: usize, a: &Action, row: &mut Row) -> Result<()> {
        row.clear();
        let n = self.grid.dim();
        let x = self.grid.point(node);
        let idx = self.grid.multi_index(node);
        let mut b: Vec<f64> = a.drift_at(&x).iter().zip(&self.prob.u).map(|(m, u)| m + u).collect();
        let nu = a.measure_at(&x)?;
        let mut cov = a.diffusion_cov();
        let mut shifted = vec![0.0; n];
        for (y, w) in nu.nodes() {
            if w == 0.0 {
                continue;
            }
            if norm(y) <= self.split {
                for r in 0..n {
                    for c in 0..n {
                        cov[(r, c)] += w * y[r] * y[c];
                    }
                }
            } else {
                for k in 0..n {
                    b[k] -= w * y[k];
                    shifted[k] = x[k] + y[k];
                }
                row.push((node, -w));
                let start = row.len();
                self.ext.point_weights(&shifted, row);
                for e in &mut row[start..] {
                    e.1 *= w;
                }
            }
        }
        for k in 0..n {
            let h = self.grid.spacing(k);
            let mut off = [0i64; 2];
            if b[k] > 0.0 {
                off[k] = 1;
                self.add_offset(idx, off, b[k] / h, row);
                row.push((node, -b[k] / h));
            } else if b[k] < 0.0 {
                off[k] = -1;
                self.add_offset(idx, off, -b[k] / h, row);
                row.push((node, b[k] / h));
            }
            let dkk = 0.5 * cov[(k, k)] / (h * h);
            if dkk != 0.0 {
                off[k] = 1;
                self.add_offset(idx, off, dkk, row);
                off[k] = -1;
                self.add_offset(idx, off, dkk, row);
                row.push((node, -2.0 * dkk));
            }
        }
        if n == 2 {
            let dkl = cov[(0, 1)] / (4.0 * self.grid.spacing(0) * self.grid.spacing(1));
            if dkl != 0.0 {
                for (s0, s1, sign) in [(1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)] {
                    self.add_offset(idx, [s0, s1], sign * dkl, row);
                }
            }
        }
        compress(row);
        Ok(())
    }

    fn integrand(&self, node: usize, a: &Action, phi: &[f64], row: &mut Row) -> Result<f64> {
        self.row(node, a, row)?;
        let x = self.grid.point(node);
        let lphi: f64 = row.iter().map(|(j, c)| c * phi[*j]).sum();
        Ok(lphi - self.prob.discount.eval(&x, a) * phi[node] + self.prob.cost.eval(&x, a))
    }
}

/// Linear system `(diag_i − L) φ = rhs`.
struct System {
    rows: Vec<Row>,
    diag: Vec<f64>,
    rhs: Vec<f64>,
}

/// Outcome of a linear solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearStats {
    /// Sup-norm residual of the solved system.
    pub residual: f64,
    /// Rows of the system matrix with a positive off-diagonal entry.
    pub nonmonotone_rows: usize,
    /// Same count restricted to rows away from the tail-extension region.
    pub interior_nonmonotone_rows: usize,
    pub condition_estimate: f64,
    pub iterations: usize,
}

impl System {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let lx: f64 = self.rows[i].iter().map(|(j, c)| c * x[*j]).sum();
            *o = self.diag[i] * x[i] - lx;
        });
    }

    fn residual(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; x.len()];
        self.apply(x, &mut ax);
        ax.iter().zip(&self.rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn count_nonmonotone(&self, grid: &Grid, margin: usize) -> (usize, usize) {
        let mut all = 0;
        let mut interior = 0;
        for (i, row) in self.rows.iter().enumerate() {
            let scale = row.iter().map(|(_, c)| c.abs()).fold(0.0, f64::max);
            if row.iter().any(|(j, c)| *j != i && *c < -1e-12 * scale) {
                all += 1;
                if grid.is_interior(i, margin) {
                    interior += 1;
                }
            }
        }
        (all, interior)
    }

    fn solve(&self, grid: &Grid, margin: usize, tol: f64) -> Result<(Vec<f64>, LinearStats)> {
        let n = self.rhs.len();
        let (nonmonotone_rows, interior_nonmonotone_rows) = self.count_nonmonotone(grid, margin);
        if interior_nonmonotone_rows > 0 {
            log::warn!("non-monotone discretisation: {interior_nonmonotone_rows} interior rows have negative-coupling entries");
        }
        let (x, condition, iterations) = if n <= DENSE_LIMIT {
            let (x, c) = self.solve_dense()?;
            (x, c, 1)
        } else {
            self.solve_bicgstab(tol)?
        };
        let residual = self.residual(&x);
        Ok((
            x,
            LinearStats {
                residual,
                nonmonotone_rows,
                interior_nonmonotone_rows,
                condition_estimate: condition,
                iterations,
            },
        ))
    }

    fn solve_dense(&self) -> Result<(Vec<f64>, f64)> {
        let n = self.rhs.len();
        let mut m = DMatrix::<f64>::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            m[(i, i)] += self.diag[i];
            for (j, c) in row {
                m[(i, *j)] -= c;
            }
        }
        let lu = nalgebra::LU::new(m.clone());
        let u = lu.u();
        let (mut umax, mut umin) = (0.0f64, f64::INFINITY);
        for i in 0..n {
            let v = u[(i, i)].abs();
            umax = umax.max(v);
            umin = umin.min(v);
        }
        let condition = if umin > 0.0 { umax / umin } else { f64::INFINITY };
        if !(condition < 1e14) {
            return Err(Error::Solver {
                reason: "system matrix is singular or ill-conditioned".into(),
                condition,
            });
        }
        let rhs = DVector::from_column_slice(&self.rhs);
        let mut x = lu.solve(&rhs).ok_or_else(|| Error::Solver {
            reason: "LU solve failed".into(),
            condition,
        })?;
        // one step of iterative refinement
        let r = &rhs - &m * &x;
        if let Some(dx) = lu.solve(&r) {
            x += dx;
        }
        Ok((x.iter().copied().collect(), condition))
    }

    fn solve_bicgstab(&self, tol: f64) -> Result<(Vec<f64>, f64, usize)> {
        let n = self.rhs.len();
        let diag: Vec<f64> = (0..n)
            .map(|i| {
                let own: f64 = self.rows[i].iter().filter(|(j, _)| *j == i).map(|(_, c)| *c).sum();
                self.diag[i] - own
            })
            .collect();
        let dominance = (0..n)
            .map(|i| {
                let off: f64 = self.rows[i].iter().filter(|(j, _)| *j != i).map(|(_, c)| c.abs()).sum();
                (diag[i].abs() - off) / diag[i].abs()
            })
            .fold(f64::INFINITY, f64::min);
        let condition = if dominance > 0.0 { 1.0 / dominance } else { f64::INFINITY };
        if diag.contains(&0.0) {
            return Err(Error::Solver {
                reason: "zero diagonal entry".into(),
                condition,
            });
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let sup = |a: &[f64]| a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let precond = |v: &[f64], out: &mut [f64]| {
            for i in 0..v.len() {
                out[i] = v[i] / diag[i];
            }
        };
        let target = tol.max(1e-14) * sup(&self.rhs).max(1.0);
        let mut x: Vec<f64> = (0..n).map(|i| self.rhs[i] / diag[i]).collect();
        let mut ax = vec![0.0; n];
        self.apply(&x, &mut ax);
        let mut r: Vec<f64> = (0..n).map(|i| self.rhs[i] - ax[i]).collect();
        let r0 = r.clone();
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; n];
        let (mut ph, mut sh, mut s, mut t) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let max_iter = 20 * n + 1000;
        for it in 1..=max_iter {
            if sup(&r) <= target {
                return Ok((x, condition, it - 1));
            }
            let rho_new = dot(&r0, &r);
            if rho_new == 0.0 || omega == 0.0 {
                break;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
            precond(&p, &mut ph);
            self.apply(&ph, &mut v);
            alpha = rho / dot(&r0, &v);
            for i in 0..n {
                s[i] = r[i] - alpha * v[i];
            }
            if sup(&s) <= target {
                for i in 0..n {
                    x[i] += alpha * ph[i];
                }
                return Ok((x, condition, it));
            }
            precond(&s, &mut sh);
            self.apply(&sh, &mut t);
            let tt = dot(&t, &t);
            omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
            for i in 0..n {
                x[i] += alpha * ph[i] + omega * sh[i];
                r[i] = s[i] - omega * t[i];
            }
            if !x.iter().all(|v| v.is_finite()) {
                break;
            }
        }
        Err(Error::Solver {
            reason: "BiCGSTAB did not reach the requested residual".into(),
            condition,
        })
    }
}

/// Result of [`policy_evaluation`].
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: ValueField,
    pub stats: LinearStats,
}

fn node_actions(prob: &HjbProblem, pol: &PolicyTable) -> Vec<Action> {
    (0..pol.grid.len())
        .map(|i| pol.action_at_node(&prob.actions, i))
        .collect()
}

fn check_grid(prob: &HjbProblem, grid: &Grid) -> Result<()> {
    if grid.dim() != prob.dim {
        return Err(Error::Dimension {
            expected: prob.dim,
            got: grid.dim(),
        });
    }
    Ok(())
}

fn margin(grid: &Grid, degree: u32) -> usize {
    (0..grid.dim()).map(|k| grid.tail_width(k, degree)).max().unwrap_or(0)
}

/// Generator rows, discount rates and running costs of a policy.
fn assemble(
    prob: &HjbProblem,
    grid: &Grid,
    ext: &Extension,
    actions: &[Action],
) -> Result<(Vec<Row>, Vec<f64>, Vec<f64>)> {
    let asm = Assembler::new(prob, grid, ext);
    let parts: Vec<(Row, f64, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            asm.row(i, &actions[i], &mut row)?;
            let x = grid.point(i);
            Ok((row, prob.discount.eval(&x, &actions[i]), prob.cost.eval(&x, &actions[i])))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(parts.len());
    let mut q = Vec::with_capacity(parts.len());
    let mut f = Vec::with_capacity(parts.len());
    for (r, qi, fi) in parts {
        rows.push(r);
        q.push(qi);
        f.push(fi);
    }
    Ok((rows, q, f))
}

/// Solves `L^{a(x)} φ − q φ + f = 0` for a fixed policy.
pub fn policy_evaluation(pol: &PolicyTable, prob: &HjbProblem, grid: &Grid, tol: f64) -> Result<Evaluation> {
    check_grid(prob, grid)?;
    if pol.grid() != grid {
        return Err(Error::Invalid("policy table lives on a different grid".into()));
    }
    pol.validate(&prob.actions)?;
    let ext = Arc::new(Extension::new(grid, prob.q_growth));
    evaluate_with(pol, prob, grid, &ext, tol)
}

fn evaluate_with(pol: &PolicyTable, prob: &HjbProblem, grid: &Grid, ext: &Arc<Extension>, tol: f64) -> Result<Evaluation> {
    let actions = node_actions(prob, pol);
    let (rows, diag, rhs) = assemble(prob, grid, ext, &actions)?;
    let sys = System { rows, diag, rhs };
    let (values, stats) = sys.solve(grid, margin(grid, prob.q_growth), tol)?;
    Ok(Evaluation {
        value: ValueField::with_extension(ext.clone(), values)?,
        stats,
    })
}

/// Per-node minimisation result.
struct Improvement {
    policy: PolicyTable,
    /// Minimal integrand per node.
    minimum: Vec<f64>,
}

fn improve_with(phi: &[f64], prob: &HjbProblem, grid: &Grid, ext: &Extension) -> Result<Improvement> {
    let set = &prob.actions;
    if set.is_empty() {
        return Err(Error::Invalid("empty action set".into()));
    }
    let asm = Assembler::new(prob, grid, ext);
    let lattice_len = set.lattice_len();
    let results: Vec<(Choice, f64)> = (0..grid.len())
        .into_par_iter()
        .map_init(Vec::new, |row, node| {
            let mut best: Option<(usize, f64)> = None;
            let mut values = vec![f64::INFINITY; set.len()];
            for index in 0..set.len() {
                let a = set.action(index);
                let v = asm.integrand(node, &a, phi, row)?;
                values[index] = v;
                if best.is_none_or(|(_, bv)| v < bv) {
                    best = Some((index, v));
                }
            }
            let (index, mut value) = best.expect("non-empty action set");
            let (base, lat) = set.split(index);
            let mut mu: Vec<f64> = set.drift(base, lat).iter().copied().collect();
            if let (Some(l), Some(k)) = (&set.drift_lattice, lat) {
                if l.refine {
                    let midx = l.multi_index(k);
                    for d in 0..l.dim() {
                        let delta = l.spacing(d);
                        if midx[d] == 0 || midx[d] + 1 >= l.points[d] || delta == 0.0 {
                            continue;
                        }
                        let mut lo = midx.clone();
                        lo[d] -= 1;
                        let mut hi = midx.clone();
                        hi[d] += 1;
                        let vm = values[base * lattice_len + l.flat_index(&lo)];
                        let vp = values[base * lattice_len + l.flat_index(&hi)];
                        let curv = vm - 2.0 * values[index] + vp;
                        if !(curv > 0.0) {
                            continue;
                        }
                        let shift = (0.5 * delta * (vm - vp) / curv).clamp(-delta, delta);
                        let mut trial = mu.clone();
                        trial[d] += shift;
                        let a = set.base[base].with_mu(DVector::from_vec(trial.clone()));
                        let v = asm.integrand(node, &a, phi, row)?;
                        if v < value {
                            value = v;
                            mu = trial;
                        }
                    }
                }
            }
            Ok((Choice { action: index, base, mu }, value))
        })
        .collect::<Result<_>>()?;
    let mut choices = Vec::with_capacity(results.len());
    let mut minimum = Vec::with_capacity(results.len());
    for (c, v) in results {
        choices.push(c);
        minimum.push(v);
    }
    Ok(Improvement {
        policy: PolicyTable {
            grid: grid.clone(),
            choices,
        },
        minimum,
    })
}

/// Pointwise argmin of the discrete HJB integrand; ties go to the lowest
/// action index.
pub fn policy_improvement(phi: &ValueField, prob: &HjbProblem, grid: &Grid) -> Result<PolicyTable> {
    check_grid(prob, grid)?;
    if phi.grid() != grid {
        return Err(Error::Invalid("value field lives on a different grid".into()));
    }
    let ext = Extension::new(grid, prob.q_growth);
    Ok(improve_with(phi.values(), prob, grid, &ext)?.policy)
}

/// Discrete HJB integrand of every action at every node:
/// `out[node][action]`.
pub fn integrand_table(phi: &ValueField, prob: &HjbProblem, grid: &Grid) -> Result<Vec<Vec<f64>>> {
    check_grid(prob, grid)?;
    let ext = Extension::new(grid, prob.q_growth);
    let asm = Assembler::new(prob, grid, &ext);
    (0..grid.len())
        .into_par_iter()
        .map_init(Vec::new, |row, node| {
            (0..prob.actions.len())
                .map(|k| asm.integrand(node, &prob.actions.action(k), phi.values(), row))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    /// Stop when the sup-norm change between successive values is below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Residual target for iterative linear solves.
    pub linear_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 100,
            linear_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm change of the value after each evaluation (first entry is the
    /// sup-norm of the first iterate).
    pub value_changes: Vec<f64>,
    /// Sup-norm of the value after each evaluation.
    pub value_norms: Vec<f64>,
    /// `max |min_a integrand|` over interior nodes.
    pub hjb_residual: f64,
    /// Same over all nodes, tail region included.
    pub hjb_residual_all: f64,
    pub linear: LinearStats,
    pub tail_residual: f64,
    /// Nodes closer than this to an edge count as tail region.
    pub interior_margin: usize,
}

#[derive(Debug, Clone)]
pub struct StationarySolution {
    pub value: ValueField,
    pub policy: PolicyTable,
    pub report: ConvergenceReport,
}

/// Policy iteration for the stationary equation. Non-convergence within
/// `max_iters` returns the last iterate with `report.converged == false`.
pub fn solve_stationary(prob: &HjbProblem, grid: &Grid, opts: &SolveOptions) -> Result<StationarySolution> {
    check_grid(prob, grid)?;
    prob.validate()?;
    let ext = Arc::new(Extension::new(grid, prob.q_growth));
    let zero = vec![0.0; grid.len()];
    let mut policy = improve_with(&zero, prob, grid, &ext)?.policy;
    let mut changes = Vec::new();
    let mut norms = Vec::new();
    let mut previous: Option<Vec<f64>> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut last: Option<(Evaluation, Improvement)> = None;
    while iterations < opts.max_iters {
        iterations += 1;
        let eval = evaluate_with(&policy, prob, grid, &ext, opts.linear_tol)?;
        let vals = eval.value.values();
        let sup = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let change = match &previous {
            Some(p) => p.iter().zip(vals).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
            None => sup,
        };
        changes.push(change);
        norms.push(sup);
        log::debug!("policy iteration {iterations}: change {change:.3e}");
        let imp = improve_with(vals, prob, grid, &ext)?;
        let stable = imp.policy == policy;
        previous = Some(vals.to_vec());
        policy = imp.policy.clone();
        let done = (iterations > 1 && change < opts.tol) || stable;
        last = Some((eval, imp));
        if done {
            converged = true;
            break;
        }
    }
    let (eval, imp) = last.expect("at least one iteration");
    let m = margin(grid, prob.q_growth);
    let hjb_residual = imp
        .minimum
        .iter()
        .enumerate()
        .filter(|(i, _)| grid.is_interior(*i, m))
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max);
    let hjb_residual_all = imp.minimum.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if !converged {
        log::warn!("policy iteration stopped after {iterations} iterations without converging");
    }
    let report = ConvergenceReport {
        converged,
        iterations,
        value_changes: changes,
        value_norms: norms,
        hjb_residual,
        hjb_residual_all,
        linear: eval.stats,
        tail_residual: eval.value.tail_residual(),
        interior_margin: m,
    };
    Ok(StationarySolution {
        value: eval.value,
        policy: imp.policy,
        report,
    })
}

/// Time discretisation for [`solve_finite_horizon`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum TimeStepping {
    /// `(I − Δt L) φᵏ = e^{−qΔt} φᵏ⁺¹ + (1 − e^{−qΔt})/q · f`: implicit in
    /// the generator, exact in the discount.
    #[default]
    ExponentialDiscount,
    /// `(I + Δt (q − L)) φᵏ = φᵏ⁺¹ + Δt f`.
    ImplicitEuler,
}

#[derive(Debug, Clone)]
pub struct FiniteHorizonSolution {
    /// `t_0 = 0 < … < t_n = T`.
    pub times: Vec<f64>,
    /// `values[k]` approximates `φ(t_k, ·)`.
    pub values: Vec<ValueField>,
    /// `policies[k]` is used on `[t_k, t_{k+1})`.
    pub policies: Vec<PolicyTable>,
    pub max_linear_residual: f64,
}

impl FiniteHorizonSolution {
    pub fn initial(&self) -> &ValueField {
        &self.values[0]
    }
}

/// Backward time stepping for `∂_t φ + inf_a {L^a φ − q φ + f} = 0`,
/// `φ(T, ·) = h`. Each step picks the policy that minimises the integrand at
/// the later time level, then solves one linear system.
pub fn solve_finite_horizon(
    prob: &HjbProblem,
    terminal: &dyn ScalarField,
    horizon: f64,
    n_steps: usize,
    grid: &Grid,
    stepping: TimeStepping,
    linear_tol: f64,
) -> Result<FiniteHorizonSolution> {
    check_grid(prob, grid)?;
    prob.validate()?;
    if !(horizon > 0.0) || n_steps == 0 {
        return Err(Error::Invalid("need a positive horizon and at least one step".into()));
    }
    if let Some(deg) = terminal.growth_degree() {
        if deg as f64 > prob.p {
            return Err(Error::Growth {
                field: deg,
                order: prob.p,
            });
        }
    }
    let ext = Arc::new(Extension::new(grid, prob.q_growth));
    let h: Vec<f64> = grid.points().map(|x| terminal.value(&x)).collect::<Result<_>>()?;
    if let Some(i) = h.iter().position(|v| *v < -1e-12) {
        return Err(Error::Invalid(format!("terminal value is negative at node {i}")));
    }
    let dt = horizon / n_steps as f64;
    let m = margin(grid, prob.q_growth);
    let mut values = vec![ValueField::with_extension(ext.clone(), h)?];
    let mut policies = Vec::with_capacity(n_steps);
    let mut max_res = 0.0f64;
    for _ in 0..n_steps {
        let next = values.last().expect("terminal value").values().to_vec();
        let imp = improve_with(&next, prob, grid, &ext)?;
        let actions = node_actions(prob, &imp.policy);
        let (rows, q, f) = assemble(prob, grid, &ext, &actions)?;
        let (diag, rhs): (Vec<f64>, Vec<f64>) = match stepping {
            TimeStepping::ImplicitEuler => (0..grid.len())
                .map(|i| (1.0 / dt + q[i], next[i] / dt + f[i]))
                .unzip(),
            TimeStepping::ExponentialDiscount => (0..grid.len())
                .map(|i| {
                    let decay = (-q[i] * dt).exp();
                    let weight = if q[i] != 0.0 { -(-q[i] * dt).exp_m1() / q[i] } else { dt };
                    (1.0 / dt, (decay * next[i] + weight * f[i]) / dt)
                })
                .unzip(),
        };
        let sys = System { rows, diag, rhs };
        let (vals, stats) = sys.solve(grid, m, linear_tol)?;
        max_res = max_res.max(stats.residual);
        values.push(ValueField::with_extension(ext.clone(), vals)?);
        policies.push(imp.policy);
    }
    values.reverse();
    policies.reverse();
    let times = (0..=n_steps).map(|k| k as f64 * dt).collect();
    Ok(FiniteHorizonSolution {
        times,
        values,
        policies,
        max_linear_residual: max_res,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppProbe {
    pub x: Vec<f64>,
    pub phi: f64,
    /// Monte Carlo estimate per trial policy.
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Index of the trial with the smallest estimate.
    pub best: usize,
    /// `min_trial E[...] − φ(x)`.
    pub residual: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppReport {
    pub t: f64,
    pub probes: Vec<DppProbe>,
    /// Signed residual of the probe with the largest `|residual|`.
    pub residual: f64,
    pub std_error: f64,
}

impl DppReport {
    /// Smallest `residual / SE` over the probes (`+∞` when every SE vanishes).
    pub fn min_z(&self) -> f64 {
        self.probes
            .iter()
            .map(|p| if p.std_error > 0.0 { p.residual / p.std_error } else if p.residual >= 0.0 { f64::INFINITY } else { f64::NEG_INFINITY })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Monte Carlo check of the dynamic programming identity
/// `φ(x) = inf_a E[∫₀ᵗ e^{−γ_s} f ds + e^{−γ_t} φ(X_t)]` at each probe state,
/// with the infimum taken over the `trials` policy set.
#[allow(clippy::too_many_arguments)]
pub fn dpp_residual(
    phi: Arc<dyn ScalarField>,
    prob: &HjbProblem,
    t: f64,
    trials: &[crate::dynamics::PolicyField],
    probes: &[Vec<f64>],
    n_paths: usize,
    seed: u64,
    dt: f64,
) -> Result<DppReport> {
    use crate::dynamics::{payoff_estimate, SimConfig, TailMode};
    if trials.is_empty() || probes.is_empty() {
        return Err(Error::Invalid("need at least one trial policy and one probe".into()));
    }
    if !(t >= 0.0) {
        return Err(Error::Invalid(format!("horizon must be nonnegative, got {t}")));
    }
    let mut out = Vec::with_capacity(probes.len());
    for x in probes {
        if x.len() != prob.dim {
            return Err(Error::Dimension {
                expected: prob.dim,
                got: x.len(),
            });
        }
        let v = phi.value(x)?;
        if t == 0.0 {
            out.push(DppProbe {
                x: x.clone(),
                phi: v,
                estimates: vec![v; trials.len()],
                std_errors: vec![0.0; trials.len()],
                best: 0,
                residual: 0.0,
                std_error: 0.0,
            });
            continue;
        }
        let mut cfg = SimConfig::new(x.clone(), t, dt.min(t), n_paths, seed).with_cost(prob.cost.clone(), prob.discount.clone());
        cfg.u = prob.u.clone();
        let tail = TailMode::Continuation(phi.clone());
        let ests = trials
            .iter()
            .map(|pol| payoff_estimate(pol, &cfg, &tail))
            .collect::<Result<Vec<_>>>()?;
        let best = (0..ests.len())
            .min_by(|a, b| ests[*a].estimate.total_cmp(&ests[*b].estimate))
            .expect("nonempty trials");
        out.push(DppProbe {
            x: x.clone(),
            phi: v,
            estimates: ests.iter().map(|e| e.estimate).collect(),
            std_errors: ests.iter().map(|e| e.std_error).collect(),
            best,
            residual: ests[best].estimate - v,
            std_error: ests[best].std_error,
        });
    }
    let worst = out
        .iter()
        .max_by(|a, b| a.residual.abs().total_cmp(&b.residual.abs()))
        .expect("nonempty probes");
    Ok(DppReport {
        t,
        residual: worst.residual,
        std_error: worst.std_error,
        probes: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Action;
    use crate::lq;
    use crate::problem::{ConstantDiscount, CostSpec, DriftLattice, FnCost, StateCost};
    use nalgebra::DVector;

    fn lq_problem(lattice: Option<DriftLattice>) -> HjbProblem {
        let cost = CostSpec {
            state: StateCost::Quadratic {
                matrix: vec![vec![1.0]],
            },
            drift_weight: Some(vec![vec![1.0]]),
            jump_rate_weight: 0.0,
        }
        .build(1)
        .unwrap();
        let set = match lattice {
            Some(l) => ActionSet::with_drift_lattice(vec![Action::scalar(1.0, 0.0)], l),
            None => ActionSet::finite(vec![Action::scalar(1.0, 0.0)]),
        };
        HjbProblem::new(set, Arc::new(cost), Arc::new(ConstantDiscount(3.0)), vec![0.0]).unwrap()
    }

    #[test]
    fn grid_rejects_coarse_axes() {
        assert!(Grid::uniform_1d(0.0, 1.0, 8).is_err());
        assert!(Grid::uniform_1d(1.0, 0.0, 32).is_err());
    }

    #[test]
    fn extension_reproduces_polynomials() {
        let grid = Grid::uniform_1d(-2.0, 2.0, 41).unwrap();
        let field = ValueField::from_fn(&grid, 2, |x| 1.0 + x[0] - 0.5 * x[0] * x[0]).unwrap();
        for x in [-5.0, -2.5, 3.7, 6.0] {
            let exact = 1.0 + x - 0.5 * x * x;
            assert!((field.at(&[x]) - exact).abs() < 1e-9, "x={x}");
        }
        assert!(field.tail_residual() < 1e-12);
        assert!(field.fitted_tail_degree(1e-8) <= 2);
    }

    #[test]
    fn extension_2d_tensor() {
        let grid = Grid::uniform_2d((-1.0, 1.0, 21), (-1.0, 1.0, 17)).unwrap();
        let field = ValueField::from_fn(&grid, 2, |x| x[0] * x[0] + x[0] * x[1]).unwrap();
        let v = field.at(&[1.5, 0.25]);
        assert!((v - (2.25 + 0.375)).abs() < 1e-9);
    }

    #[test]
    fn zero_cost_gives_zero_value() {
        let grid = Grid::uniform_1d(-3.0, 3.0, 41).unwrap();
        let prob = HjbProblem::new(
            ActionSet::finite(vec![Action::scalar(1.0, 0.5)]),
            Arc::new(CostSpec::zero().build(1).unwrap()),
            Arc::new(ConstantDiscount(1.0)),
            vec![0.0],
        )
        .unwrap();
        let pol = PolicyTable::uniform(&grid, &prob.actions, 0).unwrap();
        let eval = policy_evaluation(&pol, &prob, &grid, 1e-12).unwrap();
        assert!(eval.value.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_cost_gives_constant_value() {
        let grid = Grid::uniform_1d(-3.0, 3.0, 41).unwrap();
        let nu = crate::measures::JumpMeasure::atomic(1, vec![crate::measures::Atom::new(vec![1.3], 0.7)]).unwrap();
        let a = Action::new(DMatrix::from_element(1, 1, 0.8), nu, DVector::from_element(1, -0.3)).unwrap();
        let prob = HjbProblem::new(
            ActionSet::finite(vec![a]),
            Arc::new(CostSpec::constant(5.0).build(1).unwrap()),
            Arc::new(ConstantDiscount(2.0)),
            vec![0.1],
        )
        .unwrap();
        let pol = PolicyTable::uniform(&grid, &prob.actions, 0).unwrap();
        let eval = policy_evaluation(&pol, &prob, &grid, 1e-12).unwrap();
        for v in eval.value.values() {
            assert!((v - 2.5).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn lq_feedback_evaluation_matches_closed_form() {
        let grid = Grid::uniform_1d(-6.0, 6.0, 241).unwrap();
        let sol = lq::solve(&lq::LqSpec::scalar(1.0, 1.0, 3.0, 0.0, 1.0)).unwrap();
        let lattice = DriftLattice {
            lo: vec![-2.0],
            hi: vec![2.0],
            points: vec![81],
            refine: true,
        };
        let prob = lq_problem(Some(lattice));
        let pol = PolicyTable::from_drift(&grid, &prob.actions, 0, |x| {
            lq::optimal_feedback(x, &sol).iter().copied().collect()
        })
        .unwrap();
        let eval = policy_evaluation(&pol, &prob, &grid, 1e-12).unwrap();
        let mut worst = 0.0f64;
        for (x, v) in grid.points().zip(eval.value.values()) {
            if x[0].abs() <= 2.0 {
                worst = worst.max((v - sol.value(&x)).abs() / sol.value(&x).abs().max(1.0));
            }
        }
        assert!(worst < 1e-2, "{worst}");
    }

    #[test]
    fn singleton_solve_equals_evaluation() {
        let grid = Grid::uniform_1d(-4.0, 4.0, 81).unwrap();
        let prob = lq_problem(None);
        let sol = solve_stationary(&prob, &grid, &SolveOptions::default()).unwrap();
        let pol = PolicyTable::uniform(&grid, &prob.actions, 0).unwrap();
        let eval = policy_evaluation(&pol, &prob, &grid, 1e-12).unwrap();
        assert!(sol.report.converged);
        assert_eq!(sol.policy, pol);
        for (a, b) in sol.value.values().iter().zip(eval.value.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lq_lattice_solve_is_monotone_and_close() {
        let grid = Grid::uniform_1d(-6.0, 6.0, 201).unwrap();
        let lattice = DriftLattice {
            lo: vec![-2.5],
            hi: vec![2.5],
            points: vec![51],
            refine: true,
        };
        let prob = lq_problem(Some(lattice));
        let sol = solve_stationary(&prob, &grid, &SolveOptions::default()).unwrap();
        assert!(sol.report.converged);
        let norms = &sol.report.value_norms;
        for w in norms.windows(2).skip(1) {
            assert!(w[1] <= w[0] + 1e-8, "{norms:?}");
        }
        let exact = lq::solve(&lq::LqSpec::scalar(1.0, 1.0, 3.0, 0.0, 1.0)).unwrap();
        for (x, v) in grid.points().zip(sol.value.values()) {
            if x[0].abs() <= 2.0 {
                assert!((v - exact.value(&x)).abs() < 2e-2 * exact.value(&x).max(1.0));
            }
        }
        assert!(sol.report.hjb_residual < 1e-6, "{}", sol.report.hjb_residual);
    }

    #[test]
    fn increasing_cost_never_lowers_value() {
        let grid = Grid::uniform_1d(-4.0, 4.0, 81).unwrap();
        let base = vec![Action::scalar(1.0, 0.0), Action::scalar(0.5, -0.5), Action::scalar(0.5, 0.5)];
        let make = |eps: f64| {
            HjbProblem::new(
                ActionSet::finite(base.clone()),
                Arc::new(FnCost::new(2, move |x: &[f64], a: &Action| x[0] * x[0] + a.mu[0].abs() + eps)),
                Arc::new(ConstantDiscount(1.0)),
                vec![0.0],
            )
            .unwrap()
        };
        let lo = solve_stationary(&make(0.0), &grid, &SolveOptions::default()).unwrap();
        let hi = solve_stationary(&make(0.1), &grid, &SolveOptions::default()).unwrap();
        for (a, b) in lo.value.values().iter().zip(hi.value.values()) {
            assert!(b >= &(a - 1e-10));
        }
    }

    #[test]
    fn pure_discount_finite_horizon() {
        let grid = Grid::uniform_1d(-3.0, 3.0, 61).unwrap();
        let prob = HjbProblem::new(
            ActionSet::finite(vec![Action::scalar(1.0, 0.2)]),
            Arc::new(CostSpec::zero().build(1).unwrap()),
            Arc::new(ConstantDiscount(0.7)),
            vec![0.0],
        )
        .unwrap();
        let h = crate::generator::AnalyticField::constant(1, 2.0);
        let sol = solve_finite_horizon(&prob, &h, 3.0, 30, &grid, TimeStepping::ExponentialDiscount, 1e-12).unwrap();
        for (k, t) in sol.times.iter().enumerate() {
            let expect = 2.0 * (-0.7 * (3.0 - t)).exp();
            for v in sol.values[k].values() {
                assert!((v - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn implicit_euler_single_step_is_resolvent() {
        let grid = Grid::uniform_1d(-3.0, 3.0, 61).unwrap();
        let prob = lq_problem(None);
        let prob = HjbProblem {
            cost: Arc::new(CostSpec::zero().build(1).unwrap()),
            ..prob
        };
        let h = crate::generator::AnalyticField::polynomial(vec![1.0, 0.0, 1.0]);
        let dt = 0.5;
        let sol = solve_finite_horizon(&prob, &h, dt, 1, &grid, TimeStepping::ImplicitEuler, 1e-12).unwrap();
        let phi = sol.initial().values();
        let ext = Extension::new(&grid, prob.q_growth);
        let asm = Assembler::new(&prob, &grid, &ext);
        let a = prob.actions.action(0);
        let mut row = Vec::new();
        for (i, x) in grid.points().enumerate() {
            asm.row(i, &a, &mut row).unwrap();
            let lphi: f64 = row.iter().map(|(j, c)| c * phi[*j]).sum();
            let lhs = phi[i] + dt * (3.0 * phi[i] - lphi);
            assert!((lhs - (1.0 + x[0] * x[0])).abs() < 1e-9);
        }
    }

    #[test]
    fn large_system_uses_iterative_solver() {
        let grid = Grid::uniform_1d(-4.0, 4.0, DENSE_LIMIT + 101).unwrap();
        let prob = HjbProblem::new(
            ActionSet::finite(vec![Action::scalar(0.3, 0.0)]),
            Arc::new(CostSpec::polynomial(vec![0.0, 0.0, 1.0]).build(1).unwrap()),
            Arc::new(ConstantDiscount(1.0)),
            vec![0.0],
        )
        .unwrap();
        let pol = PolicyTable::uniform(&grid, &prob.actions, 0).unwrap();
        let eval = policy_evaluation(&pol, &prob, &grid, 1e-10).unwrap();
        assert!(eval.stats.iterations > 1);
        // ½σ²φ'' − φ + x² = 0 has polynomial solution x² + σ²
        for (x, v) in grid.points().zip(eval.value.values()) {
            assert!((v - (x[0] * x[0] + 0.09)).abs() < 1e-6, "{x:?} {v}");
        }
    }

    #[test]
    fn dpp_residual_on_lq_value() {
        use crate::dynamics::{ConstantPolicy, LinearFeedback, PolicyField};
        let prob = lq_problem(None);
        let sol = lq::solve(&lq::LqSpec::scalar(1.0, 1.0, 3.0, 0.0, 1.0)).unwrap();
        let phi: Arc<dyn ScalarField> = Arc::new(sol.value_field());
        let opt = PolicyField::new(LinearFeedback::from_lq(&sol, 1.0));
        let probes = vec![vec![-1.0], vec![0.5], vec![1.5]];
        let zero = dpp_residual(phi.clone(), &prob, 0.0, std::slice::from_ref(&opt), &probes, 10, 1, 0.01).unwrap();
        assert_eq!(zero.residual, 0.0);
        let rep = dpp_residual(phi.clone(), &prob, 0.5, &[opt], &probes, 4000, 7, 0.002).unwrap();
        for p in &rep.probes {
            assert!(p.residual.abs() <= 3.0 * p.std_error + 5e-3 * (1.0 + p.phi), "{p:?}");
        }
        let bad = PolicyField::new(ConstantPolicy(Action::scalar(1.0, 0.8)));
        let rep = dpp_residual(phi, &prob, 0.5, &[bad], &probes, 4000, 7, 0.002).unwrap();
        assert!(rep.min_z() >= -3.0, "{rep:?}");
        assert!(rep.probes.iter().any(|p| p.residual > 3.0 * p.std_error));
    }

}
