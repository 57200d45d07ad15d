//! Control problem data shared by the HJB solver, the simulator and the
//! verifiers: finite action sets, running costs and discount rates.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::action::{Action, ActionSpec, Jumps};
use crate::error::{Error, Result};
use crate::generator::poly_eval;
use crate::measures::matrix_from_rows;

/// Running cost `f(x, a) ≥ 0`.
pub trait CostFunction: Send + Sync {
    fn eval(&self, x: &[f64], a: &Action) -> f64;

    /// Polynomial growth degree in `x`.
    fn growth_degree(&self) -> u32;
}

/// Discount rate `q(x, a)` with declared bounds `0 < lower ≤ q ≤ upper`.
pub trait DiscountFunction: Send + Sync {
    fn eval(&self, x: &[f64], a: &Action) -> f64;
    fn lower_bound(&self) -> f64;
    fn upper_bound(&self) -> f64;
}

/// State part of a [`CostSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateCost {
    Zero,
    Constant { value: f64 },
    /// `xᵀ M x` (row-major `matrix`).
    Quadratic { matrix: Vec<Vec<f64>> },
    /// `Σ coeffs[k] x₀^k` for one-dimensional states.
    Polynomial { coeffs: Vec<f64> },
}

/// `f(x, a) = state(x) + μᵀΘμ + κ · (nominal jump rate of a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub state: StateCost,
    #[serde(default)]
    pub drift_weight: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub jump_rate_weight: f64,
}

impl CostSpec {
    pub fn zero() -> Self {
        Self::state_only(StateCost::Zero)
    }

    pub fn constant(value: f64) -> Self {
        Self::state_only(StateCost::Constant { value })
    }

    pub fn polynomial(coeffs: Vec<f64>) -> Self {
        Self::state_only(StateCost::Polynomial { coeffs })
    }

    pub fn state_only(state: StateCost) -> Self {
        Self {
            state,
            drift_weight: None,
            jump_rate_weight: 0.0,
        }
    }

    pub fn build(&self, dim: usize) -> Result<CompiledCost> {
        let state = match &self.state {
            StateCost::Zero => CompiledState::Constant(0.0),
            StateCost::Constant { value } => {
                if !(*value >= 0.0) {
                    return Err(Error::Invalid(format!("running cost must be non-negative, got {value}")));
                }
                CompiledState::Constant(*value)
            }
            StateCost::Quadratic { matrix } => {
                let m = matrix_from_rows(matrix, dim)?;
                if nalgebra::SymmetricEigen::new((&m + m.transpose()) * 0.5).eigenvalues.min() < -1e-12 {
                    return Err(Error::Invalid("quadratic state cost must be positive semidefinite".into()));
                }
                CompiledState::Quadratic(m)
            }
            StateCost::Polynomial { coeffs } => {
                if dim != 1 {
                    return Err(Error::Invalid("polynomial state cost is one-dimensional".into()));
                }
                CompiledState::Polynomial(coeffs.clone())
            }
        };
        let drift_weight = match &self.drift_weight {
            Some(rows) => Some(matrix_from_rows(rows, dim)?),
            None => None,
        };
        if !(self.jump_rate_weight >= 0.0) {
            return Err(Error::Invalid("jump_rate_weight must be non-negative".into()));
        }
        Ok(CompiledCost {
            state,
            drift_weight,
            jump_rate_weight: self.jump_rate_weight,
        })
    }
}

#[derive(Debug, Clone)]
enum CompiledState {
    Constant(f64),
    Quadratic(DMatrix<f64>),
    Polynomial(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct CompiledCost {
    state: CompiledState,
    drift_weight: Option<DMatrix<f64>>,
    jump_rate_weight: f64,
}

impl CompiledCost {
    pub fn state_cost(&self, x: &[f64]) -> f64 {
        match &self.state {
            CompiledState::Constant(c) => *c,
            CompiledState::Quadratic(m) => {
                let v = DVector::from_column_slice(x);
                (v.transpose() * m * &v)[(0, 0)]
            }
            CompiledState::Polynomial(c) => poly_eval(c, x[0]),
        }
    }
}

impl CostFunction for CompiledCost {
    fn eval(&self, x: &[f64], a: &Action) -> f64 {
        let mut v = self.state_cost(x);
        if let Some(w) = &self.drift_weight {
            v += (a.mu.transpose() * w * &a.mu)[(0, 0)];
        }
        if self.jump_rate_weight != 0.0 {
            v += self.jump_rate_weight * a.max_jump_rate();
        }
        v
    }

    fn growth_degree(&self) -> u32 {
        match &self.state {
            CompiledState::Constant(_) => 0,
            CompiledState::Quadratic(_) => 2,
            CompiledState::Polynomial(c) => c.iter().rposition(|v| *v != 0.0).unwrap_or(0) as u32,
        }
    }
}

/// Closure-backed running cost.
pub struct FnCost<F> {
    f: F,
    degree: u32,
}

impl<F> FnCost<F>
where
    F: Fn(&[f64], &Action) -> f64 + Send + Sync,
{
    pub fn new(degree: u32, f: F) -> Self {
        Self { f, degree }
    }
}

impl<F> CostFunction for FnCost<F>
where
    F: Fn(&[f64], &Action) -> f64 + Send + Sync,
{
    fn eval(&self, x: &[f64], a: &Action) -> f64 {
        (self.f)(x, a)
    }

    fn growth_degree(&self) -> u32 {
        self.degree
    }
}

/// Constant discount rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantDiscount(pub f64);

impl DiscountFunction for ConstantDiscount {
    fn eval(&self, _x: &[f64], _a: &Action) -> f64 {
        self.0
    }

    fn lower_bound(&self) -> f64 {
        self.0
    }

    fn upper_bound(&self) -> f64 {
        self.0
    }
}

/// Uniform drift lattice `μ ∈ ∏ linspace(lo_k, hi_k, points_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct DriftLattice {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: Vec<usize>,
    /// Refine the lattice argmin with a local parabola per axis.
    #[serde(default = "default_true")]
    pub refine: bool,
}

fn default_true() -> bool {
    true
}

impl DriftLattice {
    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        if self.points[axis] > 1 {
            (self.hi[axis] - self.lo[axis]) / (self.points[axis] - 1) as f64
        } else {
            0.0
        }
    }

    /// Multi-index of flat lattice index `k` (last axis fastest).
    pub fn multi_index(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for axis in (0..self.dim()).rev() {
            idx[axis] = k % self.points[axis];
            k /= self.points[axis];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.points).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn point(&self, k: usize) -> Vec<f64> {
        self.multi_index(k)
            .iter()
            .enumerate()
            .map(|(axis, &i)| self.lo[axis] + i as f64 * self.spacing(axis))
            .collect()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.lo.len() != dim || self.hi.len() != dim || self.points.len() != dim {
            return Err(Error::Invalid("drift lattice dimension mismatch".into()));
        }
        if self.points.contains(&0) {
            return Err(Error::Invalid("drift lattice needs at least one point per axis".into()));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::Invalid("drift lattice has lo > hi".into()));
        }
        Ok(())
    }
}

/// Finite action family: a list of base actions, optionally crossed with a
/// drift lattice (the lattice point is added to each base drift).
#[derive(Debug, Clone)]
pub struct ActionSet {
    pub base: Vec<Action>,
    pub drift_lattice: Option<DriftLattice>,
}

impl ActionSet {
    pub fn finite(base: Vec<Action>) -> Self {
        Self {
            base,
            drift_lattice: None,
        }
    }

    pub fn with_drift_lattice(base: Vec<Action>, lattice: DriftLattice) -> Self {
        Self {
            base,
            drift_lattice: Some(lattice),
        }
    }

    pub fn lattice_len(&self) -> usize {
        self.drift_lattice.as_ref().map_or(1, |l| l.len())
    }

    pub fn len(&self) -> usize {
        self.base.len() * self.lattice_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drift of action `(base, lattice)` before refinement.
    pub fn drift(&self, base: usize, lattice: Option<usize>) -> DVector<f64> {
        let mut mu = self.base[base].mu.clone();
        if let (Some(l), Some(k)) = (&self.drift_lattice, lattice) {
            for (m, p) in mu.iter_mut().zip(l.point(k)) {
                *m += p;
            }
        }
        mu
    }

    /// Splits a flat action index into `(base, lattice)`.
    pub fn split(&self, index: usize) -> (usize, Option<usize>) {
        match &self.drift_lattice {
            Some(l) => (index / l.len(), Some(index % l.len())),
            None => (index, None),
        }
    }

    pub fn action(&self, index: usize) -> Action {
        let (b, k) = self.split(index);
        self.base[b].with_mu(self.drift(b, k))
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.base.is_empty() {
            return Err(Error::Invalid("empty action set".into()));
        }
        for (i, a) in self.base.iter().enumerate() {
            if a.dim() != dim {
                return Err(Error::Invalid(format!("action {i} has dimension {}, expected {dim}", a.dim())));
            }
            if let Jumps::Measure(nu) = &a.jumps {
                nu.moment_functional(2.0)?;
            }
        }
        if let Some(l) = &self.drift_lattice {
            l.validate(dim)?;
        }
        Ok(())
    }
}

/// Stationary or finite-horizon control problem.
#[derive(Clone)]
pub struct HjbProblem {
    pub dim: usize,
    pub actions: ActionSet,
    pub cost: Arc<dyn CostFunction>,
    pub discount: Arc<dyn DiscountFunction>,
    pub u: Vec<f64>,
    /// Ambient moment order `p ≥ 2`.
    pub p: f64,
    /// Polynomial degree used for the tail extension of value fields.
    pub q_growth: u32,
}

impl fmt::Debug for HjbProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HjbProblem")
            .field("dim", &self.dim)
            .field("actions", &self.actions.len())
            .field("u", &self.u)
            .field("p", &self.p)
            .field("q_growth", &self.q_growth)
            .finish()
    }
}

impl HjbProblem {
    pub fn new(
        actions: ActionSet,
        cost: Arc<dyn CostFunction>,
        discount: Arc<dyn DiscountFunction>,
        u: Vec<f64>,
    ) -> Result<Self> {
        let dim = u.len();
        let q_growth = cost.growth_degree();
        let prob = Self {
            dim,
            actions,
            cost,
            discount,
            u,
            p: (q_growth as f64).max(2.0),
            q_growth,
        };
        prob.validate()?;
        Ok(prob)
    }

    pub fn with_moment_order(mut self, p: f64) -> Result<Self> {
        self.p = p;
        self.validate()?;
        Ok(self)
    }

    pub fn with_q_growth(mut self, q: u32) -> Self {
        self.q_growth = q;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.actions.validate(self.dim)?;
        let lower = self.discount.lower_bound();
        if !(lower > 0.0) {
            return Err(Error::Invalid(format!(
                "discount lower bound must be positive, got {lower}"
            )));
        }
        if self.discount.upper_bound() < lower {
            return Err(Error::Invalid("discount bounds are inverted".into()));
        }
        if !(self.p >= 2.0) {
            return Err(Error::Invalid(format!("moment order p={} must be >= 2", self.p)));
        }
        if self.q_growth as f64 > self.p {
            return Err(Error::Growth {
                field: self.q_growth,
                order: self.p,
            });
        }
        Ok(())
    }
}

/// Configuration form of [`HjbProblem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub actions: Vec<ActionSpec>,
    #[serde(default)]
    pub drift_lattice: Option<DriftLattice>,
    pub cost: CostSpec,
    pub discount: f64,
    #[serde(default)]
    pub u: Option<Vec<f64>>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub q_growth: Option<u32>,
}

impl ProblemConfig {
    pub fn build(&self) -> Result<HjbProblem> {
        let first = self
            .actions
            .first()
            .ok_or_else(|| Error::Invalid("actions: empty action set".into()))?;
        let dim = first.mu.len();
        let base = self
            .actions
            .iter()
            .enumerate()
            .map(|(i, a)| a.build().map_err(|e| Error::Invalid(format!("actions[{i}]: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let actions = ActionSet {
            base,
            drift_lattice: self.drift_lattice.clone(),
        };
        let cost = self
            .cost
            .build(dim)
            .map_err(|e| Error::Invalid(format!("cost: {e}")))?;
        let u = self.u.clone().unwrap_or_else(|| vec![0.0; dim]);
        let mut prob = HjbProblem::new(actions, Arc::new(cost), Arc::new(ConstantDiscount(self.discount)), u)?;
        if let Some(q) = self.q_growth {
            prob.q_growth = q;
        }
        if let Some(p) = self.p {
            prob.p = p;
        }
        prob.validate()?;
        Ok(prob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_indexing() {
        let l = DriftLattice {
            lo: vec![-1.0, 0.0],
            hi: vec![1.0, 2.0],
            points: vec![3, 5],
            refine: false,
        };
        assert_eq!(l.len(), 15);
        for k in 0..15 {
            assert_eq!(l.flat_index(&l.multi_index(k)), k);
        }
        assert_eq!(l.point(7), vec![0.0, 1.0]);
    }

    #[test]
    fn cost_terms() {
        let spec = CostSpec {
            state: StateCost::Quadratic {
                matrix: vec![vec![2.0]],
            },
            drift_weight: Some(vec![vec![3.0]]),
            jump_rate_weight: 0.5,
        };
        let c = spec.build(1).unwrap();
        let a = Action::reset(DMatrix::identity(1, 1), vec![0.0], 1.0, DVector::from_element(1, 2.0)).unwrap();
        assert_eq!(c.eval(&[1.5], &a), 2.0 * 2.25 + 3.0 * 4.0 + 0.5);
        assert_eq!(c.growth_degree(), 2);
    }

    #[test]
    fn zero_discount_is_rejected() {
        let err = HjbProblem::new(
            ActionSet::finite(vec![Action::scalar(1.0, 0.0)]),
            Arc::new(CostSpec::zero().build(1).unwrap()),
            Arc::new(ConstantDiscount(0.0)),
            vec![0.0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn empty_action_set_is_rejected() {
        let err = HjbProblem::new(
            ActionSet::finite(vec![]),
            Arc::new(CostSpec::zero().build(1).unwrap()),
            Arc::new(ConstantDiscount(1.0)),
            vec![0.0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }
}
