//! Turns run-file sections into solver inputs, caching the expensive ones.

use std::cell::OnceCell;
use std::sync::Arc;

use anyhow::{anyhow, bail, Result};
use nalgebra::{DMatrix, DVector};

use jumpctl::dynamics::{LinearFeedback, PolicyField, SimConfig, TablePolicy};
use jumpctl::generator::{apply_generator, AnalyticField, GeneratorScheme, ScalarField};
use jumpctl::hjb::{solve_stationary, Grid, SolveOptions, StationarySolution};
use jumpctl::lq::{self, LqSolution};
use jumpctl::measures::matrix_from_rows;
use jumpctl::problem::{ConstantDiscount, CostFunction, CostSpec, DiscountFunction, HjbProblem, StateCost};

use crate::config::{CostSource, FieldSpec, PolicySpec, RunFile, SimulationSpec};

/// Prefixes a core error with the run-file section it came from.
pub fn scoped(section: &str, e: jumpctl::Error) -> anyhow::Error {
    match e {
        jumpctl::Error::Invalid(msg) if msg.contains(':') => anyhow!("{section}.{msg}"),
        e => anyhow::Error::new(e).context(format!("in `{section}`")),
    }
}

type CostPair = (Arc<dyn CostFunction>, Arc<dyn DiscountFunction>);

pub struct Context<'a> {
    pub run: &'a RunFile,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    problem: OnceCell<HjbProblem>,
    grid: OnceCell<Grid>,
    lq: OnceCell<LqSolution>,
    stationary: OnceCell<StationarySolution>,
}

impl<'a> Context<'a> {
    pub fn new(run: &'a RunFile, tol: Option<f64>, seed: Option<u64>) -> Self {
        Self {
            run,
            tol,
            seed,
            problem: OnceCell::new(),
            grid: OnceCell::new(),
            lq: OnceCell::new(),
            stationary: OnceCell::new(),
        }
    }

    pub fn problem(&self) -> Result<&HjbProblem> {
        if let Some(p) = self.problem.get() {
            return Ok(p);
        }
        let cfg = self.run.problem.as_ref().ok_or_else(|| anyhow!("missing `problem` section"))?;
        let p = cfg.build().map_err(|e| scoped("problem", e))?;
        Ok(self.problem.get_or_init(|| p))
    }

    pub fn grid(&self) -> Result<&Grid> {
        if let Some(g) = self.grid.get() {
            return Ok(g);
        }
        let axes = self.run.grid.as_ref().ok_or_else(|| anyhow!("missing `grid` section"))?;
        let g = Grid::new(axes.clone()).map_err(|e| scoped("grid", e))?;
        Ok(self.grid.get_or_init(|| g))
    }

    pub fn grid_or(&self, lo: f64, hi: f64, nodes: usize) -> Result<Grid> {
        match &self.run.grid {
            Some(_) => Ok(self.grid()?.clone()),
            None => Ok(Grid::uniform_1d(lo, hi, nodes)?),
        }
    }

    pub fn solve_options(&self) -> SolveOptions {
        let mut o = self.run.solver.unwrap_or_default();
        if let Some(t) = self.tol {
            o.tol = t;
        }
        o
    }

    pub fn lq(&self) -> Result<&LqSolution> {
        if let Some(s) = self.lq.get() {
            return Ok(s);
        }
        let cfg = self.run.lq.as_ref().ok_or_else(|| anyhow!("missing `lq` section"))?;
        let spec = cfg.build().map_err(|e| scoped("lq", e))?;
        let sol = lq::solve(&spec)?;
        Ok(self.lq.get_or_init(|| sol))
    }

    pub fn stationary(&self) -> Result<&StationarySolution> {
        if let Some(s) = self.stationary.get() {
            return Ok(s);
        }
        let sol = solve_stationary(self.problem()?, self.grid()?, &self.solve_options())?;
        if !sol.report.converged {
            log::warn!("stationary solve did not converge; using the last iterate");
        }
        Ok(self.stationary.get_or_init(|| sol))
    }

    pub fn simulation(&self) -> Result<&SimulationSpec> {
        self.run.simulation.as_ref().ok_or_else(|| anyhow!("missing `simulation` section"))
    }

    pub fn seed(&self) -> u64 {
        self.seed
            .or_else(|| self.run.simulation.as_ref().map(|s| s.seed))
            .unwrap_or(0)
    }

    pub fn policy(&self, spec: &PolicySpec) -> Result<PolicyField> {
        Ok(match spec {
            PolicySpec::Constant { action } => {
                PolicyField::constant(action.build().map_err(|e| anyhow!("simulation.policy.action: {e}"))?)
            }
            PolicySpec::Linear { base, gain, offset } => {
                let base = base.build().map_err(|e| anyhow!("simulation.policy.base: {e}"))?;
                let n = base.dim();
                if offset.len() != n {
                    bail!("simulation.policy.offset: expected {n} entries, got {}", offset.len());
                }
                let gain = matrix_from_rows(gain, n).map_err(|e| anyhow!("simulation.policy.gain: {e}"))?;
                PolicyField::new(LinearFeedback::new(base, gain, DVector::from_vec(offset.clone())))
            }
            PolicySpec::LqFeedback { scale } => PolicyField::new(LinearFeedback::from_lq(self.lq()?, *scale)),
            PolicySpec::Solved => {
                let sol = self.stationary()?;
                PolicyField::new(TablePolicy::new(sol.policy.clone(), self.problem()?.actions.clone())?)
            }
        })
    }

    pub fn field(&self, spec: &FieldSpec, dim: usize) -> Result<Arc<dyn ScalarField>> {
        let one_d = |name: &str| {
            if dim == 1 {
                Ok(())
            } else {
                Err(anyhow!("{name} fields are one-dimensional, state has dimension {dim}"))
            }
        };
        Ok(match spec {
            FieldSpec::Zero => Arc::new(AnalyticField::constant(dim, 0.0)),
            FieldSpec::Polynomial { coeffs } => {
                one_d("polynomial")?;
                Arc::new(AnalyticField::polynomial(coeffs.clone()))
            }
            FieldSpec::Quadratic { matrix, linear, constant } => {
                let m = matrix_from_rows(matrix, dim)?;
                let b = match linear {
                    Some(b) if b.len() == dim => DVector::from_vec(b.clone()),
                    Some(b) => bail!("quadratic field: linear term has {} entries, expected {dim}", b.len()),
                    None => DVector::zeros(dim),
                };
                Arc::new(AnalyticField::quadratic(m, b, *constant))
            }
            FieldSpec::PolyExp { coeffs, amplitude, rate } => {
                one_d("poly_exp")?;
                Arc::new(poly_exp(coeffs.clone(), *amplitude, *rate))
            }
            FieldSpec::Bump { center, radius } => {
                one_d("bump")?;
                if !(*radius > 0.0) {
                    bail!("bump radius must be positive");
                }
                Arc::new(bump(*center, *radius))
            }
            FieldSpec::Lq => Arc::new(self.lq()?.value_field()),
            FieldSpec::Solved => Arc::new(self.stationary()?.value.clone()),
        })
    }

    pub fn cost(&self, source: CostSource) -> Result<Option<CostPair>> {
        Ok(match source {
            CostSource::None => None,
            CostSource::Problem => {
                let p = self.problem()?;
                Some((p.cost.clone(), p.discount.clone()))
            }
            CostSource::Lq => {
                let sol = self.lq()?;
                let cost = lq_cost(sol).build(sol.dim())?;
                Some((Arc::new(cost), Arc::new(ConstantDiscount(sol.discount))))
            }
        })
    }

    /// Simulation settings plus the policy they drive.
    pub fn sim_config(&self, spec: &SimulationSpec) -> Result<(PolicyField, SimConfig)> {
        let mut policy = self.policy(&spec.policy)?;
        if let Some(c) = spec.certificate {
            policy = policy.with_certificate(c.k, c.p);
        }
        let mut cfg = SimConfig::new(spec.x0.clone(), spec.horizon, spec.dt, spec.n_paths, self.seed())
            .with_record_every(spec.record_every);
        if spec.characteristics {
            cfg = cfg.with_characteristics();
        }
        cfg.jump_bins = spec.jump_bins.clone();
        cfg.moment_orders = spec.moment_orders.clone();
        cfg.jump_rate_bound = spec.jump_rate_bound;
        if let Some(u) = &spec.u {
            cfg.u = u.clone();
        } else if spec.cost == CostSource::Problem {
            cfg.u = self.problem()?.u.clone();
        }
        if let Some((c, d)) = self.cost(spec.cost)? {
            cfg = cfg.with_cost(c, d);
        }
        Ok((policy, cfg))
    }
}

/// Adds `∫ L^a g ds` observers for the given test functions.
pub fn with_generator_observers(mut cfg: SimConfig, fields: &[Arc<dyn ScalarField>]) -> SimConfig {
    let u = cfg.u.clone();
    for g in fields {
        let g = g.clone();
        let u = u.clone();
        let scheme = GeneratorScheme::default();
        cfg = cfg.with_observer(move |x, a| apply_generator(a, g.as_ref(), x, &u, &scheme).unwrap_or(f64::NAN));
    }
    cfg
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub fn lq_cost(sol: &LqSolution) -> CostSpec {
    CostSpec {
        state: StateCost::Quadratic { matrix: rows(&sol.lambda) },
        drift_weight: Some(rows(&sol.theta)),
        jump_rate_weight: 0.0,
    }
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, v| acc * x + v)
}

fn poly_diff(c: &[f64]) -> Vec<f64> {
    c.iter().enumerate().skip(1).map(|(k, v)| k as f64 * v).collect()
}

fn poly_exp(coeffs: Vec<f64>, amp: f64, rate: f64) -> AnalyticField {
    let d1 = poly_diff(&coeffs);
    let d2 = poly_diff(&d1);
    let c0 = coeffs.clone();
    AnalyticField::new(1, move |x| poly_eval(&c0, x[0]) + amp * (rate * x[0]).exp())
        .with_gradient(move |x| vec![poly_eval(&d1, x[0]) + amp * rate * (rate * x[0]).exp()])
        .with_hessian(move |x| DMatrix::from_element(1, 1, poly_eval(&d2, x[0]) + amp * rate * rate * (rate * x[0]).exp()))
}

fn bump(center: f64, radius: f64) -> AnalyticField {
    let s_of = move |x: &[f64]| (x[0] - center) / radius;
    AnalyticField::new(1, move |x| {
        let s = s_of(x);
        if s.abs() >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - s * s)).exp()
        }
    })
    .with_gradient(move |x| {
        let s = s_of(x);
        if s.abs() >= 1.0 {
            return vec![0.0];
        }
        let w = 1.0 - s * s;
        vec![(-1.0 / w).exp() * (-2.0 * s / (w * w)) / radius]
    })
    .with_hessian(move |x| {
        let s = s_of(x);
        if s.abs() >= 1.0 {
            return DMatrix::zeros(1, 1);
        }
        let w = 1.0 - s * s;
        let v = (-1.0 / w).exp() * (6.0 * s.powi(4) - 2.0) / w.powi(4) / (radius * radius);
        DMatrix::from_element(1, 1, v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_derivatives(f: &AnalyticField, x: f64) {
        let h = 1e-4;
        let v = |t: f64| f.value(&[t]).unwrap();
        let d1 = (v(x + h) - v(x - h)) / (2.0 * h);
        let d2 = (v(x + h) - 2.0 * v(x) + v(x - h)) / (h * h);
        let g = f.gradient(&[x]).unwrap().unwrap()[0];
        let hs = f.hessian(&[x]).unwrap().unwrap()[(0, 0)];
        assert!((g - d1).abs() <= 1e-6 * (1.0 + g.abs()), "x={x}: {g} vs {d1}");
        assert!((hs - d2).abs() <= 1e-4 * (1.0 + hs.abs()), "x={x}: {hs} vs {d2}");
    }

    #[test]
    fn poly_exp_derivatives() {
        let f = poly_exp(vec![1.0, 0.0, 1.0], 1.0, 2f64.sqrt());
        for x in [-2.0, -0.3, 0.0, 0.7, 1.9] {
            check_derivatives(&f, x);
        }
        assert_eq!(f.value(&[0.0]).unwrap(), 2.0);
    }

    #[test]
    fn bump_is_smooth_and_compactly_supported() {
        let f = bump(0.5, 1.5);
        for x in [-0.8, -0.2, 0.5, 1.1, 1.7] {
            check_derivatives(&f, x);
        }
        assert_eq!(f.value(&[2.0]).unwrap(), 0.0);
        assert_eq!(f.value(&[-1.0]).unwrap(), 0.0);
    }

    #[test]
    fn scoped_errors_name_the_section() {
        let e = scoped("problem", jumpctl::Error::Invalid("actions[2]: bad".into()));
        assert_eq!(e.to_string(), "problem.actions[2]: bad");
        let e = scoped("grid", jumpctl::Error::Dimension { expected: 1, got: 2 });
        assert!(format!("{e:#}").starts_with("in `grid`"));
    }
}
