//! Reference solutions for two one-dimensional problems with jump controls.
//!
//! *Jump to the origin.* With unit dispersion and jump measures `ν = m δ_{−x}`,
//! `m ∈ [0, 1]`, the optimal control jumps to zero at full rate. The value is
//! `V = ψ + ψ(0)/q` where `ψ` is the polynomial-growth solution of
//! `½ψ″ − (q+1)ψ + f = 0`.
//!
//! *Costly jumps.* Jumping to zero at rate one costs `κ` per unit time. The
//! value `φ_b` solves `½φ″ − qφ + f = 0` on `(−b, b)` and
//! `½φ″ − (q+1)φ + f + κ + φ(0) = 0` outside, and the free boundary `b̂` is
//! pinned by `φ_b̂(b̂) − φ_b̂(0) = κ`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::error::{Error, Result};
use crate::generator::{poly_derivative, poly_eval, ScalarField};
use crate::hjb::{Grid, ValueField};
use crate::problem::{ActionSet, ConstantDiscount, CostSpec, HjbProblem};

/// Polynomial solution `P` of `½P″ − rP + f = 0`.
pub fn particular_polynomial(f: &[f64], r: f64) -> Vec<f64> {
    let mut out = vec![0.0; f.len().max(1)];
    let mut term: Vec<f64> = f.iter().map(|c| c / r).collect();
    while !term.is_empty() && term.iter().any(|c| *c != 0.0) {
        for (o, t) in out.iter_mut().zip(&term) {
            *o += t;
        }
        term = poly_derivative(&poly_derivative(&term))
            .into_iter()
            .map(|c| c / (2.0 * r))
            .collect();
    }
    out
}

fn degree(coeffs: &[f64]) -> u32 {
    coeffs.iter().rposition(|c| *c != 0.0).unwrap_or(0) as u32
}

/// Symmetric convex polynomial running cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct Example1Spec {
    /// `f(x) = Σ coeffs[k] x^k`.
    pub coeffs: Vec<f64>,
    pub q: f64,
    /// Uniform bound on `∫|y|² ν(dy)` over the measure class, if known.
    #[serde(default)]
    pub beta: Option<f64>,
}

impl Example1Spec {
    pub fn new(coeffs: Vec<f64>, q: f64) -> Result<Self> {
        let spec = Self { coeffs, q, beta: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_cost(&self.coeffs)?;
        if !(self.q > 0.0) {
            return Err(Error::Invalid(format!("q={} must be positive", self.q)));
        }
        Ok(())
    }

    pub fn f(&self, x: f64) -> f64 {
        poly_eval(&self.coeffs, x)
    }
}

fn check_cost(coeffs: &[f64]) -> Result<()> {
    if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Invalid("cost polynomial needs finite coefficients".into()));
    }
    let h = 0.05;
    for i in 0..=200 {
        let x = i as f64 * h;
        let (fp, fm) = (poly_eval(coeffs, x), poly_eval(coeffs, -x));
        if (fp - fm).abs() > 1e-10 * (1.0 + fp.abs()) {
            return Err(Error::Invalid(format!("cost is not symmetric at x={x}")));
        }
        if fp < 0.0 {
            return Err(Error::Invalid(format!("cost is negative at x={x}")));
        }
        let d2 = poly_eval(coeffs, x + h) - 2.0 * fp + poly_eval(coeffs, x - h);
        if d2 < -1e-10 * (1.0 + fp.abs()) {
            return Err(Error::Invalid(format!("cost is not convex near x={x}")));
        }
    }
    Ok(())
}

/// Solves `½ψ″ − (q+1)ψ + f = 0` on a 1-D grid with Numerov's scheme and the
/// particular polynomial imposed at both ends, which removes the exponential
/// modes `e^{±√(2(q+1))x}`.
pub fn example1_psi(spec: &Example1Spec, grid: &Grid) -> Result<ValueField> {
    spec.validate()?;
    if grid.dim() != 1 {
        return Err(Error::Invalid("example grids are one-dimensional".into()));
    }
    let r = spec.q + 1.0;
    let p = particular_polynomial(&spec.coeffs, r);
    let n = grid.len();
    let h = grid.spacing(0);
    let xs: Vec<f64> = grid.points().map(|x| x[0]).collect();
    // ψ″ = 2rψ − 2f; Numerov: ψ_{i+1} − 2ψ_i + ψ_{i−1} = h²/12 (g_{i+1} + 10g_i + g_{i−1})
    let c = h * h / 12.0;
    let off = 1.0 - c * 2.0 * r;
    let diag = -2.0 - 10.0 * c * 2.0 * r;
    let mut rhs: Vec<f64> = (1..n - 1)
        .map(|i| -c * 2.0 * (spec.f(xs[i + 1]) + 10.0 * spec.f(xs[i]) + spec.f(xs[i - 1])))
        .collect();
    let left = poly_eval(&p, xs[0]);
    let right = poly_eval(&p, xs[n - 1]);
    rhs[0] -= off * left;
    let last = rhs.len() - 1;
    rhs[last] -= off * right;
    let inner = thomas(off, diag, &rhs);
    let mut values = Vec::with_capacity(n);
    values.push(left);
    values.extend(inner);
    values.push(right);

    // tail-mode check: project ψ − P onto the two exponential modes
    let k = (2.0 * r).sqrt();
    let dev: Vec<f64> = xs.iter().zip(&values).map(|(x, v)| v - poly_eval(&p, *x)).collect();
    let basis = DMatrix::from_fn(n, 2, |i, j| match j {
        0 => (k * (xs[i] - xs[n - 1])).exp(),
        _ => (-k * (xs[i] - xs[0])).exp(),
    });
    let coef = (basis.transpose() * &basis)
        .lu()
        .solve(&(basis.transpose() * DVector::from_vec(dev)))
        .unwrap_or_else(|| DVector::zeros(2));
    let scale = 1.0 + values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if coef.amax() > 1e-6 * scale {
        return Err(Error::Boundary(format!(
            "exponential tail modes with coefficients {:?}",
            coef.as_slice()
        )));
    }
    ValueField::new(grid, values, degree(&spec.coeffs))
}

/// Constant-coefficient tridiagonal solve.
fn thomas(off: f64, diag: f64, rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = off / diag;
    d[0] = rhs[0] / diag;
    for i in 1..n {
        let m = diag - off * c[i - 1];
        c[i] = off / m;
        d[i] = (rhs[i] - off * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Value of the jump-to-origin problem and its optimal action.
#[derive(Debug, Clone)]
pub struct Example1Value {
    pub value: ValueField,
    pub psi0: f64,
    /// Unit dispersion, jump to zero at rate one.
    pub policy: Action,
}

/// `V = ψ + ψ(0)/q`.
pub fn example1_value(psi: &ValueField, q: f64) -> Result<Example1Value> {
    if !(q > 0.0) {
        return Err(Error::Invalid(format!("q={q} must be positive")));
    }
    let psi0 = psi.at(&[0.0]);
    let c = psi0 / q;
    let values = psi.values().iter().map(|v| v + c).collect();
    Ok(Example1Value {
        value: ValueField::new(psi.grid(), values, psi.q_growth())?,
        psi0,
        policy: jump_to_origin(1.0),
    })
}

/// Unit dispersion with jumps to the origin at `rate`.
pub fn jump_to_origin(rate: f64) -> Action {
    Action::reset(DMatrix::identity(1, 1), vec![0.0], rate, DVector::zeros(1))
        .expect("valid one-dimensional reset action")
}

/// The jump-to-origin problem for the general solver: actions
/// `{no jumps, ν = δ_{−x}}`, unit dispersion, cost `f`, discount `q`.
pub fn example1_problem(spec: &Example1Spec) -> Result<HjbProblem> {
    spec.validate()?;
    let actions = ActionSet::finite(vec![Action::scalar(1.0, 0.0), jump_to_origin(1.0)]);
    let cost = CostSpec::polynomial(spec.coeffs.clone()).build(1)?;
    HjbProblem::new(actions, Arc::new(cost), Arc::new(ConstantDiscount(spec.q)), vec![0.0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct Example2Spec {
    pub coeffs: Vec<f64>,
    pub q: f64,
    pub kappa: f64,
}

impl Example2Spec {
    pub fn new(coeffs: Vec<f64>, q: f64, kappa: f64) -> Result<Self> {
        let spec = Self { coeffs, q, kappa };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_cost(&self.coeffs)?;
        if degree(&self.coeffs) < 2 {
            return Err(Error::Invalid("cost polynomial must have degree at least 2".into()));
        }
        if !(self.q > 0.0) {
            return Err(Error::Invalid(format!("q={} must be positive", self.q)));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Invalid(format!("kappa={} must be non-negative", self.kappa)));
        }
        Ok(())
    }
}

/// Closed-form `φ_b`: `P_q + A cosh(kx)/cosh(kb)` for `|x| < b` and
/// `P_{q+1} + (κ + φ(0))/(q+1) + C e^{−k'(|x|−b)}` beyond.
#[derive(Debug, Clone, PartialEq)]
pub struct Example2Phi {
    pub b: f64,
    pub phi0: f64,
    inner_poly: Vec<f64>,
    outer_poly: Vec<f64>,
    k_in: f64,
    k_out: f64,
    a: f64,
    c: f64,
    q: f64,
    kappa: f64,
    coeffs: Vec<f64>,
}

impl Example2Phi {
    /// `cosh(kx)/cosh(kb)` and its first two derivatives, for `0 ≤ x ≤ b`.
    fn inner_mode(&self, x: f64) -> (f64, f64, f64) {
        let (k, b) = (self.k_in, self.b);
        let norm = 1.0 + (-2.0 * k * b).exp();
        let ep = (k * (x - b)).exp();
        let em = (-k * (x + b)).exp();
        ((ep + em) / norm, k * (ep - em) / norm, k * k * (ep + em) / norm)
    }

    fn outer_mode(&self, x: f64) -> (f64, f64, f64) {
        let e = (-self.k_out * (x - self.b)).exp();
        (e, -self.k_out * e, self.k_out * self.k_out * e)
    }

    /// `(φ, φ′, φ″)` at `x ≥ 0`; `inner` picks the piece at `x = b`.
    fn jet(&self, x: f64, inner: bool) -> (f64, f64, f64) {
        if inner {
            let (m, dm, ddm) = self.inner_mode(x);
            let p = &self.inner_poly;
            let dp = poly_derivative(p);
            let ddp = poly_derivative(&dp);
            (
                poly_eval(p, x) + self.a * m,
                poly_eval(&dp, x) + self.a * dm,
                poly_eval(&ddp, x) + self.a * ddm,
            )
        } else {
            let (m, dm, ddm) = self.outer_mode(x);
            let p = &self.outer_poly;
            let dp = poly_derivative(p);
            let ddp = poly_derivative(&dp);
            let shift = (self.kappa + self.phi0) / (self.q + 1.0);
            (
                poly_eval(p, x) + shift + self.c * m,
                poly_eval(&dp, x) + self.c * dm,
                poly_eval(&ddp, x) + self.c * ddm,
            )
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let ax = x.abs();
        self.jet(ax, ax < self.b).0
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let ax = x.abs();
        x.signum() * self.jet(ax, ax < self.b).1
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        let ax = x.abs();
        self.jet(ax, ax < self.b).2
    }

    /// `|φ′(b−) − φ′(b+)|`.
    pub fn c1_gap(&self) -> f64 {
        (self.jet(self.b, true).1 - self.jet(self.b, false).1).abs()
    }

    /// `|φ″(b−) − φ″(b+)|`.
    pub fn c2_gap(&self) -> f64 {
        (self.jet(self.b, true).2 - self.jet(self.b, false).2).abs()
    }

    /// `|φ(b−) − φ(b+)|`.
    pub fn c0_gap(&self) -> f64 {
        (self.jet(self.b, true).0 - self.jet(self.b, false).0).abs()
    }

    /// `φ_b(b) − φ_b(0) − κ`.
    pub fn gap(&self) -> f64 {
        self.jet(self.b, false).0 - self.phi0 - self.kappa
    }

    /// Largest ODE residual of either piece at `probes` points on `[0, x_max]`.
    pub fn ode_residual(&self, x_max: f64, probes: usize) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..=probes {
            let x = x_max * i as f64 / probes as f64;
            let f = poly_eval(&self.coeffs, x);
            if x <= self.b {
                let (v, _, dd) = self.jet(x, true);
                worst = worst.max((0.5 * dd - self.q * v + f).abs() / (1.0 + f.abs()));
            }
            if x >= self.b {
                let (v, _, dd) = self.jet(x, false);
                let r = 0.5 * dd - (self.q + 1.0) * v + f + self.kappa + self.phi0;
                worst = worst.max(r.abs() / (1.0 + f.abs()));
            }
        }
        worst
    }

    pub fn field(&self, grid: &Grid) -> Result<ValueField> {
        ValueField::from_fn(grid, degree(&self.coeffs), |x| self.eval(x[0]))
    }
}

impl ScalarField for Example2Phi {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval(x[0]))
    }

    fn gradient(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(Some(vec![self.derivative(x[0])]))
    }

    fn hessian(&self, x: &[f64]) -> Result<Option<DMatrix<f64>>> {
        Ok(Some(DMatrix::from_element(1, 1, self.second_derivative(x[0]))))
    }

    fn growth_degree(&self) -> Option<u32> {
        Some(degree(&self.coeffs))
    }
}

/// Solves the two-piece equation for a given threshold `b`. The constants of
/// the homogeneous modes and the self-referential `φ(0)` enter linearly and
/// are found together from C¹ matching and `φ(0) = P_q(0) + A/cosh(kb)`.
pub fn example2_phi_b(spec: &Example2Spec, b: f64) -> Result<Example2Phi> {
    spec.validate()?;
    if !(b >= 0.0) || !b.is_finite() {
        return Err(Error::Invalid(format!("threshold b={b} must be finite and non-negative")));
    }
    let q = spec.q;
    let mut phi = Example2Phi {
        b,
        phi0: 0.0,
        inner_poly: particular_polynomial(&spec.coeffs, q),
        outer_poly: particular_polynomial(&spec.coeffs, q + 1.0),
        k_in: (2.0 * q).sqrt(),
        k_out: (2.0 * (q + 1.0)).sqrt(),
        a: 0.0,
        c: 0.0,
        q,
        kappa: spec.kappa,
        coeffs: spec.coeffs.clone(),
    };
    let (m, dm, _) = phi.inner_mode(b);
    let m0 = phi.inner_mode(0.0).0;
    let pin = &phi.inner_poly;
    let pout = &phi.outer_poly;
    let (pi_b, dpi_b) = (poly_eval(pin, b), poly_eval(&poly_derivative(pin), b));
    let (po_b, dpo_b) = (poly_eval(pout, b), poly_eval(&poly_derivative(pout), b));
    let r = q + 1.0;
    // unknowns (A, C, φ0)
    let mat = Matrix3::new(
        m, -1.0, -1.0 / r, //
        dm, phi.k_out, 0.0, //
        -m0, 0.0, 1.0,
    );
    let rhs = Vector3::new(po_b + spec.kappa / r - pi_b, dpo_b - dpi_b, poly_eval(pin, 0.0));
    let sol = mat.lu().solve(&rhs).ok_or_else(|| Error::Solver {
        reason: "matching system is singular".into(),
        condition: f64::INFINITY,
    })?;
    phi.a = sol[0];
    phi.c = sol[1];
    phi.phi0 = sol[2];
    if !phi.phi0.is_finite() || !phi.a.is_finite() || !phi.c.is_finite() {
        return Err(Error::Divergence(format!("matching constants at b={b}")));
    }
    Ok(phi)
}

/// Free-boundary solution and its diagnostics.
#[derive(Debug, Clone)]
pub struct Example2Solution {
    pub b_hat: f64,
    pub phi: Example2Phi,
    pub field: ValueField,
    /// `φ(b̂) − φ(0) − κ`.
    pub gap: f64,
    pub c1_gap: f64,
    pub c2_gap: f64,
    pub ode_residual: f64,
    /// `φ′ ≥ 0` at every grid node in `[0, x_max]`.
    pub increasing: bool,
    /// `(b, g(b))` pairs visited while bracketing.
    pub bracket: Vec<(f64, f64)>,
    pub bisection_steps: usize,
}

/// Largest bracket end tried before giving up.
pub const B_HI_CAP: f64 = 1_048_576.0;

/// Finds `b̂` with `φ_b̂(b̂) − φ_b̂(0) = κ` by bracket doubling and bisection.
pub fn example2_free_boundary(spec: &Example2Spec, grid: &Grid) -> Result<Example2Solution> {
    spec.validate()?;
    if !(spec.kappa > 0.0) {
        return Err(Error::Invalid("the free boundary needs kappa > 0".into()));
    }
    if grid.dim() != 1 {
        return Err(Error::Invalid("example grids are one-dimensional".into()));
    }
    let g = |b: f64| example2_phi_b(spec, b).map(|p| p.gap());
    let mut bracket = vec![(0.0, g(0.0)?)];
    let mut hi = 1.0;
    loop {
        let v = g(hi)?;
        bracket.push((hi, v));
        if v > 0.0 {
            break;
        }
        if hi >= B_HI_CAP {
            return Err(Error::Bracket {
                b_hi: hi,
                samples: bracket,
            });
        }
        hi *= 2.0;
    }
    let mut lo = if bracket.len() > 2 { hi / 2.0 } else { 0.0 };
    let mut steps = 0;
    let mut mid = 0.5 * (lo + hi);
    while steps < 200 {
        steps += 1;
        mid = 0.5 * (lo + hi);
        let v = g(mid)?;
        if v.abs() <= 1e-12 || hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
        if v > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let phi = example2_phi_b(spec, mid)?;
    let field = phi.field(grid)?;
    let x_max = grid.axes()[0].hi.max(0.0);
    let increasing = grid
        .points()
        .filter(|x| x[0] >= 0.0 && x[0] <= x_max)
        .all(|x| phi.derivative(x[0]) >= -1e-12);
    Ok(Example2Solution {
        b_hat: mid,
        gap: phi.gap(),
        c1_gap: phi.c1_gap(),
        c2_gap: phi.c2_gap(),
        ode_residual: phi.ode_residual(x_max.max(mid) * 1.5 + 1.0, 400),
        increasing,
        field,
        phi,
        bracket,
        bisection_steps: steps,
    })
}

/// The costly-jump problem for the general solver: unit dispersion with
/// jump rate `a ∈ {0, 1}` to the origin, cost `f + κa`, discount `q`.
pub fn example2_problem(spec: &Example2Spec) -> Result<HjbProblem> {
    spec.validate()?;
    let actions = ActionSet::finite(vec![Action::scalar(1.0, 0.0), jump_to_origin(1.0)]);
    let mut cost = CostSpec::polynomial(spec.coeffs.clone());
    cost.jump_rate_weight = spec.kappa;
    HjbProblem::new(
        actions,
        Arc::new(cost.build(1)?),
        Arc::new(ConstantDiscount(spec.q)),
        vec![0.0],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn particular_polynomial_solves_ode() {
        let f = vec![1.0, 0.0, 2.0, 0.0, 0.5];
        let r = 1.7;
        let p = particular_polynomial(&f, r);
        let pp = poly_derivative(&poly_derivative(&p));
        for x in [-2.0, 0.3, 1.9] {
            let res = 0.5 * poly_eval(&pp, x) - r * poly_eval(&p, x) + poly_eval(&f, x);
            assert!(res.abs() < 1e-12);
        }
    }

    #[test]
    fn psi_for_constant_cost() {
        let grid = Grid::uniform_1d(-4.0, 4.0, 81).unwrap();
        let spec = Example1Spec::new(vec![3.0], 2.0).unwrap();
        let psi = example1_psi(&spec, &grid).unwrap();
        for v in psi.values() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_quadratic_closed_form_and_symmetry() {
        let grid = Grid::uniform_1d(-5.0, 5.0, 201).unwrap();
        let spec = Example1Spec::new(vec![0.0, 0.0, 1.0], 1.0).unwrap();
        let psi = example1_psi(&spec, &grid).unwrap();
        let vals = psi.values();
        for (i, x) in grid.points().enumerate() {
            assert!((vals[i] - (x[0] * x[0] / 2.0 + 0.25)).abs() < 1e-10);
            assert!((vals[i] - vals[vals.len() - 1 - i]).abs() < 1e-10);
        }
        let v = example1_value(&psi, 1.0).unwrap();
        assert!((v.value.at(&[0.0]) - 0.5).abs() < 1e-10);
        assert!((v.value.at(&[0.0]) - v.psi0 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn psi_quartic_is_accurate() {
        let grid = Grid::uniform_1d(-4.0, 4.0, 401).unwrap();
        let f = vec![0.0, 0.0, 1.0, 0.0, 0.25];
        let spec = Example1Spec::new(f.clone(), 0.5).unwrap();
        let psi = example1_psi(&spec, &grid).unwrap();
        let p = particular_polynomial(&f, 1.5);
        for (x, v) in grid.points().zip(psi.values()) {
            assert!((v - poly_eval(&p, x[0])).abs() < 1e-7);
        }
    }

    #[test]
    fn asymmetric_cost_is_rejected() {
        assert!(Example1Spec::new(vec![0.0, 1.0, 1.0], 1.0).is_err());
        assert!(Example1Spec::new(vec![0.0, 0.0, -1.0], 1.0).is_err());
    }

    #[test]
    fn phi_b_pieces_solve_their_odes() {
        let spec = Example2Spec::new(vec![0.0, 0.0, 1.0], 1.0, 0.5).unwrap();
        for b in [0.0, 0.4, 1.3, 5.0] {
            let phi = example2_phi_b(&spec, b).unwrap();
            assert!(phi.ode_residual(8.0, 200) < 1e-8, "b={b}");
            assert!(phi.c0_gap() < 1e-10);
            assert!(phi.c1_gap() < 1e-8);
            assert!((phi.eval(0.0) - phi.phi0).abs() < 1e-10);
            assert!(phi.derivative(0.0).abs() < 1e-12);
        }
    }

    #[test]
    fn phi_b_large_b_tends_to_resolvent() {
        let spec = Example2Spec::new(vec![0.0, 0.0, 1.0], 1.0, 0.5).unwrap();
        let phi = example2_phi_b(&spec, 40.0).unwrap();
        let p = particular_polynomial(&spec.coeffs, 1.0);
        for x in [0.0, 1.0, 2.5] {
            assert!((phi.eval(x) - poly_eval(&p, x)).abs() < 1e-10);
        }
    }

    #[test]
    fn free_boundary_diagnostics() {
        let grid = Grid::uniform_1d(-6.0, 6.0, 241).unwrap();
        let spec = Example2Spec::new(vec![0.0, 0.0, 1.0], 1.0, 0.5).unwrap();
        let sol = example2_free_boundary(&spec, &grid).unwrap();
        assert!(sol.gap.abs() <= 1e-8);
        assert!(sol.c1_gap <= 1e-8);
        assert!(sol.c2_gap <= 2.0 * sol.gap.abs() + 1e-9);
        assert!(sol.increasing);
        let bigger = example2_free_boundary(&Example2Spec::new(vec![0.0, 0.0, 1.0], 1.0, 1.0).unwrap(), &grid).unwrap();
        assert!(bigger.b_hat > sol.b_hat);
    }
}
