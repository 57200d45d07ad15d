//! Quadratic control in closed form.
//!
//! Running cost `f(x, a) = xᵀΛx + μᵀΘμ`, constant discount `q > 0`. The value
//! function is `V(x) = xᵀBx + c·x + d` where `B` is the symmetric positive
//! definite solution of
//!
//! ```text
//! B Θ⁻¹ B + q B − Λ = 0,
//! ```
//!
//! the optimal drift is the linear feedback `μ̂(x) = −Qx + v` and the optimal
//! dispersion pair minimises `tr(σᵀBσ) + ∫ yᵀBy ν(dy)` over the candidates.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::action::{Action, Jumps};
use crate::error::{Error, Result};
use crate::generator::AnalyticField;
use crate::measures::{matrix_from_rows, JumpMeasure, MeasureSpec};

/// Tolerance on the smallest eigenvalue for positive definiteness.
pub const PD_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LqSpec {
    pub lambda: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub q: f64,
    pub u: DVector<f64>,
    /// Candidate `(σ, ν)` pairs for the dispersion minimisation.
    pub candidates: Vec<(DMatrix<f64>, Arc<JumpMeasure>)>,
}

impl LqSpec {
    pub fn dim(&self) -> usize {
        self.u.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        for (name, m) in [("lambda", &self.lambda), ("theta", &self.theta)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: m.nrows(),
                });
            }
            check_spd(m, name)?;
        }
        if !(self.q > 0.0) || !self.q.is_finite() {
            return Err(Error::Invalid(format!("discount q={} must be positive", self.q)));
        }
        for (i, (sigma, nu)) in self.candidates.iter().enumerate() {
            if sigma.nrows() != n || sigma.ncols() != n || nu.dim() != n {
                return Err(Error::Invalid(format!("candidate {i} has the wrong dimension")));
            }
            if !nu.validate_mp(2.0)? {
                return Err(Error::Invalid(format!("candidate {i} measure is not in M_2")));
            }
        }
        Ok(())
    }

    /// One-dimensional spec with scalar weights and a single diffusion
    /// candidate `(σ, 0)`.
    pub fn scalar(lambda: f64, theta: f64, q: f64, u: f64, sigma: f64) -> Self {
        Self {
            lambda: DMatrix::from_element(1, 1, lambda),
            theta: DMatrix::from_element(1, 1, theta),
            q,
            u: DVector::from_element(1, u),
            candidates: vec![(DMatrix::from_element(1, 1, sigma), Arc::new(JumpMeasure::zero(1)))],
        }
    }
}

/// Configuration form of [`LqSpec`]; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct LqConfig {
    pub lambda: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub q: f64,
    pub u: Vec<f64>,
    pub candidates: Vec<CandidateConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct CandidateConfig {
    pub sigma: Vec<Vec<f64>>,
    #[serde(default = "zero_measure_spec")]
    pub jumps: MeasureSpec,
}

fn zero_measure_spec() -> MeasureSpec {
    MeasureSpec::Zero
}

impl LqConfig {
    pub fn build(&self) -> Result<LqSpec> {
        let n = self.u.len();
        let spec = LqSpec {
            lambda: matrix_from_rows(&self.lambda, n)?,
            theta: matrix_from_rows(&self.theta, n)?,
            q: self.q,
            u: DVector::from_vec(self.u.clone()),
            candidates: self
                .candidates
                .iter()
                .map(|c| Ok((matrix_from_rows(&c.sigma, n)?, Arc::new(c.jumps.build(n)?))))
                .collect::<Result<_>>()?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct LqSolution {
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub d: f64,
    pub q_gain: DMatrix<f64>,
    pub v: DVector<f64>,
    pub p: DMatrix<f64>,
    pub delta: f64,
    pub sigma: DMatrix<f64>,
    pub nu: Arc<JumpMeasure>,
    pub candidate: usize,
    pub riccati_residual: f64,
    pub u: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub discount: f64,
}

/// Result of the dispersion minimisation.
#[derive(Debug, Clone)]
pub struct Dispersion {
    pub delta: f64,
    pub index: usize,
    pub sigma: DMatrix<f64>,
    pub nu: Arc<JumpMeasure>,
}

fn check_spd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-12 * (1.0 + m.abs().max()) {
        return Err(Error::Invalid(format!("{name} is not symmetric")));
    }
    let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if !(min > PD_TOL) {
        return Err(Error::Invalid(format!(
            "{name} is not positive definite (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

fn inv_sqrt_spd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `B Θ⁻¹ B + q B − Λ`.
pub fn riccati_residual(b: &DMatrix<f64>, lambda: &DMatrix<f64>, theta: &DMatrix<f64>, q: f64) -> DMatrix<f64> {
    let theta_inv = theta.clone().try_inverse().expect("Θ is positive definite");
    b * theta_inv * b + b * q - lambda
}

/// The `2n × 2n` Hamiltonian `[[−(q/2)I, −Θ⁻¹], [−Λ, (q/2)I]]`; the
/// solution is read off its stable invariant subspace `[X; Y]` as `B = Y X⁻¹`.
pub fn hamiltonian(lambda: &DMatrix<f64>, theta: &DMatrix<f64>, q: f64) -> DMatrix<f64> {
    let n = lambda.nrows();
    let theta_inv = theta.clone().try_inverse().expect("Θ is positive definite");
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        h[(i, i)] = -0.5 * q;
        h[(n + i, n + i)] = 0.5 * q;
    }
    h.view_mut((0, n), (n, n)).copy_from(&(-theta_inv));
    h.view_mut((n, 0), (n, n)).copy_from(&(-lambda));
    h
}

/// Symmetric positive definite solution of the algebraic Riccati equation.
///
/// The stable eigenvectors of the Hamiltonian are built from the generalised
/// symmetric problem `Λw = κΘw` (eigenvalue `−√(q²/4 + κ)`, eigenvector
/// `[w; (√(q²/4+κ) − q/2)Θw]`), each eigenpair is checked against the
/// Hamiltonian itself, and the result is polished with Newton steps.
pub fn solve_riccati(lambda: &DMatrix<f64>, theta: &DMatrix<f64>, q: f64) -> Result<DMatrix<f64>> {
    let n = lambda.nrows();
    check_spd(theta, "theta")?;
    if lambda.ncols() != n || theta.nrows() != n {
        return Err(Error::Dimension {
            expected: n,
            got: theta.nrows(),
        });
    }
    if !(q > 0.0) {
        return Err(Error::Invalid(format!("discount q={q} must be positive")));
    }
    let t_inv_half = inv_sqrt_spd(theta);
    let reduced = &t_inv_half * lambda * &t_inv_half;
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let eig = SymmetricEigen::new(reduced);
    let w = &t_inv_half * &eig.eigenvectors;
    let rates: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|k| (0.25 * q * q + k).max(0.0).sqrt())
        .collect();
    let mut spectrum: Vec<f64> = rates.iter().flat_map(|s| [-s, *s]).collect();
    spectrum.sort_by(|a, b| a.total_cmp(b));

    let ham = hamiltonian(lambda, theta, q);
    let mut x = DMatrix::zeros(n, n);
    let mut y = DMatrix::zeros(n, n);
    for k in 0..n {
        let wk = w.column(k).into_owned();
        let yk = theta * &wk * (rates[k] - 0.5 * q);
        let mut stacked = DVector::zeros(2 * n);
        stacked.rows_mut(0, n).copy_from(&wk);
        stacked.rows_mut(n, n).copy_from(&yk);
        let defect = (&ham * &stacked + &stacked * rates[k]).amax();
        if defect > 1e-8 * (1.0 + ham.amax()) * (1.0 + stacked.amax()) {
            return Err(Error::Riccati { spectrum });
        }
        x.set_column(k, &wk);
        y.set_column(k, &yk);
    }
    let x_inv = x.try_inverse().ok_or_else(|| Error::Riccati {
        spectrum: spectrum.clone(),
    })?;
    let mut b = y * x_inv;
    b = (&b + b.transpose()) * 0.5;
    b = newton_refine(b, lambda, theta, q)?;
    let min_eig = SymmetricEigen::new(b.clone()).eigenvalues.min();
    if !(min_eig > PD_TOL) {
        return Err(Error::Riccati { spectrum });
    }
    Ok(b)
}

/// Newton iteration on the Riccati residual: each step solves the Lyapunov
/// equation `Kᵀ dB + dB K = −R(B)` with `K = Θ⁻¹B + (q/2)I`.
fn newton_refine(mut b: DMatrix<f64>, lambda: &DMatrix<f64>, theta: &DMatrix<f64>, q: f64) -> Result<DMatrix<f64>> {
    let n = b.nrows();
    let theta_inv = theta.clone().try_inverse().expect("Θ is positive definite");
    let mut best = riccati_residual(&b, lambda, theta, q).amax();
    for _ in 0..8 {
        if best <= 1e-13 * (1.0 + lambda.amax()) {
            break;
        }
        let r = riccati_residual(&b, lambda, theta, q);
        let k = &theta_inv * &b + DMatrix::identity(n, n) * (0.5 * q);
        let id = DMatrix::<f64>::identity(n, n);
        let op = id.kronecker(&k.transpose()) + k.transpose().kronecker(&id);
        let rhs = DVector::from_iterator(n * n, r.iter().map(|v| -v));
        let Some(step) = op.lu().solve(&rhs) else {
            break;
        };
        let db = DMatrix::from_column_slice(n, n, step.as_slice());
        let mut cand = &b + db;
        cand = (&cand + cand.transpose()) * 0.5;
        let res = riccati_residual(&cand, lambda, theta, q).amax();
        if res < best {
            best = res;
            b = cand;
        } else {
            break;
        }
    }
    Ok(b)
}

/// `tr(σᵀBσ) + ∫ yᵀBy ν(dy)` minimised over the candidate list; ties go to
/// the earliest candidate.
pub fn minimal_dispersion(candidates: &[(DMatrix<f64>, Arc<JumpMeasure>)], b: &DMatrix<f64>) -> Result<Dispersion> {
    let mut best: Option<Dispersion> = None;
    for (i, (sigma, nu)) in candidates.iter().enumerate() {
        let value = (sigma.transpose() * b * sigma).trace() + (b * nu.second_moment_matrix()?).trace();
        if best.as_ref().is_none_or(|d| value < d.delta) {
            best = Some(Dispersion {
                delta: value,
                index: i,
                sigma: sigma.clone(),
                nu: nu.clone(),
            });
        }
    }
    best.ok_or_else(|| Error::Invalid("empty dispersion candidate list".into()))
}

/// Assembles `P = BΛ⁻¹B`, `c = 2Pᵀu`,
/// `d = (2uᵀPᵀu + δ̂ − uᵀPΘ⁻¹Pᵀu)/q`, `Q = Θ⁻¹B`, `v = −Θ⁻¹Pu`.
pub fn lq_assemble(spec: &LqSpec, b: &DMatrix<f64>, disp: &Dispersion) -> Result<LqSolution> {
    let lambda_inv = spec
        .lambda
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Invalid("Λ is singular".into()))?;
    let theta_inv = spec
        .theta
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Invalid("Θ is singular".into()))?;
    let u = &spec.u;
    let p = b * lambda_inv * b;
    let c = p.transpose() * u * 2.0;
    let pt_u = p.transpose() * u;
    let d = (2.0 * u.dot(&pt_u) + disp.delta - (u.transpose() * &p * &theta_inv * &pt_u)[(0, 0)]) / spec.q;
    let q_gain = &theta_inv * b;
    let v = -(&theta_inv * &p * u);
    Ok(LqSolution {
        b: b.clone(),
        c,
        d,
        q_gain,
        v,
        p,
        delta: disp.delta,
        sigma: disp.sigma.clone(),
        nu: disp.nu.clone(),
        candidate: disp.index,
        riccati_residual: riccati_residual(b, &spec.lambda, &spec.theta, spec.q).amax(),
        u: spec.u.clone(),
        lambda: spec.lambda.clone(),
        theta: spec.theta.clone(),
        discount: spec.q,
    })
}

/// Riccati solve, dispersion minimisation and assembly in one call.
pub fn solve(spec: &LqSpec) -> Result<LqSolution> {
    spec.validate()?;
    let b = solve_riccati(&spec.lambda, &spec.theta, spec.q)?;
    let disp = minimal_dispersion(&spec.candidates, &b)?;
    lq_assemble(spec, &b, &disp)
}

/// `μ̂(x) = −Qx + v`.
pub fn optimal_feedback(x: &[f64], sol: &LqSolution) -> DVector<f64> {
    -(&sol.q_gain * DVector::from_column_slice(x)) + &sol.v
}

impl LqSolution {
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        (x.transpose() * &self.b * &x)[(0, 0)] + self.c.dot(&x) + self.d
    }

    pub fn value_field(&self) -> AnalyticField {
        AnalyticField::quadratic(self.b.clone(), self.c.clone(), self.d)
    }

    /// `(σ̂, ν̂, μ̂(x))`.
    pub fn optimal_action(&self, x: &[f64]) -> Action {
        Action {
            sigma: self.sigma.clone(),
            jumps: Jumps::Measure(self.nu.clone()),
            mu: optimal_feedback(x, self),
        }
    }

    /// `xᵀΛx + μᵀΘμ`.
    pub fn running_cost(&self, x: &[f64], mu: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        let mu = DVector::from_column_slice(mu);
        (x.transpose() * &self.lambda * &x)[(0, 0)] + (mu.transpose() * &self.theta * &mu)[(0, 0)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{hjb_integrand, GeneratorScheme};
    use crate::measures::Atom;

    fn diag_b(lambda: f64, theta: f64, q: f64) -> f64 {
        let p = (q * q + 4.0 * lambda / theta).sqrt();
        0.5 * theta * (p - q)
    }

    #[test]
    fn identity_solution() {
        let q = 1.7;
        let lambda = DMatrix::identity(3, 3) * (q + 1.0);
        let b = solve_riccati(&lambda, &DMatrix::identity(3, 3), q).unwrap();
        assert!((b - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn scalar_matches_closed_form() {
        let b = solve_riccati(&DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, 1.0), 3.0).unwrap();
        let expected = (13f64.sqrt() - 3.0) / 2.0;
        assert!((b[(0, 0)] - expected).abs() < 1e-12);
        assert!((b[(0, 0)] - diag_b(1.0, 1.0, 3.0)).abs() < 1e-12);
        for (l, t, q) in [(2.0, 0.5, 1.0), (0.3, 4.0, 0.2), (10.0, 1.0, 5.0)] {
            let b = solve_riccati(&DMatrix::from_element(1, 1, l), &DMatrix::from_element(1, 1, t), q).unwrap();
            assert!((b[(0, 0)] - diag_b(l, t, q)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_diagonal_residual() {
        let lambda = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.0]);
        let theta = DMatrix::from_row_slice(2, 2, &[1.5, -0.3, -0.3, 0.8]);
        let b = solve_riccati(&lambda, &theta, 0.9).unwrap();
        assert!(riccati_residual(&b, &lambda, &theta, 0.9).amax() <= 1e-10);
        assert!((&b - b.transpose()).amax() < 1e-14);
        assert!(SymmetricEigen::new(b).eigenvalues.min() > 0.0);
    }

    #[test]
    fn singular_state_cost_has_no_pd_solution() {
        let lambda = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let theta = DMatrix::identity(2, 2);
        assert!(matches!(solve_riccati(&lambda, &theta, 1.0), Err(Error::Riccati { .. })));
    }

    #[test]
    fn dispersion_examples() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let only_zero = vec![(DMatrix::zeros(2, 2), Arc::new(JumpMeasure::zero(2)))];
        assert_eq!(minimal_dispersion(&only_zero, &b).unwrap().delta, 0.0);

        let atomic = JumpMeasure::atomic(2, vec![Atom::new(vec![1.0, 0.0], 1.0)]).unwrap();
        let cands = vec![
            (DMatrix::identity(2, 2), Arc::new(JumpMeasure::zero(2))),
            (DMatrix::zeros(2, 2), Arc::new(atomic)),
        ];
        let d = minimal_dispersion(&cands, &b).unwrap();
        assert_eq!(d.index, 1);
        assert!((d.delta - 1.0).abs() < 1e-15);
        let d2 = minimal_dispersion(&cands, &(&b * 2.0)).unwrap();
        assert_eq!(d2.index, 1);
        assert!((d2.delta - 2.0).abs() < 1e-15);
        assert!(minimal_dispersion(&[], &b).is_err());
    }

    #[test]
    fn assembly_matches_scalar_formulas() {
        let sol = solve(&LqSpec::scalar(1.0, 1.0, 3.0, 0.0, 1.0)).unwrap();
        assert_eq!(sol.c[0], 0.0);
        assert!((sol.d - sol.delta / 3.0).abs() < 1e-15);

        let sol = solve(&LqSpec::scalar(1.0, 1.0, 3.0, 1.0, 1.0)).unwrap();
        let p = 13f64.sqrt();
        assert!((sol.c[0] - 8.0 / ((p + 3.0) * (p + 3.0))).abs() < 1e-12);
        // one-dimensional d with θ = 1
        let d_formula = 8.0 / (3.0 * (3.0 + p).powi(4)) * ((3.0 + p).powi(2) - 2.0) + sol.delta / 3.0;
        assert!((sol.d - d_formula).abs() < 1e-12);
        assert!((optimal_feedback(&[2.0], &sol)[0] - (-sol.b[(0, 0)] * 2.0 + sol.v[0])).abs() < 1e-15);
    }

    #[test]
    fn feedback_at_origin() {
        let sol = solve(&LqSpec::scalar(1.0, 1.0, 3.0, 0.0, 1.0)).unwrap();
        assert_eq!(optimal_feedback(&[0.0], &sol)[0], 0.0);
        assert!((optimal_feedback(&[1.0], &sol)[0] + 0.302_775_637_731_994_6).abs() < 1e-12);
    }

    #[test]
    fn hjb_identity_on_probe_lattice() {
        let nu = JumpMeasure::atomic(
            2,
            vec![Atom::new(vec![0.5, -0.2], 0.7), Atom::new(vec![-1.0, 0.4], 0.3)],
        )
        .unwrap();
        let spec = LqSpec {
            lambda: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            theta: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 0.5]),
            q: 0.8,
            u: DVector::from_vec(vec![0.4, -0.7]),
            candidates: vec![
                (DMatrix::identity(2, 2), Arc::new(JumpMeasure::zero(2))),
                (DMatrix::identity(2, 2) * 0.3, Arc::new(nu)),
            ],
        };
        let sol = solve(&spec).unwrap();
        let phi = sol.value_field();
        let scheme = GeneratorScheme::default();
        let u: Vec<f64> = spec.u.iter().copied().collect();
        for x0 in [-2.0, -0.5, 0.0, 1.0, 2.5] {
            for x1 in [-1.5, 0.0, 2.0] {
                let x = [x0, x1];
                let a = sol.optimal_action(&x);
                let f = sol.running_cost(&x, a.mu.as_slice());
                let r = hjb_integrand(&a, &phi, &x, f, spec.q, &u, &scheme).unwrap();
                assert!(r.abs() < 1e-8, "x={x:?} residual {r}");
            }
        }
    }
}
