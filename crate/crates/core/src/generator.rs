//! Pointwise evaluation of the controlled Lévy operator
//!
//! ```text
//! L^a g(x) = (u + μ)ᵀ∇g(x) + ½ tr(σᵀ Hess g(x) σ)
//!          + ∫ ( g(x + y) - g(x) - yᵀ∇g(x) ) ν(dy)
//! ```
//!
//! and of the HJB integrand `L^a φ - q φ + f`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::action::Action;
use crate::error::{Error, Result};
use crate::measures::JumpMeasure;

/// A scalar function on `R^n` that generators can be applied to.
pub trait ScalarField: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64>;

    /// Analytic gradient, if available. `None` selects finite differences.
    fn gradient(&self, _x: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }

    /// Analytic Hessian, if available.
    fn hessian(&self, _x: &[f64]) -> Result<Option<DMatrix<f64>>> {
        Ok(None)
    }

    /// Declared polynomial growth degree.
    fn growth_degree(&self) -> Option<u32> {
        None
    }
}

type Func = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFunc = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type HessFunc = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Closure-backed field with optional analytic derivatives and domain box.
#[derive(Clone)]
pub struct AnalyticField {
    dim: usize,
    f: Func,
    grad: Option<GradFunc>,
    hess: Option<HessFunc>,
    domain: Option<(Vec<f64>, Vec<f64>)>,
    growth: Option<u32>,
}

impl std::fmt::Debug for AnalyticField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnalyticField")
            .field("dim", &self.dim)
            .field("analytic_gradient", &self.grad.is_some())
            .field("analytic_hessian", &self.hess.is_some())
            .field("domain", &self.domain)
            .field("growth", &self.growth)
            .finish()
    }
}

impl AnalyticField {
    pub fn new(dim: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            dim,
            f: Arc::new(f),
            grad: None,
            hess: None,
            domain: None,
            growth: None,
        }
    }

    pub fn with_gradient(mut self, g: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(g));
        self
    }

    pub fn with_hessian(mut self, h: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.hess = Some(Arc::new(h));
        self
    }

    pub fn with_domain(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.domain = Some((lo, hi));
        self
    }

    pub fn with_growth(mut self, degree: u32) -> Self {
        self.growth = Some(degree);
        self
    }

    /// Drops analytic derivatives so finite differences are used instead.
    pub fn without_derivatives(mut self) -> Self {
        self.grad = None;
        self.hess = None;
        self
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::new(dim, move |_| c)
            .with_gradient(move |x| vec![0.0; x.len()])
            .with_hessian(move |x| DMatrix::zeros(x.len(), x.len()))
            .with_growth(0)
    }

    /// `xᵀ M x + bᵀ x + c` with exact derivatives.
    pub fn quadratic(m: DMatrix<f64>, b: DVector<f64>, c: f64) -> Self {
        let dim = b.len();
        let (m1, m2, m3) = (m.clone(), m.clone(), m);
        let (b1, b2) = (b.clone(), b);
        Self::new(dim, move |x| {
            let x = DVector::from_column_slice(x);
            (x.transpose() * &m1 * &x)[(0, 0)] + b1.dot(&x) + c
        })
        .with_gradient(move |x| {
            let x = DVector::from_column_slice(x);
            ((&m2 + m2.transpose()) * x + &b2).iter().copied().collect()
        })
        .with_hessian(move |_| &m3 + m3.transpose())
        .with_growth(2)
    }

    /// One-dimensional polynomial `Σ coeffs[k] x^k`.
    pub fn polynomial(coeffs: Vec<f64>) -> Self {
        let degree = coeffs.len().saturating_sub(1) as u32;
        let (c0, c1, c2) = (coeffs.clone(), coeffs.clone(), coeffs);
        Self::new(1, move |x| poly_eval(&c0, x[0]))
            .with_gradient(move |x| vec![poly_eval(&poly_derivative(&c1), x[0])])
            .with_hessian(move |x| {
                DMatrix::from_element(1, 1, poly_eval(&poly_derivative(&poly_derivative(&c2)), x[0]))
            })
            .with_growth(degree)
    }

    fn check_domain(&self, x: &[f64]) -> Result<()> {
        if let Some((lo, hi)) = &self.domain {
            if x.iter().zip(lo.iter().zip(hi)).any(|(v, (l, h))| v < l || v > h) {
                return Err(Error::Domain { point: x.to_vec() });
            }
        }
        Ok(())
    }
}

impl ScalarField for AnalyticField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        self.check_domain(x)?;
        let v = (self.f)(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Domain { point: x.to_vec() })
        }
    }

    fn gradient(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        self.check_domain(x)?;
        Ok(self.grad.as_ref().map(|g| g(x)))
    }

    fn hessian(&self, x: &[f64]) -> Result<Option<DMatrix<f64>>> {
        self.check_domain(x)?;
        Ok(self.hess.as_ref().map(|h| h(x)))
    }

    fn growth_degree(&self) -> Option<u32> {
        self.growth
    }
}

pub(crate) fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

pub(crate) fn poly_derivative(coeffs: &[f64]) -> Vec<f64> {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, c)| k as f64 * c)
        .collect()
}

/// Discretisation parameters for [`apply_generator`] and friends.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorScheme {
    /// Finite-difference step. `None` uses `max(1e-5, 1e-7|x|)` for gradients
    /// and `max(1e-4, 1e-5|x|)` for Hessians.
    pub fd_step: Option<f64>,
    /// Jumps with `|y| <= small_jump_split` use `½ yᵀ Hess g y`.
    pub small_jump_split: f64,
    /// Ambient moment order `p`; fields growing faster are rejected.
    pub moment_order: f64,
}

impl Default for GeneratorScheme {
    fn default() -> Self {
        Self {
            fd_step: None,
            small_jump_split: 0.0,
            moment_order: 2.0,
        }
    }
}

impl GeneratorScheme {
    pub fn with_moment_order(mut self, p: f64) -> Self {
        self.moment_order = p;
        self
    }

    pub fn with_small_jump_split(mut self, delta: f64) -> Self {
        self.small_jump_split = delta;
        self
    }

    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.fd_step = Some(h);
        self
    }

    fn grad_step(&self, x: &[f64]) -> f64 {
        self.fd_step
            .unwrap_or_else(|| 1e-5f64.max(1e-7 * crate::measures::norm(x)))
    }

    fn hess_step(&self, x: &[f64]) -> f64 {
        self.fd_step
            .unwrap_or_else(|| 1e-4f64.max(1e-5 * crate::measures::norm(x)))
    }
}

pub fn gradient(g: &dyn ScalarField, x: &[f64], scheme: &GeneratorScheme) -> Result<Vec<f64>> {
    if let Some(grad) = g.gradient(x)? {
        return Ok(grad);
    }
    let h = scheme.grad_step(x);
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = g.value(&probe)?;
        probe[i] = x[i] - h;
        let down = g.value(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

pub fn hessian(g: &dyn ScalarField, x: &[f64], scheme: &GeneratorScheme) -> Result<DMatrix<f64>> {
    if let Some(hess) = g.hessian(x)? {
        return Ok(hess);
    }
    let n = x.len();
    let h = scheme.hess_step(x);
    let center = g.value(x)?;
    let mut probe = x.to_vec();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        probe[i] = x[i] + h;
        let up = g.value(&probe)?;
        probe[i] = x[i] - h;
        let down = g.value(&probe)?;
        probe[i] = x[i];
        out[(i, i)] = (up - 2.0 * center + down) / (h * h);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| -> Result<f64> {
                probe[i] = x[i] + si * h;
                probe[j] = x[j] + sj * h;
                let v = g.value(&probe);
                probe[i] = x[i];
                probe[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?)
                / (4.0 * h * h);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

fn check_dim(g: &dyn ScalarField, x: &[f64]) -> Result<()> {
    if g.dim() != x.len() {
        return Err(Error::Dimension {
            expected: g.dim(),
            got: x.len(),
        });
    }
    Ok(())
}

/// `(u + μ)ᵀ∇g(x) + ½ tr(σᵀ Hess g(x) σ)`.
pub fn local_term(
    mu: &[f64],
    sigma: &DMatrix<f64>,
    g: &dyn ScalarField,
    x: &[f64],
    u: &[f64],
    scheme: &GeneratorScheme,
) -> Result<f64> {
    check_dim(g, x)?;
    let grad = gradient(g, x, scheme)?;
    let hess = if has_diffusion(sigma) { Some(hessian(g, x, scheme)?) } else { None };
    Ok(local_with(mu, sigma, u, &grad, hess.as_ref()))
}

fn has_diffusion(sigma: &DMatrix<f64>) -> bool {
    sigma.iter().any(|s| *s != 0.0)
}

fn local_with(mu: &[f64], sigma: &DMatrix<f64>, u: &[f64], grad: &[f64], hess: Option<&DMatrix<f64>>) -> f64 {
    let drift: f64 = grad
        .iter()
        .zip(mu.iter().zip(u))
        .map(|(gi, (mi, ui))| (mi + ui) * gi)
        .sum();
    let Some(h) = hess else { return drift };
    // ½ Σ_ij H_ij (σσᵀ)_ij
    let n = sigma.nrows();
    let mut diffusion = 0.0;
    for i in 0..n {
        for j in 0..n {
            let c: f64 = (0..sigma.ncols()).map(|k| sigma[(i, k)] * sigma[(j, k)]).sum();
            diffusion += h[(i, j)] * c;
        }
    }
    drift + 0.5 * diffusion
}

fn needs_jump_hessian(nu: &JumpMeasure, scheme: &GeneratorScheme) -> bool {
    nu.small_jump_cov().is_some()
        || (scheme.small_jump_split > 0.0
            && nu
                .nodes()
                .any(|(y, w)| w > 0.0 && crate::measures::norm(y) <= scheme.small_jump_split))
}

fn check_growth(nu: &JumpMeasure, g: &dyn ScalarField, scheme: &GeneratorScheme) -> Result<()> {
    if nu.is_zero() {
        return Ok(());
    }
    if let Some(q) = g.growth_degree() {
        if q as f64 > scheme.moment_order {
            return Err(Error::Growth {
                field: q,
                order: scheme.moment_order,
            });
        }
    }
    Ok(())
}

/// `∫ (g(x+y) - g(x) - yᵀ∇g(x)) ν(dy)`, with the second-order Taylor
/// surrogate below the small-jump split and the small-jump covariance (if the
/// measure carries one) entering as `½ tr(Σ_ε Hess g)`.
pub fn jump_term(nu: &JumpMeasure, g: &dyn ScalarField, x: &[f64], scheme: &GeneratorScheme) -> Result<f64> {
    check_dim(g, x)?;
    if nu.is_zero() {
        return Ok(0.0);
    }
    check_growth(nu, g, scheme)?;
    let grad = gradient(g, x, scheme)?;
    let hess = if needs_jump_hessian(nu, scheme) {
        Some(hessian(g, x, scheme)?)
    } else {
        None
    };
    jump_with(nu, g, x, &grad, hess.as_ref(), scheme)
}

fn jump_with(
    nu: &JumpMeasure,
    g: &dyn ScalarField,
    x: &[f64],
    grad: &[f64],
    hess: Option<&DMatrix<f64>>,
    scheme: &GeneratorScheme,
) -> Result<f64> {
    if nu.is_zero() {
        return Ok(0.0);
    }
    let gx = g.value(x)?;
    let mut shifted = x.to_vec();
    let mut acc = 0.0;
    for (y, w) in nu.nodes() {
        if w == 0.0 {
            continue;
        }
        let r = crate::measures::norm(y);
        let integrand = if r <= scheme.small_jump_split {
            let h = hess.expect("hessian computed for small jumps");
            let mut quad = 0.0;
            for (i, yi) in y.iter().enumerate() {
                for (j, yj) in y.iter().enumerate() {
                    quad += yi * h[(i, j)] * yj;
                }
            }
            0.5 * quad
        } else {
            for ((s, xi), yi) in shifted.iter_mut().zip(x).zip(y) {
                *s = xi + yi;
            }
            let dot: f64 = y.iter().zip(grad).map(|(a, b)| a * b).sum();
            g.value(&shifted)? - gx - dot
        };
        acc += w * integrand;
    }
    if let (Some(cov), Some(h)) = (nu.small_jump_cov(), hess) {
        acc += 0.5 * (cov * h).trace();
    }
    if !acc.is_finite() {
        return Err(Error::Divergence("jump integral".into()));
    }
    Ok(acc)
}

/// `L^a g(x)`.
pub fn apply_generator(
    a: &Action,
    g: &dyn ScalarField,
    x: &[f64],
    u: &[f64],
    scheme: &GeneratorScheme,
) -> Result<f64> {
    check_dim(g, x)?;
    let nu = a.measure_at(x)?;
    check_growth(&nu, g, scheme)?;
    let mut mu = vec![0.0; x.len()];
    a.drift_into(x, &mut mu);
    let grad = gradient(g, x, scheme)?;
    let hess = if has_diffusion(&a.sigma) || (!nu.is_zero() && needs_jump_hessian(&nu, scheme)) {
        Some(hessian(g, x, scheme)?)
    } else {
        None
    };
    let local = local_with(&mu, &a.sigma, u, &grad, hess.as_ref().filter(|_| has_diffusion(&a.sigma)));
    Ok(local + jump_with(&nu, g, x, &grad, hess.as_ref(), scheme)?)
}

/// `L^a φ(x) - q(x,a) φ(x) + f(x,a)`.
#[allow(clippy::too_many_arguments)]
pub fn hjb_integrand(
    a: &Action,
    phi: &dyn ScalarField,
    x: &[f64],
    f_val: f64,
    q_val: f64,
    u: &[f64],
    scheme: &GeneratorScheme,
) -> Result<f64> {
    Ok(apply_generator(a, phi, x, u, scheme)? - q_val * phi.value(x)? + f_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Atom;

    fn atoms(list: &[(f64, f64)]) -> JumpMeasure {
        JumpMeasure::atomic(1, list.iter().map(|(y, m)| Atom::new(vec![*y], *m)).collect()).unwrap()
    }

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn linear_field_local_term() {
        let g = AnalyticField::polynomial(vec![0.0, 1.0]);
        let v = local_term(&[0.3], &s(5.0), &g, &[1.7], &[0.2], &GeneratorScheme::default()).unwrap();
        assert!((v - 0.5).abs() < 1e-14);
    }

    #[test]
    fn quadratic_field_local_term() {
        let g = AnalyticField::polynomial(vec![0.0, 0.0, 1.0]);
        let v = local_term(&[0.0], &s(2.0), &g, &[1.0], &[0.0], &GeneratorScheme::default()).unwrap();
        assert!((v - 4.0).abs() < 1e-14);
    }

    #[test]
    fn sine_analytic_and_finite_difference_agree() {
        let analytic = AnalyticField::new(1, |x| x[0].sin())
            .with_gradient(|x| vec![x[0].cos()])
            .with_hessian(|x| DMatrix::from_element(1, 1, -x[0].sin()));
        let fd = analytic.clone().without_derivatives();
        let scheme = GeneratorScheme::default();
        let a = local_term(&[1.0], &s(1.0), &analytic, &[0.0], &[0.0], &scheme).unwrap();
        let b = local_term(&[1.0], &s(1.0), &fd, &[0.0], &[0.0], &scheme).unwrap();
        assert!((a - 1.0).abs() < 1e-14);
        assert!((b - 1.0).abs() < 1e-6, "{b}");
    }

    #[test]
    fn jump_term_examples() {
        let scheme = GeneratorScheme::default();
        let lin = AnalyticField::polynomial(vec![0.3, -2.0]);
        assert!(jump_term(&atoms(&[(2.0, 1.0), (-0.5, 3.0)]), &lin, &[0.4], &scheme).unwrap().abs() < 1e-13);
        let sq = AnalyticField::polynomial(vec![0.0, 0.0, 1.0]);
        for x in [-3.0, 0.0, 1.5] {
            let v = jump_term(&atoms(&[(2.0, 1.0)]), &sq, &[x], &scheme).unwrap();
            assert!((v - 4.0).abs() < 1e-12);
        }
        // x^4 at x=1 with a unit jump: 16 - 1 - 4
        let quart = AnalyticField::polynomial(vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        let v = jump_term(&atoms(&[(1.0, 1.0)]), &quart, &[1.0], &scheme.clone().with_moment_order(4.0)).unwrap();
        assert!((v - 11.0).abs() < 1e-12);
    }

    #[test]
    fn growth_mismatch_is_reported() {
        let quart = AnalyticField::polynomial(vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        let err = jump_term(&atoms(&[(1.0, 1.0)]), &quart, &[1.0], &GeneratorScheme::default()).unwrap_err();
        assert!(matches!(err, Error::Growth { field: 4, .. }));
    }

    #[test]
    fn domain_errors_propagate() {
        let g = AnalyticField::polynomial(vec![0.0, 1.0]).with_domain(vec![-1.0], vec![1.0]);
        let err = local_term(&[0.0], &s(1.0), &g, &[2.0], &[0.0], &GeneratorScheme::default()).unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
    }

    #[test]
    fn generator_examples() {
        let scheme = GeneratorScheme::default();
        let zero = Action::scalar(0.0, 0.0);
        let g = AnalyticField::new(1, |x| x[0].cos() * 3.0);
        assert_eq!(apply_generator(&zero, &g, &[0.7], &[0.0], &scheme).unwrap(), 0.0);

        let a = Action::new(s(1.0), atoms(&[(1.0, 1.0)]), DVector::from_element(1, 0.5)).unwrap();
        let sq = AnalyticField::polynomial(vec![0.0, 0.0, 1.0]);
        let v = apply_generator(&a, &sq, &[2.0], &[0.0], &scheme).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
    }

    #[test]
    fn taylor_split_is_exact_on_quadratics() {
        let sq = AnalyticField::polynomial(vec![1.0, 0.5, 2.0]);
        let nu = atoms(&[(0.01, 3.0), (1.5, 0.2)]);
        let exact = jump_term(&nu, &sq, &[0.3], &GeneratorScheme::default()).unwrap();
        let split = jump_term(&nu, &sq, &[0.3], &GeneratorScheme::default().with_small_jump_split(0.1)).unwrap();
        assert!((exact - split).abs() < 1e-12);
        // tr(M · second moments) with M = 2
        let m2 = nu.second_moment_matrix().unwrap()[(0, 0)];
        assert!((exact - 2.0 * m2).abs() < 1e-12);
    }

    #[test]
    fn hjb_integrand_vanishes_for_zero_data() {
        let a = Action::new(s(1.3), atoms(&[(1.0, 0.4)]), DVector::from_element(1, -0.2)).unwrap();
        let zero = AnalyticField::constant(1, 0.0);
        let v = hjb_integrand(&a, &zero, &[0.5], 0.0, 2.0, &[0.1], &GeneratorScheme::default()).unwrap();
        assert_eq!(v, 0.0);
    }
}
