//! Actions `a = (σ, ν, μ)`: dispersion, jump intensity and drift.

use std::borrow::Cow;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{matrix_from_rows, Atom, JumpMeasure, MeasureSpec};

/// Jump component of an action.
#[derive(Debug, Clone, PartialEq)]
pub enum Jumps {
    /// A fixed intensity measure `ν`, compensated in the generator.
    Measure(Arc<JumpMeasure>),
    /// Jump to `target` at `rate`: at state `x` the intensity is
    /// `rate · δ_{target - x}` and the drift is raised by
    /// `∫ y ν(dy) = rate · (target - x)`, so the jumps enter uncompensated.
    Reset { target: Vec<f64>, rate: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub sigma: DMatrix<f64>,
    pub jumps: Jumps,
    pub mu: DVector<f64>,
}

impl Action {
    pub fn new(sigma: DMatrix<f64>, nu: JumpMeasure, mu: DVector<f64>) -> Result<Self> {
        let a = Self {
            sigma,
            jumps: Jumps::Measure(Arc::new(nu)),
            mu,
        };
        a.check()?;
        Ok(a)
    }

    pub fn reset(sigma: DMatrix<f64>, target: Vec<f64>, rate: f64, mu: DVector<f64>) -> Result<Self> {
        let a = Self {
            sigma,
            jumps: Jumps::Reset { target, rate },
            mu,
        };
        a.check()?;
        Ok(a)
    }

    /// Pure diffusion `(σ, 0, μ)` in one dimension.
    pub fn scalar(sigma: f64, mu: f64) -> Self {
        Self {
            sigma: DMatrix::from_element(1, 1, sigma),
            jumps: Jumps::Measure(Arc::new(JumpMeasure::zero(1))),
            mu: DVector::from_element(1, mu),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn with_mu(&self, mu: DVector<f64>) -> Self {
        Self {
            sigma: self.sigma.clone(),
            jumps: self.jumps.clone(),
            mu,
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.mu.len();
        if self.sigma.nrows() != n || self.sigma.ncols() != n {
            return Err(Error::Dimension {
                expected: n,
                got: self.sigma.nrows(),
            });
        }
        if self.sigma.iter().chain(self.mu.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("action has non-finite σ or μ".into()));
        }
        match &self.jumps {
            Jumps::Measure(nu) if nu.dim() != n => Err(Error::Dimension {
                expected: n,
                got: nu.dim(),
            }),
            Jumps::Reset { target, rate } => {
                if target.len() != n {
                    return Err(Error::Dimension {
                        expected: n,
                        got: target.len(),
                    });
                }
                if !(*rate >= 0.0) || !rate.is_finite() {
                    return Err(Error::Invalid(format!("reset rate {rate}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// The intensity measure in force at state `x`.
    pub fn measure_at(&self, x: &[f64]) -> Result<Cow<'_, JumpMeasure>> {
        match &self.jumps {
            Jumps::Measure(nu) => Ok(Cow::Borrowed(nu.as_ref())),
            Jumps::Reset { target, rate } => {
                let y: Vec<f64> = target.iter().zip(x).map(|(t, xi)| t - xi).collect();
                if *rate == 0.0 || y.iter().all(|v| *v == 0.0) {
                    Ok(Cow::Owned(JumpMeasure::zero(x.len())))
                } else {
                    Ok(Cow::Owned(JumpMeasure::atomic(x.len(), vec![Atom::new(y, *rate)])?))
                }
            }
        }
    }

    /// Drift `μ` actually in force at `x` (includes the reset drift).
    pub fn drift_at(&self, x: &[f64]) -> Vec<f64> {
        let mut d: Vec<f64> = self.mu.iter().copied().collect();
        if let Jumps::Reset { target, rate } = &self.jumps {
            for ((di, t), xi) in d.iter_mut().zip(target).zip(x) {
                *di += rate * (t - xi);
            }
        }
        d
    }

    /// [`Action::drift_at`] into a caller-provided buffer.
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.mu.as_slice());
        if let Jumps::Reset { target, rate } = &self.jumps {
            for ((di, t), xi) in out.iter_mut().zip(target).zip(x) {
                *di += rate * (t - xi);
            }
        }
    }

    /// `ν_x(R^n \ {0})`.
    pub fn jump_rate_at(&self, x: &[f64]) -> f64 {
        match &self.jumps {
            Jumps::Measure(nu) => nu.total_mass().value,
            Jumps::Reset { target, rate } => {
                if target.iter().zip(x).all(|(t, xi)| t == xi) {
                    0.0
                } else {
                    *rate
                }
            }
        }
    }

    /// Largest jump rate over all states.
    pub fn max_jump_rate(&self) -> f64 {
        match &self.jumps {
            Jumps::Measure(nu) => nu.total_mass().value,
            Jumps::Reset { rate, .. } => *rate,
        }
    }

    /// Continuous covariance `σσᵀ` plus any small-jump substitute.
    pub fn diffusion_cov(&self) -> DMatrix<f64> {
        let mut c = &self.sigma * self.sigma.transpose();
        if let Jumps::Measure(nu) = &self.jumps {
            if let Some(extra) = nu.small_jump_cov() {
                c += extra;
            }
        }
        c
    }
}

/// Configuration form of an [`Action`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct ActionSpec {
    pub sigma: Vec<Vec<f64>>,
    #[serde(default)]
    pub jumps: Option<MeasureSpec>,
    #[serde(default)]
    pub reset: Option<ResetSpec>,
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct ResetSpec {
    pub target: Vec<f64>,
    pub rate: f64,
}

impl ActionSpec {
    pub fn build(&self) -> Result<Action> {
        let n = self.mu.len();
        let sigma = matrix_from_rows(&self.sigma, n)?;
        let mu = DVector::from_vec(self.mu.clone());
        match (&self.jumps, &self.reset) {
            (Some(_), Some(_)) => Err(Error::Invalid(
                "an action takes either `jumps` or `reset`, not both".into(),
            )),
            (_, Some(r)) => Action::reset(sigma, r.target.clone(), r.rate, mu),
            (Some(m), None) => Action::new(sigma, m.build(n)?, mu),
            (None, None) => Action::new(sigma, JumpMeasure::zero(n), mu),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_measure_follows_state() {
        let a = Action::reset(DMatrix::identity(1, 1), vec![0.0], 1.0, DVector::zeros(1)).unwrap();
        let nu = a.measure_at(&[2.5]).unwrap();
        assert_eq!(nu.first_moment().unwrap(), vec![-2.5]);
        assert_eq!(a.drift_at(&[2.5]), vec![-2.5]);
        assert!(a.measure_at(&[0.0]).unwrap().is_zero());
        assert_eq!(a.jump_rate_at(&[0.0]), 0.0);
    }

    #[test]
    fn spec_rejects_mixed_jumps() {
        let spec = ActionSpec {
            sigma: vec![vec![1.0]],
            jumps: Some(MeasureSpec::Zero),
            reset: Some(ResetSpec {
                target: vec![0.0],
                rate: 1.0,
            }),
            mu: vec![0.0],
        };
        assert!(spec.build().is_err());
    }

    #[test]
    fn dimension_checks() {
        assert!(Action::new(DMatrix::identity(2, 2), JumpMeasure::zero(1), DVector::zeros(2)).is_err());
    }
}
