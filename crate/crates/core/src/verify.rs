//! Statistical checks on simulated paths: Dynkin martingales, sub/martingale
//! behaviour of Bellman processes, transversality, integrability and growth
//! certificates. Every decision uses a 3-standard-error envelope and is a pure
//! function of the recorded statistics.

use serde::{Deserialize, Serialize};

use crate::dynamics::{growth_lhs, mean_se, simulate, BellmanSeries, PathBundle, PolicyField, SimConfig};
use crate::error::{Error, Result};
use crate::generator::ScalarField;
use crate::measures::norm;

/// Decision threshold in standard errors.
pub const Z: f64 = 3.0;
/// Smallest bin that takes part in binned tests.
pub const MIN_BIN: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub label: String,
    pub value: f64,
    pub std_error: f64,
    /// Bound the value is compared against (meaning depends on the test).
    pub threshold: f64,
    pub passed: bool,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub name: String,
    pub passed: bool,
    pub statistics: Vec<Statistic>,
    pub notes: Vec<String>,
}

impl TestReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            passed: true,
            statistics: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn push(&mut self, s: Statistic) {
        self.passed &= s.passed;
        self.statistics.push(s);
    }

    fn note(&mut self, n: impl Into<String>) {
        self.notes.push(n.into());
    }

    pub fn failures(&self) -> impl Iterator<Item = &Statistic> {
        self.statistics.iter().filter(|s| !s.passed)
    }
}

/// `|mean| ≤ Z·SE`, with a rounding allowance when the SE vanishes.
fn within(mean: f64, se: f64) -> bool {
    mean.abs() <= Z * se + 1e-12 * (1.0 + mean.abs())
}

/// Dynkin check: `g(X_t) − g(x0) − ∫₀ᵗ L g ds` has mean zero at every
/// recorded time. `observer` indexes the bundle's integral of `L^a g`.
pub fn dynkin_test(bundle: &PathBundle, g: &dyn ScalarField, observer: usize, label: &str) -> Result<TestReport> {
    if observer >= bundle.n_observers {
        return Err(Error::Invalid(format!("observer {observer} was not recorded")));
    }
    let mut rep = TestReport::new(&format!("dynkin[{label}]"));
    let g0 = g.value(&bundle.x0)?;
    for (k, t) in bundle.times.iter().enumerate().skip(1) {
        let vals: Vec<f64> = (0..bundle.n_paths())
            .filter(|i| !bundle.paths[*i].diverged)
            .map(|i| Ok(g.value(bundle.state(i, k))? - g0 - bundle.observed(i, k, observer)))
            .collect::<Result<_>>()?;
        let (m, se, n) = mean_se(vals);
        rep.push(Statistic {
            label: format!("t={t}"),
            value: m,
            std_error: se,
            threshold: 0.0,
            passed: within(m, se),
            samples: n,
        });
    }
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum MartingaleMode {
    /// Every bin mean of `S_t − S_s` is `≥ −3 SE`.
    Submartingale,
    /// Every bin mean is within `±3 SE` of zero.
    Martingale,
}

/// Binned conditional-increment test for a Bellman series. `pairs` are
/// `(s, t)` indices into the recorded times; paths are binned into
/// `n_bins` equal-count bins of the first state coordinate at `s`.
pub fn submartingale_test(
    series: &BellmanSeries,
    pairs: &[(usize, usize)],
    n_bins: usize,
    mode: MartingaleMode,
) -> Result<TestReport> {
    let live: Vec<usize> = (0..series.n_paths).filter(|i| !series.excluded[*i]).collect();
    if live.len() < 1000 {
        return Err(Error::Invalid(format!(
            "need at least 1000 paths, got {}",
            live.len()
        )));
    }
    let name = match mode {
        MartingaleMode::Submartingale => "submartingale",
        MartingaleMode::Martingale => "martingale",
    };
    let mut rep = TestReport::new(name);
    let nt = series.times.len();
    for &(s, t) in pairs {
        if s >= t || t >= nt {
            return Err(Error::Invalid(format!("bad time pair ({s}, {t})")));
        }
        let mut order = live.clone();
        order.sort_by(|a, b| {
            series
                .coordinate(*a, s)
                .total_cmp(&series.coordinate(*b, s))
                .then(a.cmp(b))
        });
        let bins = n_bins.max(1);
        for b in 0..bins {
            let lo = b * order.len() / bins;
            let hi = (b + 1) * order.len() / bins;
            let members = &order[lo..hi];
            let label = format!(
                "s={},t={},bin={} x∈[{:.4},{:.4}]",
                series.times[s],
                series.times[t],
                b,
                members.first().map_or(f64::NAN, |i| series.coordinate(*i, s)),
                members.last().map_or(f64::NAN, |i| series.coordinate(*i, s)),
            );
            if members.len() < MIN_BIN {
                rep.note(format!("{label}: {} paths, excluded", members.len()));
                continue;
            }
            let (m, se, n) = mean_se(members.iter().map(|i| series.value(*i, t) - series.value(*i, s)));
            let passed = match mode {
                MartingaleMode::Submartingale => m >= -Z * se - 1e-12 * (1.0 + m.abs()),
                MartingaleMode::Martingale => within(m, se),
            };
            rep.push(Statistic {
                label,
                value: m,
                std_error: se,
                threshold: 0.0,
                passed,
                samples: n,
            });
        }
    }
    Ok(rep)
}

/// Number of path batches used for the decay-rate standard error.
pub const BATCHES: usize = 20;
/// Smallest effective-sample fraction at which a mean counts as resolved.
pub const MIN_ESS_FRACTION: f64 = 0.05;

/// Transversality surrogate: `m(t) = E[e^{−γ_t} φ(X_t)]` must be resolved
/// (effective sample size), eventually decreasing on the second half of the
/// lattice, and fit `A e^{−rt}` there with `r − 3 SE > 0`. This is a
/// sufficient condition for `m(t) → 0`, not an equivalent one.
pub fn transversality_test(policy: &PolicyField, phi: &dyn ScalarField, cfg: &SimConfig) -> Result<TestReport> {
    if cfg.discount.is_none() {
        return Err(Error::Invalid("transversality needs a discount".into()));
    }
    let cfg = if cfg.cost.is_none() {
        let mut c = cfg.clone();
        c.cost = Some(std::sync::Arc::new(crate::problem::CostSpec::zero().build(cfg.x0.len())?));
        c
    } else {
        cfg.clone()
    };
    let bundle = simulate(policy, &cfg)?;
    let nt = bundle.times.len();
    if nt < 4 {
        return Err(Error::Invalid("transversality needs at least four recorded times".into()));
    }
    let mut rep = TestReport::new("transversality");
    rep.note("sufficient, not equivalent: checks eventual decay and an exponential tail fit");
    let live: Vec<usize> = (0..bundle.n_paths()).filter(|i| !bundle.paths[*i].diverged).collect();
    if live.len() < bundle.n_paths() {
        rep.note(format!("{} diverged paths", bundle.n_paths() - live.len()));
        rep.passed = false;
    }
    let mut w = vec![vec![0.0; nt]; live.len()];
    for (r, &i) in live.iter().enumerate() {
        for (k, wk) in w[r].iter_mut().enumerate() {
            *wk = (-bundle.paths[i].gamma[k]).exp() * phi.value(bundle.state(i, k))?;
        }
    }
    let mut means = Vec::with_capacity(nt);
    let mut ses = Vec::with_capacity(nt);
    for k in 0..nt {
        let (m, se, n) = mean_se(w.iter().map(|row| row[k]));
        let sum: f64 = w.iter().map(|row| row[k].abs()).sum();
        let sq: f64 = w.iter().map(|row| row[k] * row[k]).sum();
        let ess = if sq > 0.0 { sum * sum / sq / n as f64 } else { 1.0 };
        means.push(m);
        ses.push(se);
        rep.push(Statistic {
            label: format!("ess_fraction t={}", bundle.times[k]),
            value: ess,
            std_error: 0.0,
            threshold: MIN_ESS_FRACTION,
            passed: ess >= MIN_ESS_FRACTION,
            samples: n,
        });
    }
    let tail: Vec<usize> = (nt / 2..nt).collect();
    for pair in tail.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let rise = means[b] - means[a];
        let se = (ses[a] * ses[a] + ses[b] * ses[b]).sqrt();
        rep.push(Statistic {
            label: format!("m({}) - m({})", bundle.times[b], bundle.times[a]),
            value: rise,
            std_error: se,
            threshold: 0.0,
            passed: rise <= Z * se + 1e-12 * means[a].abs(),
            samples: live.len(),
        });
    }
    // decay rate by least squares of log m on the tail, batch means for the SE
    let fit = |rows: &[Vec<f64>]| -> f64 {
        let pts: Vec<(f64, f64)> = tail
            .iter()
            .filter_map(|&k| {
                let m = rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
                (m > 0.0).then(|| (bundle.times[k], m.ln()))
            })
            .collect();
        if pts.len() < 2 {
            return f64::NAN;
        }
        let n = pts.len() as f64;
        let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let lm = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - lm)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
        -sxy / sxx
    };
    let r = fit(&w);
    let batch = live.len() / BATCHES;
    let rates: Vec<f64> = if batch >= 2 {
        (0..BATCHES).map(|b| fit(&w[b * batch..(b + 1) * batch])).collect()
    } else {
        Vec::new()
    };
    let r_se = if rates.iter().all(|v| v.is_finite()) && rates.len() >= 2 {
        mean_se(rates.iter().copied()).1
    } else {
        f64::INFINITY
    };
    rep.push(Statistic {
        label: "decay rate r".into(),
        value: r,
        std_error: r_se,
        threshold: 0.0,
        passed: r.is_finite() && r - Z * r_se > 0.0,
        samples: live.len(),
    });
    Ok(rep)
}

/// Pathwise `∫₀ᵀ Q^p_s ds` is finite on every path and its `q/2`-moment is
/// finite.
pub fn h2_integrability_check(bundle: &PathBundle, q: f64) -> Result<TestReport> {
    let mut rep = TestReport::new("h2_integrability");
    let mut values = Vec::with_capacity(bundle.n_paths());
    let mut bad = 0usize;
    for p in &bundle.paths {
        let ch = p
            .characteristics
            .as_ref()
            .ok_or_else(|| Error::Invalid("characteristics were not recorded".into()))?;
        if p.diverged || !ch.q_integral.is_finite() {
            bad += 1;
        } else {
            values.push(ch.q_integral);
        }
    }
    rep.push(Statistic {
        label: "non-finite or diverged paths".into(),
        value: bad as f64,
        std_error: 0.0,
        threshold: 0.0,
        passed: bad == 0,
        samples: bundle.n_paths(),
    });
    let (m, se, n) = mean_se(values.iter().map(|v| v.powf(q / 2.0)));
    rep.push(Statistic {
        label: format!("E[(∫Q ds)^{}]", q / 2.0),
        value: m,
        std_error: se,
        threshold: f64::INFINITY,
        passed: m.is_finite() && se.is_finite(),
        samples: n,
    });
    Ok(rep)
}

/// Evaluates the growth bound on a tensor lattice of `points` per axis over
/// the box `[lo, hi]`.
pub fn growth_certificate_check(
    policy: &PolicyField,
    lo: &[f64],
    hi: &[f64],
    points: usize,
    k: f64,
    p: f64,
) -> Result<TestReport> {
    let n = lo.len();
    if hi.len() != n || policy.policy.dim() != n || points < 2 {
        return Err(Error::Invalid("probe box does not match the policy".into()));
    }
    let mut rep = TestReport::new("growth_certificate");
    let total = points.pow(n as u32);
    let mut worst = (0.0f64, Vec::new());
    for flat in 0..total {
        let mut rem = flat;
        let x: Vec<f64> = (0..n)
            .map(|d| {
                let i = rem % points;
                rem /= points;
                lo[d] + (hi[d] - lo[d]) * i as f64 / (points - 1) as f64
            })
            .collect();
        let a = policy.policy.action(&x);
        let lhs = growth_lhs(&a, &x, p)?;
        let ratio = lhs / (k * (1.0 + norm(&x).powf(p)));
        if !(ratio <= worst.0) {
            worst = (ratio, x);
        }
    }
    rep.push(Statistic {
        label: format!("max lhs / K(1+|x|^p) at {:?}", worst.1),
        value: worst.0,
        std_error: 0.0,
        threshold: 1.0,
        passed: worst.0 <= 1.0,
        samples: total,
    });
    Ok(rep)
}

/// Moment ratios at the horizon for each recorded order `q`:
/// `E[sup|X^d|^q] / (E[G^{q/2}] + E[H_q])` and
/// `E[sup|X^c|^q] / E[(∫‖σ‖²)^{q/2}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRatio {
    pub q: f64,
    pub discontinuous: f64,
    pub continuous: f64,
    pub sup_d_moment: f64,
    pub sup_c_moment: f64,
    pub g_moment: f64,
    pub h_mean: f64,
    pub sigma_moment: f64,
}

pub fn moment_ratios(bundle: &PathBundle) -> Result<Vec<MomentRatio>> {
    let chs: Vec<_> = bundle
        .paths
        .iter()
        .filter(|p| !p.diverged)
        .map(|p| p.characteristics.as_ref())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Invalid("characteristics were not recorded".into()))?;
    let n = chs.len() as f64;
    Ok(bundle
        .moment_orders
        .iter()
        .enumerate()
        .map(|(j, &q)| {
            let mean = |f: &dyn Fn(&crate::dynamics::PathCharacteristics) -> f64| chs.iter().map(|c| f(c)).sum::<f64>() / n;
            let sup_d = mean(&|c| c.sup_discontinuous.powf(q));
            let sup_c = mean(&|c| c.sup_continuous.powf(q));
            let g = mean(&|c| c.g.powf(q / 2.0));
            let h = mean(&|c| c.h[j]);
            let s = mean(&|c| c.sigma_integral.powf(q / 2.0));
            MomentRatio {
                q,
                discontinuous: sup_d / (g + h),
                continuous: if s > 0.0 { sup_c / s } else { 0.0 },
                sup_d_moment: sup_d,
                sup_c_moment: sup_c,
                g_moment: g,
                h_mean: h,
                sigma_moment: s,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Action;
    use crate::dynamics::{bellman_series, LinearFeedback};
    use crate::generator::AnalyticField;
    use crate::lq;
    use crate::problem::{ConstantDiscount, CostSpec};
    use nalgebra::{DMatrix, DVector};
    use std::sync::Arc;

    #[test]
    fn constant_series_is_a_martingale() {
        let cfg = SimConfig::new(vec![0.0], 1.0, 0.1, 1000, 1).with_cost(
            Arc::new(CostSpec::zero().build(1).unwrap()),
            Arc::new(ConstantDiscount(1e-300)),
        );
        let b = simulate(&PolicyField::constant(Action::scalar(1.0, 0.0)), &cfg).unwrap();
        let s = bellman_series(&AnalyticField::constant(1, 2.0), &b).unwrap();
        let rep = submartingale_test(&s, &[(0, 5), (5, 10)], 4, MartingaleMode::Martingale).unwrap();
        assert!(rep.passed);
    }

    #[test]
    fn small_ensembles_are_rejected() {
        let cfg = SimConfig::new(vec![0.0], 1.0, 0.1, 10, 1).with_cost(
            Arc::new(CostSpec::zero().build(1).unwrap()),
            Arc::new(ConstantDiscount(1.0)),
        );
        let b = simulate(&PolicyField::constant(Action::scalar(1.0, 0.0)), &cfg).unwrap();
        let s = bellman_series(&AnalyticField::constant(1, 2.0), &b).unwrap();
        assert!(submartingale_test(&s, &[(0, 5)], 2, MartingaleMode::Martingale).is_err());
    }

    #[test]
    fn bounded_phi_passes_transversality() {
        let mut cfg = SimConfig::new(vec![0.0], 4.0, 0.01, 2000, 3).with_record_every(50);
        cfg.discount = Some(Arc::new(ConstantDiscount(0.5)));
        let phi = AnalyticField::new(1, |x| 1.0 / (1.0 + x[0] * x[0]));
        let rep = transversality_test(&PolicyField::constant(Action::scalar(1.0, 0.0)), &phi, &cfg).unwrap();
        assert!(rep.passed, "{rep:#?}");
        let r = rep.statistics.last().unwrap();
        assert!(r.value >= 0.5 - 3.0 * r.std_error);
    }

    #[test]
    fn growth_certificates() {
        let sol = lq::solve(&lq::LqSpec::scalar(1.0, 1.0, 3.0, 0.0, 1.0)).unwrap();
        let q = sol.q_gain.norm();
        let k = 2.0 * (q * q + sol.v.norm_squared()) + sol.sigma.norm_squared();
        let pol = PolicyField::new(LinearFeedback::from_lq(&sol, 1.0));
        assert!(growth_certificate_check(&pol, &[-10.0], &[10.0], 41, k, 2.0).unwrap().passed);
        let bad = PolicyField::new(crate::dynamics::FeedbackPolicy::new(1, |x: &[f64]| {
            Action::scalar(1.0, x[0] * x[0])
        }));
        assert!(!growth_certificate_check(&bad, &[-10.0], &[10.0], 41, 50.0, 2.0).unwrap().passed);
        let constant = PolicyField::constant(
            Action::new(DMatrix::identity(1, 1), crate::measures::JumpMeasure::zero(1), DVector::from_element(1, 0.5)).unwrap(),
        );
        assert!(growth_certificate_check(&constant, &[-3.0], &[3.0], 11, 1.25, 2.0).unwrap().passed);
    }

    #[test]
    fn constant_action_q_integral() {
        let a = Action::scalar(2.0, 0.5);
        let cfg = SimConfig::new(vec![0.0], 2.0, 0.01, 4, 0).with_characteristics();
        let b = simulate(&PolicyField::constant(a), &cfg).unwrap();
        for p in &b.paths {
            let q = p.characteristics.as_ref().unwrap().q_integral;
            assert!((q - 2.0 * 4.5).abs() < 1e-9);
        }
        assert!(h2_integrability_check(&b, 2.0).unwrap().passed);
    }
}
