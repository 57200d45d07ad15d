//! Euler simulation of controlled jump diffusions under Markov policies.
//!
//! One step from `(t, X)` under action `a = π(X)`:
//!
//! ```text
//! X ← X + (u + μ − ∫y ν(dy)) dt + σ √dt ξ + Σ jumps
//! ```
//!
//! Jump arrivals come from a Poisson clock of rate `Λ ≥ ν(R^n)` thinned with
//! acceptance probability `ν(R^n)/Λ`; sizes are drawn from `ν/ν(R^n)`.

use std::borrow::Cow;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::error::{Error, Result};
use crate::generator::ScalarField;
use crate::hjb::PolicyTable;
use crate::lq::LqSolution;
use crate::measures::{norm, JumpMeasure};
use crate::problem::{ActionSet, CostFunction, DiscountFunction};

/// Markov control `x ↦ a(x)`.
pub trait Policy: Send + Sync {
    fn dim(&self) -> usize;

    fn action(&self, x: &[f64]) -> Cow<'_, Action>;

    /// Identifier of the action in force, for exports.
    fn action_id(&self, _x: &[f64]) -> u32 {
        0
    }
}

/// The same action everywhere.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub Action);

impl Policy for ConstantPolicy {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn action(&self, _x: &[f64]) -> Cow<'_, Action> {
        Cow::Borrowed(&self.0)
    }
}

/// Closure-backed feedback.
pub struct FeedbackPolicy<F> {
    dim: usize,
    f: F,
}

impl<F> FeedbackPolicy<F>
where
    F: Fn(&[f64]) -> Action + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Policy for FeedbackPolicy<F>
where
    F: Fn(&[f64]) -> Action + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn action(&self, x: &[f64]) -> Cow<'_, Action> {
        Cow::Owned((self.f)(x))
    }
}

/// Fixed dispersion pair with linear drift `μ(x) = scale · (−Qx + v)`.
#[derive(Debug, Clone)]
pub struct LinearFeedback {
    base: Action,
    gain: DMatrix<f64>,
    offset: DVector<f64>,
}

impl LinearFeedback {
    /// Optimal feedback of a quadratic problem, drift scaled by `scale`.
    pub fn from_lq(sol: &LqSolution, scale: f64) -> Self {
        let base = sol.optimal_action(&vec![0.0; sol.dim()]);
        Self {
            base,
            gain: -&sol.q_gain * scale,
            offset: &sol.v * scale,
        }
    }

    pub fn new(base: Action, gain: DMatrix<f64>, offset: DVector<f64>) -> Self {
        Self { base, gain, offset }
    }
}

impl Policy for LinearFeedback {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn action(&self, x: &[f64]) -> Cow<'_, Action> {
        let mu = &self.gain * DVector::from_column_slice(x) + &self.offset;
        Cow::Owned(self.base.with_mu(mu))
    }
}

/// Nearest-node lookup in a policy table.
#[derive(Debug, Clone)]
pub struct TablePolicy {
    table: PolicyTable,
    actions: ActionSet,
    cache: Vec<Action>,
}

impl TablePolicy {
    pub fn new(table: PolicyTable, actions: ActionSet) -> Result<Self> {
        table.validate(&actions)?;
        let cache = (0..table.grid().len())
            .map(|i| table.action_at_node(&actions, i))
            .collect();
        Ok(Self { table, actions, cache })
    }

    pub fn actions(&self) -> &ActionSet {
        &self.actions
    }
}

impl Policy for TablePolicy {
    fn dim(&self) -> usize {
        self.table.grid().dim()
    }

    fn action(&self, x: &[f64]) -> Cow<'_, Action> {
        Cow::Borrowed(&self.cache[self.table.grid().nearest_node(x)])
    }

    fn action_id(&self, x: &[f64]) -> u32 {
        self.table.choices()[self.table.grid().nearest_node(x)].action as u32
    }
}

/// Claimed growth bound `|μ(x)|^p + ‖σ(x)‖^p + M_p(ν_x) ≤ K (1 + |x|^p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct GrowthCertificate {
    pub k: f64,
    pub p: f64,
}

/// Left side of the growth bound at `x` (Frobenius norm for `σ`).
pub fn growth_lhs(a: &Action, x: &[f64], p: f64) -> Result<f64> {
    let mu = norm(&a.drift_at(x));
    let sigma = a.sigma.norm();
    let nu = a.measure_at(x)?;
    Ok(mu.powf(p) + sigma.powf(p) + nu.moment_functional(p)?)
}

/// A policy together with an optional admissibility certificate.
#[derive(Clone)]
pub struct PolicyField {
    pub policy: Arc<dyn Policy>,
    pub certificate: Option<GrowthCertificate>,
}

impl fmt::Debug for PolicyField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PolicyField")
            .field("dim", &self.policy.dim())
            .field("certificate", &self.certificate)
            .finish()
    }
}

impl PolicyField {
    pub fn new(policy: impl Policy + 'static) -> Self {
        Self {
            policy: Arc::new(policy),
            certificate: None,
        }
    }

    pub fn constant(a: Action) -> Self {
        Self::new(ConstantPolicy(a))
    }

    pub fn with_certificate(mut self, k: f64, p: f64) -> Self {
        self.certificate = Some(GrowthCertificate { k, p });
        self
    }
}

/// Running functional `F(x, a)` integrated along paths.
pub type Observer = Arc<dyn Fn(&[f64], &Action) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct SimConfig {
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Thinning rate `Λ`. `None` thins at the local rate `ν_x(R^n)`.
    pub jump_rate_bound: Option<f64>,
    /// Record every this many steps (the final time is always recorded).
    pub record_every: usize,
    pub record_characteristics: bool,
    pub u: Vec<f64>,
    pub cost: Option<Arc<dyn CostFunction>>,
    pub discount: Option<Arc<dyn DiscountFunction>>,
    /// Extra undiscounted integrals `∫ F(X_s, a_s) ds` (trapezoidal rule on
    /// the step grid).
    pub observers: Vec<Observer>,
    /// Orders `q` for `H_t = ∫∫_{|y|>1} |y|^q ν_s(dy) ds`.
    pub moment_orders: Vec<f64>,
    /// Order `p` of `∫ Q^p_s ds = ∫ (|μ| + ‖σ‖² + M_p(ν)) ds`.
    pub p: f64,
    /// Bin edges on the first jump coordinate for jump histograms.
    pub jump_bins: Vec<f64>,
    /// Paths with `|X| >` this are frozen and flagged as diverged.
    pub blowup: f64,
}

impl fmt::Debug for SimConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimConfig")
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .field("dt", &self.dt)
            .field("n_paths", &self.n_paths)
            .field("seed", &self.seed)
            .field("jump_rate_bound", &self.jump_rate_bound)
            .field("record_every", &self.record_every)
            .finish_non_exhaustive()
    }
}

impl SimConfig {
    pub fn new(x0: Vec<f64>, horizon: f64, dt: f64, n_paths: usize, seed: u64) -> Self {
        let n = x0.len();
        Self {
            x0,
            horizon,
            dt,
            n_paths,
            seed,
            jump_rate_bound: None,
            record_every: 1,
            record_characteristics: false,
            u: vec![0.0; n],
            cost: None,
            discount: None,
            observers: Vec::new(),
            moment_orders: Vec::new(),
            p: 2.0,
            jump_bins: Vec::new(),
            blowup: 1e12,
        }
    }

    pub fn with_record_every(mut self, k: usize) -> Self {
        self.record_every = k;
        self
    }

    pub fn with_characteristics(mut self) -> Self {
        self.record_characteristics = true;
        self
    }

    pub fn with_cost(mut self, cost: Arc<dyn CostFunction>, discount: Arc<dyn DiscountFunction>) -> Self {
        self.cost = Some(cost);
        self.discount = Some(discount);
        self
    }

    pub fn with_observer(mut self, f: impl Fn(&[f64], &Action) -> f64 + Send + Sync + 'static) -> Self {
        self.observers.push(Arc::new(f));
        self
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round().max(1.0) as usize
    }

    /// Step indices at which states are recorded.
    pub fn record_steps(&self) -> Vec<usize> {
        let n = self.steps();
        let every = self.record_every.max(1);
        let mut out: Vec<usize> = (0..=n).step_by(every).collect();
        if *out.last().expect("step 0") != n {
            out.push(n);
        }
        out
    }

    fn validate(&self, policy: &PolicyField) -> Result<()> {
        if !(self.dt > 0.0) || !(self.horizon >= 0.0) {
            return Err(Error::Invalid("need dt > 0 and a non-negative horizon".into()));
        }
        if self.n_paths == 0 {
            return Err(Error::Invalid("need at least one path".into()));
        }
        let n = self.x0.len();
        if policy.policy.dim() != n || self.u.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: policy.policy.dim(),
            });
        }
        if let Some(l) = self.jump_rate_bound {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::Invalid(format!("thinning bound {l} must be finite")));
            }
        }
        if self.jump_bins.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Invalid("jump bin edges must increase".into()));
        }
        Ok(())
    }
}

/// Triplet observations and moment functionals along one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathCharacteristics {
    /// `B^h` reconstructed from the path (`n_times × dim`).
    pub b_h_observed: Vec<f64>,
    /// `∫ (u + μ) ds − ∫∫ (y − h(y)) ν ds` from the recorded actions.
    pub b_h_predicted: Vec<f64>,
    /// `C_t = ∫ σσᵀ ds` (`n_times × dim²`, row-major).
    pub c: Vec<f64>,
    /// Cumulative jump count per recorded time.
    pub jump_count: Vec<u32>,
    /// `∫ ν_s(R^n) ds` per recorded time.
    pub compensator_mass: Vec<f64>,
    /// `(time, size)` of every jump.
    pub jumps: Vec<(f64, Vec<f64>)>,
    /// Jumps per bin of `cfg.jump_bins` (first coordinate).
    pub bin_counts: Vec<u32>,
    /// `∫ ν_s(bin) ds` per bin.
    pub bin_compensator: Vec<f64>,
    /// `sup_s |X^c_s|` and `sup_s |X^d_s|` over the horizon.
    pub sup_continuous: f64,
    pub sup_discontinuous: f64,
    /// `∫ ‖σ_s‖² ds`.
    pub sigma_integral: f64,
    /// `G_T = ∫∫ |y|² ν_s(dy) ds`.
    pub g: f64,
    /// `H_T` for each of `cfg.moment_orders`.
    pub h: Vec<f64>,
    /// `∫ Q^p_s ds`.
    pub q_integral: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    /// `n_times × dim`.
    pub states: Vec<f64>,
    pub action_ids: Vec<u32>,
    /// `γ_t = ∫ q ds`.
    pub gamma: Vec<f64>,
    /// `∫ e^{−γ_s} f ds`.
    pub cost: Vec<f64>,
    /// `n_times × n_observers`.
    pub observed: Vec<f64>,
    pub diverged: bool,
    pub characteristics: Option<PathCharacteristics>,
}

/// Simulated paths on a common time lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub times: Vec<f64>,
    pub dim: usize,
    pub n_observers: usize,
    pub has_cost: bool,
    pub seed: u64,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub jump_bins: Vec<f64>,
    pub moment_orders: Vec<f64>,
    pub paths: Vec<PathRecord>,
}

impl PathBundle {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn state(&self, path: usize, time: usize) -> &[f64] {
        &self.paths[path].states[time * self.dim..(time + 1) * self.dim]
    }

    pub fn observed(&self, path: usize, time: usize, k: usize) -> f64 {
        self.paths[path].observed[time * self.n_observers + k]
    }

    pub fn diverged_paths(&self) -> usize {
        self.paths.iter().filter(|p| p.diverged).count()
    }

    /// CSV rows `path,t,x_0..,action,gamma,cost[,S]`.
    pub fn write_csv<W: Write>(&self, mut w: W, bellman: Option<&BellmanSeries>) -> std::io::Result<()> {
        let mut header = vec!["path".to_string(), "t".to_string()];
        header.extend((0..self.dim).map(|k| format!("x{k}")));
        header.extend(["action".to_string(), "gamma".to_string(), "cost".to_string()]);
        if bellman.is_some() {
            header.push("S".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for (i, p) in self.paths.iter().enumerate() {
            for (k, t) in self.times.iter().enumerate() {
                write!(w, "{i},{t:.16e}")?;
                for v in &p.states[k * self.dim..(k + 1) * self.dim] {
                    write!(w, ",{v:.16e}")?;
                }
                write!(w, ",{},{:.16e},{:.16e}", p.action_ids[k], p.gamma[k], p.cost[k])?;
                if let Some(b) = bellman {
                    write!(w, ",{:.16e}", b.value(i, k))?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

fn check_certificate(policy: &PolicyField, a: &Action, x: &[f64], t: f64) -> Result<()> {
    if let Some(c) = &policy.certificate {
        let lhs = growth_lhs(a, x, c.p)?;
        let rhs = c.k * (1.0 + norm(x).powf(c.p));
        if !(lhs <= rhs) {
            return Err(Error::Admissibility {
                time: t,
                state: x.to_vec(),
                detail: format!("growth bound violated: {lhs:.6e} > K(1+|x|^p) = {rhs:.6e}"),
            });
        }
    }
    Ok(())
}

struct StepMeasure<'a> {
    nu: Cow<'a, JumpMeasure>,
    rate: f64,
}

/// Measure in force at `x`; writes its first moment into `first`.
fn step_measure<'a>(a: &'a Action, x: &[f64], first: &mut [f64]) -> Result<StepMeasure<'a>> {
    let nu = a.measure_at(x)?;
    let mass = nu.total_mass();
    if mass.possibly_infinite {
        return Err(Error::UnsupportedMeasure(
            "simulation needs finite jump activity; attach a small-jump covariance".into(),
        ));
    }
    first.fill(0.0);
    for (y, w) in nu.nodes() {
        for (m, yi) in first.iter_mut().zip(y) {
            *m += w * yi;
        }
    }
    if first.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("first moment".into()));
    }
    Ok(StepMeasure { rate: mass.value, nu })
}

fn simulate_path(policy: &PolicyField, cfg: &SimConfig, path: usize, records: &[usize]) -> Result<PathRecord> {
    let n = cfg.x0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(path as u64);
    let n_times = records.len();
    let n_obs = cfg.observers.len();
    let mut rec = PathRecord {
        states: Vec::with_capacity(n_times * n),
        action_ids: Vec::with_capacity(n_times),
        gamma: Vec::with_capacity(n_times),
        cost: Vec::with_capacity(n_times),
        observed: Vec::with_capacity(n_times * n_obs),
        diverged: false,
        characteristics: None,
    };
    let n_bins = cfg.jump_bins.len().saturating_sub(1);
    let mut ch = cfg.record_characteristics.then(|| PathCharacteristics {
        b_h_observed: Vec::with_capacity(n_times * n),
        b_h_predicted: Vec::with_capacity(n_times * n),
        c: Vec::with_capacity(n_times * n * n),
        jump_count: Vec::with_capacity(n_times),
        compensator_mass: Vec::with_capacity(n_times),
        jumps: Vec::new(),
        bin_counts: vec![0; n_bins],
        bin_compensator: vec![0.0; n_bins],
        sup_continuous: 0.0,
        sup_discontinuous: 0.0,
        sigma_integral: 0.0,
        g: 0.0,
        h: vec![0.0; cfg.moment_orders.len()],
        q_integral: 0.0,
    });
    let mut x = cfg.x0.clone();
    let mut gamma = 0.0;
    let mut cost = 0.0;
    let mut obs = vec![0.0; n_obs];
    let mut obs_prev = vec![0.0; n_obs];
    // continuous and discontinuous martingale parts, predicted B^h, C, h-jump sums
    let mut xc = vec![0.0; n];
    let mut xd = vec![0.0; n];
    let mut bh_pred = vec![0.0; n];
    let mut c_acc = DMatrix::<f64>::zeros(n, n);
    let mut small_jump_comp = vec![0.0; n];
    let mut jump_sum = vec![0.0; n];
    let mut count = 0u32;
    let mut comp_mass = 0.0;
    let dt = cfg.dt;
    let sqdt = dt.sqrt();
    let mut next_record = 0;
    let total = cfg.steps();
    let mut xi = vec![0.0; n];
    let mut jump = vec![0.0; n];
    let mut first = vec![0.0; n];
    let mut drift = vec![0.0; n];
    let mut dxc = vec![0.0; n];
    let mut djump = vec![0.0; n];
    let mut last_id = 0u32;
    for step in 0..=total {
        let t = step as f64 * dt;
        let a = if rec.diverged {
            None
        } else {
            last_id = policy.policy.action_id(&x);
            Some(policy.policy.action(&x))
        };
        if let Some(a) = &a {
            for ((o, prev), f) in obs.iter_mut().zip(obs_prev.iter_mut()).zip(&cfg.observers) {
                let cur = f(&x, a);
                if step > 0 {
                    *o += 0.5 * (*prev + cur) * dt;
                }
                *prev = cur;
            }
        }
        if next_record < n_times && records[next_record] == step {
            rec.states.extend_from_slice(&x);
            rec.action_ids.push(last_id);
            rec.gamma.push(gamma);
            rec.cost.push(cost);
            rec.observed.extend_from_slice(&obs);
            if let Some(ch) = ch.as_mut() {
                // B^h = X − x0 − X^c − Σ ΔX + ∫∫ h(y) ν(dy) ds
                for k in 0..n {
                    ch.b_h_observed.push(x[k] - cfg.x0[k] - xc[k] - jump_sum[k] + small_jump_comp[k]);
                }
                ch.b_h_predicted.extend_from_slice(&bh_pred);
                ch.c.extend(c_acc.transpose().iter().copied());
                ch.jump_count.push(count);
                ch.compensator_mass.push(comp_mass);
            }
            next_record += 1;
        }
        let Some(a) = a else { continue };
        if step == total {
            break;
        }
        check_certificate(policy, &a, &x, t)?;
        let sm = step_measure(&a, &x, &mut first)?;
        a.drift_into(&x, &mut drift);
        if let (Some(cf), Some(df)) = (&cfg.cost, &cfg.discount) {
            let q = df.eval(&x, &a);
            let f = cf.eval(&x, &a);
            let weight = if q != 0.0 { -(-q * dt).exp_m1() / q } else { dt };
            cost += (-gamma).exp() * f * weight;
            gamma += q * dt;
        }
        if let Some(ch) = ch.as_mut() {
            let cov = a.diffusion_cov();
            c_acc += &cov * dt;
            ch.sigma_integral += cov.trace() * dt;
            let mut hmass = vec![0.0; n];
            let mut g = 0.0;
            let mut hq = vec![0.0; cfg.moment_orders.len()];
            for (y, w) in sm.nu.nodes() {
                let r = norm(y);
                g += w * r * r;
                if r <= 1.0 {
                    for k in 0..n {
                        hmass[k] += w * y[k];
                    }
                } else {
                    for (h, qo) in hq.iter_mut().zip(&cfg.moment_orders) {
                        *h += w * r.powf(*qo);
                    }
                }
                if n_bins > 0 {
                    if let Some(b) = bin_of(&cfg.jump_bins, y[0]) {
                        ch.bin_compensator[b] += w * dt;
                    }
                }
            }
            ch.g += g * dt;
            for (acc, h) in ch.h.iter_mut().zip(hq) {
                *acc += h * dt;
            }
            for k in 0..n {
                small_jump_comp[k] += hmass[k] * dt;
                // ∫ (y − h(y)) ν = first moment − ∫ h ν
                bh_pred[k] += (drift[k] + cfg.u[k] - (first[k] - hmass[k])) * dt;
            }
            ch.q_integral += (norm(&drift) + a.sigma.norm_squared() + sm.nu.moment_functional(cfg.p)?) * dt;
        }
        comp_mass += sm.rate * dt;
        // diffusion
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let cov_sigma = &a.sigma;
        dxc.fill(0.0);
        for r in 0..n {
            for c in 0..n {
                dxc[r] += cov_sigma[(r, c)] * xi[c] * sqdt;
            }
        }
        if let crate::action::Jumps::Measure(m) = &a.jumps {
            if let Some(extra) = m.small_jump_cov() {
                let l = extra.clone().cholesky().map(|c| c.l()).unwrap_or_else(|| DMatrix::zeros(n, n));
                for v in xi.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                for r in 0..n {
                    for c in 0..n {
                        dxc[r] += l[(r, c)] * xi[c] * sqdt;
                    }
                }
            }
        }
        // jumps
        djump.fill(0.0);
        if sm.rate > 0.0 {
            let bound = cfg.jump_rate_bound.unwrap_or(sm.rate);
            if sm.rate > bound * (1.0 + 1e-12) {
                return Err(Error::Invalid(format!(
                    "jump rate {} exceeds the thinning bound {bound} at x={x:?}",
                    sm.rate
                )));
            }
            let candidates = if bound * dt > 0.0 {
                Poisson::new(bound * dt).expect("positive Poisson mean").sample(&mut rng) as u64
            } else {
                0
            };
            for _ in 0..candidates {
                let accept = sm.rate >= bound || rng.random::<f64>() * bound < sm.rate;
                if !accept {
                    continue;
                }
                sm.nu.sample_jump_into(&mut rng, &mut jump)?;
                for k in 0..n {
                    djump[k] += jump[k];
                }
                count += 1;
                if let Some(ch) = ch.as_mut() {
                    ch.jumps.push((t + dt, jump.clone()));
                    if n_bins > 0 {
                        if let Some(b) = bin_of(&cfg.jump_bins, jump[0]) {
                            ch.bin_counts[b] += 1;
                        }
                    }
                }
            }
        }
        for k in 0..n {
            x[k] += (cfg.u[k] + drift[k] - first[k]) * dt + dxc[k] + djump[k];
            xc[k] += dxc[k];
            xd[k] += djump[k] - first[k] * dt;
            jump_sum[k] += djump[k];
        }
        if let Some(ch) = ch.as_mut() {
            ch.sup_continuous = ch.sup_continuous.max(norm(&xc));
            ch.sup_discontinuous = ch.sup_discontinuous.max(norm(&xd));
        }
        if !x.iter().all(|v| v.is_finite()) || norm(&x) > cfg.blowup {
            rec.diverged = true;
            for v in x.iter_mut() {
                if !v.is_finite() {
                    *v = f64::NAN;
                }
            }
        }
    }
    rec.characteristics = ch;
    Ok(rec)
}

fn bin_of(edges: &[f64], v: f64) -> Option<usize> {
    if edges.len() < 2 || v < edges[0] || v >= edges[edges.len() - 1] {
        return None;
    }
    Some(edges.partition_point(|e| *e <= v) - 1)
}

/// Simulates `cfg.n_paths` independent paths. Path `i` draws from the
/// ChaCha8 stream `i` of `cfg.seed`, so results do not depend on threading.
pub fn simulate(policy: &PolicyField, cfg: &SimConfig) -> Result<PathBundle> {
    cfg.validate(policy)?;
    let records = cfg.record_steps();
    let paths: Vec<PathRecord> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| simulate_path(policy, cfg, i, &records))
        .collect::<Result<_>>()?;
    let diverged = paths.iter().filter(|p| p.diverged).count();
    if diverged > 0 {
        log::warn!("{diverged} of {} paths diverged", paths.len());
    }
    Ok(PathBundle {
        times: records.iter().map(|s| *s as f64 * cfg.dt).collect(),
        dim: cfg.x0.len(),
        n_observers: cfg.observers.len(),
        has_cost: cfg.cost.is_some() && cfg.discount.is_some(),
        seed: cfg.seed,
        dt: cfg.dt,
        x0: cfg.x0.clone(),
        jump_bins: cfg.jump_bins.clone(),
        moment_orders: cfg.moment_orders.clone(),
        paths,
    })
}

/// Sample mean and its standard error.
pub fn mean_se(values: impl IntoIterator<Item = f64>) -> (f64, f64, usize) {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for v in values {
        n += 1;
        let d = v - mean;
        mean += d / n as f64;
        m2 += d * (v - mean);
    }
    if n < 2 {
        return (mean, 0.0, n);
    }
    let var = m2 / (n - 1) as f64;
    (mean, (var / n as f64).sqrt(), n)
}

/// Treatment of the cost after the simulation horizon.
#[derive(Clone)]
pub enum TailMode {
    /// Report the truncated integral only.
    Truncate,
    /// `E[e^{−γ_T} f(X_T, a_T)] / δ_q`: the remainder if the running cost
    /// stayed at its terminal level.
    Extrapolate,
    /// `E[e^{−γ_T} φ(X_T)]` for a supplied continuation value `φ`.
    Continuation(Arc<dyn ScalarField>),
}

impl fmt::Debug for TailMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TailMode::Truncate => write!(f, "Truncate"),
            TailMode::Extrapolate => write!(f, "Extrapolate"),
            TailMode::Continuation(_) => write!(f, "Continuation"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PayoffEstimate {
    /// Mean of the truncated integral plus the tail term.
    pub estimate: f64,
    pub std_error: f64,
    /// Tail contribution included in `estimate`.
    pub tail: f64,
    pub n_paths: usize,
    pub diverged: usize,
}

/// Monte Carlo estimate of `E[∫₀^∞ e^{−γ_t} f dt]`, truncated at the horizon.
pub fn payoff_estimate(policy: &PolicyField, cfg: &SimConfig, tail: &TailMode) -> Result<PayoffEstimate> {
    let (cost, discount) = match (&cfg.cost, &cfg.discount) {
        (Some(c), Some(d)) => (c.clone(), d.clone()),
        _ => return Err(Error::Invalid("payoff estimates need a cost and a discount".into())),
    };
    let cfg = SimConfig {
        record_every: cfg.steps(),
        ..cfg.clone()
    };
    let bundle = simulate(policy, &cfg)?;
    let last = bundle.times.len() - 1;
    let delta = discount.lower_bound();
    let per_path: Vec<(f64, f64)> = bundle
        .paths
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.diverged)
        .map(|(i, p)| {
            let x = bundle.state(i, last);
            let decay = (-p.gamma[last]).exp();
            let t = match tail {
                TailMode::Truncate => 0.0,
                TailMode::Extrapolate => {
                    let a = policy.policy.action(x);
                    decay * cost.eval(x, &a) / delta
                }
                TailMode::Continuation(phi) => decay * phi.value(x)?,
            };
            Ok((p.cost[last] + t, t))
        })
        .collect::<Result<_>>()?;
    let (estimate, std_error, n) = mean_se(per_path.iter().map(|v| v.0));
    let tail_mean = per_path.iter().map(|v| v.1).sum::<f64>() / n.max(1) as f64;
    Ok(PayoffEstimate {
        estimate,
        std_error,
        tail: tail_mean,
        n_paths: n,
        diverged: bundle.diverged_paths(),
    })
}

/// `S_t = ∫₀ᵗ e^{−γ_s} f ds + e^{−γ_t} φ(X_t)` per path on the recorded lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct BellmanSeries {
    pub times: Vec<f64>,
    pub n_paths: usize,
    /// `n_paths × n_times`.
    pub values: Vec<f64>,
    /// First state coordinate, `n_paths × n_times`, used for binning.
    pub bin_coordinate: Vec<f64>,
    /// Paths excluded because they diverged.
    pub excluded: Vec<bool>,
}

impl BellmanSeries {
    pub fn value(&self, path: usize, time: usize) -> f64 {
        self.values[path * self.times.len() + time]
    }

    pub fn coordinate(&self, path: usize, time: usize) -> f64 {
        self.bin_coordinate[path * self.times.len() + time]
    }
}

pub fn bellman_series(phi: &dyn ScalarField, bundle: &PathBundle) -> Result<BellmanSeries> {
    if !bundle.has_cost {
        return Err(Error::Invalid("the bundle was simulated without cost and discount".into()));
    }
    if phi.dim() != bundle.dim {
        return Err(Error::Dimension {
            expected: bundle.dim,
            got: phi.dim(),
        });
    }
    let nt = bundle.times.len();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..bundle.n_paths())
        .into_par_iter()
        .map(|i| {
            let p = &bundle.paths[i];
            let mut s = Vec::with_capacity(nt);
            let mut c = Vec::with_capacity(nt);
            for k in 0..nt {
                let x = bundle.state(i, k);
                c.push(x[0]);
                if p.diverged && !x.iter().all(|v| v.is_finite()) {
                    s.push(f64::NAN);
                } else {
                    s.push(p.cost[k] + (-p.gamma[k]).exp() * phi.value(x)?);
                }
            }
            Ok((s, c))
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(nt * rows.len());
    let mut coord = Vec::with_capacity(nt * rows.len());
    for (s, c) in rows {
        values.extend(s);
        coord.extend(c);
    }
    Ok(BellmanSeries {
        times: bundle.times.clone(),
        n_paths: bundle.n_paths(),
        values,
        bin_coordinate: coord,
        excluded: bundle.paths.iter().map(|p| p.diverged).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSummary {
    pub t: f64,
    pub b_h_observed_mean: Vec<f64>,
    pub b_h_predicted_mean: Vec<f64>,
    /// `max |observed − predicted|` over paths and coordinates.
    pub b_h_max_discrepancy: f64,
    /// Mean `C_t`, row-major.
    pub c_mean: Vec<f64>,
    /// Smallest eigenvalue of any path's `C_t`.
    pub c_min_eigenvalue: f64,
    pub jump_count_mean: f64,
    pub jump_count_se: f64,
    pub compensator_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub lo: f64,
    pub hi: f64,
    pub count_mean: f64,
    pub count_se: f64,
    pub compensator_mean: f64,
    /// `(count − compensator) / SE`, 0 when both vanish.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicsReport {
    pub n_paths: usize,
    pub times: Vec<TimeSummary>,
    pub bins: Vec<BinSummary>,
}

/// Aggregates the recorded triplet observations.
pub fn characteristics_report(bundle: &PathBundle) -> Result<CharacteristicsReport> {
    let chs: Vec<&PathCharacteristics> = bundle
        .paths
        .iter()
        .filter(|p| !p.diverged)
        .map(|p| p.characteristics.as_ref())
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Invalid("characteristics were not recorded".into()))?;
    let n = bundle.dim;
    let np = chs.len().max(1) as f64;
    let mut times = Vec::new();
    for (k, t) in bundle.times.iter().enumerate() {
        let mut obs = vec![0.0; n];
        let mut pred = vec![0.0; n];
        let mut disc = 0.0f64;
        let mut c_mean = vec![0.0; n * n];
        let mut min_eig = f64::INFINITY;
        for ch in &chs {
            for j in 0..n {
                let o = ch.b_h_observed[k * n + j];
                let p = ch.b_h_predicted[k * n + j];
                obs[j] += o / np;
                pred[j] += p / np;
                disc = disc.max((o - p).abs());
            }
            let c = &ch.c[k * n * n..(k + 1) * n * n];
            for (m, v) in c_mean.iter_mut().zip(c) {
                *m += v / np;
            }
            let mat = DMatrix::from_row_slice(n, n, c);
            let sym = (&mat + mat.transpose()) * 0.5;
            min_eig = min_eig.min(sym.symmetric_eigenvalues().min());
        }
        let (jc, jse, _) = mean_se(chs.iter().map(|c| c.jump_count[k] as f64));
        let comp = chs.iter().map(|c| c.compensator_mass[k]).sum::<f64>() / np;
        times.push(TimeSummary {
            t: *t,
            b_h_observed_mean: obs,
            b_h_predicted_mean: pred,
            b_h_max_discrepancy: disc,
            c_mean,
            c_min_eigenvalue: min_eig,
            jump_count_mean: jc,
            jump_count_se: jse,
            compensator_mean: comp,
        });
    }
    let bins = bundle
        .jump_bins
        .windows(2)
        .enumerate()
        .map(|(b, e)| {
            let (m, se, _) = mean_se(chs.iter().map(|c| c.bin_counts[b] as f64));
            let comp = chs.iter().map(|c| c.bin_compensator[b]).sum::<f64>() / np;
            let z = if se > 0.0 {
                (m - comp) / se
            } else if (m - comp).abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            BinSummary {
                lo: e[0],
                hi: e[1],
                count_mean: m,
                count_se: se,
                compensator_mean: comp,
                z,
            }
        })
        .collect();
    Ok(CharacteristicsReport {
        n_paths: chs.len(),
        times,
        bins,
    })
}
