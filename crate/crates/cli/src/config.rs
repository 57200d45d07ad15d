//! Run files: one JSON document holding every section a subcommand may need.

use std::path::Path;

use anyhow::{bail, Context, Result};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use jumpctl::dynamics::GrowthCertificate;
use jumpctl::examples::{Example1Spec, Example2Spec};
use jumpctl::hjb::{Axis, SolveOptions, TimeStepping};
use jumpctl::lq::LqConfig;
use jumpctl::problem::{DriftLattice, ProblemConfig};
use jumpctl::verify::MartingaleMode;
use jumpctl::ActionSpec;

#[derive(Debug, Clone, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    #[serde(default)]
    pub problem: Option<ProblemConfig>,
    /// Tensor grid, one axis per state dimension.
    #[serde(default)]
    pub grid: Option<Vec<Axis>>,
    #[serde(default)]
    pub solver: Option<SolveOptions>,
    #[serde(default)]
    pub finite: Option<FiniteSpec>,
    #[serde(default)]
    pub simulation: Option<SimulationSpec>,
    #[serde(default)]
    pub verify: Option<VerifySpec>,
    #[serde(default)]
    pub lq: Option<LqConfig>,
    #[serde(default)]
    pub example1: Option<Example1Spec>,
    #[serde(default)]
    pub example2: Option<Example2Spec>,
    #[serde(default)]
    pub example3: Option<Example3Spec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FiniteSpec {
    pub horizon: f64,
    pub steps: usize,
    #[serde(default = "zero_field")]
    pub terminal: FieldSpec,
    #[serde(default)]
    pub stepping: TimeStepping,
    /// Write every this many time levels to value.csv (0 and T always).
    #[serde(default = "one")]
    pub write_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CostSource {
    /// Simulate without running cost or discount.
    #[default]
    None,
    /// Cost and discount of the `problem` section.
    Problem,
    /// `xᵀΛx + μᵀΘμ` and discount `q` of the `lq` section.
    Lq,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub record_every: usize,
    pub policy: PolicySpec,
    #[serde(default)]
    pub cost: CostSource,
    #[serde(default = "yes")]
    pub characteristics: bool,
    /// Bin edges on the first jump coordinate.
    #[serde(default)]
    pub jump_bins: Vec<f64>,
    /// Orders `q` for the moment-bound ratios in characteristics.json.
    #[serde(default)]
    pub moment_orders: Vec<f64>,
    #[serde(default)]
    pub jump_rate_bound: Option<f64>,
    #[serde(default)]
    pub certificate: Option<GrowthCertificate>,
    #[serde(default)]
    pub u: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Constant {
        action: ActionSpec,
    },
    /// `μ = offset − gain · x` on top of `base`.
    Linear {
        base: ActionSpec,
        gain: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
    /// Optimal LQ feedback with the gain multiplied by `scale`.
    LqFeedback {
        #[serde(default = "unit")]
        scale: f64,
    },
    /// Policy table of the stationary HJB solution on `grid`.
    Solved,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    /// `Σ coeffs[k] x^k` (one-dimensional).
    Polynomial {
        coeffs: Vec<f64>,
    },
    /// `xᵀ M x + bᵀx + c`.
    Quadratic {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        linear: Option<Vec<f64>>,
        #[serde(default)]
        constant: f64,
    },
    /// `Σ coeffs[k] x^k + amplitude · exp(rate · x)` (one-dimensional).
    PolyExp {
        coeffs: Vec<f64>,
        amplitude: f64,
        rate: f64,
    },
    /// Smooth bump `exp(−1/(1−s²))`, `s = (x − center)/radius` (one-dimensional).
    Bump {
        center: f64,
        radius: f64,
    },
    /// Closed-form LQ value.
    Lq,
    /// Stationary HJB value on `grid`.
    Solved,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    /// Candidate value for the Bellman and transversality tests.
    #[serde(default)]
    pub phi: Option<FieldSpec>,
    pub tests: Vec<TestSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestSpec {
    /// Binned sub/martingale test of the Bellman process.
    Bellman {
        mode: MartingaleMode,
        /// `(s, t)` indices into the recorded times.
        pairs: Vec<(usize, usize)>,
        #[serde(default = "ten")]
        bins: usize,
    },
    Transversality,
    /// Dynkin increments for each test function.
    Dynkin {
        fields: Vec<FieldSpec>,
    },
    /// Square-integrability of the large-jump moment integral of order `q`.
    H2 {
        q: f64,
    },
    /// Growth certificate on a lattice over `[lo, hi]`.
    Growth {
        lo: Vec<f64>,
        hi: Vec<f64>,
        points: usize,
        k: f64,
        p: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Example3Spec {
    /// Drift lattice for the cross-check against the general solver.
    #[serde(default)]
    pub lattice: Option<DriftLattice>,
    /// Relative sup-norm tolerance of the cross-check on the interior third.
    #[serde(default = "cross_tol")]
    pub cross_check_tol: f64,
}

fn zero_field() -> FieldSpec {
    FieldSpec::Zero
}

fn one() -> usize {
    1
}

fn ten() -> usize {
    10
}

fn yes() -> bool {
    true
}

fn unit() -> f64 {
    1.0
}

fn cross_tol() -> f64 {
    2e-2
}

/// A parsed run file and the SHA-256 of its bytes.
pub struct Loaded {
    pub run: RunFile,
    pub sha256: String,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let sha256 = hex::encode(Sha256::digest(&bytes));
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    let run: RunFile = match serde_path_to_error::deserialize(de) {
        Ok(r) => r,
        Err(e) => {
            let path_str = e.path().to_string();
            let inner = e.into_inner();
            bail!("{}: field `{path_str}`: {inner}", path.display());
        }
    };
    Ok(Loaded { run, sha256 })
}

pub fn schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(RunFile)).expect("schema serialises")
}
