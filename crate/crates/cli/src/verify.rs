use std::sync::Arc;

use anyhow::{anyhow, bail, Result};
use serde_json::json;

use jumpctl::dynamics::{bellman_series, simulate, PathBundle};
use jumpctl::generator::ScalarField;
use jumpctl::verify::{
    dynkin_test, growth_certificate_check, h2_integrability_check, submartingale_test, transversality_test, TestReport,
};

use crate::config::{FieldSpec, TestSpec};
use crate::context::{with_generator_observers, Context};
use crate::output::Artifacts;
use crate::Status;

fn print_table(reports: &[TestReport]) {
    println!("{:<24} {:<6} {:>6} {:>8}  first failure (or first statistic)", "test", "result", "stats", "failed");
    for r in reports {
        let failed = r.failures().count();
        let shown = r
            .failures()
            .next()
            .or_else(|| r.statistics.first())
            .map(|s| format!("{}: {:.4e} ± {:.2e} vs {:.4e}", s.label, s.value, s.std_error, s.threshold))
            .unwrap_or_default();
        println!(
            "{:<24} {:<6} {:>6} {:>8}  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.statistics.len(),
            failed,
            shown
        );
        for s in r.failures().skip(1).take(9) {
            println!("{:<46}  {}: {:.4e} ± {:.2e} vs {:.4e}", "", s.label, s.value, s.std_error, s.threshold);
        }
    }
}

pub fn cmd_verify(ctx: &Context, out: &Artifacts) -> Result<Status> {
    let spec = ctx.run.verify.as_ref().ok_or_else(|| anyhow!("missing `verify` section"))?;
    if spec.tests.is_empty() {
        bail!("verify.tests: no tests requested");
    }
    let sim = ctx.simulation()?;
    let dim = sim.x0.len();
    let (policy, base_cfg) = ctx.sim_config(sim)?;
    let phi = || -> Result<Arc<dyn ScalarField>> {
        let f = spec.phi.as_ref().ok_or_else(|| anyhow!("verify.phi: required by the Bellman and transversality tests"))?;
        ctx.field(f, dim)
    };

    let mut dynkin_fields: Vec<(usize, Vec<Arc<dyn ScalarField>>)> = Vec::new();
    let mut n_obs = 0;
    for t in &spec.tests {
        if let TestSpec::Dynkin { fields } = t {
            let built = fields.iter().map(|f| ctx.field(f, dim)).collect::<Result<Vec<_>>>()?;
            dynkin_fields.push((n_obs, built.clone()));
            n_obs += built.len();
        }
    }
    let needs_bundle = spec
        .tests
        .iter()
        .any(|t| matches!(t, TestSpec::Bellman { .. } | TestSpec::Dynkin { .. } | TestSpec::H2 { .. }));
    let bundle: Option<PathBundle> = if needs_bundle {
        let all: Vec<Arc<dyn ScalarField>> = dynkin_fields.iter().flat_map(|(_, f)| f.iter().cloned()).collect();
        let mut cfg = with_generator_observers(base_cfg.clone(), &all);
        if spec.tests.iter().any(|t| matches!(t, TestSpec::H2 { .. })) {
            cfg = cfg.with_characteristics();
        }
        Some(simulate(&policy, &cfg)?)
    } else {
        None
    };

    let mut reports = Vec::new();
    let mut dynkin_seen = 0;
    for t in &spec.tests {
        let rep = match t {
            TestSpec::Bellman { mode, pairs, bins } => {
                let b = bundle.as_ref().expect("simulated");
                if !b.has_cost {
                    bail!("simulation.cost: the Bellman test needs a cost source (`problem` or `lq`)");
                }
                let series = bellman_series(phi()?.as_ref(), b)?;
                let mut r = submartingale_test(&series, pairs, *bins, *mode)?;
                r.name = format!("bellman_{}", serde_json::to_value(mode)?.as_str().unwrap_or("mode"));
                r
            }
            TestSpec::Transversality => {
                if base_cfg.discount.is_none() {
                    bail!("simulation.cost: transversality needs a discount (`problem` or `lq`)");
                }
                transversality_test(&policy, phi()?.as_ref(), &base_cfg)?
            }
            TestSpec::Dynkin { .. } => {
                let (start, fields) = &dynkin_fields[dynkin_seen];
                dynkin_seen += 1;
                let b = bundle.as_ref().expect("simulated");
                let mut merged: Option<TestReport> = None;
                for (k, g) in fields.iter().enumerate() {
                    let r = dynkin_test(b, g.as_ref(), start + k, &format!("g{k}"))?;
                    merged = Some(match merged {
                        None => r,
                        Some(mut m) => {
                            m.passed &= r.passed;
                            m.statistics.extend(r.statistics);
                            m.notes.extend(r.notes);
                            m
                        }
                    });
                }
                let mut merged = merged.unwrap_or_else(|| TestReport {
                    name: "dynkin".into(),
                    passed: true,
                    statistics: Vec::new(),
                    notes: vec!["no test functions".into()],
                });
                merged.name = "dynkin".into();
                merged
            }
            TestSpec::H2 { q } => h2_integrability_check(bundle.as_ref().expect("simulated"), *q)?,
            TestSpec::Growth { lo, hi, points, k, p } => growth_certificate_check(&policy, lo, hi, *points, *k, *p)?,
        };
        reports.push(rep);
    }

    let passed = reports.iter().all(|r| r.passed);
    out.json(
        "report.json",
        json!({
            "passed": passed,
            "n_paths": sim.n_paths,
            "phi": spec.phi.as_ref().map(describe),
            "tests": reports,
        }),
    )?;
    print_table(&reports);
    Ok(if passed { Status::Success } else { Status::VerificationFailed })
}

fn describe(f: &FieldSpec) -> serde_json::Value {
    serde_json::to_value(f).unwrap_or(serde_json::Value::Null)
}
