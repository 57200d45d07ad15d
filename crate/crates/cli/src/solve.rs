use anyhow::{anyhow, Result};
use serde_json::json;

use jumpctl::hjb::{solve_finite_horizon, Grid, PolicyTable, ValueField};

use crate::context::Context;
use crate::output::{num, Artifacts};
use crate::Status;

fn coords(grid: &Grid) -> Vec<String> {
    (0..grid.dim()).map(|k| format!("x{k}")).collect()
}

fn write_value(out: &Artifacts, value: &ValueField, extra: serde_json::Value) -> Result<()> {
    let grid = value.grid();
    let mut cols = vec!["node".to_string()];
    cols.extend(coords(grid));
    cols.push("phi".into());
    let rows = grid.points().zip(value.values()).enumerate().map(|(i, (x, v))| {
        let mut r = vec![i.to_string()];
        r.extend(x.iter().map(|c| num(*c)));
        r.push(num(*v));
        r
    });
    out.csv("value.csv", extra, &cols, rows)
}

fn write_policy(out: &Artifacts, policy: &PolicyTable, extra: serde_json::Value) -> Result<()> {
    let grid = policy.grid();
    let mut cols = vec!["node".to_string()];
    cols.extend(coords(grid));
    cols.extend(["action".to_string(), "base".to_string()]);
    cols.extend((0..grid.dim()).map(|k| format!("mu{k}")));
    let rows = grid.points().zip(policy.choices()).enumerate().map(|(i, (x, c))| {
        let mut r = vec![i.to_string()];
        r.extend(x.iter().map(|v| num(*v)));
        r.push(c.action.to_string());
        r.push(c.base.to_string());
        r.extend(c.mu.iter().map(|v| num(*v)));
        r
    });
    out.csv("policy.csv", extra, &cols, rows)
}

pub fn cmd_solve(ctx: &Context, out: &Artifacts) -> Result<Status> {
    let sol = ctx.stationary()?;
    let r = &sol.report;
    let extra = json!({ "converged": r.converged, "iterations": r.iterations });
    write_value(out, &sol.value, extra.clone())?;
    write_policy(out, &sol.policy, extra)?;
    out.json(
        "report.json",
        json!({
            "options": ctx.solve_options(),
            "nodes": sol.value.grid().len(),
            "convergence": r,
        }),
    )?;
    println!(
        "solve: {} after {} iterations, HJB residual {:.3e} (interior), {:.3e} (all nodes)",
        if r.converged { "converged" } else { "NOT converged" },
        r.iterations,
        r.hjb_residual,
        r.hjb_residual_all
    );
    Ok(if r.converged { Status::Success } else { Status::NotConverged })
}

pub fn cmd_solve_finite(ctx: &Context, out: &Artifacts) -> Result<Status> {
    let spec = ctx.run.finite.as_ref().ok_or_else(|| anyhow!("missing `finite` section"))?;
    let prob = ctx.problem()?;
    let grid = ctx.grid()?;
    let terminal = ctx.field(&spec.terminal, prob.dim)?;
    let opts = ctx.solve_options();
    let sol = solve_finite_horizon(prob, terminal.as_ref(), spec.horizon, spec.steps, grid, spec.stepping, opts.linear_tol)?;
    let every = spec.write_every.max(1);
    let n = sol.times.len() - 1;
    let levels: Vec<usize> = (0..=n).filter(|k| k % every == 0 || *k == n).collect();

    let extra = json!({ "horizon": spec.horizon, "steps": spec.steps, "stepping": spec.stepping });
    let mut cols = vec!["t".to_string(), "node".to_string()];
    cols.extend(coords(grid));
    cols.push("phi".into());
    let value_rows = levels.iter().flat_map(|&k| {
        let t = sol.times[k];
        grid.points().zip(sol.values[k].values()).enumerate().map(move |(i, (x, v))| {
            let mut r = vec![num(t), i.to_string()];
            r.extend(x.iter().map(|c| num(*c)));
            r.push(num(*v));
            r
        })
    });
    out.csv("value.csv", extra.clone(), &cols, value_rows)?;

    let mut cols = vec!["t".to_string(), "node".to_string()];
    cols.extend(coords(grid));
    cols.extend(["action".to_string(), "base".to_string()]);
    cols.extend((0..grid.dim()).map(|k| format!("mu{k}")));
    let policy_rows = levels.iter().filter(|k| **k < n).flat_map(|&k| {
        let t = sol.times[k];
        grid.points().zip(sol.policies[k].choices()).enumerate().map(move |(i, (x, c))| {
            let mut r = vec![num(t), i.to_string()];
            r.extend(x.iter().map(|v| num(*v)));
            r.push(c.action.to_string());
            r.push(c.base.to_string());
            r.extend(c.mu.iter().map(|v| num(*v)));
            r
        })
    });
    out.csv("policy.csv", extra, &cols, policy_rows)?;

    let scale = sol
        .values
        .iter()
        .flat_map(|v| v.values())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let ok = sol.max_linear_residual.is_finite() && sol.max_linear_residual <= opts.linear_tol.max(1e-8) * (1.0 + scale);
    out.json(
        "report.json",
        json!({
            "horizon": spec.horizon,
            "steps": spec.steps,
            "stepping": spec.stepping,
            "nodes": grid.len(),
            "max_linear_residual": sol.max_linear_residual,
            "converged": ok,
            "phi0_sup": sol.initial().values().iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }),
    )?;
    println!(
        "solve-finite: {} steps to T={}, max linear residual {:.3e}",
        spec.steps, spec.horizon, sol.max_linear_residual
    );
    Ok(if ok { Status::Success } else { Status::NotConverged })
}
