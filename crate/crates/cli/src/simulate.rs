use anyhow::Result;
use serde_json::json;

use jumpctl::dynamics::{characteristics_report, simulate};
use jumpctl::verify::moment_ratios;

use crate::context::Context;
use crate::output::Artifacts;
use crate::Status;

pub fn cmd_simulate(ctx: &Context, out: &Artifacts) -> Result<Status> {
    let spec = ctx.simulation()?;
    let (policy, cfg) = ctx.sim_config(spec)?;
    let bundle = simulate(&policy, &cfg)?;
    let extra = json!({
        "n_paths": bundle.n_paths(),
        "dt": bundle.dt,
        "horizon": spec.horizon,
        "diverged": bundle.diverged_paths(),
    });
    out.csv_with("paths.csv", extra, |w| bundle.write_csv(w, None))?;

    let characteristics = if spec.characteristics {
        Some(characteristics_report(&bundle)?)
    } else {
        None
    };
    let ratios = if spec.characteristics && !spec.moment_orders.is_empty() {
        Some(moment_ratios(&bundle)?)
    } else {
        None
    };
    out.json(
        "characteristics.json",
        json!({
            "n_paths": bundle.n_paths(),
            "diverged": bundle.diverged_paths(),
            "times": bundle.times,
            "characteristics": characteristics,
            "moment_ratios": ratios,
        }),
    )?;
    println!(
        "simulate: {} paths, {} recorded times, {} diverged",
        bundle.n_paths(),
        bundle.times.len(),
        bundle.diverged_paths()
    );
    Ok(Status::Success)
}
