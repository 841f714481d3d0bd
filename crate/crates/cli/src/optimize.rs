use std::path::Path;

use serde::Serialize;

use plaquenet::optimizer::{constrained_optimum, sweep, write_sweep_csv, Optimum};

use crate::config::{Loaded, RunConfig};
use crate::output::write_json;
use crate::CliError;

#[derive(Serialize)]
struct Summary<'a> {
    command: &'static str,
    grid_points: usize,
    missing_points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    optimum: Option<&'a Optimum>,
    config: &'a RunConfig,
}

pub fn run(loaded: &Loaded, out: &Path) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let opt = cfg
        .optimize
        .as_ref()
        .ok_or_else(|| CliError::Config("the optimize command needs an [optimize] section".into()))?;
    let mut params = cfg.model.kinetic_params();
    // Dosing supplies the clearance; only the kinetic part of a drug applies.
    if let Some(d) = &cfg.therapy.drug {
        d.spec().validate()?;
        if d.inhibit_kinetics {
            params.k_2 *= d.delta_k;
        }
    }
    let ctx = opt.context();
    let bounds = opt.bounds();
    let cycles = opt.cycle_options(cfg.solver.rel_tol);

    let (mut grid_points, mut missing_points) = (0, 0);
    if !opt.lambdas_per_h.is_empty() {
        let grid = sweep(&opt.periods_days, &opt.lambdas_per_h, &params, &ctx, &bounds, cycles)?;
        write_sweep_csv(&grid, &out.join("contour.csv"))?;
        grid_points = grid.points.len();
        missing_points = grid.missing();
    }
    let optimum = match opt.c_max_target {
        Some(target) => Some(constrained_optimum(target, &params, &ctx, &opt.periods_days, &bounds, cycles)?),
        None => None,
    };
    if let Some(o) = &optimum {
        write_json(&out.join("optimum.json"), o)?;
    }
    let summary = Summary {
        command: "optimize",
        grid_points,
        missing_points,
        optimum: optimum.as_ref(),
        config: cfg,
    };
    write_json(&out.join("summary.json"), &summary)
}
