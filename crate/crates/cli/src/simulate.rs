use std::path::Path;

use serde::Serialize;

use plaquenet::analysis::fixed_point_moments;
use plaquenet::kinetics::{ClearanceSpec, MasterEquation, ModelKind, MomentEquation, Moments, SizeDistribution};
use plaquenet::solver::{find_halftime, find_timescales, integrate, ScalarSeries, SolverStats};
use plaquenet::therapy::{apply_drug, boost_clearance, regime_toxicity};

use crate::config::{Loaded, RunConfig, System};
use crate::output::{integration_config, num, write_json, StatsSummary};
use crate::CliError;

/// Physical-unit samples of one homogeneous run.
struct Samples {
    t: Vec<f64>,
    m: Vec<f64>,
    number: Vec<f64>,
    mass: Vec<f64>,
    mass_rate: Vec<f64>,
    sizes: Vec<Vec<f64>>,
    stats: SolverStats,
}

#[derive(Serialize)]
#[allow(non_snake_case)]
struct Summary<'a> {
    command: &'static str,
    t_end_h: f64,
    final_m: f64,
    final_P: f64,
    final_M: f64,
    M_max: f64,
    tau_1_h: f64,
    tau_2_h: Option<f64>,
    /// Plateau used for `tau_2`.
    plateau_M: f64,
    halftime_h: Option<f64>,
    lambda_drug_per_h: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    c_max: Option<f64>,
    solver: StatsSummary,
    config: &'a RunConfig,
}

pub fn run(loaded: &Loaded, out: &Path) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let base = cfg.model.kinetic_params();
    let (params, increment) = match &cfg.therapy.drug {
        Some(d) => apply_drug(&base, &d.spec())?,
        None => (base, 0.0),
    };
    let clearance = boost_clearance(&cfg.clearance_spec()?, increment)?;
    let variant = cfg.model.model_variant();
    let n_max = cfg.model.n_max;
    let seed = cfg.model.seed_p2;
    let t_end = cfg.solver.t_end();
    let icfg = integration_config(&cfg.solver);

    let samples = match cfg.model.system {
        System::Master => {
            let eq = MasterEquation::new(&params, variant, clearance.clone(), n_max)?;
            let y0 = eq.initial_state(&SizeDistribution::seeded(params.m_0, n_max, seed))?;
            let tr = integrate(&eq, &y0, (0.0, t_end), &icfg, &[])?;
            let sizes = cfg
                .output
                .sizes
                .iter()
                .map(|&i| tr.states.iter().map(|y| eq.distribution(y).at(i)).collect())
                .collect();
            Samples {
                m: tr.states.iter().map(|y| eq.monomer(y)).collect(),
                number: tr.states.iter().map(|y| eq.number(y)).collect(),
                mass: tr.states.iter().map(|y| eq.mass(y)).collect(),
                mass_rate: tr.derivatives.iter().map(|d| eq.mass(d)).collect(),
                t: tr.times,
                sizes,
                stats: tr.stats,
            }
        }
        System::Moments => {
            if !cfg.output.sizes.is_empty() {
                return Err(CliError::Config(
                    "output.sizes needs the master equations, not the moment system".into(),
                ));
            }
            let eq = MomentEquation::new(&params, variant, clearance.clone())?;
            let y0 = eq.initial_state(
                params.m_0,
                Moments {
                    number: seed,
                    mass: 2.0 * seed,
                },
            );
            let tr = integrate(&eq, &y0, (0.0, t_end), &icfg, &[])?;
            Samples {
                m: tr.states.iter().map(|y| eq.monomer(y)).collect(),
                number: tr.states.iter().map(|y| eq.number(y)).collect(),
                mass: tr.states.iter().map(|y| eq.mass(y)).collect(),
                mass_rate: tr.derivatives.iter().map(|d| eq.mass(d)).collect(),
                t: tr.times,
                sizes: Vec::new(),
                stats: tr.stats,
            }
        }
    };

    let mut w = csv::Writer::from_path(out.join("trajectory.csv"))?;
    let mut header = vec!["t".to_string(), "m".into(), "P".into(), "M".into()];
    header.extend(cfg.output.sizes.iter().map(|i| format!("p_{i}")));
    w.write_record(&header)?;
    for k in 0..samples.t.len() {
        let mut row = vec![
            num(samples.t[k]),
            num(samples.m[k]),
            num(samples.number[k]),
            num(samples.mass[k]),
        ];
        row.extend(samples.sizes.iter().map(|col| num(col[k])));
        w.write_record(&row)?;
    }
    w.flush()?;

    let series = ScalarSeries {
        t: samples.t.clone(),
        v: samples.mass.clone(),
        dv: samples.mass_rate.clone(),
    };
    let last = samples.t.len() - 1;
    let plateau = match (&clearance, cfg.model.kind()) {
        (ClearanceSpec::Constant { lambda }, ModelKind::InVivoConstMonomer) if *lambda > 0.0 => {
            let fp = fixed_point_moments(&params, *lambda)?;
            if fp.exists {
                fp.mass
            } else {
                0.0
            }
        }
        _ => samples.mass[last],
    };
    let ts = find_timescales(&series, plateau);
    let summary = Summary {
        command: "simulate",
        t_end_h: t_end,
        final_m: samples.m[last],
        final_P: samples.number[last],
        final_M: samples.mass[last],
        M_max: ts.m_max,
        tau_1_h: ts.tau_1,
        tau_2_h: ts.tau_2,
        plateau_M: plateau,
        halftime_h: find_halftime(&series, params.m_0).ok(),
        lambda_drug_per_h: increment,
        c_max: cfg.therapy.regime.map(|r| regime_toxicity(&r.regime())),
        solver: samples.stats.into(),
        config: cfg,
    };
    write_json(&out.join("summary.json"), &summary)
}
