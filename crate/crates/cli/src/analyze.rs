use std::path::Path;

use serde::Serialize;

use plaquenet::analysis::{
    critical_clearance_constant, critical_clearance_inverse_size, critical_clearance_linear_size,
    critical_clearance_numeric, fixed_point_moments, halftime_lin, halftime_lin_simplified, invitro_halftime,
    linearized_coefficients, steady_state_distribution, BifurcationOptions, ClearanceFamily, CriticalFormula,
    FixedPointMoments, InverseSizeThreshold, LinearizedCoefficients,
};
use plaquenet::kinetics::{ClearanceSpec, KineticParameters};
use plaquenet::therapy::{apply_drug, DrugSpec};

use crate::config::{Loaded, RunConfig};
use crate::output::{num, write_json};
use crate::CliError;

#[derive(Serialize)]
struct ConstantThreshold {
    moment_based: f64,
    distribution_based: f64,
    /// Bisection on long seeded runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    numeric: Option<Outcome>,
}

#[derive(Serialize)]
struct LinearThreshold {
    printed: f64,
    numeric: Outcome,
}

/// A value or the reason it could not be computed.
#[derive(Serialize)]
#[serde(untagged)]
enum Outcome {
    Value(f64),
    Failed { error: String },
}

impl<E: std::fmt::Display> From<Result<f64, E>> for Outcome {
    fn from(r: Result<f64, E>) -> Self {
        match r {
            Ok(v) => Outcome::Value(v),
            Err(e) => Outcome::Failed { error: e.to_string() },
        }
    }
}

impl Outcome {
    fn value(&self) -> Option<f64> {
        match self {
            Outcome::Value(v) => Some(*v),
            Outcome::Failed { .. } => None,
        }
    }
}

#[derive(Serialize)]
struct Thresholds {
    constant: ConstantThreshold,
    inverse_in_size: InverseSizeThreshold,
    linear_in_size: LinearThreshold,
}

#[derive(Serialize)]
struct Inhibited {
    delta_k: f64,
    constant: f64,
    constant_ratio: Option<f64>,
    inverse_in_size: f64,
    inverse_in_size_ratio: Option<f64>,
    linear_in_size: Outcome,
    linear_in_size_ratio: Option<f64>,
}

#[derive(Serialize)]
struct FixedPoint {
    lambda_per_h: f64,
    #[serde(flatten)]
    moments: FixedPointMoments,
}

#[derive(Serialize)]
struct Report<'a> {
    command: &'static str,
    linearized: LinearizedCoefficients,
    halftime_lin_h: Outcome,
    halftime_lin_simplified_h: Outcome,
    /// Closed-system halftime from the moment equations.
    halftime_numeric_h: Outcome,
    critical_clearance: Thresholds,
    inhibition: Vec<Inhibited>,
    fixed_points: Vec<FixedPoint>,
    config: &'a RunConfig,
}

fn ratio(treated: f64, base: f64) -> Option<f64> {
    (base > 0.0).then(|| treated / base)
}

fn linear_threshold(p: &KineticParameters) -> Outcome {
    critical_clearance_linear_size(p).map(|t| t.numeric).into()
}

pub fn run(loaded: &Loaded, out: &Path) -> Result<(), CliError> {
    let cfg = &loaded.config;
    let a = &cfg.analysis;
    let params = cfg.model.kinetic_params();

    let moment_based = critical_clearance_constant(&params, CriticalFormula::MomentBased);
    let numeric = if !a.numeric {
        None
    } else if moment_based > 0.0 {
        Some(
            critical_clearance_numeric(
                &params,
                ClearanceFamily::Constant,
                (0.5 * moment_based, 2.0 * moment_based),
                &BifurcationOptions::default(),
            )
            .into(),
        )
    } else {
        Some(Outcome::Value(0.0))
    };
    let inverse = critical_clearance_inverse_size(&params);
    let linear = critical_clearance_linear_size(&params);
    let linear_numeric: Outcome = linear.as_ref().map(|t| t.numeric).map_err(|e| e.to_string()).into();
    let base_linear = linear_numeric.value();

    let mut inhibition = Vec::new();
    for &dk in &a.delta_k {
        let (q, _) = apply_drug(&params, &DrugSpec::kinetic(dk))?;
        let constant = critical_clearance_constant(&q, CriticalFormula::MomentBased);
        let inv = critical_clearance_inverse_size(&q).exact;
        let lin = linear_threshold(&q);
        let lin_ratio = match (lin.value(), base_linear) {
            (Some(t), Some(b)) => ratio(t, b),
            _ => None,
        };
        inhibition.push(Inhibited {
            delta_k: dk,
            constant,
            constant_ratio: ratio(constant, moment_based),
            inverse_in_size: inv,
            inverse_in_size_ratio: ratio(inv, inverse.exact),
            linear_in_size: lin,
            linear_in_size_ratio: lin_ratio,
        });
    }

    let mut fixed_points = Vec::new();
    let mut w = csv::Writer::from_path(out.join("steady_state.csv"))?;
    w.write_record(["lambda", "i", "p"])?;
    for &lambda in &a.lambdas_per_h {
        fixed_points.push(FixedPoint {
            lambda_per_h: lambda,
            moments: fixed_point_moments(&params, lambda)?,
        });
        // Above threshold there is no nontrivial distribution to list.
        if let Ok(ss) = steady_state_distribution(&params, &ClearanceSpec::Constant { lambda }, a.series_n_max) {
            for (k, p) in ss.p_star.iter().enumerate() {
                w.write_record([num(lambda), (k + 2).to_string(), num(*p)])?;
            }
        }
    }
    w.flush()?;

    let linearized = linearized_coefficients(&params);
    let report = Report {
        command: "analyze",
        linearized,
        halftime_lin_h: halftime_lin(&params).into(),
        halftime_lin_simplified_h: halftime_lin_simplified(&params).into(),
        halftime_numeric_h: if linearized.a > 0.0 {
            invitro_halftime(&params).into()
        } else {
            Outcome::Failed {
                error: "skipped: no secondary nucleation".into(),
            }
        },
        critical_clearance: Thresholds {
            constant: ConstantThreshold {
                moment_based,
                distribution_based: critical_clearance_constant(&params, CriticalFormula::DistributionBased),
                numeric,
            },
            inverse_in_size: inverse,
            linear_in_size: LinearThreshold {
                printed: linear.as_ref().map(|t| t.printed).unwrap_or(f64::NAN),
                numeric: linear_numeric,
            },
        },
        inhibition,
        fixed_points,
        config: cfg,
    };
    write_json(&out.join("analysis.json"), &report)
}
