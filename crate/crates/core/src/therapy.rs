//! Drug action: inhibited secondary nucleation, enhanced clearance,
//! size-targeted clearance windows and periodic dosing.

use serde::{Deserialize, Serialize};

use crate::analysis::{fixed_point_moments, steady_state_distribution, steady_state_truncated};
use crate::error::{Error, Result};
use crate::kinetics::{
    aggregate_moments, rhs_invivo, ClearanceSpec, KineticParameters, ModelKind, ModelVariant,
    MomentEquation, Moments, SizeDistribution, TailClosure, HOURS_PER_DAY,
};
use crate::solver::{integrate, IntegrationConfig, OutputGrid, Trajectory};

/// Antibody effect on one region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrugSpec {
    /// Multiplier on `k_2`, in `[0, 1]`.
    pub delta_k: f64,
    /// Clearance gained per unit plasma concentration (h⁻¹ M⁻¹).
    #[serde(default)]
    pub potency: f64,
    /// Plasma concentration (M).
    #[serde(default)]
    pub plasma_concentration: f64,
    /// Replaces `potency · plasma_concentration` when set (h⁻¹).
    #[serde(default)]
    pub lambda_drug: Option<f64>,
    #[serde(default = "yes")]
    pub inhibit_kinetics: bool,
    #[serde(default = "yes")]
    pub enhance_clearance: bool,
}

fn yes() -> bool {
    true
}

impl DrugSpec {
    /// Kinetic inhibition only.
    pub fn kinetic(delta_k: f64) -> Self {
        Self {
            delta_k,
            potency: 0.0,
            plasma_concentration: 0.0,
            lambda_drug: None,
            inhibit_kinetics: true,
            enhance_clearance: false,
        }
    }

    /// Pharmacodynamic clearance `potency · C_p` with no kinetic effect.
    pub fn clearance(potency: f64, plasma_concentration: f64) -> Self {
        Self {
            delta_k: 1.0,
            potency,
            plasma_concentration,
            lambda_drug: None,
            inhibit_kinetics: false,
            enhance_clearance: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta_k) {
            return Err(Error::Config(format!("delta_k must lie in [0, 1], got {}", self.delta_k)));
        }
        for (name, v) in [
            ("potency", self.potency),
            ("plasma_concentration", self.plasma_concentration),
            ("lambda_drug", self.lambda_drug.unwrap_or(0.0)),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Clearance increment `λ_drug` (h⁻¹) before the enable switch.
    pub fn clearance_increment(&self) -> f64 {
        self.lambda_drug
            .unwrap_or(self.potency * self.plasma_concentration)
    }
}

/// Drug-modified parameters and the clearance increment to add to every
/// size.
pub fn apply_drug(params: &KineticParameters, drug: &DrugSpec) -> Result<(KineticParameters, f64)> {
    drug.validate()?;
    let mut out = *params;
    if drug.inhibit_kinetics {
        out.k_2 *= drug.delta_k;
    }
    let lambda = if drug.enhance_clearance {
        drug.clearance_increment()
    } else {
        0.0
    };
    Ok((out, lambda))
}

/// Adds a uniform increment to a static clearance law.
pub fn boost_clearance(law: &ClearanceSpec, increment: f64) -> Result<ClearanceSpec> {
    if increment == 0.0 {
        return Ok(law.clone());
    }
    Ok(match law {
        ClearanceSpec::Constant { lambda } => ClearanceSpec::Constant {
            lambda: lambda + increment,
        },
        ClearanceSpec::Interval {
            lambda_a,
            lambda_drug,
            n_0,
            n_1,
        } => ClearanceSpec::Interval {
            lambda_a: lambda_a + increment,
            lambda_drug: *lambda_drug,
            n_0: *n_0,
            n_1: *n_1,
        },
        ClearanceSpec::DosingProfile {
            lambda_drug,
            decay_per_day,
            period_days,
            lambda_a,
        } => ClearanceSpec::DosingProfile {
            lambda_drug: *lambda_drug,
            decay_per_day: *decay_per_day,
            period_days: *period_days,
            lambda_a: lambda_a + increment,
        },
        other => {
            return Err(Error::Config(format!(
                "a uniform clearance increment cannot be folded into {other:?}"
            )))
        }
    })
}

/// Periodic bolus dosing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DosingRegime {
    /// Peak clearance increment right after a dose (h⁻¹).
    pub lambda_drug: f64,
    /// Drug decay rate in the brain (day⁻¹).
    pub decay_per_day: f64,
    /// Time between doses (days).
    pub period_days: f64,
    /// Background clearance (h⁻¹).
    pub lambda_a: f64,
    /// Trial horizon (days).
    pub t_max_days: f64,
}

impl DosingRegime {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_drug", self.lambda_drug),
            ("decay_per_day", self.decay_per_day),
            ("lambda_a", self.lambda_a),
            ("t_max_days", self.t_max_days),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.period_days > 0.0) || !self.period_days.is_finite() {
            return Err(Error::Config(format!("period must be > 0, got {}", self.period_days)));
        }
        Ok(())
    }

    pub fn with_lambda_drug(mut self, lambda_drug: f64) -> Self {
        self.lambda_drug = lambda_drug;
        self
    }

    pub fn with_period(mut self, period_days: f64) -> Self {
        self.period_days = period_days;
        self
    }

    pub fn clearance_spec(&self) -> ClearanceSpec {
        ClearanceSpec::DosingProfile {
            lambda_drug: self.lambda_drug,
            decay_per_day: self.decay_per_day,
            period_days: self.period_days,
            lambda_a: self.lambda_a,
        }
    }

    /// Clearance averaged over one period (h⁻¹).
    pub fn mean_clearance(&self) -> f64 {
        let ab = self.decay_per_day * self.period_days;
        let factor = if ab == 0.0 { 1.0 } else { -(-ab).exp_m1() / ab };
        self.lambda_a + self.lambda_drug * factor
    }

    /// Drug exposure per unit `λ_drug` over the horizon (days).
    pub fn exposure_per_unit_dose(&self) -> f64 {
        let (a, b, t) = (self.decay_per_day, self.period_days, self.t_max_days);
        let n = (t / b).floor();
        let r = (t - n * b).clamp(0.0, b);
        if a == 0.0 {
            return t;
        }
        (n * -(-a * b).exp_m1() + -(-a * r).exp_m1()) / a
    }
}

/// Clearance (h⁻¹) at `t_days` under the regime.
pub fn dosing_clearance(t_days: f64, regime: &DosingRegime) -> f64 {
    regime.lambda_drug * (-regime.decay_per_day * t_days.rem_euclid(regime.period_days)).exp() + regime.lambda_a
}

/// Time-integrated drug clearance over the horizon.
pub fn regime_toxicity(regime: &DosingRegime) -> f64 {
    regime.lambda_drug * regime.exposure_per_unit_dose()
}

/// Controls for [`mean_toxic_mass`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleOptions {
    /// Relative change between successive cycle averages that counts as
    /// converged.
    pub tolerance: f64,
    pub max_cycles: usize,
    pub rel_tol: f64,
}

impl Default for CycleOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            max_cycles: 400,
            rel_tol: 1e-9,
        }
    }
}

/// Periodic steady state of the toxic mass under a dosing regime, in
/// physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CycleAverage {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub cycles: usize,
}

impl CycleAverage {
    pub fn amplitude(&self) -> f64 {
        self.max - self.min
    }
}

/// Exact integral of the trajectory's cubic Hermite interpolant of the
/// functional `f` (linear in the state).
fn hermite_integral(traj: &Trajectory, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut total = 0.0;
    for k in 1..traj.times.len() {
        let h = traj.times[k] - traj.times[k - 1];
        let (y0, y1) = (f(&traj.states[k - 1]), f(&traj.states[k]));
        let (f0, f1) = (f(&traj.derivatives[k - 1]), f(&traj.derivatives[k]));
        total += h * (y0 + y1) / 2.0 + h * h * (f0 - f1) / 12.0;
    }
    total
}

/// Cycle-averaged toxic mass once the dosed in vivo moment system has
/// settled into its periodic state. Starts from the fixed point for the
/// cycle-mean clearance.
pub fn mean_toxic_mass(params: &KineticParameters, regime: &DosingRegime, opts: CycleOptions) -> Result<CycleAverage> {
    regime.validate()?;
    let eq = MomentEquation::new(params, ModelVariant::in_vivo(), regime.clearance_spec())?;
    let start = fixed_point_moments(params, regime.mean_clearance())?;
    let mut y = eq.initial_state(
        params.m_0,
        Moments {
            number: start.number,
            mass: start.mass,
        },
    );
    let period_h = regime.period_days * HOURS_PER_DAY;
    let cfg = IntegrationConfig {
        rel_tol: opts.rel_tol,
        ..IntegrationConfig::default()
    };
    let mut previous: Option<f64> = None;
    for cycle in 0..opts.max_cycles {
        let t0 = cycle as f64 * period_h;
        let traj = integrate(&eq, &y, (t0, t0 + period_h), &cfg, &[])?;
        let mean = hermite_integral(&traj, |s| eq.mass(s)) / period_h;
        let (min, max) = traj
            .states
            .iter()
            .map(|s| eq.mass(s))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| (lo.min(m), hi.max(m)));
        y = traj.last_state().to_vec();
        if let Some(prev) = previous {
            if (mean - prev).abs() <= opts.tolerance * mean.abs().max(f64::MIN_POSITIVE) || mean == prev {
                return Ok(CycleAverage {
                    mean,
                    min,
                    max,
                    cycles: cycle + 1,
                });
            }
        }
        previous = Some(mean);
    }
    Err(Error::NoConvergence(format!(
        "cycle average still changing after {} cycles",
        opts.max_cycles
    )))
}

/// Toxic mass for a constant infusion delivering `c_max` over `t_max_days`:
/// the fixed point at `λ_a + c_max / t_max`.
pub fn constant_infusion_mass(params: &KineticParameters, lambda_a: f64, c_max: f64, t_max_days: f64) -> Result<f64> {
    if !(t_max_days > 0.0) {
        return Err(Error::Config(format!("t_max must be > 0, got {t_max_days}")));
    }
    Ok(fixed_point_moments(params, lambda_a + c_max / t_max_days)?.mass)
}

/// Extra clearance on a window of aggregate sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClearanceInterval {
    pub lambda_a: f64,
    pub lambda_drug: f64,
    pub n_0: usize,
    pub n_1: usize,
}

impl ClearanceInterval {
    pub fn spec(&self) -> ClearanceSpec {
        ClearanceSpec::Interval {
            lambda_a: self.lambda_a,
            lambda_drug: self.lambda_drug,
            n_0: self.n_0,
            n_1: self.n_1,
        }
    }
}

/// In vivo master-equation derivative with window clearance.
pub fn interval_clearance_rhs(
    state: &SizeDistribution,
    params: &KineticParameters,
    variant: &ModelVariant,
    interval: &ClearanceInterval,
) -> Result<SizeDistribution> {
    rhs_invivo(state, params, variant, &interval.spec(), 0.0)
}

/// Moment derivatives under window clearance, with the window sums taken
/// from the full distribution.
pub fn interval_moment_rhs(
    state: &SizeDistribution,
    params: &KineticParameters,
    variant: &ModelVariant,
    interval: &ClearanceInterval,
) -> Result<Moments> {
    if variant.kind != ModelKind::InVivoConstMonomer {
        return Err(Error::Config("window clearance applies to the in vivo model".into()));
    }
    let n_max = state.n_max();
    interval.spec().validate(n_max)?;
    let mom = aggregate_moments(&state.p);
    let (mut window_number, mut window_mass) = (0.0, 0.0);
    for i in interval.n_0..=interval.n_1 {
        window_number += state.at(i);
        window_mass += i as f64 * state.at(i);
    }
    let m = state.m;
    let nuc = variant.nucleation_flux(params, m);
    let secondary = params.k_2 * variant.saturation_factor(params, m, mom.mass) * m * m * mom.mass;
    // Elongation out of the last tracked size is either dropped or lost.
    let e = params.elongation_rate();
    let tail = state.at(n_max);
    let elongation = match variant.closure {
        TailClosure::Reflecting => e * (mom.number - tail),
        TailClosure::Absorbing => e * (mom.number - tail) - n_max as f64 * e * tail,
    };
    let number_leak = match variant.closure {
        TailClosure::Reflecting => 0.0,
        TailClosure::Absorbing => e * tail,
    };
    Ok(Moments {
        number: -interval.lambda_a * mom.number - interval.lambda_drug * window_number + nuc + secondary
            - number_leak,
        mass: -interval.lambda_a * mom.mass - interval.lambda_drug * window_mass
            + 2.0 * nuc
            + elongation
            + 2.0 * secondary,
    })
}

/// Equilibrium toxic mass of the untruncated system under window
/// clearance; zero when no aggregated steady state exists.
pub fn interval_equilibrium_mass(params: &KineticParameters, interval: &ClearanceInterval) -> Result<f64> {
    match steady_state_distribution(params, &interval.spec(), interval.n_1 + 1) {
        Ok(ss) => Ok(ss.m_star),
        Err(Error::NoFixedPoint(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Same as [`interval_equilibrium_mass`] for a system truncated at
/// `n_max` with an absorbing tail.
pub fn interval_equilibrium_mass_truncated(
    params: &KineticParameters,
    interval: &ClearanceInterval,
    n_max: usize,
) -> Result<f64> {
    match steady_state_truncated(params, &interval.spec(), n_max) {
        Ok(ss) => Ok(ss.m_star),
        Err(Error::NoFixedPoint(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Samples `M(t)` on a uniform grid across `cycles` dosing periods,
/// starting from the fixed point at `λ_a`.
pub fn dosing_time_course(
    params: &KineticParameters,
    regime: &DosingRegime,
    cycles: usize,
    samples_per_cycle: usize,
) -> Result<Vec<(f64, f64)>> {
    regime.validate()?;
    let eq = MomentEquation::new(params, ModelVariant::in_vivo(), regime.clearance_spec())?;
    let start = fixed_point_moments(params, regime.lambda_a)?;
    let y0 = eq.initial_state(
        params.m_0,
        Moments {
            number: start.number,
            mass: start.mass,
        },
    );
    let period_h = regime.period_days * HOURS_PER_DAY;
    let n = cycles * samples_per_cycle.max(1);
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * period_h / samples_per_cycle.max(1) as f64).collect();
    let t_end = *times.last().unwrap();
    let cfg = IntegrationConfig::default().with_output(OutputGrid::Times(times));
    let traj = integrate(&eq, &y0, (0.0, t_end), &cfg, &[])?;
    Ok(traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(t, s)| (*t, eq.mass(s)))
        .collect())
}
