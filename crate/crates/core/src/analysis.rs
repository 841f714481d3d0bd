//! Closed-form results for the homogeneous models: early-time
//! linearisation and halftimes, moment fixed points, the steady-state
//! size distribution and its existence conditions, and critical clearance
//! values. Numeric oracles (ODE bisection and series bisection) sit next
//! to the formulas they check.

use std::ops::ControlFlow;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kinetics::{
    ClearanceSpec, KineticParameters, MasterEquation, ModelVariant, MomentEquation, Moments,
    SizeDistribution,
};
use crate::solver::{
    integrate, integrate_observed, Direction, EventFunction, IntegrationConfig, OutputGrid,
    StepView, Trajectory,
};

/// Rates of the early-time linearisation of the closed system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearizedCoefficients {
    /// `k_2 m_0² K_m / (K_m + m_0²)`.
    pub a: f64,
    /// `2 m_0 k_+ + a`.
    pub b: f64,
}

pub fn linearized_coefficients(params: &KineticParameters) -> LinearizedCoefficients {
    let m0 = params.m_0;
    let km = params.sat_monomer;
    let a = params.k_2 * m0 * m0 * km / (km + m0 * m0);
    LinearizedCoefficients {
        a,
        b: 2.0 * m0 * params.k_plus + a,
    }
}

/// Early-time approximation of the aggregate mass with the fast
/// decaying mode dropped.
pub fn linearized_mass(t: f64, params: &KineticParameters) -> Result<f64> {
    let LinearizedCoefficients { a, b } = linearized_coefficients(params);
    if !(a > 0.0) {
        return Err(Error::Domain("linearised growth rate a must be > 0".into()));
    }
    if !(params.k_n > 0.0) {
        return Err(Error::Domain("primary nucleation k_n must be > 0".into()));
    }
    let r = (a / b).sqrt();
    Ok(params.k_n / (2.0 * a) * ((1.0 + r) * ((a + (a * b).sqrt()) * t).exp() - 2.0))
}

fn halftime_preconditions(params: &KineticParameters) -> Result<LinearizedCoefficients> {
    if !(params.k_n > 0.0) {
        return Err(Error::Domain(
            "halftime diverges without primary nucleation (k_n = 0)".into(),
        ));
    }
    if !(params.m_0 > 0.0) {
        return Err(Error::Domain("m_0 must be > 0".into()));
    }
    let c = linearized_coefficients(params);
    if !(c.a > 0.0) {
        return Err(Error::Domain("linearised growth rate a must be > 0".into()));
    }
    Ok(c)
}

/// Time at which [`linearized_mass`] reaches `m_0 / 2`.
pub fn halftime_lin(params: &KineticParameters) -> Result<f64> {
    let LinearizedCoefficients { a, b } = halftime_preconditions(params)?;
    let (sa, sb) = (a.sqrt(), b.sqrt());
    let arg = sb * (a * params.m_0 + 2.0 * params.k_n) / (params.k_n * (sa + sb));
    Ok(arg.ln() / (a + (a * b).sqrt()))
}

/// Leading-order simplification of [`halftime_lin`] for `m_0² ≫ K_m`
/// and fast elongation.
pub fn halftime_lin_simplified(params: &KineticParameters) -> Result<f64> {
    halftime_preconditions(params)?;
    let p = params;
    let rate = (2.0 * p.k_plus * p.k_2 * p.sat_monomer * p.m_0).sqrt();
    Ok((p.k_2 * p.sat_monomer * p.m_0 / p.k_n + 2.0).ln() / rate)
}

/// Integrates the closed moment system from an aggregate-free start.
pub fn invitro_moment_trajectory(
    params: &KineticParameters,
    t_end: f64,
    config: &IntegrationConfig,
) -> Result<(MomentEquation, Trajectory)> {
    let eq = MomentEquation::new(params, ModelVariant::in_vitro(), ClearanceSpec::Constant { lambda: 0.0 })?;
    let y0 = eq.initial_state(params.m_0, Moments::default());
    let tr = integrate(&eq, &y0, (0.0, t_end), config, &[])?;
    Ok((eq, tr))
}

/// Halftime of the closed system, located as an event on the moment
/// equations.
pub fn invitro_halftime(params: &KineticParameters) -> Result<f64> {
    let eq = MomentEquation::new(params, ModelVariant::in_vitro(), ClearanceSpec::Constant { lambda: 0.0 })?;
    let y0 = eq.initial_state(params.m_0, Moments::default());
    let half = 0.5 * params.m_0 * params.rescale_c;
    let cfg = IntegrationConfig::default().with_output(OutputGrid::Ends);
    let mut t_end = 10.0 * halftime_lin(params).unwrap_or(1.0).max(1e-6);
    for _ in 0..8 {
        let ev = EventFunction::new("half", Direction::Rising, move |_t, y: &[f64]| y[2] - half).terminal();
        let tr = integrate(&eq, &y0, (0.0, t_end), &cfg, &[ev])?;
        if let Some(e) = tr.events.first() {
            return Ok(e.t);
        }
        t_end *= 10.0;
    }
    Err(Error::NotFound("aggregate mass never reached m_0/2".into()))
}

/// Nontrivial fixed point of the in vivo moment equations under constant
/// clearance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPointMoments {
    pub number: f64,
    pub mass: f64,
    pub exists: bool,
}

/// Quadratic in `λ` whose positive root is the critical clearance:
/// `−λ² + 2λ k_2 m_0² + 2 k_+ k_2 m_0³`.
fn fixed_point_discriminant(params: &KineticParameters, lambda: f64) -> f64 {
    let m0 = params.m_0;
    -lambda * lambda + 2.0 * lambda * params.k_2 * m0 * m0 + 2.0 * params.k_plus * params.k_2 * m0.powi(3)
}

/// Nontrivial fixed point `(P_2, M_2)` of the mass-saturated moment
/// system with constant clearance `λ`.
///
/// `M_2² = K_M (−λ² + 2λ k_2 m_0² + 2 k_+ k_2 m_0³) / λ²` and
/// `P_2 = λ M_2 / (2 (k_+ m_0 + λ))`.
pub fn fixed_point_moments(params: &KineticParameters, lambda: f64) -> Result<FixedPointMoments> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("clearance must be > 0, got {lambda}")));
    }
    let disc = fixed_point_discriminant(params, lambda);
    if !(disc > 0.0) {
        return Ok(FixedPointMoments {
            number: 0.0,
            mass: 0.0,
            exists: false,
        });
    }
    let mass = (params.sat_mass * disc).sqrt() / lambda;
    let number = lambda * mass / (2.0 * (params.k_plus * params.m_0 + lambda));
    Ok(FixedPointMoments {
        number,
        mass,
        exists: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalFormula {
    /// Threshold of the moment equations.
    MomentBased,
    /// Alternative threshold stated with the size distribution.
    DistributionBased,
}

/// Critical constant clearance.
pub fn critical_clearance_constant(params: &KineticParameters, formula: CriticalFormula) -> f64 {
    let m0 = params.m_0;
    let (k2, kp) = (params.k_2, params.k_plus);
    let base = k2 * m0 * m0;
    match formula {
        CriticalFormula::MomentBased => base + (k2 * m0.powi(3) * (k2 * m0 + 2.0 * kp)).sqrt(),
        CriticalFormula::DistributionBased => base + (2.0 * k2 * m0.powi(3) * (k2 * m0 + kp)).sqrt(),
    }
}

/// Largest eigenvalue of the in vivo moment equations linearised about
/// the aggregate-free state, with constant clearance.
pub fn linear_growth_rate(params: &KineticParameters, lambda: f64) -> f64 {
    let s = params.k_2 * params.m_0 * params.m_0;
    let a = params.elongation_rate();
    -lambda + s + (s * s + a * s).sqrt()
}

/// The three conditions for a nontrivial steady-state distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExistenceConditions {
    /// `△_i → 0`.
    pub c1_decay: bool,
    /// `Σ k △_k` converges.
    pub c2_summable: bool,
    /// `k_2 m_0² △ − λ_2 − 2 k_+ m_0 > 0`.
    pub c3_growth: bool,
    /// The tail bound is below `1e-9` of the partial sum at `N_max`.
    pub resolved: bool,
}

impl ExistenceConditions {
    pub fn all(&self) -> bool {
        self.c1_decay && self.c2_summable && self.c3_growth
    }

    /// The aggregate-free state is unstable: either a finite nontrivial
    /// state exists or mass grows without bound.
    pub fn diseased(&self) -> bool {
        !(self.c1_decay && self.c2_summable) || self.c3_growth
    }
}

/// Size-ratio recurrence of the steady state, before solving for `p_2*`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recurrence {
    /// `δ_i = 2k_+m_0 / (λ_i + 2k_+m_0)`, indexed by size − 2.
    pub delta: Vec<f64>,
    /// `△_i = Π_{j=3}^{i} δ_j`, with `△_2 = 1`.
    pub cumulative: Vec<f64>,
    /// `Σ_{k=2}^{N} k △_k`.
    pub partial_sum: f64,
    /// Estimated `Σ_{k>N} k △_k`; infinite when the series diverges.
    pub tail: f64,
    /// Upper bound on the tail.
    pub tail_bound: f64,
    pub lambda_2: f64,
    pub conditions: ExistenceConditions,
}

impl Recurrence {
    /// `△ = Σ k △_k` including the tail.
    pub fn mass_sum(&self) -> f64 {
        self.partial_sum + self.tail
    }

    pub fn n_max(&self) -> usize {
        self.delta.len() + 1
    }
}

/// Remainder of the mass sum beyond `n` for a geometric ratio `r < 1`.
fn geometric_tail(cum_n: f64, n: usize, lambda: f64, a: f64) -> f64 {
    // r/(1−r) = a/λ and r/(1−r)² = a(λ+a)/λ².
    let n = n as f64;
    cum_n * (n * a / lambda + a * (lambda + a) / (lambda * lambda))
}

/// Sizes summed explicitly before switching to the asymptotic power-law
/// remainder for clearance inversely proportional to size.
const INVERSE_TAIL_SIZES: usize = 1_000_000;

fn tail_of(law: &ClearanceSpec, a: f64, n: usize, cum_n: f64, partial: f64) -> (f64, f64, bool, bool) {
    let divergent = (f64::INFINITY, f64::INFINITY, false, false);
    match law {
        ClearanceSpec::Constant { lambda: l } | ClearanceSpec::Interval { lambda_a: l, .. } => {
            if *l > 0.0 {
                let t = geometric_tail(cum_n, n, *l, a);
                (t, t, true, true)
            } else {
                divergent
            }
        }
        ClearanceSpec::LinearInSize { lambda_0 } => {
            if !(*lambda_0 > 0.0) {
                return divergent;
            }
            let mut cum = cum_n;
            let mut tail = 0.0;
            let mut k = n;
            loop {
                k += 1;
                cum *= a / (k as f64 * lambda_0 + a);
                let term = k as f64 * cum;
                tail += term;
                if term <= 1e-18 * (partial + tail) || cum == 0.0 {
                    break;
                }
            }
            // Ratios keep falling, so the next ratio bounds the rest.
            let lam = (k + 1) as f64 * lambda_0;
            (tail, tail + geometric_tail(cum, k, lam, a), true, true)
        }
        ClearanceSpec::InverseInSize { lambda_0 } => {
            let r = lambda_0 / a;
            if !(r > 0.0) {
                return divergent;
            }
            if r <= 2.0 {
                return (f64::INFINITY, f64::INFINITY, true, false);
            }
            let mut cum = cum_n;
            let mut tail = 0.0;
            let stop = n.max(INVERSE_TAIL_SIZES);
            for k in n + 1..=stop {
                cum *= a / (lambda_0 / k as f64 + a);
                tail += k as f64 * cum;
            }
            // △_k ≈ △_K (K/k)^r beyond K: Σ k^{1−r} by the midpoint integral.
            let kk = stop as f64;
            let rest = cum * kk.powf(r) * (kk + 0.5).powf(2.0 - r) / (r - 2.0);
            let bound = cum * (kk + r + 1.0).powi(2) / (r - 2.0);
            (tail + rest, tail + bound.max(rest), true, true)
        }
        ClearanceSpec::Dynamic { .. } | ClearanceSpec::DosingProfile { .. } => divergent,
    }
}

/// Builds the steady-state recurrence for a static clearance law at
/// truncation `n_max`, with the remainder of the mass sum estimated from
/// the law's large-size behaviour.
pub fn recurrence(params: &KineticParameters, clearance: &ClearanceSpec, n_max: usize) -> Result<Recurrence> {
    params.validate()?;
    if n_max < 2 {
        return Err(Error::Config(format!("N_max must be >= 2, got {n_max}")));
    }
    clearance.validate(n_max)?;
    let rates = clearance.static_rates(n_max).ok_or_else(|| {
        Error::Config("steady states need a time-independent clearance law".into())
    })?;
    let a = params.elongation_rate();
    let delta: Vec<f64> = rates.iter().map(|l| a / (l + a)).collect();
    let mut cumulative = Vec::with_capacity(delta.len());
    let mut cum = 1.0;
    let mut partial = 0.0;
    for (k, d) in delta.iter().enumerate() {
        if k > 0 {
            cum *= d;
        }
        cumulative.push(cum);
        partial += (k + 2) as f64 * cum;
    }
    let (tail, tail_bound, c1, c2) = tail_of(clearance, a, n_max, cum, partial);
    let lambda_2 = rates[0];
    let total = partial + tail;
    let s = params.k_2 * params.m_0 * params.m_0;
    let c3 = if total.is_finite() {
        s * total - lambda_2 - a > 0.0
    } else {
        s > 0.0
    };
    Ok(Recurrence {
        delta,
        cumulative,
        partial_sum: partial,
        tail,
        tail_bound,
        lambda_2,
        conditions: ExistenceConditions {
            c1_decay: c1,
            c2_summable: c2,
            c3_growth: c3,
            resolved: tail_bound.is_finite() && tail_bound < 1e-9 * partial,
        },
    })
}

pub fn existence_conditions(rec: &Recurrence) -> ExistenceConditions {
    rec.conditions
}

/// Nontrivial steady state of the in vivo master equations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyStateDistribution {
    pub recurrence: Recurrence,
    /// Mass sum used for `p_2*`.
    pub mass_sum: f64,
    pub p2_star: f64,
    /// `p_i* = △_i p_2*`, indexed by size − 2.
    pub p_star: Vec<f64>,
    pub m_star: f64,
}

fn solve_p2(params: &KineticParameters, lambda_2: f64, mass_sum: f64) -> Result<f64> {
    let a = params.elongation_rate();
    let s = params.k_2 * params.m_0 * params.m_0;
    let growth = s * mass_sum - lambda_2 - a;
    if !(growth > 0.0) {
        return Err(Error::NoFixedPoint(format!(
            "clearance too strong: k_2 m_0² △ − λ_2 − 2k_+m_0 = {growth:e} <= 0"
        )));
    }
    Ok((params.sat_mass * growth / ((lambda_2 + a) * mass_sum * mass_sum)).sqrt())
}

fn assemble(rec: Recurrence, params: &KineticParameters, mass_sum: f64) -> Result<SteadyStateDistribution> {
    let p2 = solve_p2(params, rec.lambda_2, mass_sum)?;
    let p_star = rec.cumulative.iter().map(|c| c * p2).collect();
    Ok(SteadyStateDistribution {
        m_star: mass_sum * p2,
        p2_star: p2,
        p_star,
        mass_sum,
        recurrence: rec,
    })
}

/// Steady state of the untruncated system, listed up to `n_max`.
pub fn steady_state_distribution(
    params: &KineticParameters,
    clearance: &ClearanceSpec,
    n_max: usize,
) -> Result<SteadyStateDistribution> {
    let rec = recurrence(params, clearance, n_max)?;
    let c = rec.conditions;
    if !c.c1_decay {
        return Err(Error::NoFixedPoint("cumulative ratios do not decay (C1)".into()));
    }
    if !c.c2_summable {
        return Err(Error::NoFixedPoint("mass sum diverges (C2)".into()));
    }
    let total = rec.mass_sum();
    assemble(rec, params, total)
}

/// Exact steady state of the system truncated at `n_max` with an
/// absorbing tail (aggregates leaving the tracked range are lost).
pub fn steady_state_truncated(
    params: &KineticParameters,
    clearance: &ClearanceSpec,
    n_max: usize,
) -> Result<SteadyStateDistribution> {
    let rec = recurrence(params, clearance, n_max)?;
    let partial = rec.partial_sum;
    assemble(rec, params, partial)
}

/// Critical `λ_0` for `λ_i = λ_0 / i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InverseSizeThreshold {
    /// `2a (a + 4 k_2 m_0²) / (a + k_2 m_0²)` with `a = 2 k_+ m_0`.
    pub exact: f64,
    /// `2a`.
    pub approx: f64,
}

pub fn critical_clearance_inverse_size(params: &KineticParameters) -> InverseSizeThreshold {
    let a = params.elongation_rate();
    let s = params.k_2 * params.m_0 * params.m_0;
    InverseSizeThreshold {
        exact: 2.0 * a * (a + 4.0 * s) / (a + s),
        approx: 2.0 * a,
    }
}

/// Critical `λ_0` for `λ_i = i λ_0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearSizeThreshold {
    /// `(k_+ k_2 m_0³ − 1) / (k_+ m_0 − k_2 m_0²)` as printed; its units do
    /// not balance.
    pub printed: f64,
    /// Bisection on the existence conditions.
    pub numeric: f64,
}

pub fn critical_clearance_linear_size(params: &KineticParameters) -> Result<LinearSizeThreshold> {
    let m0 = params.m_0;
    let printed = (params.k_plus * params.k_2 * m0.powi(3) - 1.0) / (params.k_plus * m0 - params.k_2 * m0 * m0);
    // Without secondary nucleation any clearance is enough.
    if !(params.k_2 * m0 * m0 > 0.0) {
        return Ok(LinearSizeThreshold { printed, numeric: 0.0 });
    }
    let hi = critical_clearance_constant(params, CriticalFormula::MomentBased).max(1.0);
    let numeric = critical_clearance_series(params, ClearanceFamily::LinearInSize, (0.0, hi), 200)?;
    Ok(LinearSizeThreshold { printed, numeric })
}

/// One-parameter clearance families scanned by the bisection oracles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClearanceFamily {
    Constant,
    LinearInSize,
    InverseInSize,
}

impl ClearanceFamily {
    pub fn law(&self, value: f64) -> ClearanceSpec {
        match self {
            ClearanceFamily::Constant => ClearanceSpec::Constant { lambda: value },
            ClearanceFamily::LinearInSize => ClearanceSpec::LinearInSize { lambda_0: value },
            ClearanceFamily::InverseInSize => ClearanceSpec::InverseInSize { lambda_0: value },
        }
    }
}

fn bisect_threshold(
    bracket: (f64, f64),
    rel_width: f64,
    mut diseased: impl FnMut(f64) -> Result<bool>,
) -> Result<f64> {
    let (mut lo, mut hi) = bracket;
    if !(hi > lo) || lo < 0.0 {
        return Err(Error::Config(format!("invalid bracket ({lo}, {hi})")));
    }
    if !diseased(lo)? {
        return Err(Error::NonMonotone(format!(
            "lower end {lo} is already healthy; threshold is below the bracket"
        )));
    }
    if diseased(hi)? {
        return Err(Error::NonMonotone(format!(
            "upper end {hi} is still diseased; threshold is above the bracket"
        )));
    }
    while hi - lo > rel_width * hi {
        let mid = 0.5 * (lo + hi);
        if diseased(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Threshold of a clearance family from the existence conditions of the
/// steady-state recurrence, bisected to `1e-6` relative width.
pub fn critical_clearance_series(
    params: &KineticParameters,
    family: ClearanceFamily,
    bracket: (f64, f64),
    n_max: usize,
) -> Result<f64> {
    bisect_threshold(bracket, 1e-6, |v| {
        Ok(recurrence(params, &family.law(v), n_max)?.conditions.diseased())
    })
}

/// Settings for the ODE-based bifurcation oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct BifurcationOptions {
    pub n_max: usize,
    /// Seed `p_2(0)` as a fraction of `m_0`.
    pub seed_fraction: f64,
    /// Settled when `|dM/dt|` and `|dP/dt|` fall below this times `m_0` per hour.
    pub settle_rate: f64,
    /// Healthy when the settled mass is below this times `m_0`.
    pub extinct_fraction: f64,
    /// Relative bracket width at which bisection stops.
    pub rel_width: f64,
    /// Integration horizon cap (hours).
    pub t_max: f64,
    pub rel_tol: f64,
}

impl Default for BifurcationOptions {
    fn default() -> Self {
        Self {
            n_max: 100,
            seed_fraction: 1e-4,
            settle_rate: 1e-9,
            extinct_fraction: 1e-6,
            rel_width: 1e-3,
            t_max: 500.0,
            rel_tol: 1e-8,
        }
    }
}

/// Final state of a seeded in vivo run integrated until it settles.
#[derive(Debug, Clone, PartialEq)]
pub struct SettledState {
    pub t: f64,
    pub distribution: SizeDistribution,
    pub moments: Moments,
}

/// Integrates the in vivo master equations (primary nucleation off) from
/// `initial` until `|dM/dt|, |dP/dt| < settle_rate · m_0` per hour.
pub fn settle_invivo(
    params: &KineticParameters,
    clearance: &ClearanceSpec,
    initial: &SizeDistribution,
    settle_rate: f64,
    t_max: f64,
    rel_tol: f64,
) -> Result<SettledState> {
    let mut cfg = IntegrationConfig::default();
    cfg.rel_tol = rel_tol;
    settle_invivo_with(params, clearance, initial, settle_rate, t_max, cfg)
}

/// [`settle_invivo`] with full control over the integrator settings. The
/// output grid is overridden.
pub fn settle_invivo_with(
    params: &KineticParameters,
    clearance: &ClearanceSpec,
    initial: &SizeDistribution,
    settle_rate: f64,
    t_max: f64,
    cfg: IntegrationConfig,
) -> Result<SettledState> {
    let n_max = initial.n_max();
    let eq = MasterEquation::new(params, ModelVariant::in_vivo(), clearance.clone(), n_max)?;
    let y0 = eq.initial_state(initial)?;
    let threshold = settle_rate * params.m_0;
    let mut settled = false;
    let mut obs = |s: &StepView<'_>| {
        let dm = eq.mass(s.f1).abs();
        let dp = eq.number(s.f1).abs();
        if dm < threshold && dp < threshold {
            settled = true;
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    };
    let cfg = cfg.with_output(OutputGrid::Ends);
    let tr = integrate_observed(&eq, &y0, (0.0, t_max), &cfg, &[], &mut obs)?;
    if !settled {
        return Err(Error::NoConvergence(format!(
            "mass still changing faster than {threshold:e} M/h at t = {t_max} h"
        )));
    }
    let y = tr.last_state();
    let distribution = eq.distribution(y);
    Ok(SettledState {
        t: tr.last_time(),
        moments: distribution.moments(),
        distribution,
    })
}

/// Classifies the long-time fate of a seeded system: `true` when the
/// settled mass stays above `extinct_fraction · m_0`.
pub fn seeded_run_persists(
    params: &KineticParameters,
    clearance: &ClearanceSpec,
    opts: &BifurcationOptions,
) -> Result<bool> {
    if !(opts.seed_fraction > 0.0) {
        return Err(Error::Config(
            "the bifurcation oracle needs a positive seed (k_n is zeroed)".into(),
        ));
    }
    let init = SizeDistribution::seeded(params.m_0, opts.n_max, opts.seed_fraction * params.m_0);
    let s = settle_invivo(params, clearance, &init, opts.settle_rate, opts.t_max, opts.rel_tol)?;
    Ok(s.moments.mass >= opts.extinct_fraction * params.m_0)
}

/// Critical value of a clearance family located by bisection on
/// long-time integrations of a seeded system.
pub fn critical_clearance_numeric(
    params: &KineticParameters,
    family: ClearanceFamily,
    bracket: (f64, f64),
    opts: &BifurcationOptions,
) -> Result<f64> {
    bisect_threshold(bracket, opts.rel_width, |v| seeded_run_persists(params, &family.law(v), opts))
}
