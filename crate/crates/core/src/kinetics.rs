//! Rate constants, state types and right-hand sides for the homogeneous
//! nucleation–elongation–secondary-nucleation models.
//!
//! Three model families share one kernel:
//!
//! * the closed in vitro system, where monomer is consumed and total mass
//!   `m + M` is conserved;
//! * the in vivo system with monomer held at `m_0`, size-resolved
//!   clearance `λ_i` and secondary nucleation saturated in the aggregate
//!   mass;
//! * the in vivo system whose clearance rates decay under toxic load,
//!   `dλ_i/dt = β_i M (μ_i − λ_i)`.
//!
//! States are truncated at `N_max`. Sizes run from 2 to `N_max`; the flat
//! layout used by the integrator is `[m, p_2, …, p_N]`, followed for the
//! dynamic model by one clearance coordinate per size.
//!
//! Concentrations may be multiplied by `rescale_c` before integration. The
//! rate constants are transformed so that the dynamics are unchanged; see
//! [`KineticParameters::scaled`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default truncation size for the master equations.
pub const DEFAULT_N_MAX: usize = 200;

/// Relative negativity tolerance: states below `-NEGATIVITY_TOL * m_0`
/// are treated as solver failures.
pub const NEGATIVITY_TOL: f64 = 1e-12;

/// Rate constants and concentrations (molar, hours).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticParameters {
    /// Primary nucleation rate. M·h⁻¹ in the raw form; the monomer-squared
    /// form multiplies it by `m²`.
    pub k_n: f64,
    /// Secondary nucleation rate (M⁻²·h⁻¹).
    pub k_2: f64,
    /// Saturation constant for monomer-saturated secondary nucleation (M²).
    pub sat_monomer: f64,
    /// Saturation constant for mass-saturated secondary nucleation (M²).
    pub sat_mass: f64,
    /// Elongation rate (M⁻¹·h⁻¹).
    pub k_plus: f64,
    /// Initial (in vitro) or held (in vivo) monomer concentration (M).
    pub m_0: f64,
    /// Concentration multiplier applied before integration.
    pub rescale_c: f64,
}

impl KineticParameters {
    /// Aβ42 rates measured in HEPES buffer.
    pub fn abeta42() -> Self {
        Self {
            k_n: 1.6e-11,
            k_2: 2.1e14,
            sat_monomer: 2.3e-17,
            sat_mass: 2.3e-17,
            k_plus: 1e10,
            m_0: 3e-6,
            rescale_c: 1.0,
        }
    }

    pub fn with_m0(mut self, m_0: f64) -> Self {
        self.m_0 = m_0;
        self
    }

    pub fn with_rescale(mut self, c: f64) -> Self {
        self.rescale_c = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("k_n", self.k_n),
            ("k_2", self.k_2),
            ("K_m", self.sat_monomer),
            ("K_M", self.sat_mass),
            ("k_plus", self.k_plus),
            ("m_0", self.m_0),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.sat_monomer <= 0.0 || self.sat_mass <= 0.0 {
            return Err(Error::Config("saturation constants must be > 0".into()));
        }
        if !self.rescale_c.is_finite() || self.rescale_c <= 0.0 {
            return Err(Error::Config(format!(
                "rescale_c must be finite and > 0, got {}",
                self.rescale_c
            )));
        }
        Ok(())
    }

    /// Parameters expressed in concentration units multiplied by
    /// `rescale_c`. The returned set has `rescale_c = 1`.
    ///
    /// With `x' = c x` for every concentration, each rate constant picks
    /// up the power of `c` that keeps the equations invariant.
    pub fn scaled(&self, nucleation: NucleationForm) -> Self {
        let c = self.rescale_c;
        Self {
            k_n: match nucleation {
                NucleationForm::Raw => self.k_n * c,
                NucleationForm::MonomerSquared => self.k_n / c,
            },
            k_2: self.k_2 / (c * c),
            sat_monomer: self.sat_monomer * c * c,
            sat_mass: self.sat_mass * c * c,
            k_plus: self.k_plus / c,
            m_0: self.m_0 * c,
            rescale_c: 1.0,
        }
    }

    /// Elongation flux coefficient `2 k_+ m_0`.
    pub fn elongation_rate(&self) -> f64 {
        2.0 * self.k_plus * self.m_0
    }
}

/// Which homogeneous system a model evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    InVitroClosed,
    InVivoConstMonomer,
    InVivoDynamicClearance,
}

/// Concentration that saturates secondary nucleation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationArgument {
    /// `σ(m)` with constant `K_m`.
    Monomer,
    /// `σ(M)` with constant `K_M`.
    Mass,
}

/// Form of the primary nucleation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NucleationForm {
    /// Rate `k_n` (M·h⁻¹).
    Raw,
    /// Rate `k_n m²`.
    MonomerSquared,
}

/// Treatment of elongation out of the largest tracked size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailClosure {
    /// `N_max`-mers do not elongate; the truncated system keeps its mass.
    Reflecting,
    /// `N_max`-mers elongate out of the tracked range and are lost.
    Absorbing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVariant {
    pub kind: ModelKind,
    pub saturation: SaturationArgument,
    pub nucleation: NucleationForm,
    /// Drop primary nucleation entirely (seeded approximation).
    pub k_n_zeroed: bool,
    pub closure: TailClosure,
}

impl ModelVariant {
    pub fn in_vitro() -> Self {
        Self {
            kind: ModelKind::InVitroClosed,
            saturation: SaturationArgument::Monomer,
            nucleation: NucleationForm::Raw,
            k_n_zeroed: false,
            closure: TailClosure::Reflecting,
        }
    }

    /// Constant-monomer in vivo model in its seeded form (`k_n = 0`).
    pub fn in_vivo() -> Self {
        Self {
            kind: ModelKind::InVivoConstMonomer,
            saturation: SaturationArgument::Mass,
            nucleation: NucleationForm::MonomerSquared,
            k_n_zeroed: true,
            closure: TailClosure::Reflecting,
        }
    }

    /// Dynamic-clearance model. Primary nucleation is kept: it is what
    /// slowly erodes clearance in an unseeded region.
    pub fn dynamic() -> Self {
        Self {
            kind: ModelKind::InVivoDynamicClearance,
            saturation: SaturationArgument::Mass,
            nucleation: NucleationForm::MonomerSquared,
            k_n_zeroed: false,
            closure: TailClosure::Reflecting,
        }
    }

    pub fn with_k_n_zeroed(mut self, zeroed: bool) -> Self {
        self.k_n_zeroed = zeroed;
        self
    }

    pub fn with_closure(mut self, closure: TailClosure) -> Self {
        self.closure = closure;
        self
    }

    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::InVitroClosed => Self::in_vitro(),
            ModelKind::InVivoConstMonomer => Self::in_vivo(),
            ModelKind::InVivoDynamicClearance => Self::dynamic(),
        }
    }

    pub(crate) fn nucleation_flux(&self, params: &KineticParameters, m: f64) -> f64 {
        if self.k_n_zeroed {
            return 0.0;
        }
        match self.nucleation {
            NucleationForm::Raw => params.k_n,
            NucleationForm::MonomerSquared => params.k_n * m * m,
        }
    }

    pub(crate) fn saturation_factor(&self, params: &KineticParameters, m: f64, mass: f64) -> f64 {
        match self.saturation {
            SaturationArgument::Monomer => saturation(m, params.sat_monomer),
            SaturationArgument::Mass => saturation(mass, params.sat_mass),
        }
    }
}

/// Truncated size distribution of one region: monomer plus `p_2 … p_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeDistribution {
    pub m: f64,
    /// `p[k]` is the concentration of aggregates of size `k + 2`.
    pub p: Vec<f64>,
}

impl SizeDistribution {
    pub fn empty(m: f64, n_max: usize) -> Self {
        assert!(n_max >= 2, "n_max must be at least 2");
        Self {
            m,
            p: vec![0.0; n_max - 1],
        }
    }

    /// Monomer at `m` with a dimer seed.
    pub fn seeded(m: f64, n_max: usize, p2: f64) -> Self {
        let mut d = Self::empty(m, n_max);
        d.p[0] = p2;
        d
    }

    pub fn n_max(&self) -> usize {
        self.p.len() + 1
    }

    /// Concentration of `size`-mers; zero outside the tracked range.
    pub fn at(&self, size: usize) -> f64 {
        if size == 1 {
            self.m
        } else if size >= 2 && size <= self.n_max() {
            self.p[size - 2]
        } else {
            0.0
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.p.len() + 1);
        y.push(self.m);
        y.extend_from_slice(&self.p);
        y
    }

    pub fn from_flat(y: &[f64]) -> Result<Self> {
        if y.len() < 2 {
            return Err(Error::Dimension {
                expected: 2,
                got: y.len(),
            });
        }
        Ok(Self {
            m: y[0],
            p: y[1..].to_vec(),
        })
    }

    /// Checks that no entry is below `-NEGATIVITY_TOL * m_0`.
    pub fn check_nonnegative(&self, m_0: f64) -> Result<()> {
        let floor = -NEGATIVITY_TOL * m_0;
        if self.m < floor {
            return Err(Error::Domain(format!("monomer concentration {} < {floor}", self.m)));
        }
        for (k, &v) in self.p.iter().enumerate() {
            if v < floor {
                return Err(Error::Domain(format!(
                    "p_{} = {v} below negativity floor {floor}",
                    k + 2
                )));
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> Moments {
        moments(self)
    }
}

/// Aggregate number `P` and mass `M`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Moments {
    pub number: f64,
    pub mass: f64,
}

/// `P = Σ p_i`, `M = Σ i p_i`, summed in ascending size.
pub fn moments(state: &SizeDistribution) -> Moments {
    aggregate_moments(&state.p)
}

pub(crate) fn aggregate_moments(p: &[f64]) -> Moments {
    let mut number = 0.0;
    let mut mass = 0.0;
    for (k, &v) in p.iter().enumerate() {
        number += v;
        mass += (k + 2) as f64 * v;
    }
    Moments { number, mass }
}

/// Saturation factor `K / (K + x²)`.
pub fn sigma(x: f64, k: f64) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::Domain(format!("saturation constant must be > 0, got {k}")));
    }
    Ok(saturation(x, k))
}

#[inline]
pub(crate) fn saturation(x: f64, k: f64) -> f64 {
    k / (k + x * x)
}

/// Clearance laws. Rates are in h⁻¹; sizes are aggregate sizes (≥ 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ClearanceSpec {
    Constant {
        lambda: f64,
    },
    /// `λ_i = i λ_0`.
    LinearInSize {
        lambda_0: f64,
    },
    /// `λ_i = λ_0 / i`.
    InverseInSize {
        lambda_0: f64,
    },
    /// `λ_a + λ_drug` on `n_0 ≤ i ≤ n_1`, `λ_a` elsewhere.
    Interval {
        lambda_a: f64,
        lambda_drug: f64,
        n_0: usize,
        n_1: usize,
    },
    /// Clearance that decays towards a basal capacity under toxic load.
    /// Vectors are indexed by size − 2.
    Dynamic {
        initial: Vec<f64>,
        basal: Vec<f64>,
        damage: Vec<f64>,
    },
    /// Periodic dosing: `λ_drug e^{−A (t mod B)} + λ_a` with `A` in day⁻¹
    /// and `B` in days. Applies uniformly to every size.
    DosingProfile {
        lambda_drug: f64,
        decay_per_day: f64,
        period_days: f64,
        lambda_a: f64,
    },
}

pub const HOURS_PER_DAY: f64 = 24.0;

impl ClearanceSpec {
    /// Dynamic clearance with the same initial, basal and damage values at
    /// every size.
    pub fn dynamic_uniform(n_max: usize, initial: f64, basal: f64, damage: f64) -> Self {
        let n = n_max - 1;
        ClearanceSpec::Dynamic {
            initial: vec![initial; n],
            basal: vec![basal; n],
            damage: vec![damage; n],
        }
    }

    pub fn validate(&self, n_max: usize) -> Result<()> {
        let nonneg = |name: &str, v: f64| -> Result<()> {
            if !v.is_finite() || v < 0.0 {
                Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
            } else {
                Ok(())
            }
        };
        match self {
            ClearanceSpec::Constant { lambda } => nonneg("lambda", *lambda),
            ClearanceSpec::LinearInSize { lambda_0 } | ClearanceSpec::InverseInSize { lambda_0 } => {
                nonneg("lambda_0", *lambda_0)
            }
            ClearanceSpec::Interval {
                lambda_a,
                lambda_drug,
                n_0,
                n_1,
            } => {
                nonneg("lambda_a", *lambda_a)?;
                nonneg("lambda_drug", *lambda_drug)?;
                if *n_0 < 2 || n_0 > n_1 {
                    return Err(Error::Config(format!(
                        "interval needs 2 <= n_0 <= n_1, got [{n_0}, {n_1}]"
                    )));
                }
                if *n_1 > n_max {
                    return Err(Error::Config(format!(
                        "interval end {n_1} exceeds N_max = {n_max}"
                    )));
                }
                Ok(())
            }
            ClearanceSpec::Dynamic {
                initial,
                basal,
                damage,
            } => {
                for v in [initial, basal, damage] {
                    if v.len() != n_max - 1 {
                        return Err(Error::Dimension {
                            expected: n_max - 1,
                            got: v.len(),
                        });
                    }
                }
                for k in 0..initial.len() {
                    nonneg("initial clearance", initial[k])?;
                    nonneg("basal clearance", basal[k])?;
                    nonneg("damage rate", damage[k])?;
                    if basal[k] > initial[k] {
                        return Err(Error::Config(format!(
                            "basal clearance {} exceeds initial clearance {} at size {}",
                            basal[k],
                            initial[k],
                            k + 2
                        )));
                    }
                }
                Ok(())
            }
            ClearanceSpec::DosingProfile {
                lambda_drug,
                decay_per_day,
                period_days,
                lambda_a,
            } => {
                nonneg("lambda_drug", *lambda_drug)?;
                nonneg("decay rate A", *decay_per_day)?;
                nonneg("lambda_a", *lambda_a)?;
                if !(period_days.is_finite() && *period_days > 0.0) {
                    return Err(Error::Config(format!(
                        "dosing period must be > 0, got {period_days}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Clearance of `size`-mers at time `t` (hours). `None` for dynamic
    /// clearance, whose rates are part of the state.
    pub fn rate(&self, size: usize, t_hours: f64) -> Option<f64> {
        let i = size as f64;
        match self {
            ClearanceSpec::Constant { lambda } => Some(*lambda),
            ClearanceSpec::LinearInSize { lambda_0 } => Some(i * lambda_0),
            ClearanceSpec::InverseInSize { lambda_0 } => Some(lambda_0 / i),
            ClearanceSpec::Interval {
                lambda_a,
                lambda_drug,
                n_0,
                n_1,
            } => Some(if size >= *n_0 && size <= *n_1 {
                lambda_a + lambda_drug
            } else {
                *lambda_a
            }),
            ClearanceSpec::Dynamic { .. } => None,
            ClearanceSpec::DosingProfile { .. } => Some(self.uniform_rate(t_hours).unwrap_or(0.0)),
        }
    }

    /// Size-independent rate at time `t`, when the law has one.
    pub fn uniform_rate(&self, t_hours: f64) -> Option<f64> {
        match self {
            ClearanceSpec::Constant { lambda } => Some(*lambda),
            ClearanceSpec::DosingProfile {
                lambda_drug,
                decay_per_day,
                period_days,
                lambda_a,
            } => {
                let period_h = period_days * HOURS_PER_DAY;
                let phase_days = t_hours.rem_euclid(period_h) / HOURS_PER_DAY;
                Some(lambda_drug * (-decay_per_day * phase_days).exp() + lambda_a)
            }
            _ => None,
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        matches!(self, ClearanceSpec::DosingProfile { .. })
    }

    /// Per-size rates (index = size − 2) for time-independent laws.
    pub fn static_rates(&self, n_max: usize) -> Option<Vec<f64>> {
        match self {
            ClearanceSpec::Dynamic { .. } | ClearanceSpec::DosingProfile { .. } => None,
            _ => Some((2..=n_max).map(|i| self.rate(i, 0.0).unwrap()).collect()),
        }
    }

    /// Times in `(t0, t1)` (hours) where the law is not smooth.
    pub fn discontinuities(&self, t0: f64, t1: f64) -> Vec<f64> {
        match self {
            ClearanceSpec::DosingProfile { period_days, .. } => {
                let period_h = period_days * HOURS_PER_DAY;
                let mut out = Vec::new();
                let mut k = (t0 / period_h).floor() + 1.0;
                loop {
                    let t = k * period_h;
                    if t >= t1 {
                        break;
                    }
                    if t > t0 {
                        out.push(t);
                    }
                    k += 1.0;
                }
                out
            }
            _ => Vec::new(),
        }
    }
}

/// Per-size clearance as seen by the kernel.
#[derive(Clone, Copy)]
pub(crate) enum RateView<'a> {
    Zero,
    Uniform(f64),
    PerSize(&'a [f64]),
    /// `λ_i = basal_i + exp(gap_i)`.
    LogGap { basal: &'a [f64], gap: &'a [f64] },
}

impl RateView<'_> {
    #[inline]
    pub(crate) fn at(&self, k: usize) -> f64 {
        match self {
            RateView::Zero => 0.0,
            RateView::Uniform(l) => *l,
            RateView::PerSize(r) => r[k],
            RateView::LogGap { basal, gap } => basal[k] + gap[k].exp(),
        }
    }
}

/// Aggregate derivatives for one region. Writes `dp` and returns `dm/dt`.
///
/// `hold_monomer` selects the in vivo behaviour (`dm/dt = 0`).
#[inline]
pub(crate) fn aggregation_kernel(
    params: &KineticParameters,
    variant: &ModelVariant,
    m: f64,
    p: &[f64],
    rates: RateView<'_>,
    hold_monomer: bool,
    dp: &mut [f64],
) -> f64 {
    let n = p.len();
    debug_assert_eq!(dp.len(), n);
    let mom = aggregate_moments(p);
    let sat = variant.saturation_factor(params, m, mom.mass);
    let nuc = variant.nucleation_flux(params, m);
    let secondary = params.k_2 * sat * m * m * mom.mass;
    let e = 2.0 * params.k_plus * m;

    let reflecting = variant.closure == TailClosure::Reflecting;
    let outflow = |k: usize| if reflecting && k == n - 1 { 0.0 } else { e * p[k] };
    dp[0] = -rates.at(0) * p[0] + nuc - outflow(0) + secondary;
    for k in 1..n {
        dp[k] = -rates.at(k) * p[k] + e * p[k - 1] - outflow(k);
    }
    let elongating = if reflecting {
        mom.number - p[n - 1]
    } else {
        mom.number
    };
    if hold_monomer {
        0.0
    } else {
        -2.0 * nuc - e * elongating - 2.0 * secondary
    }
}

fn kind_error(expected: &str, variant: &ModelVariant) -> Error {
    Error::Config(format!("{expected} requires a matching model variant, got {:?}", variant.kind))
}

/// Derivative of the closed in vitro master equations.
pub fn rhs_invitro(
    state: &SizeDistribution,
    params: &KineticParameters,
    variant: &ModelVariant,
) -> Result<SizeDistribution> {
    if variant.kind != ModelKind::InVitroClosed {
        return Err(kind_error("rhs_invitro", variant));
    }
    let mut dp = vec![0.0; state.p.len()];
    let dm = aggregation_kernel(params, variant, state.m, &state.p, RateView::Zero, false, &mut dp);
    Ok(SizeDistribution { m: dm, p: dp })
}

/// Derivative of the constant-monomer in vivo master equations with the
/// clearance law evaluated at `t` (hours).
pub fn rhs_invivo(
    state: &SizeDistribution,
    params: &KineticParameters,
    variant: &ModelVariant,
    clearance: &ClearanceSpec,
    t: f64,
) -> Result<SizeDistribution> {
    if variant.kind != ModelKind::InVivoConstMonomer {
        return Err(kind_error("rhs_invivo", variant));
    }
    if let ClearanceSpec::Dynamic { .. } = clearance {
        return Err(Error::Config(
            "dynamic clearance carries state; use rhs_dynamic".into(),
        ));
    }
    clearance.validate(state.n_max())?;
    let rates: Vec<f64> = (2..=state.n_max())
        .map(|i| clearance.rate(i, t).unwrap())
        .collect();
    let mut dp = vec![0.0; state.p.len()];
    aggregation_kernel(
        params,
        variant,
        state.m,
        &state.p,
        RateView::PerSize(&rates),
        true,
        &mut dp,
    );
    Ok(SizeDistribution { m: 0.0, p: dp })
}

/// Derivative of the dynamic-clearance model: aggregate derivatives plus
/// `dλ_i/dt = β_i M (μ_i − λ_i)` for the supplied clearance state.
pub fn rhs_dynamic(
    state: &SizeDistribution,
    lambda: &[f64],
    params: &KineticParameters,
    variant: &ModelVariant,
    dynamic: &ClearanceSpec,
) -> Result<(SizeDistribution, Vec<f64>)> {
    if variant.kind != ModelKind::InVivoDynamicClearance {
        return Err(kind_error("rhs_dynamic", variant));
    }
    let ClearanceSpec::Dynamic { basal, damage, .. } = dynamic else {
        return Err(Error::Config("rhs_dynamic needs a dynamic clearance law".into()));
    };
    dynamic.validate(state.n_max())?;
    if lambda.len() != state.p.len() {
        return Err(Error::Dimension {
            expected: state.p.len(),
            got: lambda.len(),
        });
    }
    let mut dp = vec![0.0; state.p.len()];
    aggregation_kernel(
        params,
        variant,
        state.m,
        &state.p,
        RateView::PerSize(lambda),
        true,
        &mut dp,
    );
    let mass = moments(state).mass;
    let dlambda = lambda
        .iter()
        .zip(basal.iter().zip(damage.iter()))
        .map(|(&l, (&mu, &beta))| beta * mass * (mu - l))
        .collect();
    Ok((SizeDistribution { m: 0.0, p: dp }, dlambda))
}

/// Closed moment equations of the in vitro model: returns
/// `(dm/dt, dP/dt, dM/dt)`.
pub fn rhs_moments_invitro(
    params: &KineticParameters,
    variant: &ModelVariant,
    m: f64,
    mom: Moments,
) -> (f64, f64, f64) {
    let nuc = variant.nucleation_flux(params, m);
    let sat = variant.saturation_factor(params, m, mom.mass);
    let secondary = params.k_2 * sat * m * m * mom.mass;
    let dp = nuc + secondary;
    let dmass = 2.0 * nuc + 2.0 * params.k_plus * m * mom.number + 2.0 * secondary;
    (-dmass, dp, dmass)
}

/// Closed moment equations of the in vivo model under a size-independent
/// clearance `lambda`, monomer held at `params.m_0`.
pub fn rhs_moments_invivo(
    params: &KineticParameters,
    variant: &ModelVariant,
    lambda: f64,
    mom: Moments,
) -> Moments {
    let m = params.m_0;
    let nuc = variant.nucleation_flux(params, m);
    let sat = variant.saturation_factor(params, m, mom.mass);
    let secondary = params.k_2 * sat * m * m * mom.mass;
    Moments {
        number: -lambda * mom.number + nuc + secondary,
        mass: -lambda * mom.mass + 2.0 * nuc + 2.0 * params.k_plus * m * mom.number + 2.0 * secondary,
    }
}

/// Log-gap coordinate used to integrate a decaying clearance rate.
///
/// `λ = μ + exp(u)` turns `dλ/dt = β M (μ − λ)` into `du/dt = −β M`,
/// which stays non-stiff when `β M` is large. A rate already at its
/// basal value maps to a coordinate whose exponential underflows to 0.
pub fn clearance_gap_coordinate(lambda: f64, basal: f64) -> f64 {
    let gap = lambda - basal;
    if gap > 0.0 {
        gap.ln()
    } else {
        GAP_AT_BASAL
    }
}

const GAP_AT_BASAL: f64 = -800.0;

/// Size-resolved master equation for one region, ready for integration.
///
/// Holds parameters in scaled units. Flat state: `[m, p_2..p_N]` for the
/// constant-clearance models, followed by `u_2..u_N` (see
/// [`clearance_gap_coordinate`]) for the dynamic model.
#[derive(Debug, Clone)]
pub struct MasterEquation {
    params: KineticParameters,
    physical: KineticParameters,
    variant: ModelVariant,
    clearance: ClearanceSpec,
    n_max: usize,
    static_rates: Option<Vec<f64>>,
    damage_scaled: Vec<f64>,
}

impl MasterEquation {
    pub fn new(
        params: &KineticParameters,
        variant: ModelVariant,
        clearance: ClearanceSpec,
        n_max: usize,
    ) -> Result<Self> {
        params.validate()?;
        if n_max < 2 {
            return Err(Error::Config(format!("N_max must be >= 2, got {n_max}")));
        }
        clearance.validate(n_max)?;
        let dynamic = matches!(clearance, ClearanceSpec::Dynamic { .. });
        match variant.kind {
            ModelKind::InVivoDynamicClearance if !dynamic => {
                return Err(Error::Config(
                    "the dynamic-clearance model needs a dynamic clearance law".into(),
                ))
            }
            ModelKind::InVivoConstMonomer if dynamic => {
                return Err(Error::Config(
                    "dynamic clearance needs the dynamic-clearance model variant".into(),
                ))
            }
            _ => {}
        }
        let static_rates = clearance.static_rates(n_max);
        let damage_scaled = match &clearance {
            ClearanceSpec::Dynamic { damage, .. } => {
                damage.iter().map(|b| b / params.rescale_c).collect()
            }
            _ => Vec::new(),
        };
        Ok(Self {
            params: params.scaled(variant.nucleation),
            physical: *params,
            variant,
            clearance,
            n_max,
            static_rates,
            damage_scaled,
        })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn scale(&self) -> f64 {
        self.physical.rescale_c
    }

    pub fn variant(&self) -> &ModelVariant {
        &self.variant
    }

    pub fn clearance(&self) -> &ClearanceSpec {
        &self.clearance
    }

    pub fn physical_params(&self) -> &KineticParameters {
        &self.physical
    }

    pub fn scaled_params(&self) -> &KineticParameters {
        &self.params
    }

    fn is_dynamic(&self) -> bool {
        self.variant.kind == ModelKind::InVivoDynamicClearance
    }

    pub fn dim(&self) -> usize {
        if self.is_dynamic() {
            2 * self.n_max - 1
        } else {
            self.n_max
        }
    }

    /// Flat scaled state from a physical distribution. The dynamic model
    /// starts from the law's initial clearance.
    pub fn initial_state(&self, dist: &SizeDistribution) -> Result<Vec<f64>> {
        if dist.n_max() != self.n_max {
            return Err(Error::Dimension {
                expected: self.n_max,
                got: dist.n_max(),
            });
        }
        let c = self.scale();
        let mut y: Vec<f64> = dist.to_flat().into_iter().map(|v| v * c).collect();
        if let ClearanceSpec::Dynamic { initial, basal, .. } = &self.clearance {
            y.extend(
                initial
                    .iter()
                    .zip(basal)
                    .map(|(&l, &mu)| clearance_gap_coordinate(l, mu)),
            );
        }
        Ok(y)
    }

    /// Physical distribution from a flat scaled state.
    pub fn distribution(&self, y: &[f64]) -> SizeDistribution {
        let c = self.scale();
        SizeDistribution {
            m: y[0] / c,
            p: y[1..self.n_max].iter().map(|v| v / c).collect(),
        }
    }

    /// Current clearance rates (dynamic model only).
    pub fn clearance_rates(&self, y: &[f64]) -> Option<Vec<f64>> {
        match &self.clearance {
            ClearanceSpec::Dynamic { basal, .. } => Some(
                basal
                    .iter()
                    .zip(&y[self.n_max..])
                    .map(|(mu, u)| mu + u.exp())
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Physical aggregate mass of a flat state.
    pub fn mass(&self, y: &[f64]) -> f64 {
        aggregate_moments(&y[1..self.n_max]).mass / self.scale()
    }

    pub fn number(&self, y: &[f64]) -> f64 {
        aggregate_moments(&y[1..self.n_max]).number / self.scale()
    }

    pub fn monomer(&self, y: &[f64]) -> f64 {
        y[0] / self.scale()
    }

    /// Absolute tolerance matching `1e-14 m_0` in scaled units.
    pub fn default_abs_tol(&self) -> f64 {
        1e-14 * self.params.m_0
    }

    /// Components that must stay nonnegative and their floor, scaled.
    /// The closed in vitro monomer is exempt: its constant nucleation
    /// drain settles it at a tiny negative value once monomer is exhausted.
    pub fn nonnegative(&self) -> (std::ops::Range<usize>, f64) {
        let first = usize::from(self.variant.kind == ModelKind::InVitroClosed);
        (first..self.n_max, -NEGATIVITY_TOL * self.params.m_0)
    }

    pub fn discontinuities(&self, t0: f64, t1: f64) -> Vec<f64> {
        self.clearance.discontinuities(t0, t1)
    }

    /// Right-hand side in scaled units.
    pub fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.n_max;
        let (m, p) = (y[0], &y[1..n]);
        match self.variant.kind {
            ModelKind::InVitroClosed => {
                let dm = aggregation_kernel(
                    &self.params,
                    &self.variant,
                    m,
                    p,
                    RateView::Zero,
                    false,
                    &mut dy[1..n],
                );
                dy[0] = dm;
            }
            ModelKind::InVivoConstMonomer => {
                let rates = match &self.static_rates {
                    Some(r) => RateView::PerSize(r),
                    None => RateView::Uniform(self.clearance.uniform_rate(t).unwrap_or(0.0)),
                };
                aggregation_kernel(&self.params, &self.variant, m, p, rates, true, &mut dy[1..n]);
                dy[0] = 0.0;
            }
            ModelKind::InVivoDynamicClearance => {
                let ClearanceSpec::Dynamic { basal, .. } = &self.clearance else {
                    unreachable!("validated in new()")
                };
                let gap = &y[n..];
                let (head, tail) = dy.split_at_mut(n);
                aggregation_kernel(
                    &self.params,
                    &self.variant,
                    m,
                    p,
                    RateView::LogGap { basal, gap },
                    true,
                    &mut head[1..],
                );
                head[0] = 0.0;
                let mass = aggregate_moments(p).mass;
                for (du, beta) in tail.iter_mut().zip(&self.damage_scaled) {
                    *du = -beta * mass;
                }
            }
        }
    }
}

/// Closed moment model `[m, P, M]` (plus a log-gap clearance coordinate
/// for uniform dynamic clearance), in scaled units.
///
/// Exact for the untruncated system whenever clearance is independent of
/// size.
#[derive(Debug, Clone)]
pub struct MomentEquation {
    params: KineticParameters,
    physical: KineticParameters,
    variant: ModelVariant,
    clearance: ClearanceSpec,
    dynamic: Option<(f64, f64, f64)>,
}

impl MomentEquation {
    pub fn new(params: &KineticParameters, variant: ModelVariant, clearance: ClearanceSpec) -> Result<Self> {
        params.validate()?;
        let dynamic = match (&variant.kind, &clearance) {
            (ModelKind::InVitroClosed, _) => None,
            (ModelKind::InVivoConstMonomer, ClearanceSpec::Constant { .. })
            | (ModelKind::InVivoConstMonomer, ClearanceSpec::DosingProfile { .. }) => {
                clearance.validate(2)?;
                None
            }
            (
                ModelKind::InVivoDynamicClearance,
                ClearanceSpec::Dynamic {
                    initial,
                    basal,
                    damage,
                },
            ) => {
                let uniform = |v: &Vec<f64>| v.iter().all(|x| *x == v[0]);
                if initial.is_empty() || !uniform(initial) || !uniform(basal) || !uniform(damage) {
                    return Err(Error::Config(
                        "the moment closure needs size-independent dynamic clearance".into(),
                    ));
                }
                clearance.validate(initial.len() + 1)?;
                Some((initial[0], basal[0], damage[0] / params.rescale_c))
            }
            _ => {
                return Err(Error::Config(format!(
                    "no closed moment system for {:?} with this clearance law",
                    variant.kind
                )))
            }
        };
        Ok(Self {
            params: params.scaled(variant.nucleation),
            physical: *params,
            variant,
            clearance,
            dynamic,
        })
    }

    pub fn scale(&self) -> f64 {
        self.physical.rescale_c
    }

    pub fn dim(&self) -> usize {
        if self.dynamic.is_some() {
            4
        } else {
            3
        }
    }

    /// Scaled state from physical `m` and moments.
    pub fn initial_state(&self, m: f64, mom: Moments) -> Vec<f64> {
        let c = self.scale();
        let mut y = vec![m * c, mom.number * c, mom.mass * c];
        if let Some((l0, mu, _)) = self.dynamic {
            y.push(clearance_gap_coordinate(l0, mu));
        }
        y
    }

    pub fn mass(&self, y: &[f64]) -> f64 {
        y[2] / self.scale()
    }

    pub fn number(&self, y: &[f64]) -> f64 {
        y[1] / self.scale()
    }

    pub fn monomer(&self, y: &[f64]) -> f64 {
        y[0] / self.scale()
    }

    pub fn clearance_rate(&self, t: f64, y: &[f64]) -> f64 {
        match self.dynamic {
            Some((_, mu, _)) => mu + y[3].exp(),
            None => self.clearance.uniform_rate(t).unwrap_or(0.0),
        }
    }

    pub fn default_abs_tol(&self) -> f64 {
        1e-14 * self.params.m_0
    }

    pub fn nonnegative(&self) -> (std::ops::Range<usize>, f64) {
        let first = usize::from(self.variant.kind == ModelKind::InVitroClosed);
        (first..3, -NEGATIVITY_TOL * self.params.m_0)
    }

    pub fn discontinuities(&self, t0: f64, t1: f64) -> Vec<f64> {
        self.clearance.discontinuities(t0, t1)
    }

    pub fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let mom = Moments {
            number: y[1],
            mass: y[2],
        };
        match self.variant.kind {
            ModelKind::InVitroClosed => {
                let (dm, dp, dmass) = rhs_moments_invitro(&self.params, &self.variant, y[0], mom);
                dy[0] = dm;
                dy[1] = dp;
                dy[2] = dmass;
            }
            _ => {
                let lambda = self.clearance_rate(t, y);
                let d = rhs_moments_invivo(&self.params, &self.variant, lambda, mom);
                dy[0] = 0.0;
                dy[1] = d.number;
                dy[2] = d.mass;
                if let Some((_, _, beta)) = self.dynamic {
                    dy[3] = -beta * y[2];
                }
            }
        }
    }
}
