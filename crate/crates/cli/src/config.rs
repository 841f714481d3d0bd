//! Run configuration. Parsed from TOML (or JSON when the file ends in
//! `.json`), validated, then normalised so that every default is explicit
//! before it is echoed into a summary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use plaquenet::connectome::{
    generate_path, generate_small_world, generate_star, load_connectome, load_node_labels, Connectome,
    DiffusionSchedule,
};
use plaquenet::kinetics::{
    ClearanceSpec, KineticParameters, ModelKind, ModelVariant, NucleationForm, SaturationArgument, TailClosure,
};
use plaquenet::optimizer::{RegimeBounds, RegimeContext};
use plaquenet::therapy::{CycleOptions, DosingRegime, DrugSpec};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for graph generation, the only random input.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clearance: Option<ClearanceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub therapy: TherapyConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimize: Option<OptimizeConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    InVitro,
    InVivo,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    /// Full size-resolved master equations.
    Master,
    /// Two-moment reduction.
    Moments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_system")]
    pub system: System,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_rescale")]
    pub rescale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_n_zeroed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saturation: Option<SaturationArgument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nucleation: Option<NucleationForm>,
    #[serde(default = "default_closure")]
    pub closure: TailClosure,
    /// Initial dimer concentration (at the seed node for network runs).
    #[serde(rename = "seed_p2_M", default)]
    pub seed_p2: f64,
    #[serde(default)]
    pub params: ParamsConfig,
}

fn default_variant() -> Variant {
    Variant::InVivo
}
fn default_system() -> System {
    System::Master
}
fn default_n_max() -> usize {
    100
}
fn default_rescale() -> f64 {
    1e6
}
fn default_closure() -> TailClosure {
    TailClosure::Reflecting
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: default_variant(),
            system: default_system(),
            n_max: default_n_max(),
            rescale: default_rescale(),
            k_n_zeroed: None,
            saturation: None,
            nucleation: None,
            closure: default_closure(),
            seed_p2: 0.0,
            params: ParamsConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self.variant {
            Variant::InVitro => ModelKind::InVitroClosed,
            Variant::InVivo => ModelKind::InVivoConstMonomer,
            Variant::Dynamic => ModelKind::InVivoDynamicClearance,
        }
    }

    pub fn model_variant(&self) -> ModelVariant {
        let base = ModelVariant::for_kind(self.kind());
        ModelVariant {
            kind: base.kind,
            saturation: self.saturation.unwrap_or(base.saturation),
            nucleation: self.nucleation.unwrap_or(base.nucleation),
            k_n_zeroed: self.k_n_zeroed.unwrap_or(base.k_n_zeroed),
            closure: self.closure,
        }
    }

    pub fn kinetic_params(&self) -> KineticParameters {
        let p = &self.params;
        KineticParameters {
            k_n: p.k_n,
            k_2: p.k_2,
            sat_monomer: p.sat_monomer,
            sat_mass: p.sat_mass,
            k_plus: p.k_plus,
            m_0: p.m_0,
            rescale_c: self.rescale,
        }
    }
}

/// Rate constants in molar and hour units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamsConfig {
    pub k_n: f64,
    pub k_2: f64,
    pub k_plus: f64,
    pub sat_monomer: f64,
    pub sat_mass: f64,
    #[serde(rename = "m_0_M")]
    pub m_0: f64,
}

impl Default for ParamsConfig {
    fn default() -> Self {
        let p = KineticParameters::abeta42();
        Self {
            k_n: p.k_n,
            k_2: p.k_2,
            k_plus: p.k_plus,
            sat_monomer: p.sat_monomer,
            sat_mass: p.sat_mass,
            m_0: p.m_0,
        }
    }
}

// Missing fields fall back to the tabulated values one by one.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialParams {
    k_n: Option<f64>,
    k_2: Option<f64>,
    k_plus: Option<f64>,
    sat_monomer: Option<f64>,
    sat_mass: Option<f64>,
    #[serde(rename = "m_0_M")]
    m_0: Option<f64>,
}

impl<'de> Deserialize<'de> for ParamsConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let p = PartialParams::deserialize(d)?;
        let base = ParamsConfig::default();
        Ok(Self {
            k_n: p.k_n.unwrap_or(base.k_n),
            k_2: p.k_2.unwrap_or(base.k_2),
            k_plus: p.k_plus.unwrap_or(base.k_plus),
            sat_monomer: p.sat_monomer.unwrap_or(base.sat_monomer),
            sat_mass: p.sat_mass.unwrap_or(base.sat_mass),
            m_0: p.m_0.unwrap_or(base.m_0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClearanceConfig {
    Constant {
        lambda_per_h: f64,
    },
    LinearInSize {
        lambda_0_per_h: f64,
    },
    InverseInSize {
        lambda_0_per_h: f64,
    },
    Interval {
        lambda_a_per_h: f64,
        lambda_drug_per_h: f64,
        n_0: usize,
        n_1: usize,
    },
    /// Same initial, basal and damage values at every size.
    Dynamic {
        initial_per_h: f64,
        basal_per_h: f64,
        damage: f64,
    },
}

impl ClearanceConfig {
    pub fn spec(&self, n_max: usize) -> ClearanceSpec {
        match *self {
            ClearanceConfig::Constant { lambda_per_h } => ClearanceSpec::Constant { lambda: lambda_per_h },
            ClearanceConfig::LinearInSize { lambda_0_per_h } => ClearanceSpec::LinearInSize {
                lambda_0: lambda_0_per_h,
            },
            ClearanceConfig::InverseInSize { lambda_0_per_h } => ClearanceSpec::InverseInSize {
                lambda_0: lambda_0_per_h,
            },
            ClearanceConfig::Interval {
                lambda_a_per_h,
                lambda_drug_per_h,
                n_0,
                n_1,
            } => ClearanceSpec::Interval {
                lambda_a: lambda_a_per_h,
                lambda_drug: lambda_drug_per_h,
                n_0,
                n_1,
            },
            ClearanceConfig::Dynamic {
                initial_per_h,
                basal_per_h,
                damage,
            } => ClearanceSpec::dynamic_uniform(n_max, initial_per_h, basal_per_h, damage),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub connectome: ConnectomeSource,
    pub diffusion: DiffusionConfig,
    /// Node label or index carrying the initial seed.
    #[serde(default = "default_seed_node")]
    pub seed_node: String,
    /// Invasion threshold as a fraction of `m_0`.
    #[serde(default = "default_theta")]
    pub theta: f64,
}

fn default_seed_node() -> String {
    "0".into()
}
fn default_theta() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConnectomeSource {
    /// Edge-list CSV, relative paths resolved against the config file.
    File {
        edges: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_nodes: Option<usize>,
    },
    SmallWorld {
        n_nodes: usize,
        k: usize,
        rewire: f64,
    },
    Path {
        n_nodes: usize,
        #[serde(default = "unit_weight")]
        weight: f64,
    },
    Star {
        weights: Vec<f64>,
    },
}

fn unit_weight() -> f64 {
    1.0
}

impl ConnectomeSource {
    pub fn build(&self, base: &Path, seed: u64) -> Result<Connectome, CliError> {
        Ok(match self {
            ConnectomeSource::File { edges, labels, n_nodes } => {
                let c = load_connectome(&base.join(edges), *n_nodes)?;
                match labels {
                    Some(l) => c.with_labels(load_node_labels(&base.join(l))?)?,
                    None => c,
                }
            }
            ConnectomeSource::SmallWorld { n_nodes, k, rewire } => generate_small_world(*n_nodes, *k, *rewire, seed)?,
            ConnectomeSource::Path { n_nodes, weight } => generate_path(*n_nodes, *weight)?,
            ConnectomeSource::Star { weights } => generate_star(weights)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionConfig {
    Constant { rho_per_h: f64 },
    CubeInverse { rho_0_per_h: f64 },
}

impl DiffusionConfig {
    pub fn schedule(&self) -> DiffusionSchedule {
        match *self {
            DiffusionConfig::Constant { rho_per_h } => DiffusionSchedule::Constant { rho: rho_per_h },
            DiffusionConfig::CubeInverse { rho_0_per_h } => DiffusionSchedule::CubeInverse { rho_0: rho_0_per_h },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TherapyConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drug: Option<DrugConfig>,
    /// Periodic dosing; replaces the clearance section in `simulate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<RegimeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrugConfig {
    #[serde(default = "one")]
    pub delta_k: f64,
    #[serde(rename = "potency_per_h_per_M", default)]
    pub potency: f64,
    #[serde(rename = "plasma_concentration_M", default)]
    pub plasma_concentration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_drug_per_h: Option<f64>,
    #[serde(default = "yes")]
    pub inhibit_kinetics: bool,
    #[serde(default = "yes")]
    pub enhance_clearance: bool,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

impl DrugConfig {
    pub fn spec(&self) -> DrugSpec {
        DrugSpec {
            delta_k: self.delta_k,
            potency: self.potency,
            plasma_concentration: self.plasma_concentration,
            lambda_drug: self.lambda_drug_per_h,
            inhibit_kinetics: self.inhibit_kinetics,
            enhance_clearance: self.enhance_clearance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub lambda_drug_per_h: f64,
    #[serde(default = "one")]
    pub decay_per_day: f64,
    pub period_days: f64,
    pub lambda_a_per_h: f64,
    #[serde(default = "default_t_max_days")]
    pub t_max_days: f64,
}

fn default_t_max_days() -> f64 {
    28.0
}

impl RegimeConfig {
    pub fn regime(&self) -> DosingRegime {
        DosingRegime {
            lambda_drug: self.lambda_drug_per_h,
            decay_per_day: self.decay_per_day,
            period_days: self.period_days,
            lambda_a: self.lambda_a_per_h,
            t_max_days: self.t_max_days,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    /// In rescaled concentration units; the model's default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end_days: Option<f64>,
    /// Uniformly spaced output intervals; every accepted step when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_rel_tol() -> f64 {
    1e-8
}
fn default_max_steps() -> usize {
    5_000_000
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rel_tol: default_rel_tol(),
            abs_tol: None,
            t_end_h: None,
            t_end_days: None,
            samples: None,
            max_steps: default_max_steps(),
        }
    }
}

impl SolverConfig {
    /// Integration horizon in hours.
    pub fn t_end(&self) -> f64 {
        self.t_end_h.unwrap_or(10.0)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Aggregate sizes written as extra columns (`simulate`) or rows of
    /// the long-format dump (`network`).
    #[serde(default)]
    pub sizes: Vec<usize>,
    /// Per-size long-format network dump `t,node,i,p`.
    #[serde(default)]
    pub long_format: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Constant clearances at which fixed points and steady-state
    /// distributions are reported.
    #[serde(default)]
    pub lambdas_per_h: Vec<f64>,
    /// Secondary-nucleation multipliers for the inhibited thresholds.
    #[serde(default = "default_delta_k")]
    pub delta_k: Vec<f64>,
    /// Also locate the constant threshold by bisection on seeded runs.
    #[serde(default = "yes")]
    pub numeric: bool,
    /// Truncation size for the series-based thresholds and distributions.
    #[serde(default = "default_series_n_max")]
    pub series_n_max: usize,
}

fn default_delta_k() -> Vec<f64> {
    vec![0.25, 0.5, 0.75, 1.0]
}
fn default_series_n_max() -> usize {
    200
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            lambdas_per_h: Vec::new(),
            delta_k: default_delta_k(),
            numeric: true,
            series_n_max: default_series_n_max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    pub lambda_a_per_h: f64,
    #[serde(default = "one")]
    pub decay_per_day: f64,
    #[serde(default = "default_t_max_days")]
    pub t_max_days: f64,
    pub periods_days: Vec<f64>,
    /// Sweep axis; the contour CSV is skipped when empty.
    #[serde(default)]
    pub lambdas_per_h: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_max_target: Option<f64>,
    #[serde(default = "default_period_min")]
    pub period_min_days: f64,
    #[serde(default = "default_lambda_min")]
    pub lambda_min_per_h: f64,
    #[serde(default = "default_lambda_max")]
    pub lambda_max_per_h: f64,
    #[serde(default = "default_cycle_tol")]
    pub cycle_tolerance: f64,
    #[serde(default = "default_max_cycles")]
    pub max_cycles: usize,
}

fn default_period_min() -> f64 {
    0.2
}
fn default_lambda_min() -> f64 {
    0.2
}
fn default_lambda_max() -> f64 {
    80.0
}
fn default_cycle_tol() -> f64 {
    1e-4
}
fn default_max_cycles() -> usize {
    400
}

impl OptimizeConfig {
    pub fn context(&self) -> RegimeContext {
        RegimeContext {
            lambda_a: self.lambda_a_per_h,
            decay_per_day: self.decay_per_day,
            t_max_days: self.t_max_days,
        }
    }

    pub fn bounds(&self) -> RegimeBounds {
        RegimeBounds {
            period_min: self.period_min_days,
            lambda_min: self.lambda_min_per_h,
            lambda_max: self.lambda_max_per_h,
        }
    }

    pub fn cycle_options(&self, rel_tol: f64) -> CycleOptions {
        CycleOptions {
            tolerance: self.cycle_tolerance,
            max_cycles: self.max_cycles,
            rel_tol,
        }
    }
}

/// A parsed configuration together with the directory its relative
/// paths refer to.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let config = parse(&text, is_json).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base_dir })
}

pub fn parse(text: &str, is_json: bool) -> Result<RunConfig, String> {
    let raw: RunConfig = if is_json {
        serde_json::from_str(text).map_err(|e| e.to_string())?
    } else {
        toml::from_str(text).map_err(|e| e.to_string())?
    };
    raw.normalized()
}

fn positive(name: &str, v: f64) -> Result<(), String> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(format!("{name} must be finite and > 0, got {v}"))
    }
}

fn nonnegative(name: &str, v: f64) -> Result<(), String> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(format!("{name} must be finite and >= 0, got {v}"))
    }
}

impl RunConfig {
    /// Validates and fills every variant-dependent default.
    pub fn normalized(mut self) -> Result<Self, String> {
        let s = &mut self.solver;
        match (s.t_end_h, s.t_end_days) {
            (Some(_), Some(_)) => return Err("solver: give t_end_h or t_end_days, not both".into()),
            (None, Some(d)) => {
                s.t_end_h = Some(d * plaquenet::kinetics::HOURS_PER_DAY);
                s.t_end_days = None;
            }
            (None, None) => s.t_end_h = Some(10.0),
            (Some(_), None) => {}
        }
        positive("solver.t_end", s.t_end())?;
        positive("solver.rel_tol", s.rel_tol)?;
        if let Some(a) = s.abs_tol {
            positive("solver.abs_tol", a)?;
        }
        if s.samples == Some(0) {
            return Err("solver.samples must be >= 1".into());
        }

        let m = &mut self.model;
        let base = ModelVariant::for_kind(m.kind());
        m.k_n_zeroed.get_or_insert(base.k_n_zeroed);
        m.saturation.get_or_insert(base.saturation);
        m.nucleation.get_or_insert(base.nucleation);
        if m.n_max < 2 {
            return Err(format!("model.n_max must be >= 2, got {}", m.n_max));
        }
        positive("model.rescale", m.rescale)?;
        nonnegative("model.seed_p2_M", m.seed_p2)?;
        m.kinetic_params().validate().map_err(|e| format!("model.params: {e}"))?;

        if let Some(c) = &self.clearance {
            c.spec(self.model.n_max)
                .validate(self.model.n_max)
                .map_err(|e| format!("clearance: {e}"))?;
        }
        if self.clearance.is_some() && self.therapy.regime.is_some() {
            return Err("give either a clearance section or therapy.regime, not both".into());
        }
        if let Some(d) = &self.therapy.drug {
            d.spec().validate().map_err(|e| format!("therapy.drug: {e}"))?;
        }
        if let Some(r) = &self.therapy.regime {
            r.regime().validate().map_err(|e| format!("therapy.regime: {e}"))?;
        }
        for &i in &self.output.sizes {
            if i < 2 || i > self.model.n_max {
                return Err(format!("output.sizes: {i} outside 2..={}", self.model.n_max));
            }
        }
        if let Some(n) = &self.network {
            if !(n.theta.is_finite() && n.theta > 0.0) {
                return Err(format!("network.theta must be > 0, got {}", n.theta));
            }
        }
        if let Some(o) = &self.optimize {
            positive("optimize.t_max_days", o.t_max_days)?;
            nonnegative("optimize.lambda_a_per_h", o.lambda_a_per_h)?;
            nonnegative("optimize.decay_per_day", o.decay_per_day)?;
            if o.periods_days.is_empty() {
                return Err("optimize.periods_days must not be empty".into());
            }
            if let Some(c) = o.c_max_target {
                nonnegative("optimize.c_max_target", c)?;
            }
        }
        for &dk in &self.analysis.delta_k {
            if !(0.0..=1.0).contains(&dk) {
                return Err(format!("analysis.delta_k entries must lie in [0, 1], got {dk}"));
            }
        }
        for &l in &self.analysis.lambdas_per_h {
            positive("analysis.lambdas_per_h", l)?;
        }
        Ok(self)
    }

    /// The clearance law of a homogeneous or network run.
    pub fn clearance_spec(&self) -> Result<ClearanceSpec, CliError> {
        if let Some(r) = &self.therapy.regime {
            return Ok(r.regime().clearance_spec());
        }
        match (&self.clearance, self.model.variant) {
            (Some(c), _) => Ok(c.spec(self.model.n_max)),
            (None, Variant::InVitro) => Ok(ClearanceSpec::Constant { lambda: 0.0 }),
            (None, _) => Err(CliError::Config(
                "a clearance section (or therapy.regime) is required for in vivo models".into(),
            )),
        }
    }
}
