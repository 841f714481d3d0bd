//! Dosing-regime sweeps and toxicity-constrained optimum selection.
//!
//! Toxic masses here are reported in rescaled concentration units
//! (physical molar times the parameter set's `rescale_c`).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::KineticParameters;
use crate::therapy::{mean_toxic_mass, regime_toxicity, CycleOptions, DosingRegime};

/// Admissible box for regime parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeBounds {
    /// Smallest dosing period (days).
    pub period_min: f64,
    /// Smallest swept clearance increment (h⁻¹).
    pub lambda_min: f64,
    /// Largest clearance increment (h⁻¹).
    pub lambda_max: f64,
}

impl Default for RegimeBounds {
    fn default() -> Self {
        Self {
            period_min: 0.2,
            lambda_min: 0.2,
            lambda_max: 80.0,
        }
    }
}

/// Fixed parts of every regime in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeContext {
    pub lambda_a: f64,
    pub decay_per_day: f64,
    pub t_max_days: f64,
}

impl RegimeContext {
    pub fn regime(&self, period_days: f64, lambda_drug: f64) -> DosingRegime {
        DosingRegime {
            lambda_drug,
            decay_per_day: self.decay_per_day,
            period_days,
            lambda_a: self.lambda_a,
            t_max_days: self.t_max_days,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub period_days: f64,
    pub lambda_drug: f64,
    /// `None` when the cycle average did not converge.
    pub m_bar: Option<f64>,
    pub c_max: f64,
}

/// Results on a `(B, λ_drug)` grid, `B`-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepGrid {
    pub periods: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub points: Vec<SweepPoint>,
}

impl SweepGrid {
    pub fn at(&self, i_period: usize, i_lambda: usize) -> &SweepPoint {
        &self.points[i_period * self.lambdas.len() + i_lambda]
    }

    pub fn missing(&self) -> usize {
        self.points.iter().filter(|p| p.m_bar.is_none()).count()
    }
}

fn check_axis(name: &str, v: &[f64], lo: f64, hi: f64) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Config(format!("{name} axis is empty")));
    }
    if v.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config(format!("{name} axis must be strictly increasing")));
    }
    if let Some(x) = v.iter().find(|x| !(**x >= lo && **x <= hi)) {
        return Err(Error::Config(format!("{name} value {x} outside [{lo}, {hi}]")));
    }
    Ok(())
}

fn scaled_mean(params: &KineticParameters, regime: &DosingRegime, opts: CycleOptions) -> Result<Option<f64>> {
    match mean_toxic_mass(params, regime, opts) {
        Ok(avg) => Ok(Some(avg.mean * params.rescale_c)),
        Err(e) if e.is_solver_failure() => Ok(None),
        Err(e) => Err(e),
    }
}

/// Cycle-averaged toxic mass and exposure at every grid point. Points
/// are evaluated in parallel on the current rayon pool.
pub fn sweep(
    periods: &[f64],
    lambdas: &[f64],
    params: &KineticParameters,
    ctx: &RegimeContext,
    bounds: &RegimeBounds,
    opts: CycleOptions,
) -> Result<SweepGrid> {
    params.validate()?;
    check_axis("period", periods, bounds.period_min, ctx.t_max_days)?;
    check_axis("lambda_drug", lambdas, bounds.lambda_min, bounds.lambda_max)?;
    let grid: Vec<(f64, f64)> = periods
        .iter()
        .flat_map(|b| lambdas.iter().map(move |l| (*b, *l)))
        .collect();
    let points = grid
        .par_iter()
        .map(|&(b, l)| {
            let regime = ctx.regime(b, l);
            Ok(SweepPoint {
                period_days: b,
                lambda_drug: l,
                m_bar: scaled_mean(params, &regime, opts)?,
                c_max: regime_toxicity(&regime),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepGrid {
        periods: periods.to_vec(),
        lambdas: lambdas.to_vec(),
        points,
    })
}

/// Contour-ready CSV: `B,lambda_drug,M_bar,C_max`, blank `M_bar` for
/// missing points.
pub fn write_sweep_csv(grid: &SweepGrid, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["B", "lambda_drug", "M_bar", "C_max"])?;
    for p in &grid.points {
        w.write_record([
            format!("{:?}", p.period_days),
            format!("{:?}", p.lambda_drug),
            p.m_bar.map(|m| format!("{m:?}")).unwrap_or_default(),
            format!("{:?}", p.c_max),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Clearance increment delivering exactly `c_max` with period `period_days`.
pub fn lambda_for_exposure(c_max: f64, period_days: f64, ctx: &RegimeContext) -> f64 {
    c_max / ctx.regime(period_days, 1.0).exposure_per_unit_dose()
}

/// Largest exposure reachable at the clearance bound.
pub fn max_exposure(period_days: f64, ctx: &RegimeContext, bounds: &RegimeBounds) -> f64 {
    regime_toxicity(&ctx.regime(period_days, bounds.lambda_max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub period_days: f64,
    pub lambda_drug: f64,
    pub m_bar: Option<f64>,
    pub c_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Optimum {
    pub period_days: f64,
    pub lambda_drug: f64,
    pub m_bar: f64,
    pub c_max: f64,
    /// Every feasible period considered, in grid order.
    pub candidates: Vec<Candidate>,
}

/// Relative gap below which two objective values count as a tie.
const TIE_TOLERANCE: f64 = 1e-9;

/// Minimises the cycle-averaged toxic mass over the period grid subject
/// to a fixed total exposure `c_max_target`. Exposure is linear in
/// `λ_drug`, so each period fixes its increment directly. Ties go to the
/// longer period.
pub fn constrained_optimum(
    c_max_target: f64,
    params: &KineticParameters,
    ctx: &RegimeContext,
    periods: &[f64],
    bounds: &RegimeBounds,
    opts: CycleOptions,
) -> Result<Optimum> {
    params.validate()?;
    if !c_max_target.is_finite() || c_max_target < 0.0 {
        return Err(Error::Config(format!("exposure target must be >= 0, got {c_max_target}")));
    }
    check_axis("period", periods, bounds.period_min, ctx.t_max_days)?;
    let feasible: Vec<(f64, f64)> = periods
        .iter()
        .map(|&b| (b, lambda_for_exposure(c_max_target, b, ctx)))
        .filter(|(_, l)| *l <= bounds.lambda_max)
        .collect();
    if feasible.is_empty() {
        let max = periods
            .iter()
            .map(|&b| max_exposure(b, ctx, bounds))
            .fold(0.0, f64::max);
        return Err(Error::Infeasible {
            target: c_max_target,
            min: 0.0,
            max,
        });
    }
    let candidates = feasible
        .par_iter()
        .map(|&(b, l)| {
            let regime = ctx.regime(b, l);
            Ok(Candidate {
                period_days: b,
                lambda_drug: l,
                m_bar: scaled_mean(params, &regime, opts)?,
                c_max: regime_toxicity(&regime),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<&Candidate> = None;
    for c in &candidates {
        let Some(m) = c.m_bar else { continue };
        best = match best {
            Some(b) => {
                let bm = b.m_bar.unwrap();
                if m < bm - TIE_TOLERANCE * bm.abs() || (m <= bm + TIE_TOLERANCE * bm.abs() && c.period_days > b.period_days) {
                    Some(c)
                } else {
                    Some(b)
                }
            }
            None => Some(c),
        };
    }
    let best = *best.ok_or_else(|| Error::NoConvergence("no feasible period reached a periodic state".into()))?;
    Ok(Optimum {
        period_days: best.period_days,
        lambda_drug: best.lambda_drug,
        m_bar: best.m_bar.unwrap(),
        c_max: best.c_max,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::fixed_point_moments;
    use approx::assert_relative_eq;

    fn params() -> KineticParameters {
        KineticParameters::abeta42().with_rescale(1e6)
    }

    fn ctx() -> RegimeContext {
        RegimeContext {
            lambda_a: 10.0,
            decay_per_day: 1.0,
            t_max_days: 28.0,
        }
    }

    #[test]
    fn single_point_matches_direct_calls() {
        let p = params();
        let g = sweep(&[2.0], &[10.0], &p, &ctx(), &RegimeBounds::default(), CycleOptions::default()).unwrap();
        assert_eq!(g.points.len(), 1);
        let r = ctx().regime(2.0, 10.0);
        let direct = mean_toxic_mass(&p, &r, CycleOptions::default()).unwrap().mean * p.rescale_c;
        assert_eq!(g.points[0].m_bar, Some(direct));
        assert_eq!(g.points[0].c_max, regime_toxicity(&r));
    }

    #[test]
    fn axes_are_validated() {
        let p = params();
        let b = RegimeBounds::default();
        let o = CycleOptions::default();
        assert!(sweep(&[2.0, 1.0], &[10.0], &p, &ctx(), &b, o).is_err());
        assert!(sweep(&[0.1], &[10.0], &p, &ctx(), &b, o).is_err());
        assert!(sweep(&[1.0], &[100.0], &p, &ctx(), &b, o).is_err());
        assert!(sweep(&[], &[10.0], &p, &ctx(), &b, o).is_err());
    }

    #[test]
    fn exposure_inversion() {
        for b in [0.2, 1.0, 3.7, 7.0, 28.0] {
            let l = lambda_for_exposure(100.0, b, &ctx());
            assert_relative_eq!(regime_toxicity(&ctx().regime(b, l)), 100.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_target_gives_no_drug() {
        let p = params();
        let opt = constrained_optimum(0.0, &p, &ctx(), &[1.0, 2.0], &RegimeBounds::default(), CycleOptions::default()).unwrap();
        assert!(opt.candidates.iter().all(|c| c.lambda_drug == 0.0));
        let m2 = fixed_point_moments(&p, 10.0).unwrap().mass * p.rescale_c;
        assert_relative_eq!(opt.m_bar, m2, max_relative = 1e-8);
        // Every period ties, so the longest one wins.
        assert_eq!(opt.period_days, 2.0);
    }

    #[test]
    fn infeasible_target_reports_range() {
        let p = params();
        let err = constrained_optimum(1e5, &p, &ctx(), &[1.0, 7.0], &RegimeBounds::default(), CycleOptions::default())
            .unwrap_err();
        match err {
            Error::Infeasible { target, min, max } => {
                assert_eq!(target, 1e5);
                assert_eq!(min, 0.0);
                assert_relative_eq!(max, max_exposure(1.0, &ctx(), &RegimeBounds::default()));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn frontier_falls_with_period() {
        let b = RegimeBounds::default();
        let periods = [0.2, 0.5, 1.0, 2.0, 3.5, 7.0, 14.0, 28.0];
        let caps: Vec<f64> = periods.iter().map(|&x| max_exposure(x, &ctx(), &b)).collect();
        for w in caps.windows(2) {
            assert!(w[1] < w[0]);
        }
    }
}
