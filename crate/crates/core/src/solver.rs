//! Adaptive Dormand–Prince 5(4) integration with PI step control, cubic
//! Hermite dense output, event location and restarts at discontinuities.

use std::ops::{ControlFlow, Range};

use crate::error::{Error, Result};
use crate::kinetics::{MasterEquation, MomentEquation};

/// A first-order ODE system `dy/dt = f(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]);

    /// Times in `(t0, t1)` where `f` is not smooth. The integrator stops
    /// and restarts exactly at each of them.
    fn discontinuities(&self, _t0: f64, _t1: f64) -> Vec<f64> {
        Vec::new()
    }

    /// Components that must not fall below the returned floor.
    fn nonnegative(&self) -> Option<(Range<usize>, f64)> {
        None
    }

    /// Absolute tolerance used when the configuration does not set one.
    fn default_abs_tol(&self) -> Option<f64> {
        None
    }
}

/// Wraps a closure as an [`OdeSystem`].
pub struct FnSystem<F> {
    dim: usize,
    f: F,
    breaks: Vec<f64>,
}

impl<F: Fn(f64, &[f64], &mut [f64])> FnSystem<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self {
            dim,
            f,
            breaks: Vec::new(),
        }
    }

    pub fn with_discontinuities(mut self, breaks: Vec<f64>) -> Self {
        self.breaks = breaks;
        self
    }
}

impl<F: Fn(f64, &[f64], &mut [f64])> OdeSystem for FnSystem<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        (self.f)(t, y, dy)
    }

    fn discontinuities(&self, t0: f64, t1: f64) -> Vec<f64> {
        self.breaks
            .iter()
            .copied()
            .filter(|&t| t > t0 && t < t1)
            .collect()
    }
}

impl OdeSystem for MasterEquation {
    fn dim(&self) -> usize {
        MasterEquation::dim(self)
    }

    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        MasterEquation::eval(self, t, y, dy)
    }

    fn discontinuities(&self, t0: f64, t1: f64) -> Vec<f64> {
        MasterEquation::discontinuities(self, t0, t1)
    }

    fn nonnegative(&self) -> Option<(Range<usize>, f64)> {
        Some(MasterEquation::nonnegative(self))
    }

    fn default_abs_tol(&self) -> Option<f64> {
        Some(MasterEquation::default_abs_tol(self))
    }
}

impl OdeSystem for MomentEquation {
    fn dim(&self) -> usize {
        MomentEquation::dim(self)
    }

    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        MomentEquation::eval(self, t, y, dy)
    }

    fn discontinuities(&self, t0: f64, t1: f64) -> Vec<f64> {
        MomentEquation::discontinuities(self, t0, t1)
    }

    fn nonnegative(&self) -> Option<(Range<usize>, f64)> {
        Some(MomentEquation::nonnegative(self))
    }

    fn default_abs_tol(&self) -> Option<f64> {
        Some(MomentEquation::default_abs_tol(self))
    }
}

/// Which states the trajectory keeps.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum OutputGrid {
    /// Every accepted step.
    #[default]
    Steps,
    /// Every `n`-th accepted step, plus the first and last.
    Stride(usize),
    /// Dense output at the given increasing times.
    Times(Vec<f64>),
    /// Start and end only.
    Ends,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationConfig {
    pub rel_tol: f64,
    /// `None` takes the system's default.
    pub abs_tol: Option<f64>,
    pub max_step: f64,
    pub initial_step: Option<f64>,
    /// Extra non-smooth instants, merged with the system's own.
    pub discontinuity_times: Vec<f64>,
    pub max_steps: usize,
    pub output: OutputGrid,
    pub check_negative: bool,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: None,
            max_step: f64::INFINITY,
            initial_step: None,
            discontinuity_times: Vec::new(),
            max_steps: 50_000_000,
            output: OutputGrid::Steps,
            check_negative: true,
        }
    }
}

impl IntegrationConfig {
    pub fn with_tolerances(mut self, rel_tol: f64, abs_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self.abs_tol = Some(abs_tol);
        self
    }

    pub fn with_output(mut self, output: OutputGrid) -> Self {
        self.output = output;
        self
    }

    pub fn with_max_step(mut self, h: f64) -> Self {
        self.max_step = h;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config(format!("rel_tol must be > 0, got {}", self.rel_tol)));
        }
        if let Some(a) = self.abs_tol {
            if !(a > 0.0) {
                return Err(Error::Config(format!("abs_tol must be > 0, got {a}")));
            }
        }
        if !(self.max_step > 0.0) {
            return Err(Error::Config("max_step must be > 0".into()));
        }
        if self
            .discontinuity_times
            .windows(2)
            .any(|w| !(w[1] > w[0]))
        {
            return Err(Error::Config(
                "discontinuity_times must be strictly increasing".into(),
            ));
        }
        if let OutputGrid::Times(ts) = &self.output {
            if ts.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Config("output times must be strictly increasing".into()));
            }
        }
        if let OutputGrid::Stride(0) = self.output {
            return Err(Error::Config("output stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Rising,
    Falling,
    Either,
}

/// A scalar function of the state whose sign changes are located.
pub struct EventFunction<'a> {
    pub label: String,
    pub g: Box<dyn Fn(f64, &[f64]) -> f64 + 'a>,
    pub direction: Direction,
    /// Stop integration at the first occurrence.
    pub terminal: bool,
}

impl<'a> EventFunction<'a> {
    pub fn new(label: impl Into<String>, direction: Direction, g: impl Fn(f64, &[f64]) -> f64 + 'a) -> Self {
        Self {
            label: label.into(),
            g: Box::new(g),
            direction,
            terminal: false,
        }
    }

    pub fn terminal(mut self) -> Self {
        self.terminal = true;
        self
    }

    fn triggered(&self, g0: f64, g1: f64) -> bool {
        let rising = g0 < 0.0 && g1 >= 0.0;
        let falling = g0 > 0.0 && g1 <= 0.0;
        match self.direction {
            Direction::Rising => rising,
            Direction::Falling => falling,
            Direction::Either => rising || falling,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub label: String,
    pub t: f64,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    EndOfSpan,
    Event(String),
    Observer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `dy/dt` at each stored time.
    pub derivatives: Vec<Vec<f64>>,
    pub events: Vec<EventRecord>,
    pub stats: SolverStats,
    pub stop: StopReason,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trajectory holds at least one state")
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().expect("trajectory holds at least one state")
    }

    /// Samples a linear functional of the state together with its time
    /// derivative.
    pub fn series(&self, functional: impl Fn(&[f64]) -> f64) -> ScalarSeries {
        ScalarSeries {
            t: self.times.clone(),
            v: self.states.iter().map(|y| functional(y)).collect(),
            dv: self.derivatives.iter().map(|d| functional(d)).collect(),
        }
    }

    pub fn events_labelled<'s>(&'s self, label: &'s str) -> impl Iterator<Item = &'s EventRecord> {
        self.events.iter().filter(move |e| e.label == label)
    }
}

/// One accepted step, exposed to observers.
pub struct StepView<'a> {
    pub t0: f64,
    pub t1: f64,
    pub y0: &'a [f64],
    pub y1: &'a [f64],
    pub f0: &'a [f64],
    pub f1: &'a [f64],
}

impl StepView<'_> {
    pub fn interpolate(&self, t: f64, out: &mut [f64]) {
        hermite(self.t0, self.t1, self.y0, self.y1, self.f0, self.f1, t, out, None);
    }
}

/// Receives every accepted step; `Break` stops the integration.
pub trait Observer {
    fn observe(&mut self, step: &StepView<'_>) -> ControlFlow<()>;
}

impl<F: FnMut(&StepView<'_>) -> ControlFlow<()>> Observer for F {
    fn observe(&mut self, step: &StepView<'_>) -> ControlFlow<()> {
        self(step)
    }
}

struct NoObserver;

impl Observer for NoObserver {
    fn observe(&mut self, _: &StepView<'_>) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

/// Cubic Hermite interpolation of every component; optionally also the
/// derivative of the interpolant.
#[allow(clippy::too_many_arguments)]
fn hermite(
    t0: f64,
    t1: f64,
    y0: &[f64],
    y1: &[f64],
    f0: &[f64],
    f1: &[f64],
    t: f64,
    out: &mut [f64],
    dout: Option<&mut [f64]>,
) {
    let h = t1 - t0;
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    for i in 0..out.len() {
        out[i] = h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i];
    }
    if let Some(d) = dout {
        let d00 = (6.0 * s2 - 6.0 * s) / h;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = -d00;
        let d11 = 3.0 * s2 - 2.0 * s;
        for i in 0..d.len() {
            d[i] = d00 * y0[i] + d10 * f0[i] + d01 * y1[i] + d11 * f1[i];
        }
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const PI_BETA: f64 = 0.04;
const MAX_SHRINK: f64 = 5.0;
const MAX_GROWTH: f64 = 10.0;

/// Integrates without an observer.
pub fn integrate<S: OdeSystem + ?Sized>(
    system: &S,
    y0: &[f64],
    t_span: (f64, f64),
    config: &IntegrationConfig,
    events: &[EventFunction<'_>],
) -> Result<Trajectory> {
    integrate_observed(system, y0, t_span, config, events, &mut NoObserver)
}

struct Recorder {
    grid: OutputGrid,
    next_time: usize,
    since_store: usize,
    traj: Trajectory,
}

fn push_sample(traj: &mut Trajectory, t: f64, y: &[f64], f: &[f64]) {
    if traj.times.last().is_some_and(|&last| t <= last) {
        return;
    }
    traj.times.push(t);
    traj.states.push(y.to_vec());
    traj.derivatives.push(f.to_vec());
}

impl Recorder {
    fn push(&mut self, t: f64, y: &[f64], f: &[f64]) {
        push_sample(&mut self.traj, t, y, f);
    }

    fn start(&mut self, t: f64, y: &[f64], f: &[f64]) {
        let Recorder {
            grid,
            next_time,
            traj,
            ..
        } = self;
        match grid {
            OutputGrid::Times(ts) => {
                while *next_time < ts.len() && ts[*next_time] < t {
                    *next_time += 1;
                }
                if *next_time < ts.len() && ts[*next_time] == t {
                    push_sample(traj, t, y, f);
                    *next_time += 1;
                }
            }
            _ => push_sample(traj, t, y, f),
        }
    }

    fn step(&mut self, view: &StepView<'_>, last: bool) {
        let Recorder {
            grid,
            next_time,
            since_store,
            traj,
        } = self;
        match grid {
            OutputGrid::Steps => push_sample(traj, view.t1, view.y1, view.f1),
            OutputGrid::Stride(n) => {
                *since_store += 1;
                if *since_store >= *n || last {
                    *since_store = 0;
                    push_sample(traj, view.t1, view.y1, view.f1);
                }
            }
            OutputGrid::Ends => {
                if last {
                    push_sample(traj, view.t1, view.y1, view.f1);
                }
            }
            OutputGrid::Times(ts) => {
                let n = view.y0.len();
                while *next_time < ts.len() && ts[*next_time] <= view.t1 {
                    let t = ts[*next_time];
                    *next_time += 1;
                    if t == view.t1 {
                        push_sample(traj, t, view.y1, view.f1);
                        continue;
                    }
                    let mut y = vec![0.0; n];
                    let mut d = vec![0.0; n];
                    hermite(view.t0, view.t1, view.y0, view.y1, view.f0, view.f1, t, &mut y, Some(&mut d));
                    push_sample(traj, t, &y, &d);
                }
            }
        }
    }
}

fn weighted_max_norm(v: &[f64], scale: &[f64]) -> f64 {
    v.iter()
        .zip(scale)
        .map(|(x, s)| (x / s).abs())
        .fold(0.0, f64::max)
}

/// Integrates `system` over `t_span`, reporting each accepted step to
/// `observer`.
pub fn integrate_observed<S: OdeSystem + ?Sized, O: Observer + ?Sized>(
    system: &S,
    y0: &[f64],
    t_span: (f64, f64),
    config: &IntegrationConfig,
    events: &[EventFunction<'_>],
    observer: &mut O,
) -> Result<Trajectory> {
    config.validate()?;
    let (t_start, t_end) = t_span;
    if !(t_end > t_start) || !t_start.is_finite() || !t_end.is_finite() {
        return Err(Error::Config(format!("invalid time span ({t_start}, {t_end})")));
    }
    let n = system.dim();
    if y0.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: y0.len(),
        });
    }
    if let Some(i) = y0.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { t: t_start, index: i });
    }
    let rtol = config.rel_tol;
    let atol = config.abs_tol.or(system.default_abs_tol()).unwrap_or(1e-12);
    let span = t_end - t_start;
    let event_tol = 1e-6 * span;
    let negativity = if config.check_negative {
        system.nonnegative()
    } else {
        None
    };

    let mut breaks: Vec<f64> = system
        .discontinuities(t_start, t_end)
        .into_iter()
        .chain(config.discontinuity_times.iter().copied())
        .filter(|&t| t > t_start && t < t_end)
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut bounds = Vec::with_capacity(breaks.len() + 2);
    bounds.push(t_start);
    bounds.extend(breaks);
    bounds.push(t_end);

    let mut rec = Recorder {
        grid: config.output.clone(),
        next_time: 0,
        since_store: 0,
        traj: Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            derivatives: Vec::new(),
            events: Vec::new(),
            stats: SolverStats::default(),
            stop: StopReason::EndOfSpan,
        },
    };
    let mut stats = SolverStats::default();

    let mut y = y0.to_vec();
    let mut f = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut f_new = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut scale = vec![0.0; n];

    let mut g_prev: Vec<f64> = events.iter().map(|e| (e.g)(t_start, &y)).collect();
    let mut h: Option<f64> = config.initial_step;
    let mut facold: f64 = 1e-4;
    let mut stop: Option<StopReason> = None;

    'segments: for seg in bounds.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let nudge = 64.0 * f64::EPSILON * a.abs().max(b.abs()).max(1.0);
        let inner = |t: f64| -> f64 {
            if b - a > 4.0 * nudge {
                t.clamp(a + nudge, b - nudge)
            } else {
                t
            }
        };
        let mut t = a;
        system.eval(inner(t), &y, &mut f);
        stats.evaluations += 1;
        if let Some(i) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t, index: i });
        }
        if t == t_start {
            rec.start(t, &y, &f);
        }

        let mut hh = match h {
            Some(v) => v,
            None => {
                let v = initial_step(system, t, &y, &f, rtol, atol, config.max_step.min(b - a), &inner);
                stats.evaluations += 1;
                let floor = 1e3 * 16.0 * f64::EPSILON * t.abs().max(span);
                v.max(floor.min(b - a))
            }
        };
        let mut last_rejected = false;

        while t < b {
            if stats.accepted + stats.rejected >= config.max_steps {
                return Err(Error::TooManySteps(config.max_steps));
            }
            hh = hh.min(config.max_step);
            let h_untruncated = hh;
            let remaining = b - t;
            let last = hh >= remaining * (1.0 - 1e-12) || t + hh >= b;
            if last {
                hh = remaining;
            }
            let h_floor = 16.0 * f64::EPSILON * t.abs().max(span);
            if hh < h_floor && !last {
                return Err(Error::StepUnderflow { t, h: hh });
            }

            for i in 0..n {
                ytmp[i] = y[i] + hh * A21 * f[i];
            }
            system.eval(inner(t + C2 * hh), &ytmp, &mut k2);
            for i in 0..n {
                ytmp[i] = y[i] + hh * (A31 * f[i] + A32 * k2[i]);
            }
            system.eval(inner(t + C3 * hh), &ytmp, &mut k3);
            for i in 0..n {
                ytmp[i] = y[i] + hh * (A41 * f[i] + A42 * k2[i] + A43 * k3[i]);
            }
            system.eval(inner(t + C4 * hh), &ytmp, &mut k4);
            for i in 0..n {
                ytmp[i] = y[i] + hh * (A51 * f[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            system.eval(inner(t + C5 * hh), &ytmp, &mut k5);
            for i in 0..n {
                ytmp[i] = y[i]
                    + hh * (A61 * f[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            let t_next = if last { b } else { t + hh };
            system.eval(inner(t_next), &ytmp, &mut k6);
            for i in 0..n {
                y_new[i] = y[i]
                    + hh * (A71 * f[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            system.eval(inner(t_next), &y_new, &mut f_new);
            stats.evaluations += 6;
            for i in 0..n {
                err[i] = hh
                    * (E1 * f[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * f_new[i]);
                scale[i] = atol + rtol * y[i].abs().max(y_new[i].abs());
            }
            let err_norm = weighted_max_norm(&err, &scale);

            if !err_norm.is_finite() {
                stats.rejected += 1;
                hh /= MAX_SHRINK;
                last_rejected = true;
                if hh < h_floor {
                    let index = y_new.iter().position(|v| !v.is_finite()).unwrap_or(0);
                    return Err(Error::NonFinite { t, index });
                }
                continue;
            }

            let fac11 = err_norm.powf(0.2 - PI_BETA * 0.75);
            if err_norm <= 1.0 {
                stats.accepted += 1;
                if let Some(i) = f_new.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { t: t_next, index: i });
                }
                if let Some((range, floor)) = &negativity {
                    for i in range.clone() {
                        if y_new[i] < *floor {
                            return Err(Error::Negative {
                                t: t_next,
                                index: i,
                                value: y_new[i],
                                floor: *floor,
                            });
                        }
                    }
                }

                // Earliest event in this step, if any.
                let mut hit: Option<(usize, f64, Vec<f64>)> = None;
                let mut g_new = Vec::with_capacity(events.len());
                for (k, ev) in events.iter().enumerate() {
                    let g1 = (ev.g)(t_next, &y_new);
                    g_new.push(g1);
                    if ev.triggered(g_prev[k], g1) {
                        let (te, ye) = locate_event(ev, t, t_next, &y, &y_new, &f, &f_new, event_tol);
                        rec.traj.events.push(EventRecord {
                            label: ev.label.clone(),
                            t: te,
                            state: ye.clone(),
                        });
                        if ev.terminal && hit.as_ref().is_none_or(|(_, th, _)| te < *th) {
                            hit = Some((k, te, ye));
                        }
                    }
                }
                g_prev = g_new;

                let view = StepView {
                    t0: t,
                    t1: t_next,
                    y0: &y,
                    y1: &y_new,
                    f0: &f,
                    f1: &f_new,
                };
                let observer_stop = observer.observe(&view).is_break();
                let finishing = hit.is_some()
                    || observer_stop
                    || (t_next >= t_end && matches!(rec.grid, OutputGrid::Ends | OutputGrid::Stride(_)));

                if let Some((k, te, ye)) = hit {
                    // Store the step only up to the event.
                    let mut fe = vec![0.0; n];
                    hermite(t, t_next, &y, &y_new, &f, &f_new, te, &mut ytmp, Some(&mut fe));
                    if let OutputGrid::Times(_) = rec.grid {
                        let cut = StepView {
                            t0: t,
                            t1: te,
                            y0: &y,
                            y1: &ye,
                            f0: &f,
                            f1: &fe,
                        };
                        rec.step(&cut, true);
                    }
                    rec.push(te, &ye, &fe);
                    stop = Some(StopReason::Event(events[k].label.clone()));
                    break 'segments;
                }
                rec.step(&view, finishing);
                if observer_stop {
                    stop = Some(StopReason::Observer);
                    break 'segments;
                }

                std::mem::swap(&mut y, &mut y_new);
                std::mem::swap(&mut f, &mut f_new);
                t = t_next;

                let mut fac = fac11 / facold.powf(PI_BETA);
                fac = (fac / SAFETY).clamp(1.0 / MAX_GROWTH, MAX_SHRINK);
                let mut h_next = hh / fac;
                if last_rejected {
                    h_next = h_next.min(hh);
                }
                facold = err_norm.max(1e-4);
                last_rejected = false;
                if !last {
                    hh = h_next;
                } else {
                    // A step shortened to hit the boundary says little
                    // about the next segment.
                    hh = h_next.max(h_untruncated);
                }
            } else {
                stats.rejected += 1;
                hh /= (fac11 / SAFETY).min(MAX_SHRINK);
                last_rejected = true;
            }
        }
        h = Some(hh);
    }

    let mut traj = rec.traj;
    if traj.times.last().is_none_or(|&tl| tl < t_start) {
        traj.times.push(t_start);
        traj.states.push(y.clone());
        traj.derivatives.push(f.clone());
    }
    traj.stats = stats;
    traj.stop = stop.unwrap_or(StopReason::EndOfSpan);
    Ok(traj)
}

#[allow(clippy::too_many_arguments)]
fn locate_event(
    ev: &EventFunction<'_>,
    t0: f64,
    t1: f64,
    y0: &[f64],
    y1: &[f64],
    f0: &[f64],
    f1: &[f64],
    tol: f64,
) -> (f64, Vec<f64>) {
    let tol = tol.min(1e-8 * (t1 - t0)).max(f64::EPSILON * t1.abs());
    let mut buf = vec![0.0; y0.len()];
    let g_lo = (ev.g)(t0, y0);
    let (mut lo, mut hi) = (t0, t1);
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        hermite(t0, t1, y0, y1, f0, f1, mid, &mut buf, None);
        let g = (ev.g)(mid, &buf);
        if ev.triggered(g_lo, g) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    if hi == t1 {
        return (t1, y1.to_vec());
    }
    hermite(t0, t1, y0, y1, f0, f1, hi, &mut buf, None);
    (hi, buf)
}

#[allow(clippy::too_many_arguments)]
fn initial_step<S: OdeSystem + ?Sized>(
    system: &S,
    t: f64,
    y: &[f64],
    f: &[f64],
    rtol: f64,
    atol: f64,
    h_max: f64,
    inner: &dyn Fn(f64) -> f64,
) -> f64 {
    let n = y.len();
    let scale: Vec<f64> = y.iter().map(|v| atol + rtol * v.abs()).collect();
    let d0 = weighted_max_norm(y, &scale);
    let d1 = weighted_max_norm(f, &scale);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(h_max);
    let y1: Vec<f64> = (0..n).map(|i| y[i] + h0 * f[i]).collect();
    let mut f1 = vec![0.0; n];
    system.eval(inner(t + h0), &y1, &mut f1);
    let diff: Vec<f64> = (0..n).map(|i| f1[i] - f[i]).collect();
    let d2 = weighted_max_norm(&diff, &scale) / h0;
    let dm = d1.max(d2);
    let h1 = if dm <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dm).powf(0.2)
    };
    (100.0 * h0).min(h1).min(h_max)
}

/// A sampled scalar `v(t)` with derivative, interpolated by cubic Hermite
/// segments.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSeries {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub dv: Vec<f64>,
}

impl ScalarSeries {
    pub fn new(t: Vec<f64>, v: Vec<f64>, dv: Vec<f64>) -> Result<Self> {
        if t.len() != v.len() || t.len() != dv.len() {
            return Err(Error::Dimension {
                expected: t.len(),
                got: v.len().min(dv.len()),
            });
        }
        if t.is_empty() {
            return Err(Error::Config("empty series".into()));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("series times must be strictly increasing".into()));
        }
        Ok(Self { t, v, dv })
    }

    /// Samples a closed-form function and its derivative.
    pub fn from_fn(times: &[f64], v: impl Fn(f64) -> f64, dv: impl Fn(f64) -> f64) -> Self {
        Self {
            t: times.to_vec(),
            v: times.iter().map(|&t| v(t)).collect(),
            dv: times.iter().map(|&t| dv(t)).collect(),
        }
    }

    fn segment(&self, k: usize, t: f64) -> (f64, f64) {
        let (t0, t1) = (self.t[k], self.t[k + 1]);
        let mut y = [0.0];
        let mut d = [0.0];
        hermite(
            t0,
            t1,
            &self.v[k..=k],
            &self.v[k + 1..=k + 1],
            &self.dv[k..=k],
            &self.dv[k + 1..=k + 1],
            t,
            &mut y,
            Some(&mut d),
        );
        (y[0], d[0])
    }

    /// Interpolated value; clamps outside the sampled range.
    pub fn value_at(&self, t: f64) -> f64 {
        if t <= self.t[0] {
            return self.v[0];
        }
        let last = self.t.len() - 1;
        if t >= self.t[last] {
            return self.v[last];
        }
        let k = self.t.partition_point(|&s| s <= t) - 1;
        self.segment(k, t).0
    }

    pub fn last_value(&self) -> f64 {
        *self.v.last().unwrap()
    }

    /// First time `v` crosses `level` in the given direction.
    pub fn first_crossing(&self, level: f64, direction: Direction) -> Option<f64> {
        let tol_rel = 1e-12;
        let trig = |g0: f64, g1: f64| {
            let rising = g0 < 0.0 && g1 >= 0.0;
            let falling = g0 > 0.0 && g1 <= 0.0;
            match direction {
                Direction::Rising => rising,
                Direction::Falling => falling,
                Direction::Either => rising || falling,
            }
        };
        if self.v[0] == level {
            return Some(self.t[0]);
        }
        for k in 0..self.t.len() - 1 {
            let g0 = self.v[k] - level;
            let g1 = self.v[k + 1] - level;
            if !trig(g0, g1) {
                continue;
            }
            let (mut lo, mut hi) = (self.t[k], self.t[k + 1]);
            let tol = tol_rel * (hi - lo).max(hi.abs() * f64::EPSILON);
            for _ in 0..200 {
                if hi - lo <= tol {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let g = self.segment(k, mid).0 - level;
                if trig(g0, g) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        None
    }

    /// Location and value of the global maximum, refined inside the
    /// bracketing interval where the derivative changes sign.
    pub fn maximum(&self) -> (f64, f64) {
        let (mut k_best, mut v_best) = (0, self.v[0]);
        for (k, &v) in self.v.iter().enumerate() {
            if v > v_best {
                k_best = k;
                v_best = v;
            }
        }
        let mut best = (self.t[k_best], v_best);
        let candidates = [k_best.checked_sub(1), Some(k_best)];
        for k in candidates.into_iter().flatten() {
            if k + 1 >= self.t.len() {
                continue;
            }
            let (d0, d1) = (self.dv[k], self.dv[k + 1]);
            if !(d0 > 0.0 && d1 < 0.0) {
                continue;
            }
            let (mut lo, mut hi) = (self.t[k], self.t[k + 1]);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if self.segment(k, mid).1 > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let tm = 0.5 * (lo + hi);
            let vm = self.segment(k, tm).0;
            if vm > best.1 {
                best = (tm, vm);
            }
        }
        best
    }
}

/// First time the aggregate mass reaches `m_0 / 2`.
pub fn find_halftime(mass: &ScalarSeries, m_0: f64) -> Result<f64> {
    mass.first_crossing(0.5 * m_0, Direction::Rising)
        .ok_or_else(|| Error::NotFound(format!("mass never reaches m_0/2 = {}", 0.5 * m_0)))
}

/// Growth and relaxation times of a trajectory heading to the plateau
/// `m_2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timescales {
    /// Time of the mass maximum.
    pub tau_1: f64,
    /// First time after `tau_1` with `M − M_2 ≤ ε`, `ε = 1%` of the
    /// overshoot; `None` if the trajectory has not relaxed.
    pub tau_2: Option<f64>,
    pub m_max: f64,
}

pub fn find_timescales(mass: &ScalarSeries, m_2: f64) -> Timescales {
    let (tau_1, m_max) = mass.maximum();
    let eps = 0.01 * (m_max - m_2);
    let level = m_2 + eps;
    let tau_2 = if eps <= 0.0 {
        Some(tau_1)
    } else {
        let k0 = mass.t.partition_point(|&s| s < tau_1);
        let tail = ScalarSeries {
            t: std::iter::once(tau_1).chain(mass.t[k0..].iter().copied().filter(|&s| s > tau_1)).collect(),
            v: std::iter::once(m_max)
                .chain(
                    mass.t[k0..]
                        .iter()
                        .zip(&mass.v[k0..])
                        .filter(|(s, _)| **s > tau_1)
                        .map(|(_, v)| *v),
                )
                .collect(),
            dv: std::iter::once(0.0)
                .chain(
                    mass.t[k0..]
                        .iter()
                        .zip(&mass.dv[k0..])
                        .filter(|(s, _)| **s > tau_1)
                        .map(|(_, v)| *v),
                )
                .collect(),
        };
        tail.first_crossing(level, Direction::Falling)
    };
    Timescales {
        tau_1,
        tau_2,
        m_max,
    }
}
