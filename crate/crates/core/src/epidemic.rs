//! Mean-field dynamics of the four-state compromise process.
//!
//! Every node is healthy (H), mildly compromised (M), severely compromised (S)
//! or quarantined (Q). The expected-state ODE is integrated with classical RK4
//! under piecewise-constant controls; [`simulate_markov`] runs the underlying
//! stochastic chain as a Monte-Carlo cross-check.

use std::io::Write;
use std::ops::{Deref, Range};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{Adjacency, TopologySchedule};

/// Default integration step in time units.
pub const DEFAULT_GRID_STEP: f64 = 0.01;

/// Drift in `H+M+S+Q` tolerated before a step is renormalized.
const RENORM_TOL: f64 = 1e-12;

/// Closed interval of admissible rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo >= 0.0 && self.lo <= self.hi
    }
}

/// Rates and per-unit-time impact weights of one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeParam {
    /// Lateral infection rate.
    pub alpha: f64,
    /// Direct infiltration rate.
    pub beta: f64,
    /// Resource consumption while mildly compromised.
    pub a1: f64,
    /// Resource consumption while severely compromised.
    pub a2: f64,
    /// Service impact while quarantined.
    pub b: f64,
    /// Mild-to-severe escalation rate bounds.
    pub lambda: Interval,
    /// Quarantine rate bounds.
    pub delta: Interval,
    /// Recovery rate bounds.
    pub gamma: Interval,
}

impl NodeParam {
    fn validate(&self, i: usize) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("a1", self.a1),
            ("a2", self.a2),
            ("b", self.b),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::domain(format!(
                    "node {i}: {name} = {v} is not a non-negative finite number"
                )));
            }
        }
        for (name, iv) in [
            ("lambda", self.lambda),
            ("delta", self.delta),
            ("gamma", self.gamma),
        ] {
            if !iv.is_valid() {
                return Err(Error::domain(format!(
                    "node {i}: {name} bounds [{}, {}] are invalid",
                    iv.lo, iv.hi
                )));
            }
        }
        if self.gamma.hi > 1.0 {
            return Err(Error::domain(format!(
                "node {i}: gamma upper bound {} exceeds 1",
                self.gamma.hi
            )));
        }
        Ok(())
    }
}

/// Per-node parameters, validated on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<NodeParam>", into = "Vec<NodeParam>")]
pub struct NodeParams(Vec<NodeParam>);

impl NodeParams {
    pub fn new(nodes: Vec<NodeParam>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::domain("no nodes"));
        }
        for (i, p) in nodes.iter().enumerate() {
            p.validate(i)?;
        }
        Ok(Self(nodes))
    }

    /// The same parameters for every node.
    pub fn uniform(n: usize, node: NodeParam) -> Result<Self> {
        Self::new(vec![node; n])
    }

    pub fn nodes_mut(&mut self) -> &mut [NodeParam] {
        &mut self.0
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.0.iter().map(|p| p.alpha).collect()
    }
}

impl Deref for NodeParams {
    type Target = [NodeParam];

    fn deref(&self) -> &[NodeParam] {
        &self.0
    }
}

impl TryFrom<Vec<NodeParam>> for NodeParams {
    type Error = Error;

    fn try_from(v: Vec<NodeParam>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<NodeParams> for Vec<NodeParam> {
    fn from(p: NodeParams) -> Self {
        p.0
    }
}

/// Per-node probabilities of being H, M or S; Q is the remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedState {
    pub h: Vec<f64>,
    pub m: Vec<f64>,
    pub s: Vec<f64>,
}

impl ExpectedState {
    pub fn new(h: Vec<f64>, m: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        let st = Self { h, m, s };
        st.validate(1e-9)?;
        Ok(st)
    }

    /// The same `(H, M, S)` for every node.
    pub fn uniform(n: usize, h: f64, m: f64, s: f64) -> Result<Self> {
        Self::new(vec![h; n], vec![m; n], vec![s; n])
    }

    pub fn healthy(n: usize) -> Self {
        Self {
            h: vec![1.0; n],
            m: vec![0.0; n],
            s: vec![0.0; n],
        }
    }

    pub(crate) fn zeros(n: usize) -> Self {
        Self {
            h: vec![0.0; n],
            m: vec![0.0; n],
            s: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    #[inline]
    pub fn q(&self, i: usize) -> f64 {
        1.0 - self.h[i] - self.m[i] - self.s[i]
    }

    pub fn q_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.q(i)).collect()
    }

    /// Checks shapes and that all four probabilities lie in `[-tol, 1+tol]`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let n = self.h.len();
        if self.m.len() != n || self.s.len() != n {
            return Err(Error::domain(format!(
                "state vectors have lengths {}, {}, {}",
                n,
                self.m.len(),
                self.s.len()
            )));
        }
        for i in 0..n {
            for (name, v) in [
                ("H", self.h[i]),
                ("M", self.m[i]),
                ("S", self.s[i]),
                ("Q", self.q(i)),
            ] {
                if !(v >= -tol && v <= 1.0 + tol) {
                    return Err(Error::domain(format!(
                        "node {i}: {name} = {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Largest distance of any of H, M, S, Q outside `[0, 1]`.
    pub fn box_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.len() {
            for v in [self.h[i], self.m[i], self.s[i], self.q(i)] {
                worst = worst.max(-v).max(v - 1.0);
            }
        }
        worst
    }

    fn clamp_renormalize(&mut self) {
        for i in 0..self.len() {
            let q = (1.0 - self.h[i] - self.m[i] - self.s[i]).clamp(0.0, 1.0);
            let h = self.h[i].clamp(0.0, 1.0);
            let m = self.m[i].clamp(0.0, 1.0);
            let s = self.s[i].clamp(0.0, 1.0);
            let total = h + m + s + q;
            let (h, m, s) = if (total - 1.0).abs() > RENORM_TOL {
                (h / total, m / total, s / total)
            } else {
                (h, m, s)
            };
            self.h[i] = h;
            self.m[i] = m;
            self.s[i] = s;
        }
    }

    fn is_finite(&self) -> bool {
        self.h
            .iter()
            .chain(&self.m)
            .chain(&self.s)
            .all(|x| x.is_finite())
    }

    /// `self + c * d`, written into `out`.
    fn axpy_into(&self, c: f64, d: &Derivative, out: &mut ExpectedState) {
        for i in 0..self.len() {
            out.h[i] = self.h[i] + c * d.dh[i];
            out.m[i] = self.m[i] + c * d.dm[i];
            out.s[i] = self.s[i] + c * d.ds[i];
        }
    }

    /// Component-wise linear interpolation `(1-w)·a + w·b`.
    pub(crate) fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
            x.iter()
                .zip(y)
                .map(|(p, q)| (1.0 - w) * p + w * q)
                .collect()
        };
        Self {
            h: mix(&a.h, &b.h),
            m: mix(&a.m, &b.m),
            s: mix(&a.s, &b.s),
        }
    }
}

/// Time derivatives of H, M and S per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivative {
    pub dh: Vec<f64>,
    pub dm: Vec<f64>,
    pub ds: Vec<f64>,
}

impl Derivative {
    fn zeros(n: usize) -> Self {
        Self {
            dh: vec![0.0; n],
            dm: vec![0.0; n],
            ds: vec![0.0; n],
        }
    }

    /// Implied derivative of the quarantined probability.
    pub fn dq(&self, i: usize) -> f64 {
        -(self.dh[i] + self.dm[i] + self.ds[i])
    }
}

/// Defender and attacker rates applied to one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeControl {
    pub lambda: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl NodeControl {
    pub fn lower(p: &NodeParam) -> Self {
        Self {
            lambda: p.lambda.lo,
            delta: p.delta.lo,
            gamma: p.gamma.lo,
        }
    }

    pub(crate) fn max_abs_diff(&self, other: &Self) -> f64 {
        (self.lambda - other.lambda)
            .abs()
            .max((self.delta - other.delta).abs())
            .max((self.gamma - other.gamma).abs())
    }
}

/// Grid points over `[0, T]` with every topology breakpoint included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    /// Segment index of each step `[times[k], times[k+1]]`.
    step_segment: Vec<usize>,
}

impl TimeGrid {
    /// Uniform steps of at most `step` inside each schedule segment.
    pub fn for_schedule(schedule: &TopologySchedule, step: f64) -> Result<Self> {
        Self::from_intervals(&schedule.intervals(), step)
    }

    pub fn from_intervals(intervals: &[(f64, f64)], step: f64) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::domain(format!("grid step {step} must be positive")));
        }
        if intervals.is_empty() {
            return Err(Error::domain("no intervals to grid"));
        }
        let mut times = vec![intervals[0].0];
        let mut step_segment = Vec::new();
        for (k, &(a, b)) in intervals.iter().enumerate() {
            if !(b > a) {
                return Err(Error::domain(format!("interval {k} ({a}, {b}) is empty")));
            }
            if (times.last().copied().unwrap() - a).abs() > 0.0 {
                return Err(Error::domain(format!("interval {k} is not contiguous")));
            }
            let n = ((b - a) / step - 1e-9).ceil().max(1.0) as usize;
            for j in 1..n {
                times.push(a + (b - a) * j as f64 / n as f64);
            }
            times.push(b);
            step_segment.extend(std::iter::repeat_n(k, n));
        }
        Ok(Self {
            times,
            step_segment,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_steps(&self) -> usize {
        self.step_segment.len()
    }

    pub fn n_points(&self) -> usize {
        self.times.len()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    #[inline]
    pub fn step_len(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    #[inline]
    pub fn segment_of_step(&self, k: usize) -> usize {
        self.step_segment[k]
    }

    pub fn n_segments(&self) -> usize {
        self.step_segment.last().map_or(0, |s| s + 1)
    }

    /// Step indices belonging to segment `seg`.
    pub fn steps_in_segment(&self, seg: usize) -> Range<usize> {
        let a = self.step_segment.partition_point(|&s| s < seg);
        let b = self.step_segment.partition_point(|&s| s <= seg);
        a..b
    }

    /// Joins grids end to end; segment indices are renumbered consecutively.
    pub fn concat(parts: &[TimeGrid]) -> Result<TimeGrid> {
        let first = parts
            .first()
            .ok_or_else(|| Error::domain("nothing to concatenate"))?;
        let mut times = first.times.clone();
        let mut step_segment = first.step_segment.clone();
        let mut offset = first.n_segments();
        for g in &parts[1..] {
            if g.start() != *times.last().unwrap() {
                return Err(Error::domain("grids are not contiguous"));
            }
            times.extend_from_slice(&g.times[1..]);
            step_segment.extend(g.step_segment.iter().map(|s| s + offset));
            offset += g.n_segments();
        }
        Ok(TimeGrid {
            times,
            step_segment,
        })
    }

    /// The same grid shifted by `dt`.
    pub fn shifted(&self, dt: f64) -> TimeGrid {
        TimeGrid {
            times: self.times.iter().map(|t| t + dt).collect(),
            step_segment: self.step_segment.clone(),
        }
    }

    /// The same steps moved onto `[t0, t1]`, with both endpoints exact.
    pub fn placed(&self, t0: f64, t1: f64) -> TimeGrid {
        let last = self.times.len() - 1;
        let times = self
            .times
            .iter()
            .enumerate()
            .map(|(k, &t)| match k {
                0 => t0,
                k if k == last => t1,
                _ => t0 + (t - self.times[0]),
            })
            .collect();
        TimeGrid {
            times,
            step_segment: self.step_segment.clone(),
        }
    }

    /// Fails unless the grid covers exactly the schedule horizon and every
    /// step lies inside the segment it is attributed to.
    pub fn check_against(&self, schedule: &TopologySchedule) -> Result<()> {
        if self.start() != 0.0 || self.end() != schedule.horizon_end() {
            return Err(Error::domain(format!(
                "grid covers [{}, {}] but the schedule covers [0, {}]",
                self.start(),
                self.end(),
                schedule.horizon_end()
            )));
        }
        let segs = schedule.segments();
        for k in 0..self.n_steps() {
            let seg = segs.get(self.step_segment[k]).ok_or_else(|| {
                Error::domain(format!("grid step {k} refers to a missing segment"))
            })?;
            if self.times[k] < seg.t_start || self.times[k + 1] > seg.t_end {
                return Err(Error::domain(format!(
                    "grid step {k} straddles a topology breakpoint"
                )));
            }
        }
        Ok(())
    }
}

/// Piecewise-constant controls: one value per node per grid step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTrajectory {
    pub grid: TimeGrid,
    pub steps: Vec<Vec<NodeControl>>,
}

impl ControlTrajectory {
    pub fn new(grid: TimeGrid, steps: Vec<Vec<NodeControl>>) -> Result<Self> {
        if steps.len() != grid.n_steps() {
            return Err(Error::domain(format!(
                "{} control steps for a grid with {} steps",
                steps.len(),
                grid.n_steps()
            )));
        }
        if let Some(n) = steps.first().map(Vec::len) {
            if steps.iter().any(|s| s.len() != n) {
                return Err(Error::domain("control steps have inconsistent node counts"));
            }
        }
        Ok(Self { grid, steps })
    }

    /// The same per-node control at every step.
    pub fn constant(grid: TimeGrid, nodes: Vec<NodeControl>) -> Self {
        let steps = vec![nodes; grid.n_steps()];
        Self { grid, steps }
    }

    pub fn lower_bounds(grid: TimeGrid, params: &NodeParams) -> Self {
        Self::constant(grid, params.iter().map(NodeControl::lower).collect())
    }

    pub fn n_nodes(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    /// Fails if any value leaves its node's bounds (with a tiny slack).
    pub fn check_bounds(&self, params: &NodeParams) -> Result<()> {
        const SLACK: f64 = 1e-12;
        let inside = |iv: Interval, x: f64| x >= iv.lo - SLACK && x <= iv.hi + SLACK;
        for (k, step) in self.steps.iter().enumerate() {
            if step.len() != params.len() {
                return Err(Error::domain(format!(
                    "control step {k} has {} nodes, expected {}",
                    step.len(),
                    params.len()
                )));
            }
            for (i, (c, p)) in step.iter().zip(params.iter()).enumerate() {
                if !inside(p.lambda, c.lambda)
                    || !inside(p.delta, c.delta)
                    || !inside(p.gamma, c.gamma)
                {
                    return Err(Error::domain(format!(
                        "control at step {k}, node {i} is outside its bounds"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Largest absolute difference between two trajectories on the same grid.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.steps
            .iter()
            .zip(&other.steps)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)))
            .fold(0.0, f64::max)
    }

    /// CSV with columns `time,node,lambda,delta,gamma`, one row per step
    /// start and node.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "node", "lambda", "delta", "gamma"])?;
        for (k, step) in self.steps.iter().enumerate() {
            let t = self.grid.times()[k];
            for (i, c) in step.iter().enumerate() {
                w.serialize((t, i, c.lambda, c.delta, c.gamma))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// States at every grid point of a forward integration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTrajectory {
    pub grid: TimeGrid,
    pub states: Vec<ExpectedState>,
    /// Worst excursion of any probability outside `[0, 1]` before clamping.
    pub max_box_violation: f64,
}

impl StateTrajectory {
    pub fn final_state(&self) -> &ExpectedState {
        self.states
            .last()
            .expect("trajectory has at least one point")
    }

    /// CSV with columns `time,node,H,M,S,Q`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "node", "H", "M", "S", "Q"])?;
        for (t, st) in self.grid.times().iter().zip(&self.states) {
            for i in 0..st.len() {
                w.serialize((t, i, st.h[i], st.m[i], st.s[i], st.q(i)))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `β_i + α_i Σ_j a_ij (M_j + S_j)`.
#[inline]
pub fn infection_pressure(
    state: &ExpectedState,
    params: &NodeParams,
    adjacency: &Adjacency,
    i: usize,
) -> f64 {
    let lateral: f64 = adjacency
        .neighbors(i)
        .iter()
        .map(|&j| state.m[j] + state.s[j])
        .sum();
    params[i].beta + params[i].alpha * lateral
}

pub(crate) fn derivative_into(
    state: &ExpectedState,
    controls: &[NodeControl],
    adjacency: &Adjacency,
    params: &NodeParams,
    out: &mut Derivative,
) {
    for i in 0..state.len() {
        let c = &controls[i];
        let infect = state.h[i] * infection_pressure(state, params, adjacency, i);
        let escalate = c.lambda * state.m[i];
        let isolate = c.delta * state.s[i];
        out.dh[i] = c.gamma * state.q(i) - infect;
        out.dm[i] = infect - escalate;
        out.ds[i] = escalate - isolate;
    }
}

/// Right-hand side of the expected-state ODE.
pub fn state_derivative(
    state: &ExpectedState,
    controls: &[NodeControl],
    adjacency: &Adjacency,
    params: &NodeParams,
) -> Derivative {
    let mut d = Derivative::zeros(state.len());
    derivative_into(state, controls, adjacency, params, &mut d);
    d
}

/// Reusable buffers for RK4 steps.
pub(crate) struct Rk4 {
    k: [Derivative; 4],
    tmp: ExpectedState,
}

impl Rk4 {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            k: [
                Derivative::zeros(n),
                Derivative::zeros(n),
                Derivative::zeros(n),
                Derivative::zeros(n),
            ],
            tmp: ExpectedState::zeros(n),
        }
    }

    /// One RK4 step of width `h`. Returns the clamped state and the pre-clamp
    /// box violation.
    pub(crate) fn step(
        &mut self,
        state: &ExpectedState,
        controls: &[NodeControl],
        adjacency: &Adjacency,
        params: &NodeParams,
        h: f64,
    ) -> (ExpectedState, f64) {
        let [k1, k2, k3, k4] = &mut self.k;
        derivative_into(state, controls, adjacency, params, k1);
        state.axpy_into(0.5 * h, k1, &mut self.tmp);
        derivative_into(&self.tmp, controls, adjacency, params, k2);
        state.axpy_into(0.5 * h, k2, &mut self.tmp);
        derivative_into(&self.tmp, controls, adjacency, params, k3);
        state.axpy_into(h, k3, &mut self.tmp);
        derivative_into(&self.tmp, controls, adjacency, params, k4);
        let mut next = state.clone();
        let w = h / 6.0;
        for i in 0..state.len() {
            next.h[i] += w * (k1.dh[i] + 2.0 * k2.dh[i] + 2.0 * k3.dh[i] + k4.dh[i]);
            next.m[i] += w * (k1.dm[i] + 2.0 * k2.dm[i] + 2.0 * k3.dm[i] + k4.dm[i]);
            next.s[i] += w * (k1.ds[i] + 2.0 * k2.ds[i] + 2.0 * k3.ds[i] + k4.ds[i]);
        }
        let violation = next.box_violation();
        next.clamp_renormalize();
        (next, violation)
    }
}

fn check_dimensions(
    e0: &ExpectedState,
    params: &NodeParams,
    schedule: &TopologySchedule,
) -> Result<()> {
    e0.validate(1e-9)?;
    if e0.len() != params.len() || params.len() != schedule.n_nodes() {
        return Err(Error::domain(format!(
            "dimension mismatch: state {}, params {}, schedule {}",
            e0.len(),
            params.len(),
            schedule.n_nodes()
        )));
    }
    Ok(())
}

/// RK4 over the control grid, one zero-order-hold step per grid step.
pub fn integrate_forward(
    e0: &ExpectedState,
    control: &ControlTrajectory,
    schedule: &TopologySchedule,
    params: &NodeParams,
) -> Result<StateTrajectory> {
    check_dimensions(e0, params, schedule)?;
    control.grid.check_against(schedule)?;
    if control.n_nodes() != params.len() {
        return Err(Error::domain(
            "control node count does not match parameters",
        ));
    }
    let grid = &control.grid;
    let mut rk = Rk4::new(e0.len());
    let mut states = Vec::with_capacity(grid.n_points());
    let mut state = e0.clone();
    state.clamp_renormalize();
    let mut worst = e0.box_violation();
    states.push(state.clone());
    let segs = schedule.segments();
    for k in 0..grid.n_steps() {
        let adj = &segs[grid.segment_of_step(k)].adjacency;
        let (next, violation) = rk.step(&state, &control.steps[k], adj, params, grid.step_len(k));
        if !next.is_finite() {
            return Err(Error::Integration {
                step: k,
                time: grid.times()[k + 1],
            });
        }
        worst = worst.max(violation);
        states.push(next.clone());
        state = next;
    }
    Ok(StateTrajectory {
        grid: grid.clone(),
        states,
        max_box_violation: worst,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MarkovOptions {
    /// Route new compromises straight to S with probability λ instead of
    /// always entering M.
    pub severity_split: bool,
}

/// Empirical state frequencies at the grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovFrequencies {
    pub grid: TimeGrid,
    pub n_runs: usize,
    pub states: Vec<ExpectedState>,
}

const H: u8 = 0;
const M: u8 = 1;
const S: u8 = 2;
const Q: u8 = 3;

/// Largest sub-step used by the Markov simulation.
const MARKOV_MAX_DT: f64 = 0.01;

/// Monte-Carlo estimate of the per-node state probabilities.
///
/// Each run draws initial states from `e0` and advances the chain in
/// sub-steps of at most 0.01 time units; within a sub-step every node leaves
/// its state with probability `1 - exp(-rate·dt)` given the neighbour states
/// at the start of the sub-step. Run `r` is seeded with `seed + r`.
pub fn simulate_markov(
    params: &NodeParams,
    control: &ControlTrajectory,
    schedule: &TopologySchedule,
    e0: &ExpectedState,
    n_runs: usize,
    seed: u64,
    options: MarkovOptions,
) -> Result<MarkovFrequencies> {
    if n_runs == 0 {
        return Err(Error::domain("n_runs must be at least 1"));
    }
    check_dimensions(e0, params, schedule)?;
    control.grid.check_against(schedule)?;
    let n = e0.len();
    let points = control.grid.n_points();
    let counts = (0..n_runs)
        .into_par_iter()
        .fold(
            || vec![0u32; points * n * 4],
            |mut acc, r| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
                markov_run(params, control, schedule, e0, options, &mut rng, &mut acc);
                acc
            },
        )
        .reduce(
            || vec![0u32; points * n * 4],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let norm = n_runs as f64;
    let states = (0..points)
        .map(|p| {
            let at = |i: usize, c: usize| counts[(p * n + i) * 4 + c] as f64 / norm;
            ExpectedState {
                h: (0..n).map(|i| at(i, 0)).collect(),
                m: (0..n).map(|i| at(i, 1)).collect(),
                s: (0..n).map(|i| at(i, 2)).collect(),
            }
        })
        .collect();
    Ok(MarkovFrequencies {
        grid: control.grid.clone(),
        n_runs,
        states,
    })
}

fn markov_run(
    params: &NodeParams,
    control: &ControlTrajectory,
    schedule: &TopologySchedule,
    e0: &ExpectedState,
    options: MarkovOptions,
    rng: &mut ChaCha8Rng,
    counts: &mut [u32],
) {
    let n = e0.len();
    let mut state: Vec<u8> = (0..n)
        .map(|i| {
            let u: f64 = rng.gen();
            if u < e0.h[i] {
                H
            } else if u < e0.h[i] + e0.m[i] {
                M
            } else if u < e0.h[i] + e0.m[i] + e0.s[i] {
                S
            } else {
                Q
            }
        })
        .collect();
    let record = |state: &[u8], p: usize, counts: &mut [u32]| {
        for (i, &x) in state.iter().enumerate() {
            counts[(p * n + i) * 4 + x as usize] += 1;
        }
    };
    record(&state, 0, counts);
    let grid = &control.grid;
    let mut frozen = state.clone();
    for k in 0..grid.n_steps() {
        let adj = &schedule.segments()[grid.segment_of_step(k)].adjacency;
        let len = grid.step_len(k);
        let subs = (len / MARKOV_MAX_DT - 1e-9).ceil().max(1.0) as usize;
        let dt = len / subs as f64;
        let ctrl = &control.steps[k];
        for _ in 0..subs {
            frozen.copy_from_slice(&state);
            for i in 0..n {
                let c = &ctrl[i];
                let rate = match frozen[i] {
                    H => {
                        let bad = adj
                            .neighbors(i)
                            .iter()
                            .filter(|&&j| frozen[j] == M || frozen[j] == S)
                            .count();
                        params[i].beta + params[i].alpha * bad as f64
                    }
                    M => c.lambda,
                    S => c.delta,
                    _ => c.gamma,
                };
                if rate <= 0.0 || rng.gen::<f64>() >= 1.0 - (-rate * dt).exp() {
                    continue;
                }
                state[i] = match frozen[i] {
                    H if options.severity_split && rng.gen::<f64>() < c.lambda => S,
                    H => M,
                    M => S,
                    S => Q,
                    _ => H,
                };
            }
        }
        record(&state, k + 1, counts);
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn node(alpha: f64, beta: f64) -> NodeParam {
        NodeParam {
            alpha,
            beta,
            a1: 0.5,
            a2: 0.8,
            b: 0.3,
            lambda: Interval::new(0.1, 0.6),
            delta: Interval::new(0.1, 0.4),
            gamma: Interval::new(0.1, 0.5),
        }
    }

    fn ctl(lambda: f64, delta: f64, gamma: f64) -> NodeControl {
        NodeControl {
            lambda,
            delta,
            gamma,
        }
    }

    fn pair() -> Adjacency {
        Adjacency::from_edges(2, &[(0, 1)]).unwrap()
    }

    #[test]
    fn pressure_examples() {
        let iso = Adjacency::empty(1);
        let p = NodeParams::uniform(1, node(0.1, 0.1)).unwrap();
        assert_eq!(
            infection_pressure(&ExpectedState::healthy(1), &p, &iso, 0),
            0.1
        );
        let p0 = NodeParams::uniform(1, node(0.0, 0.0)).unwrap();
        assert_eq!(
            infection_pressure(&ExpectedState::healthy(1), &p0, &iso, 0),
            0.0
        );
        let st = ExpectedState::new(vec![1.0, 0.5], vec![0.0, 0.3], vec![0.0, 0.2]).unwrap();
        let p = NodeParams::uniform(2, node(0.1, 0.1)).unwrap();
        assert!((infection_pressure(&st, &p, &pair(), 0) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn derivative_examples() {
        let p = NodeParams::uniform(3, node(0.3, 0.0)).unwrap();
        let ring = Adjacency::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let d = state_derivative(
            &ExpectedState::healthy(3),
            &[ctl(0.2, 0.3, 0.4); 3],
            &ring,
            &p,
        );
        assert!(d.dh.iter().chain(&d.dm).chain(&d.ds).all(|&x| x == 0.0));

        let st = ExpectedState::new(vec![1.0, 0.5], vec![0.0, 0.3], vec![0.0, 0.2]).unwrap();
        let p = NodeParams::uniform(2, node(0.1, 0.1)).unwrap();
        let d = state_derivative(&st, &[ctl(0.3, 0.4, 0.2); 2], &pair(), &p);
        assert!((d.dh[0] + 0.15).abs() < 1e-15);
        assert!((d.dm[0] - 0.15).abs() < 1e-15);
        assert_eq!(d.ds[0], 0.0);
        // node 2: pressure 0.1, infection 0.05; Q = 0
        assert!((d.dh[1] + 0.05).abs() < 1e-15);
        assert!((d.dm[1] - (0.05 - 0.09)).abs() < 1e-15);
        assert!((d.ds[1] - (0.09 - 0.08)).abs() < 1e-15);
        assert!((d.dq(1) - 0.08).abs() < 1e-15);
    }

    #[test]
    fn grid_includes_breakpoints() {
        let g = TimeGrid::from_intervals(&[(0.0, 2.0), (2.0, 2.005), (2.005, 3.0)], 0.01).unwrap();
        assert!(g.times().contains(&2.0));
        assert!(g.times().contains(&2.005));
        assert_eq!(g.n_steps(), 200 + 1 + 100);
        assert_eq!(g.steps_in_segment(1), 200..201);
        assert!(g.times().windows(2).all(|w| w[1] > w[0]));
        assert!((0..g.n_steps()).all(|k| g.step_len(k) <= 0.01 + 1e-15));
        assert_eq!(g.end(), 3.0);
    }

    #[test]
    fn grid_concat_and_shift() {
        let a = TimeGrid::from_intervals(&[(0.0, 1.0)], 0.5).unwrap();
        let b = TimeGrid::from_intervals(&[(0.0, 2.0)], 0.5)
            .unwrap()
            .shifted(1.0);
        let g = TimeGrid::concat(&[a.clone(), b]).unwrap();
        assert_eq!(g.times(), &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
        assert_eq!(g.n_segments(), 2);
        assert_eq!(g.steps_in_segment(1), 2..6);
        assert!(TimeGrid::concat(&[a.clone(), a]).is_err());
    }

    fn single_node_beta(
        beta: f64,
        horizon: f64,
        step: f64,
    ) -> (
        ExpectedState,
        ControlTrajectory,
        TopologySchedule,
        NodeParams,
    ) {
        let mut p = node(0.0, beta);
        p.lambda = Interval::point(0.0);
        p.delta = Interval::point(0.0);
        p.gamma = Interval::point(0.0);
        let params = NodeParams::uniform(1, p).unwrap();
        let sched = TopologySchedule::constant(Adjacency::empty(1), horizon).unwrap();
        let grid = TimeGrid::for_schedule(&sched, step).unwrap();
        let ctrl = ControlTrajectory::lower_bounds(grid, &params);
        let e0 = ExpectedState::uniform(1, 0.8, 0.1, 0.1).unwrap();
        (e0, ctrl, sched, params)
    }

    #[test]
    fn closed_form_single_node() {
        let (e0, ctrl, sched, params) = single_node_beta(0.2, 1.0, DEFAULT_GRID_STEP);
        let traj = integrate_forward(&e0, &ctrl, &sched, &params).unwrap();
        let exact = 0.8 * (-0.2f64).exp();
        assert!((traj.final_state().h[0] - exact).abs() < 1e-6);
    }

    #[test]
    fn rk4_order() {
        // two coupled nodes with nonlinear coupling; reference from a tiny step
        let params = NodeParams::uniform(2, node(0.8, 0.3)).unwrap();
        let sched = TopologySchedule::constant(pair(), 2.0).unwrap();
        let e0 = ExpectedState::new(vec![0.9, 0.6], vec![0.05, 0.2], vec![0.05, 0.1]).unwrap();
        let run = |h: f64| {
            let grid = TimeGrid::for_schedule(&sched, h).unwrap();
            let ctrl = ControlTrajectory::constant(grid, vec![ctl(0.4, 0.3, 0.2); 2]);
            integrate_forward(&e0, &ctrl, &sched, &params)
                .unwrap()
                .final_state()
                .clone()
        };
        let reference = run(0.0005);
        let err = |s: &ExpectedState| {
            (0..2)
                .map(|i| {
                    (s.h[i] - reference.h[i]).abs()
                        + (s.m[i] - reference.m[i]).abs()
                        + (s.s[i] - reference.s[i]).abs()
                })
                .sum::<f64>()
        };
        let coarse = err(&run(0.2));
        let fine = err(&run(0.1));
        assert!(coarse / fine >= 8.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn constant_when_nothing_moves() {
        let params = NodeParams::uniform(3, node(0.0, 0.0)).unwrap();
        let sched =
            TopologySchedule::constant(Adjacency::from_edges(3, &[(0, 1), (1, 2)]).unwrap(), 1.0)
                .unwrap();
        let grid = TimeGrid::for_schedule(&sched, 0.1).unwrap();
        let ctrl = ControlTrajectory::lower_bounds(grid, &params);
        let traj = integrate_forward(&ExpectedState::healthy(3), &ctrl, &sched, &params).unwrap();
        assert!(traj.states.iter().all(|s| *s == ExpectedState::healthy(3)));
    }

    #[test]
    fn integrate_rejects_misaligned_grid() {
        let params = NodeParams::uniform(1, node(0.0, 0.1)).unwrap();
        let seg = |a, b| crate::topology::Segment {
            t_start: a,
            t_end: b,
            adjacency: Adjacency::empty(1),
        };
        let sched = TopologySchedule::new(1, vec![seg(0.0, 1.05), seg(1.05, 2.0)]).unwrap();
        let grid = TimeGrid::from_intervals(&[(0.0, 2.0)], 0.1).unwrap();
        let ctrl = ControlTrajectory::lower_bounds(grid, &params);
        assert!(integrate_forward(&ExpectedState::healthy(1), &ctrl, &sched, &params).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let mut p = node(1e308, 1e308);
        p.lambda = Interval::new(0.0, 1e308);
        let params = NodeParams::uniform(2, p).unwrap();
        let sched = TopologySchedule::constant(pair(), 1.0).unwrap();
        let grid = TimeGrid::for_schedule(&sched, 0.5).unwrap();
        let ctrl = ControlTrajectory::constant(grid, vec![ctl(1e308, 0.1, 0.1); 2]);
        let e0 = ExpectedState::uniform(2, 0.5, 0.25, 0.25).unwrap();
        let err = integrate_forward(&e0, &ctrl, &sched, &params).unwrap_err();
        assert!(matches!(err, Error::Integration { step: 0, .. }), "{err}");
    }

    #[test]
    fn markov_single_node_matches_closed_form() {
        let (e0, ctrl, sched, params) = single_node_beta(0.2, 1.0, 0.1);
        let freq = simulate_markov(
            &params,
            &ctrl,
            &sched,
            &e0,
            20000,
            11,
            MarkovOptions::default(),
        )
        .unwrap();
        let exact = 0.8 * (-0.2f64).exp();
        assert!((freq.states.last().unwrap().h[0] - exact).abs() < 0.01);
    }

    #[test]
    fn markov_is_deterministic_and_static_without_rates() {
        let (e0, ctrl, sched, params) = single_node_beta(0.0, 1.0, 0.1);
        let a = simulate_markov(
            &params,
            &ctrl,
            &sched,
            &e0,
            500,
            3,
            MarkovOptions::default(),
        )
        .unwrap();
        let b = simulate_markov(
            &params,
            &ctrl,
            &sched,
            &e0,
            500,
            3,
            MarkovOptions::default(),
        )
        .unwrap();
        assert_eq!(a, b);
        let first = &a.states[0];
        assert!(a.states.iter().all(|s| s == first));
        assert!(
            simulate_markov(&params, &ctrl, &sched, &e0, 0, 3, MarkovOptions::default()).is_err()
        );
    }

    #[test]
    fn severity_split_sends_mass_to_s() {
        let mut p = node(0.0, 1.0);
        p.lambda = Interval::point(1.0);
        p.delta = Interval::point(0.0);
        p.gamma = Interval::point(0.0);
        let params = NodeParams::uniform(1, p).unwrap();
        let sched = TopologySchedule::constant(Adjacency::empty(1), 0.05).unwrap();
        let grid = TimeGrid::for_schedule(&sched, 0.05).unwrap();
        let ctrl = ControlTrajectory::lower_bounds(grid, &params);
        let e0 = ExpectedState::healthy(1);
        let split = simulate_markov(
            &params,
            &ctrl,
            &sched,
            &e0,
            4000,
            1,
            MarkovOptions {
                severity_split: true,
            },
        )
        .unwrap();
        let plain = simulate_markov(
            &params,
            &ctrl,
            &sched,
            &e0,
            4000,
            1,
            MarkovOptions::default(),
        )
        .unwrap();
        assert!(split.states[1].s[0] > plain.states[1].s[0] + 0.01);
    }

    #[test]
    fn csv_export_columns() {
        let (e0, ctrl, sched, params) = single_node_beta(0.2, 0.2, 0.1);
        let traj = integrate_forward(&e0, &ctrl, &sched, &params).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,node,H,M,S,Q\n"));
        assert_eq!(text.lines().count(), 4);
        let mut buf = Vec::new();
        ctrl.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("time,node,lambda,delta,gamma\n"));
    }

    #[test]
    fn params_validation() {
        let mut p = node(0.1, 0.1);
        p.delta = Interval::new(0.5, 0.1);
        assert!(NodeParams::new(vec![p]).is_err());
        assert!(NodeParams::new(vec![node(-0.1, 0.1)]).is_err());
        assert!(NodeParams::new(vec![]).is_err());
        let json = serde_json::to_string(&NodeParams::uniform(2, node(0.1, 0.2)).unwrap()).unwrap();
        let back: NodeParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back.len(), 2);
    }

    fn arb_scenario() -> impl Strategy<
        Value = (
            usize,
            Vec<(usize, usize)>,
            Vec<f64>,
            Vec<[f64; 3]>,
            Vec<[f64; 3]>,
        ),
    > {
        (2usize..8).prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec((0..n, 0..n), 0..12),
                proptest::collection::vec(0.0f64..1.0, 2 * n),
                proptest::collection::vec([0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0], n),
                proptest::collection::vec([0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0], n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn conservation_and_box((n, edges, rates, mass, ctrl) in arb_scenario()) {
            let edges: Vec<_> = edges.into_iter().filter(|(a, b)| a != b).collect();
            let adj = Adjacency::from_edges(n, &edges).unwrap();
            let params = NodeParams::new((0..n).map(|i| node(rates[i], rates[n + i])).collect()).unwrap();
            let sched = TopologySchedule::constant(adj, 2.0).unwrap();
            let grid = TimeGrid::for_schedule(&sched, DEFAULT_GRID_STEP).unwrap();
            let steps: Vec<NodeControl> = (0..n).map(|i| ctl(
                params[i].lambda.lo + ctrl[i][0] * params[i].lambda.width(),
                params[i].delta.lo + ctrl[i][1] * params[i].delta.width(),
                params[i].gamma.lo + ctrl[i][2] * params[i].gamma.width(),
            )).collect();
            let control = ControlTrajectory::constant(grid, steps);
            let total: Vec<f64> = mass.iter().map(|m| m.iter().sum::<f64>() + 1.0).collect();
            let e0 = ExpectedState::new(
                (0..n).map(|i| mass[i][0] / total[i]).collect(),
                (0..n).map(|i| mass[i][1] / total[i]).collect(),
                (0..n).map(|i| mass[i][2] / total[i]).collect(),
            ).unwrap();
            let traj = integrate_forward(&e0, &control, &sched, &params).unwrap();
            prop_assert!(traj.max_box_violation <= 1e-9);
            for st in &traj.states {
                for i in 0..n {
                    let sum = st.h[i] + st.m[i] + st.s[i] + st.q(i);
                    prop_assert!((sum - 1.0).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn derivative_conserves_mass((n, edges, rates, mass, ctrl) in arb_scenario()) {
            let edges: Vec<_> = edges.into_iter().filter(|(a, b)| a != b).collect();
            let adj = Adjacency::from_edges(n, &edges).unwrap();
            let params = NodeParams::new((0..n).map(|i| node(rates[i], rates[n + i])).collect()).unwrap();
            let total: Vec<f64> = mass.iter().map(|m| m.iter().sum::<f64>() + 1.0).collect();
            let st = ExpectedState::new(
                (0..n).map(|i| mass[i][0] / total[i]).collect(),
                (0..n).map(|i| mass[i][1] / total[i]).collect(),
                (0..n).map(|i| mass[i][2] / total[i]).collect(),
            ).unwrap();
            let controls: Vec<_> = ctrl.iter().map(|c| ctl(c[0], c[1], c[2])).collect();
            let d = state_derivative(&st, &controls, &adj, &params);
            for i in 0..n {
                prop_assert!((d.dh[i] + d.dm[i] + d.ds[i] + d.dq(i)).abs() < 1e-15);
                let dq = controls[i].delta * st.s[i] - controls[i].gamma * st.q(i);
                prop_assert!((d.dq(i) - dq).abs() < 1e-12);
            }
        }
    }
}
