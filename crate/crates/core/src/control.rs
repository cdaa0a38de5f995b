//! Optimal repair control by the minimum principle.
//!
//! The Hamiltonian couples the instantaneous impact rate with the state
//! dynamics through the costates (κ, ρ, ξ) of H, M and S. The costates are
//! integrated backward from zero, controls minimize the Hamiltonian pointwise,
//! and [`forward_backward_sweep`] iterates the two passes with relaxation.

use serde::{Deserialize, Serialize};

use crate::epidemic::{
    infection_pressure, integrate_forward, ControlTrajectory, ExpectedState, Interval, NodeControl,
    NodeParam, NodeParams, Rk4, StateTrajectory, TimeGrid, DEFAULT_GRID_STEP,
};
use crate::error::{Error, Result};
use crate::impact::{
    impact_components, impact_rate, CostFamily, CostFunctions, ImpactBreakdown, NodeCosts,
};
use crate::topology::{Adjacency, TopologySchedule};

/// Costates of H, M and S for every node at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Costate {
    pub kappa: Vec<f64>,
    pub rho: Vec<f64>,
    pub xi: Vec<f64>,
}

impl Costate {
    pub fn zeros(n: usize) -> Self {
        Self {
            kappa: vec![0.0; n],
            rho: vec![0.0; n],
            xi: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kappa.is_empty()
    }

    fn axpy(&self, c: f64, d: &Costate) -> Costate {
        let f = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a + c * b).collect();
        Costate {
            kappa: f(&self.kappa, &d.kappa),
            rho: f(&self.rho, &d.rho),
            xi: f(&self.xi, &d.xi),
        }
    }

    fn average(a: &Costate, b: &Costate) -> Costate {
        a.axpy(1.0, b).scaled(0.5)
    }

    fn scaled(mut self, c: f64) -> Costate {
        for v in self
            .kappa
            .iter_mut()
            .chain(&mut self.rho)
            .chain(&mut self.xi)
        {
            *v *= c;
        }
        self
    }

    fn is_finite(&self) -> bool {
        self.kappa
            .iter()
            .chain(&self.rho)
            .chain(&self.xi)
            .all(|x| x.is_finite())
    }
}

/// Costates at every grid point; the last point is the zero terminal value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointTrajectory {
    pub grid: TimeGrid,
    pub points: Vec<Costate>,
}

/// Hamiltonian: impact rate plus costate-weighted state derivatives.
pub fn hamiltonian(
    state: &ExpectedState,
    controls: &[NodeControl],
    costate: &Costate,
    adjacency: &Adjacency,
    params: &NodeParams,
    costs: &CostFunctions,
) -> f64 {
    let d = crate::epidemic::state_derivative(state, controls, adjacency, params);
    let flow: f64 = (0..state.len())
        .map(|i| costate.kappa[i] * d.dh[i] + costate.rho[i] * d.dm[i] + costate.xi[i] * d.ds[i])
        .sum();
    impact_rate(state, controls, params, costs).total + flow
}

/// Costate dynamics `(-∂H/∂H_i, -∂H/∂M_i, -∂H/∂S_i)` with Q = 1 − H − M − S.
pub fn adjoint_derivative(
    state: &ExpectedState,
    controls: &[NodeControl],
    costate: &Costate,
    adjacency: &Adjacency,
    params: &NodeParams,
    costs: &CostFunctions,
) -> Costate {
    let n = state.len();
    let mut out = Costate::zeros(n);
    adjoint_into(state, controls, costate, adjacency, params, costs, &mut out);
    out
}

fn adjoint_into(
    state: &ExpectedState,
    controls: &[NodeControl],
    costate: &Costate,
    adjacency: &Adjacency,
    params: &NodeParams,
    costs: &CostFunctions,
    out: &mut Costate,
) {
    let n = state.len();
    for i in 0..n {
        let p = &params[i];
        let c = &controls[i];
        let (k, r, x) = (costate.kappa[i], costate.rho[i], costate.xi[i]);
        // every unit of H, M or S is a unit less of Q
        let q_rate = p.b + costs[i].recovery(c.gamma) + k * c.gamma;
        // sensitivity of the neighbours' infection flow to this node's M and S
        let spread: f64 = adjacency
            .neighbors(i)
            .iter()
            .map(|&j| params[j].alpha * state.h[j] * (costate.kappa[j] - costate.rho[j]))
            .sum();
        let pressure = infection_pressure(state, params, adjacency, i);
        out.kappa[i] = q_rate + (k - r) * pressure;
        out.rho[i] = -p.a1 + q_rate + (r - x) * c.lambda + spread;
        out.xi[i] = -p.a2 - costs[i].phi.value(c.delta) + q_rate + x * c.delta + spread;
    }
}

/// Admissible control ranges of one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeBounds {
    pub lambda: Interval,
    pub delta: Interval,
    pub gamma: Interval,
}

impl From<&NodeParam> for NodeBounds {
    fn from(p: &NodeParam) -> Self {
        Self {
            lambda: p.lambda,
            delta: p.delta,
            gamma: p.gamma,
        }
    }
}

impl NodeBounds {
    pub fn clamp(&self, c: NodeControl) -> NodeControl {
        NodeControl {
            lambda: self.lambda.clamp(c.lambda),
            delta: self.delta.clamp(c.delta),
            gamma: self.gamma.clamp(c.gamma),
        }
    }

    pub fn midpoint(&self) -> NodeControl {
        NodeControl {
            lambda: self.lambda.mid(),
            delta: self.delta.mid(),
            gamma: self.gamma.mid(),
        }
    }

    fn contains(&self, c: &NodeControl) -> bool {
        const SLACK: f64 = 1e-12;
        let inside = |iv: Interval, x: f64| x >= iv.lo - SLACK && x <= iv.hi + SLACK;
        inside(self.lambda, c.lambda) && inside(self.delta, c.delta) && inside(self.gamma, c.gamma)
    }
}

/// Per-segment, per-node control bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSchedule {
    segments: Vec<Vec<NodeBounds>>,
}

impl BoundsSchedule {
    /// The parameter bounds, repeated for every segment.
    pub fn from_params(params: &NodeParams, n_segments: usize) -> Self {
        let base: Vec<NodeBounds> = params.iter().map(NodeBounds::from).collect();
        Self {
            segments: vec![base; n_segments],
        }
    }

    pub fn from_segments(segments: Vec<Vec<NodeBounds>>) -> Self {
        Self { segments }
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segment(&self, k: usize) -> &[NodeBounds] {
        &self.segments[k]
    }

    pub fn segment_mut(&mut self, k: usize) -> &mut [NodeBounds] {
        &mut self.segments[k]
    }

    /// Scales each node's λ upper bound by `0.5 + grade·N/2`, never above the
    /// current bound nor below the lower one.
    pub fn modulate_lambda(&mut self, k: usize, grades: &[f64]) {
        let n = self.segments[k].len() as f64;
        for (b, &g) in self.segments[k].iter_mut().zip(grades) {
            b.lambda.hi = (b.lambda.hi * (0.5 + 0.5 * g * n)).clamp(b.lambda.lo, b.lambda.hi);
        }
    }

    /// Same scaling applied to the γ upper bound of the listed nodes.
    pub fn modulate_gamma(&mut self, k: usize, grades: &[(usize, f64)]) {
        let n = self.segments[k].len() as f64;
        for &(i, g) in grades {
            let b = &mut self.segments[k][i];
            b.gamma.hi = (b.gamma.hi * (0.5 + 0.5 * g * n)).clamp(b.gamma.lo, b.gamma.hi);
        }
    }

    /// Fixes λ to the given per-node values.
    pub fn pin_lambda(&mut self, k: usize, lambda: &[f64]) {
        for (b, &l) in self.segments[k].iter_mut().zip(lambda) {
            b.lambda = Interval::point(l);
        }
    }

    /// Control at the middle of every range, one value per grid step.
    pub fn midpoint_control(&self, grid: &TimeGrid) -> ControlTrajectory {
        let steps = (0..grid.n_steps())
            .map(|k| {
                self.segments[grid.segment_of_step(k)]
                    .iter()
                    .map(NodeBounds::midpoint)
                    .collect()
            })
            .collect();
        ControlTrajectory {
            grid: grid.clone(),
            steps,
        }
    }

    /// Fails unless every step of `control` is inside its segment's bounds.
    pub fn check(&self, control: &ControlTrajectory) -> Result<()> {
        for k in 0..control.grid.n_steps() {
            let seg = control.grid.segment_of_step(k);
            let bounds = self
                .segments
                .get(seg)
                .ok_or_else(|| Error::domain(format!("no bounds for segment {seg}")))?;
            if control.steps[k].len() != bounds.len() {
                return Err(Error::domain(
                    "control and bounds disagree on the node count",
                ));
            }
            if let Some(i) = (0..bounds.len()).find(|&i| !bounds[i].contains(&control.steps[k][i]))
            {
                return Err(Error::domain(format!(
                    "control at step {k}, node {i} is outside its bounds"
                )));
            }
        }
        Ok(())
    }
}

/// Everything the sweep needs about one optimal-control instance.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub schedule: TopologySchedule,
    pub params: NodeParams,
    pub costs: CostFunctions,
    pub e0: ExpectedState,
    pub service_weights: Vec<f64>,
    /// Minimum service utility; `None` disables the floor.
    pub service_floor: Option<f64>,
    pub bounds: BoundsSchedule,
}

impl ControlProblem {
    fn validate(&self) -> Result<()> {
        let n = self.params.len();
        if self.schedule.n_nodes() != n
            || self.costs.len() != n
            || self.e0.len() != n
            || self.service_weights.len() != n
        {
            return Err(Error::domain(
                "control problem components disagree on the node count",
            ));
        }
        if self.bounds.n_segments() != self.schedule.len() {
            return Err(Error::domain(format!(
                "{} bound segments for {} schedule segments",
                self.bounds.n_segments(),
                self.schedule.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub max_iters: usize,
    pub tol: f64,
    pub relaxation: f64,
    pub grid_step: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-4,
            relaxation: 0.5,
            grid_step: DEFAULT_GRID_STEP,
        }
    }
}

impl SweepSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("tol must be positive"));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(Error::config("relaxation must lie in (0, 1]"));
        }
        if !(self.grid_step > 0.0) {
            return Err(Error::config("grid_step must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub impact: f64,
    /// Lowest impact seen up to and including this iteration.
    pub best_impact: f64,
    /// Largest control change produced by this iteration's update.
    pub change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub control: ControlTrajectory,
    pub states: StateTrajectory,
    pub adjoints: AdjointTrajectory,
    pub impact: ImpactBreakdown,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IterationRecord>,
}

/// Costates from zero terminal values, RK4 on reversed time with the state
/// interpolated linearly inside each step.
pub fn integrate_adjoint(
    problem: &ControlProblem,
    states: &StateTrajectory,
    control: &ControlTrajectory,
) -> Result<AdjointTrajectory> {
    let grid = &control.grid;
    let n = problem.params.len();
    let segs = problem.schedule.segments();
    let mut points = vec![Costate::zeros(n); grid.n_points()];
    let mut f = [
        Costate::zeros(n),
        Costate::zeros(n),
        Costate::zeros(n),
        Costate::zeros(n),
    ];
    for k in (0..grid.n_steps()).rev() {
        let adj = &segs[grid.segment_of_step(k)].adjacency;
        let u = &control.steps[k];
        let h = grid.step_len(k);
        let (lo, hi) = (&states.states[k], &states.states[k + 1]);
        let mid = ExpectedState::lerp(lo, hi, 0.5);
        let end = points[k + 1].clone();
        let (p, c) = (&problem.params, &problem.costs);
        let [f1, f2, f3, f4] = &mut f;
        adjoint_into(hi, u, &end, adj, p, c, f1);
        adjoint_into(&mid, u, &end.axpy(-0.5 * h, f1), adj, p, c, f2);
        adjoint_into(&mid, u, &end.axpy(-0.5 * h, f2), adj, p, c, f3);
        adjoint_into(lo, u, &end.axpy(-h, f3), adj, p, c, f4);
        let w = h / 6.0;
        let mut next = end;
        for i in 0..n {
            next.kappa[i] -=
                w * (f1.kappa[i] + 2.0 * f2.kappa[i] + 2.0 * f3.kappa[i] + f4.kappa[i]);
            next.rho[i] -= w * (f1.rho[i] + 2.0 * f2.rho[i] + 2.0 * f3.rho[i] + f4.rho[i]);
            next.xi[i] -= w * (f1.xi[i] + 2.0 * f2.xi[i] + 2.0 * f3.xi[i] + f4.xi[i]);
        }
        if !next.is_finite() {
            return Err(Error::Integration {
                step: k,
                time: grid.times()[k],
            });
        }
        points[k] = next;
    }
    Ok(AdjointTrajectory {
        grid: grid.clone(),
        points,
    })
}

/// Curvature class of a cost curve.
#[derive(Clone, Copy, PartialEq)]
enum Shape {
    Concave,
    Linear,
    Convex,
}

fn shape(f: CostFamily) -> Shape {
    match f {
        CostFamily::Sqrt => Shape::Concave,
        CostFamily::Linear(_) => Shape::Linear,
        CostFamily::Quadratic(_) => Shape::Convex,
    }
}

/// `(quadratic, linear)` coefficients of a polynomial cost.
fn poly(f: CostFamily) -> (f64, f64) {
    match f {
        CostFamily::Sqrt => (0.0, 0.0),
        CostFamily::Linear(c) => (0.0, c),
        CostFamily::Quadratic(c) => (c, 0.0),
    }
}

/// Lower endpoint unless the upper one is strictly better.
fn better_endpoint(f: impl Fn(f64) -> f64, iv: Interval) -> f64 {
    if f(iv.hi) < f(iv.lo) {
        iv.hi
    } else {
        iv.lo
    }
}

/// Minimizer of `a·x² + b·x` on the interval.
fn quadratic_argmin(a: f64, b: f64, iv: Interval) -> f64 {
    if a > 0.0 {
        iv.clamp(-b / (2.0 * a))
    } else if b < 0.0 {
        iv.hi
    } else {
        iv.lo
    }
}

/// Scan followed by golden-section refinement around the best sample.
fn scan_argmin(f: impl Fn(f64) -> f64, iv: Interval) -> f64 {
    const SAMPLES: usize = 256;
    if iv.width() <= 0.0 {
        return iv.lo;
    }
    let at = |j: usize| iv.lo + iv.width() * j as f64 / SAMPLES as f64;
    let best_j = (0..=SAMPLES)
        .min_by(|&a, &b| f(at(a)).total_cmp(&f(at(b))))
        .unwrap();
    let (mut a, mut b) = (at(best_j.saturating_sub(1)), at((best_j + 1).min(SAMPLES)));
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > 1e-10 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        }
    }
    let refined = 0.5 * (a + b);
    [iv.lo, at(best_j), refined, iv.hi]
        .into_iter()
        .min_by(|&x, &y| f(x).total_cmp(&f(y)))
        .unwrap()
}

/// Minimizer over δ of `φ(δ) − ξ·δ`.
pub fn argmin_delta(phi: CostFamily, xi: f64, iv: Interval) -> f64 {
    let f = |d: f64| phi.value(d) - xi * d;
    match shape(phi) {
        Shape::Concave => better_endpoint(f, iv),
        _ => {
            let (a, b) = poly(phi);
            quadratic_argmin(a, b - xi, iv)
        }
    }
}

/// Minimizer over γ of `ϱ¹(γ) + ϱ²(1−γ) + κ·γ`.
pub fn argmin_gamma(costs: &NodeCosts, kappa: f64, iv: Interval) -> f64 {
    let f = |g: f64| costs.recovery(g) + kappa * g;
    let shapes = [shape(costs.rho1), shape(costs.rho2)];
    if shapes.iter().all(|&s| s != Shape::Convex) && shapes.contains(&Shape::Concave) {
        better_endpoint(f, iv)
    } else if shapes.iter().all(|&s| s != Shape::Concave) {
        let (q1, l1) = poly(costs.rho1);
        let (q2, l2) = poly(costs.rho2);
        // q2(1−γ)² + l2(1−γ) expands to q2γ² − (2q2 + l2)γ + const
        quadratic_argmin(q1 + q2, l1 - 2.0 * q2 - l2 + kappa, iv)
    } else {
        scan_argmin(f, iv)
    }
}

/// Per-node minimizer of the Hamiltonian over the admissible controls.
pub fn minimize_hamiltonian_pointwise(
    state: &ExpectedState,
    costate: &Costate,
    bounds: &[NodeBounds],
    costs: &CostFunctions,
) -> Vec<NodeControl> {
    (0..state.len())
        .map(|i| {
            let b = &bounds[i];
            let lambda = if state.m[i] > 0.0 && costate.xi[i] - costate.rho[i] < 0.0 {
                b.lambda.hi
            } else {
                b.lambda.lo
            };
            let delta = if state.s[i] > 0.0 {
                argmin_delta(costs[i].phi, costate.xi[i], b.delta)
            } else {
                b.delta.lo
            };
            let gamma = if state.q(i) > 0.0 {
                argmin_gamma(&costs[i], costate.kappa[i], b.gamma)
            } else {
                b.gamma.lo
            };
            NodeControl {
                lambda,
                delta,
                gamma,
            }
        })
        .collect()
}

/// Factor in `[0, 1]` applied to every δ so the one-step explicit Euler
/// prediction of service utility stays at or above `floor`.
pub fn service_floor_scale(
    controls: &[NodeControl],
    state: &ExpectedState,
    service_weights: &[f64],
    floor: f64,
    h: f64,
) -> f64 {
    let mut utility = 0.0;
    let mut isolate = 0.0;
    let mut release = 0.0;
    for (i, u) in service_weights.iter().enumerate() {
        let q = state.q(i);
        utility += u * (1.0 - q);
        isolate += u * controls[i].delta * state.s[i];
        release += u * controls[i].gamma * q;
    }
    let predicted = utility - h * (isolate - release);
    if predicted >= floor {
        1.0
    } else if isolate <= 0.0 {
        0.0
    } else {
        ((utility + h * release - floor) / (h * isolate)).clamp(0.0, 1.0)
    }
}

/// Controls with every δ scaled so the predicted next-step utility respects
/// the floor. Identity when the floor is not binding.
pub fn project_service_floor(
    controls: &[NodeControl],
    state: &ExpectedState,
    service_weights: &[f64],
    floor: f64,
    h: f64,
) -> Vec<NodeControl> {
    let scale = service_floor_scale(controls, state, service_weights, floor, h);
    scaled_delta(controls, scale)
}

fn scaled_delta(controls: &[NodeControl], scale: f64) -> Vec<NodeControl> {
    if scale == 1.0 {
        return controls.to_vec();
    }
    controls
        .iter()
        .map(|c| NodeControl {
            delta: c.delta * scale,
            ..*c
        })
        .collect()
}

fn utility_of(state: &ExpectedState, weights: &[f64]) -> f64 {
    weights
        .iter()
        .enumerate()
        .map(|(i, u)| u * (state.h[i] + state.m[i] + state.s[i]))
        .sum()
}

/// Forward pass that projects δ onto the service floor step by step.
///
/// The Euler-based scale is checked against the actual RK4 step; if that
/// still lands below the floor the scale is bisected. The returned control
/// holds the projected values, so replaying it reproduces the same states.
pub fn forward_with_floor(
    problem: &ControlProblem,
    control: &ControlTrajectory,
) -> Result<(ControlTrajectory, StateTrajectory)> {
    let Some(floor) = problem.service_floor else {
        let states = integrate_forward(&problem.e0, control, &problem.schedule, &problem.params)?;
        return Ok((control.clone(), states));
    };
    control.grid.check_against(&problem.schedule)?;
    let grid = &control.grid;
    let params = &problem.params;
    let weights = &problem.service_weights;
    let mut rk = Rk4::new(params.len());
    let mut projected = Vec::with_capacity(grid.n_steps());
    let mut states = Vec::with_capacity(grid.n_points());
    let mut state = problem.e0.clone();
    let mut worst = state.box_violation();
    states.push(state.clone());
    let segs = problem.schedule.segments();
    for k in 0..grid.n_steps() {
        let adj = &segs[grid.segment_of_step(k)].adjacency;
        let h = grid.step_len(k);
        let raw = &control.steps[k];
        let now = utility_of(&state, weights);
        let mut scale = service_floor_scale(raw, &state, weights, floor, h);
        let mut u = scaled_delta(raw, scale);
        let (mut next, mut violation) = rk.step(&state, &u, adj, params, h);
        if now >= floor && utility_of(&next, weights) < floor {
            let (mut lo, mut hi) = (0.0, scale);
            for _ in 0..60 {
                let s = 0.5 * (lo + hi);
                let (trial, _) = rk.step(&state, &scaled_delta(raw, s), adj, params, h);
                if utility_of(&trial, weights) >= floor {
                    lo = s;
                } else {
                    hi = s;
                }
            }
            scale = lo;
            u = scaled_delta(raw, scale);
            (next, violation) = rk.step(&state, &u, adj, params, h);
        }
        if !next
            .h
            .iter()
            .chain(&next.m)
            .chain(&next.s)
            .all(|x| x.is_finite())
        {
            return Err(Error::Integration {
                step: k,
                time: grid.times()[k + 1],
            });
        }
        worst = worst.max(violation);
        projected.push(u);
        states.push(next.clone());
        state = next;
    }
    Ok((
        ControlTrajectory {
            grid: grid.clone(),
            steps: projected,
        },
        StateTrajectory {
            grid: grid.clone(),
            states,
            max_box_violation: worst,
        },
    ))
}

/// Pointwise minimizers evaluated at each step's midpoint (averaged state
/// and costate) within that step's segment bounds.
fn pointwise_update(
    problem: &ControlProblem,
    states: &StateTrajectory,
    adjoints: &AdjointTrajectory,
) -> Vec<Vec<NodeControl>> {
    let grid = &states.grid;
    (0..grid.n_steps())
        .map(|k| {
            let mid = ExpectedState::lerp(&states.states[k], &states.states[k + 1], 0.5);
            let co = Costate::average(&adjoints.points[k], &adjoints.points[k + 1]);
            minimize_hamiltonian_pointwise(
                &mid,
                &co,
                problem.bounds.segment(grid.segment_of_step(k)),
                &problem.costs,
            )
        })
        .collect()
}

/// Forward-backward sweep with relaxation; returns the lowest-impact iterate.
///
/// Each iteration integrates the state forward (with the service floor
/// applied), integrates costates backward, minimizes the Hamiltonian per step
/// and blends `θ·w* + (1−θ)·w`. The loop stops once the largest control
/// change falls below `tol` or after `max_iters` forward passes.
pub fn forward_backward_sweep(
    problem: &ControlProblem,
    initial: &ControlTrajectory,
    settings: &SweepSettings,
) -> Result<SweepResult> {
    settings.validate()?;
    problem.validate()?;
    initial.grid.check_against(&problem.schedule)?;
    problem.bounds.check(initial)?;
    let theta = settings.relaxation;
    let mut current = initial.clone();
    let mut best: Option<(
        ControlTrajectory,
        StateTrajectory,
        AdjointTrajectory,
        ImpactBreakdown,
    )> = None;
    let mut log = Vec::new();
    let mut converged = false;
    for iteration in 1..=settings.max_iters {
        let (control, states) = forward_with_floor(problem, &current)?;
        let impact = impact_components(&states, &control, &problem.params, &problem.costs)?;
        let adjoints = integrate_adjoint(problem, &states, &control)?;
        let target = pointwise_update(problem, &states, &adjoints);
        let mut change: f64 = 0.0;
        let blended: Vec<Vec<NodeControl>> = control
            .steps
            .iter()
            .zip(&target)
            .map(|(old, new)| {
                old.iter()
                    .zip(new)
                    .map(|(o, w)| {
                        let b = NodeControl {
                            lambda: theta * w.lambda + (1.0 - theta) * o.lambda,
                            delta: theta * w.delta + (1.0 - theta) * o.delta,
                            gamma: theta * w.gamma + (1.0 - theta) * o.gamma,
                        };
                        change = change.max(b.max_abs_diff(o));
                        b
                    })
                    .collect()
            })
            .collect();
        // ties go to the later, more converged iterate
        let improved = best.as_ref().is_none_or(|b| impact.total <= b.3.total);
        if improved {
            best = Some((control.clone(), states, adjoints, impact));
        }
        let best_impact = best.as_ref().unwrap().3.total;
        log.push(IterationRecord {
            iteration,
            impact: impact.total,
            best_impact,
            change,
        });
        if change < settings.tol {
            converged = true;
            break;
        }
        current = ControlTrajectory {
            grid: control.grid,
            steps: blended,
        };
    }
    let (control, states, adjoints, impact) = best.expect("at least one iteration ran");
    Ok(SweepResult {
        control,
        states,
        adjoints,
        impact,
        iterations: log.len(),
        converged,
        log,
    })
}

/// `∂H/∂(λ, δ, γ)` per node.
pub fn control_gradient(
    state: &ExpectedState,
    controls: &[NodeControl],
    costate: &Costate,
    costs: &CostFunctions,
) -> Vec<NodeControl> {
    (0..state.len())
        .map(|i| {
            let c = &controls[i];
            let nc = &costs[i];
            NodeControl {
                lambda: state.m[i] * (costate.xi[i] - costate.rho[i]),
                delta: state.s[i] * (nc.phi.derivative(c.delta) - costate.xi[i]),
                gamma: state.q(i)
                    * (nc.rho1.derivative(c.gamma) - nc.rho2.derivative(1.0 - c.gamma)
                        + costate.kappa[i]),
            }
        })
        .collect()
}

/// Directional derivative of total impact along `direction`: predicted from
/// the costates, and measured by central differences of the impact.
///
/// The service floor is not applied; both evaluations use the plain forward
/// integration.
pub fn gradient_check(
    problem: &ControlProblem,
    control: &ControlTrajectory,
    direction: &ControlTrajectory,
    h: f64,
) -> Result<(f64, f64)> {
    problem.validate()?;
    if direction.grid != control.grid {
        return Err(Error::domain(
            "direction and control are on different grids",
        ));
    }
    let shifted = |sign: f64| ControlTrajectory {
        grid: control.grid.clone(),
        steps: control
            .steps
            .iter()
            .zip(&direction.steps)
            .map(|(c, d)| {
                c.iter()
                    .zip(d)
                    .map(|(c, d)| NodeControl {
                        lambda: c.lambda + sign * h * d.lambda,
                        delta: c.delta + sign * h * d.delta,
                        gamma: c.gamma + sign * h * d.gamma,
                    })
                    .collect()
            })
            .collect(),
    };
    let plus = shifted(1.0);
    let minus = shifted(-1.0);
    for w in [control, &plus, &minus] {
        problem
            .bounds
            .check(w)
            .map_err(|e| Error::domain(format!("perturbed control is infeasible: {e}")))?;
    }
    let impact = |w: &ControlTrajectory| -> Result<f64> {
        let st = integrate_forward(&problem.e0, w, &problem.schedule, &problem.params)?;
        Ok(impact_components(&st, w, &problem.params, &problem.costs)?.total)
    };
    let measured = (impact(&plus)? - impact(&minus)?) / (2.0 * h);
    let states = integrate_forward(&problem.e0, control, &problem.schedule, &problem.params)?;
    let adjoints = integrate_adjoint(problem, &states, control)?;
    let grid = &control.grid;
    let mut predicted = 0.0;
    for k in 0..grid.n_steps() {
        let u = &control.steps[k];
        let d = &direction.steps[k];
        let ends = [k, k + 1].map(|p| {
            control_gradient(&states.states[p], u, &adjoints.points[p], &problem.costs)
                .iter()
                .zip(d)
                .map(|(g, d)| g.lambda * d.lambda + g.delta * d.delta + g.gamma * d.gamma)
                .sum::<f64>()
        });
        predicted += 0.5 * grid.step_len(k) * (ends[0] + ends[1]);
    }
    Ok((predicted, measured))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epidemic::state_derivative;
    use proptest::prelude::*;

    fn node() -> NodeParam {
        NodeParam {
            alpha: 0.1,
            beta: 0.1,
            a1: 0.5,
            a2: 0.8,
            b: 1.0,
            lambda: Interval::new(0.1, 0.6),
            delta: Interval::new(0.1, 0.4),
            gamma: Interval::new(0.1, 0.5),
        }
    }

    fn two_node() -> (
        ExpectedState,
        Vec<NodeControl>,
        Costate,
        Adjacency,
        NodeParams,
        CostFunctions,
    ) {
        let st = ExpectedState::new(vec![0.6, 0.5], vec![0.2, 0.1], vec![0.1, 0.3]).unwrap();
        let u = vec![
            NodeControl {
                lambda: 0.3,
                delta: 0.2,
                gamma: 0.25,
            },
            NodeControl {
                lambda: 0.5,
                delta: 0.35,
                gamma: 0.4,
            },
        ];
        let co = Costate {
            kappa: vec![0.4, -0.2],
            rho: vec![1.1, 0.7],
            xi: vec![0.9, 1.3],
        };
        let adj = Adjacency::from_edges(2, &[(0, 1)]).unwrap();
        let params = NodeParams::uniform(2, node()).unwrap();
        (
            st,
            u,
            co,
            adj,
            params,
            CostFunctions::uniform(2, CostFamily::Sqrt),
        )
    }

    #[test]
    fn hamiltonian_reduces_to_impact_rate() {
        let (st, u, _, adj, params, costs) = two_node();
        let h = hamiltonian(&st, &u, &Costate::zeros(2), &adj, &params, &costs);
        assert_eq!(h, impact_rate(&st, &u, &params, &costs).total);
        let mut p0 = node();
        p0.beta = 0.0;
        let params0 = NodeParams::uniform(2, p0).unwrap();
        let h0 = hamiltonian(
            &ExpectedState::healthy(2),
            &u,
            &Costate::zeros(2),
            &adj,
            &params0,
            &costs,
        );
        assert_eq!(h0, 0.0);
    }

    #[test]
    fn hamiltonian_recomposes() {
        let (st, u, co, adj, params, costs) = two_node();
        let d = state_derivative(&st, &u, &adj, &params);
        let mut expect = 0.0;
        for i in 0..2 {
            let q = st.q(i);
            expect += 0.5 * st.m[i] + 0.8 * st.s[i] + 1.0 * q;
            expect +=
                u[i].delta.sqrt() * st.s[i] + (u[i].gamma.sqrt() + (1.0 - u[i].gamma).sqrt()) * q;
            expect += co.kappa[i] * d.dh[i] + co.rho[i] * d.dm[i] + co.xi[i] * d.ds[i];
        }
        let h = hamiltonian(&st, &u, &co, &adj, &params, &costs);
        assert!((h - expect).abs() < 1e-14);
    }

    #[test]
    fn adjoint_examples() {
        let mut p = node();
        p.b = 1.0;
        let params = NodeParams::uniform(1, p).unwrap();
        let u = [NodeControl {
            lambda: 0.3,
            delta: 0.2,
            gamma: 0.0,
        }];
        let d = adjoint_derivative(
            &ExpectedState::healthy(1),
            &u,
            &Costate::zeros(1),
            &Adjacency::empty(1),
            &params,
            &CostFunctions::uniform(1, CostFamily::Sqrt),
        );
        assert!((d.kappa[0] - 2.0).abs() < 1e-15);

        let mut p = node();
        (p.alpha, p.beta, p.a1, p.a2, p.b) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let params = NodeParams::uniform(1, p).unwrap();
        // zero costs: linear family with vanishing slope is rejected, so use a
        // zero-mass state and check the costate-only terms
        let st = ExpectedState::new(vec![0.3], vec![0.3], vec![0.2]).unwrap();
        let co = Costate {
            kappa: vec![0.7],
            rho: vec![0.4],
            xi: vec![1.5],
        };
        let u = [NodeControl {
            lambda: 0.3,
            delta: 0.2,
            gamma: 0.4,
        }];
        let costs = CostFunctions::uniform(1, CostFamily::Sqrt);
        let d = adjoint_derivative(&st, &u, &co, &Adjacency::empty(1), &params, &costs);
        let r = costs[0].recovery(0.4);
        assert!((d.kappa[0] - (r + 0.7 * 0.4)).abs() < 1e-15);
        assert!((d.rho[0] - (r + 0.7 * 0.4 + (0.4 - 1.5) * 0.3)).abs() < 1e-15);
        assert!((d.xi[0] - (-0.2f64.sqrt() + r + 0.7 * 0.4 + 1.5 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn delta_argmin_examples() {
        let iv = Interval::new(0.1, 0.4);
        // concave objective: the interior stationary point is a maximum
        assert_eq!(argmin_delta(CostFamily::Sqrt, 1.0, iv), 0.1);
        assert_eq!(argmin_delta(CostFamily::Sqrt, -0.5, iv), 0.1);
        assert_eq!(argmin_delta(CostFamily::Sqrt, 3.0, iv), 0.4);
        assert_eq!(argmin_delta(CostFamily::Quadratic(1.0), 0.5, iv), 0.25);
        assert_eq!(argmin_delta(CostFamily::Linear(1.0), 2.0, iv), 0.4);
    }

    #[test]
    fn lambda_and_zero_mass_rules() {
        let bounds = [NodeBounds::from(&node())];
        let costs = CostFunctions::uniform(1, CostFamily::Sqrt);
        let st = ExpectedState::new(vec![0.7], vec![0.3], vec![0.0]).unwrap();
        let co = Costate {
            kappa: vec![0.0],
            rho: vec![0.0],
            xi: vec![0.2],
        };
        let u = minimize_hamiltonian_pointwise(&st, &co, &bounds, &costs);
        assert_eq!(u[0].lambda, 0.1);
        assert_eq!(u[0].delta, 0.1);
        assert_eq!(u[0].gamma, 0.1);
        let co = Costate {
            kappa: vec![0.0],
            rho: vec![0.5],
            xi: vec![0.2],
        };
        assert_eq!(
            minimize_hamiltonian_pointwise(&st, &co, &bounds, &costs)[0].lambda,
            0.6
        );
    }

    #[test]
    fn floor_projection_examples() {
        let weights = vec![500.0, 500.0];
        let st = ExpectedState::new(vec![0.5, 0.5], vec![0.0, 0.0], vec![0.5, 0.5]).unwrap();
        let u = vec![
            NodeControl {
                lambda: 0.1,
                delta: 0.4,
                gamma: 0.1
            };
            2
        ];
        assert_eq!(project_service_floor(&u, &st, &weights, 100.0, 0.01), u);
        let violated = ExpectedState::new(vec![0.1, 0.1], vec![0.0, 0.0], vec![0.1, 0.1]).unwrap();
        assert_eq!(
            service_floor_scale(&u, &violated, &weights, 900.0, 0.01),
            0.0
        );

        // single node: U = 1000·0.9, Euler step h=0.1 with δ=0.4, S=0.5 would drop
        // utility by 20 against a floor 10 below
        let w = vec![1000.0];
        let st = ExpectedState::new(vec![0.4], vec![0.0], vec![0.5]).unwrap();
        let u = vec![NodeControl {
            lambda: 0.1,
            delta: 0.4,
            gamma: 0.0,
        }];
        let p = project_service_floor(&u, &st, &w, 890.0, 0.1);
        let predicted = 900.0 - 0.1 * 1000.0 * p[0].delta * 0.5;
        assert!((predicted - 890.0).abs() < 1e-9);
        assert!((p[0].delta - 0.2).abs() < 1e-12);
    }

    fn fixture(floor: Option<f64>) -> (ControlProblem, TimeGrid) {
        let n = 6;
        let adj =
            Adjacency::from_edges(n, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3)])
                .unwrap();
        let schedule = TopologySchedule::constant(adj, 2.0).unwrap();
        let params = NodeParams::uniform(n, node()).unwrap();
        let bounds = BoundsSchedule::from_params(&params, 1);
        let grid = TimeGrid::for_schedule(&schedule, 0.01).unwrap();
        let problem = ControlProblem {
            schedule,
            costs: CostFunctions::uniform(n, CostFamily::Sqrt),
            e0: ExpectedState::uniform(n, 0.8, 0.1, 0.1).unwrap(),
            service_weights: vec![1000.0 / n as f64; n],
            service_floor: floor,
            bounds,
            params,
        };
        (problem, grid)
    }

    #[test]
    fn sweep_with_nothing_to_control() {
        let (mut problem, grid) = fixture(None);
        for p in problem.params.nodes_mut() {
            p.alpha = 0.0;
            p.beta = 0.0;
        }
        problem.e0 = ExpectedState::healthy(6);
        let init = problem.bounds.midpoint_control(&grid);
        let r = forward_backward_sweep(&problem, &init, &SweepSettings::default()).unwrap();
        assert_eq!(r.impact.total, 0.0);
        assert!(r.converged);
        let lower = ControlTrajectory::lower_bounds(grid, &problem.params);
        // the returned iterate is one relaxation step short of the target
        assert!(r.control.max_abs_diff(&lower) < 2e-4);
    }

    #[test]
    fn sweep_terminal_condition_and_accounting() {
        let (problem, grid) = fixture(Some(800.0));
        let init = problem.bounds.midpoint_control(&grid);
        let r = forward_backward_sweep(
            &problem,
            &init,
            &SweepSettings {
                max_iters: 40,
                ..Default::default()
            },
        )
        .unwrap();
        let last = r.adjoints.points.last().unwrap();
        assert!(last
            .kappa
            .iter()
            .chain(&last.rho)
            .chain(&last.xi)
            .all(|&x| x == 0.0));
        let replay =
            integrate_forward(&problem.e0, &r.control, &problem.schedule, &problem.params).unwrap();
        assert_eq!(replay, r.states);
        let again =
            impact_components(&replay, &r.control, &problem.params, &problem.costs).unwrap();
        assert_eq!(again, r.impact);
        assert!(r
            .log
            .windows(2)
            .all(|w| w[1].best_impact <= w[0].best_impact));
    }

    #[test]
    fn floor_holds_on_every_grid_point() {
        let (mut problem, grid) = fixture(Some(985.0));
        for p in problem.params.nodes_mut() {
            p.delta = Interval::new(0.1, 4.0);
        }
        problem.bounds = BoundsSchedule::from_params(&problem.params, 1);
        let init = problem.bounds.midpoint_control(&grid);
        let (control, states) = forward_with_floor(&problem, &init).unwrap();
        for st in &states.states {
            let u = utility_of(st, &problem.service_weights);
            assert!(u >= 985.0 - 1e-9, "{u}");
        }
        assert!(control.steps.iter().flatten().any(|c| c.delta < 2.0));
    }

    #[test]
    fn gradient_check_zero_direction() {
        let (problem, grid) = fixture(None);
        let init = problem.bounds.midpoint_control(&grid);
        let zero = ControlTrajectory::constant(
            grid,
            vec![
                NodeControl {
                    lambda: 0.0,
                    delta: 0.0,
                    gamma: 0.0
                };
                6
            ],
        );
        assert_eq!(
            gradient_check(&problem, &init, &zero, 1e-5).unwrap(),
            (0.0, 0.0)
        );
    }

    #[test]
    fn gradient_check_rejects_infeasible_direction() {
        let (problem, grid) = fixture(None);
        let lower = ControlTrajectory::lower_bounds(grid.clone(), &problem.params);
        let down = ControlTrajectory::constant(
            grid,
            vec![
                NodeControl {
                    lambda: 0.0,
                    delta: -1.0,
                    gamma: 0.0
                };
                6
            ],
        );
        assert!(matches!(
            gradient_check(&problem, &lower, &down, 1e-5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn modulation_and_pinning() {
        let params = NodeParams::uniform(4, node()).unwrap();
        let mut b = BoundsSchedule::from_params(&params, 2);
        b.modulate_lambda(0, &[0.0, 0.25, 1.0, 0.1]);
        let seg = b.segment(0);
        assert!((seg[0].lambda.hi - 0.3).abs() < 1e-15);
        assert_eq!(seg[1].lambda.hi, 0.6);
        assert_eq!(seg[2].lambda.hi, 0.6);
        assert!((seg[3].lambda.hi - 0.6 * 0.7).abs() < 1e-15);
        assert_eq!(b.segment(1)[0].lambda.hi, 0.6);
        b.modulate_gamma(1, &[(2, 0.0)]);
        assert_eq!(b.segment(1)[2].gamma.hi, 0.25);
        assert_eq!(b.segment(1)[1].gamma.hi, 0.5);
        b.pin_lambda(1, &[0.6, 0.1, 0.1, 0.6]);
        assert_eq!(b.segment(1)[0].lambda, Interval::point(0.6));
    }

    fn costs_strategy() -> impl Strategy<Value = CostFamily> {
        prop_oneof![
            Just(CostFamily::Sqrt),
            (0.1f64..3.0).prop_map(CostFamily::Linear),
            (0.1f64..3.0).prop_map(CostFamily::Quadratic),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn gamma_argmin_beats_grid(r1 in costs_strategy(), r2 in costs_strategy(), kappa in -3.0f64..3.0, lo in 0.0f64..0.5, w in 0.0f64..0.5) {
            let costs = NodeCosts { phi: CostFamily::Sqrt, rho1: r1, rho2: r2 };
            let iv = Interval::new(lo, lo + w);
            let g = argmin_gamma(&costs, kappa, iv);
            prop_assert!(iv.contains(g));
            let f = |x: f64| costs.recovery(x) + kappa * x;
            let grid_min = (0..=2000).map(|j| f(iv.lo + iv.width() * j as f64 / 2000.0)).fold(f64::INFINITY, f64::min);
            prop_assert!(f(g) <= grid_min + 1e-9);
        }

        #[test]
        fn delta_argmin_beats_grid(phi in costs_strategy(), xi in -3.0f64..3.0, lo in 0.0f64..0.5, w in 0.0f64..0.5) {
            let iv = Interval::new(lo, lo + w);
            let d = argmin_delta(phi, xi, iv);
            let f = |x: f64| phi.value(x) - xi * x;
            let grid_min = (0..=2000).map(|j| f(iv.lo + iv.width() * j as f64 / 2000.0)).fold(f64::INFINITY, f64::min);
            prop_assert!(f(d) <= grid_min + 1e-9);
        }
    }
}
