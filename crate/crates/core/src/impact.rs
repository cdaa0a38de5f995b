//! Impact accounting: resource consumption L, service loss E, operation cost C
//! and their total, plus the instantaneous service utility of a network.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::epidemic::{ControlTrajectory, ExpectedState, NodeControl, NodeParams, StateTrajectory};
use crate::error::{Error, Result};
use crate::topology::GraphSnapshot;

/// Shape of a cost curve on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family", content = "c")]
pub enum CostFamily {
    /// `√x`
    Sqrt,
    /// `c·x`
    Linear(f64),
    /// `c·x²`
    Quadratic(f64),
}

impl CostFamily {
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            CostFamily::Sqrt => x.max(0.0).sqrt(),
            CostFamily::Linear(c) => c * x,
            CostFamily::Quadratic(c) => c * x * x,
        }
    }

    /// First derivative; infinite for `Sqrt` at 0.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            CostFamily::Sqrt => 0.5 / x.sqrt(),
            CostFamily::Linear(c) => c,
            CostFamily::Quadratic(c) => 2.0 * c * x,
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            CostFamily::Sqrt => true,
            CostFamily::Linear(c) | CostFamily::Quadratic(c) => c.is_finite() && c > 0.0,
        }
    }
}

/// Cost curves of one node: `φ` of the quarantine rate, `ϱ¹` of the recovery
/// rate and `ϱ²` of its complement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeCosts {
    pub phi: CostFamily,
    pub rho1: CostFamily,
    pub rho2: CostFamily,
}

impl NodeCosts {
    pub fn uniform(family: CostFamily) -> Self {
        Self {
            phi: family,
            rho1: family,
            rho2: family,
        }
    }

    /// `ϱ¹(γ) + ϱ²(1−γ)`
    #[inline]
    pub fn recovery(&self, gamma: f64) -> f64 {
        self.rho1.value(gamma) + self.rho2.value(1.0 - gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<NodeCosts>", into = "Vec<NodeCosts>")]
pub struct CostFunctions(Vec<NodeCosts>);

impl CostFunctions {
    pub fn new(nodes: Vec<NodeCosts>) -> Result<Self> {
        if let Some(i) = nodes
            .iter()
            .position(|c| !(c.phi.is_valid() && c.rho1.is_valid() && c.rho2.is_valid()))
        {
            return Err(Error::domain(format!(
                "node {i}: cost coefficients must be positive and finite"
            )));
        }
        Ok(Self(nodes))
    }

    pub fn uniform(n: usize, family: CostFamily) -> Self {
        Self(vec![NodeCosts::uniform(family); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for CostFunctions {
    type Output = NodeCosts;

    fn index(&self, i: usize) -> &NodeCosts {
        &self.0[i]
    }
}

impl TryFrom<Vec<NodeCosts>> for CostFunctions {
    type Error = Error;

    fn try_from(v: Vec<NodeCosts>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CostFunctions> for Vec<NodeCosts> {
    fn from(c: CostFunctions) -> Self {
        c.0
    }
}

/// Impact split into its three parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImpactBreakdown {
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "I")]
    pub total: f64,
}

impl ImpactBreakdown {
    fn new(l: f64, e: f64, c: f64) -> Self {
        Self {
            l,
            e,
            c,
            total: l + e + c,
        }
    }

    fn scaled(self, w: f64) -> Self {
        Self::new(w * self.l, w * self.e, w * self.c)
    }
}

impl std::ops::Add for ImpactBreakdown {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.l + o.l, self.e + o.e, self.c + o.c)
    }
}

impl std::iter::Sum for ImpactBreakdown {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Instantaneous impact rate split into consumption, service loss and cost.
pub fn impact_rate(
    state: &ExpectedState,
    controls: &[NodeControl],
    params: &NodeParams,
    costs: &CostFunctions,
) -> ImpactBreakdown {
    let (mut l, mut e, mut c) = (0.0, 0.0, 0.0);
    for i in 0..state.len() {
        let p = &params[i];
        let q = state.q(i);
        l += p.a1 * state.m[i] + p.a2 * state.s[i];
        e += p.b * q;
        c += costs[i].phi.value(controls[i].delta) * state.s[i]
            + costs[i].recovery(controls[i].gamma) * q;
    }
    ImpactBreakdown::new(l, e, c)
}

fn check_shapes(
    traj: &StateTrajectory,
    control: &ControlTrajectory,
    params: &NodeParams,
    costs: &CostFunctions,
) -> Result<()> {
    if traj.grid != control.grid || traj.states.len() != control.grid.n_points() {
        return Err(Error::domain(
            "state and control trajectories are on different grids",
        ));
    }
    if control.n_nodes() != params.len() || costs.len() != params.len() {
        return Err(Error::domain(format!(
            "dimension mismatch: control {}, params {}, costs {}",
            control.n_nodes(),
            params.len(),
            costs.len()
        )));
    }
    Ok(())
}

/// Trapezoid contribution of every grid step. Both endpoints of a step are
/// evaluated with that step's control.
pub fn impact_per_step(
    traj: &StateTrajectory,
    control: &ControlTrajectory,
    params: &NodeParams,
    costs: &CostFunctions,
) -> Result<Vec<ImpactBreakdown>> {
    check_shapes(traj, control, params, costs)?;
    Ok((0..control.grid.n_steps())
        .map(|k| step_impact(traj, control, params, costs, k))
        .collect())
}

fn step_impact(
    traj: &StateTrajectory,
    control: &ControlTrajectory,
    params: &NodeParams,
    costs: &CostFunctions,
    k: usize,
) -> ImpactBreakdown {
    let u = &control.steps[k];
    let a = impact_rate(&traj.states[k], u, params, costs);
    let b = impact_rate(&traj.states[k + 1], u, params, costs);
    (a + b).scaled(0.5 * control.grid.step_len(k))
}

/// Impact over the whole horizon.
pub fn impact_components(
    traj: &StateTrajectory,
    control: &ControlTrajectory,
    params: &NodeParams,
    costs: &CostFunctions,
) -> Result<ImpactBreakdown> {
    impact_over(traj, control, params, costs, 0..control.grid.n_steps())
}

/// Impact over a range of grid steps.
pub fn impact_over(
    traj: &StateTrajectory,
    control: &ControlTrajectory,
    params: &NodeParams,
    costs: &CostFunctions,
    steps: Range<usize>,
) -> Result<ImpactBreakdown> {
    check_shapes(traj, control, params, costs)?;
    if steps.end > control.grid.n_steps() {
        return Err(Error::domain("step range outside the grid"));
    }
    Ok(steps
        .map(|k| step_impact(traj, control, params, costs, k))
        .sum())
}

/// Per-step CSV with columns `t_start,t_end,L,E,C,I`.
pub fn write_impact_csv<W: Write>(
    traj: &StateTrajectory,
    control: &ControlTrajectory,
    params: &NodeParams,
    costs: &CostFunctions,
    out: W,
) -> Result<()> {
    let steps = impact_per_step(traj, control, params, costs)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_start", "t_end", "L", "E", "C", "I"])?;
    let t = control.grid.times();
    for (k, b) in steps.iter().enumerate() {
        w.serialize((t[k], t[k + 1], b.l, b.e, b.c, b.total))?;
    }
    w.flush()?;
    Ok(())
}

/// Service delivered per unit time: quarantined mass is the only loss.
pub fn instantaneous_utility(state: &ExpectedState, snapshot: &GraphSnapshot) -> f64 {
    snapshot
        .service_weights
        .iter()
        .enumerate()
        .map(|(i, u)| u * (state.h[i] + state.m[i] + state.s[i]))
        .sum()
}
