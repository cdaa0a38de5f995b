//! Zero-sum attacker/defender layer: payoff matrices over strategy atoms,
//! pure maximin, fictitious play, the greedy attacker and the sequential
//! per-slot game.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{forward_backward_sweep, BoundsSchedule, ControlProblem};
use crate::epidemic::{
    integrate_forward, ControlTrajectory, ExpectedState, NodeControl, NodeParams, StateTrajectory,
    TimeGrid,
};
use crate::error::{Error, Result};
use crate::grading::{GradeInputs, GradeList, Grader};
use crate::impact::{impact_components, CostFunctions, ImpactBreakdown};
use crate::scenario::Scenario;
use crate::topology::{Adjacency, TopologySchedule};

/// Quarantined mass at which a node enters recovery grading.
pub const QUARANTINE_CANDIDATE_MASS: f64 = 0.05;

/// Defender-loss matrix: rows are defender atoms, columns attacker atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<Vec<f64>>,
}

impl PayoffMatrix {
    pub fn new(entries: Vec<Vec<f64>>) -> Result<Self> {
        let rows = entries.len();
        let cols = entries.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return Err(Error::domain(
                "payoff matrix needs at least one row and column",
            ));
        }
        if entries.iter().any(|r| r.len() != cols) {
            return Err(Error::domain("payoff matrix rows have different lengths"));
        }
        if entries.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::domain("payoff matrix has a non-finite entry"));
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    /// The defender's gain, i.e. the negated loss.
    pub fn defender_gain(&self) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|r| r.iter().map(|x| -x).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Maximin {
    pub row: usize,
    pub col: usize,
    /// Largest row minimum.
    pub value: f64,
    /// Smallest column maximum.
    pub minimax: f64,
    pub is_saddle: bool,
}

fn argmax(xs: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

fn argmin(xs: impl Iterator<Item = f64>) -> (usize, f64) {
    let (i, x) = argmax(xs.map(|x| -x));
    (i, -x)
}

/// Pure maximin of a gain matrix for the row player; ties go to the lowest
/// index.
pub fn pure_maximin(gain: &[Vec<f64>]) -> Result<Maximin> {
    if gain.is_empty() || gain[0].is_empty() || gain.iter().any(|r| r.len() != gain[0].len()) {
        return Err(Error::domain(
            "pure maximin needs a non-empty rectangular matrix",
        ));
    }
    let cols = gain[0].len();
    let (row, value) = argmax(gain.iter().map(|r| argmin(r.iter().copied()).1));
    let col = argmin(gain[row].iter().copied()).0;
    let minimax = argmin((0..cols).map(|j| argmax(gain.iter().map(|r| r[j])).1)).1;
    Ok(Maximin {
        row,
        col,
        value,
        minimax,
        is_saddle: value == minimax,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedSolution {
    /// Empirical row frequencies.
    pub row_mix: Vec<f64>,
    /// Empirical column frequencies.
    pub col_mix: Vec<f64>,
    /// `row_mixᵀ · A · col_mix`.
    pub value: f64,
    /// Guaranteed payoff of `row_mix` against any column.
    pub lower: f64,
    /// Best row payoff against `col_mix`.
    pub upper: f64,
    pub iterations: usize,
}

/// Simultaneous fictitious play on a gain matrix (row player maximizes).
/// Both players start on index 0; ties go to the lowest index.
pub fn fictitious_play(gain: &[Vec<f64>], iterations: usize) -> Result<MixedSolution> {
    pure_maximin(gain)?;
    if iterations == 0 {
        return Err(Error::domain(
            "fictitious play needs at least one iteration",
        ));
    }
    let (m, n) = (gain.len(), gain[0].len());
    let mut row_counts = vec![0u64; m];
    let mut col_counts = vec![0u64; n];
    // cumulative payoff of each row against the column history and vice versa
    let mut row_score = vec![0.0; m];
    let mut col_score = vec![0.0; n];
    let (mut r, mut c) = (0, 0);
    for _ in 0..iterations {
        row_counts[r] += 1;
        col_counts[c] += 1;
        for (i, s) in row_score.iter_mut().enumerate() {
            *s += gain[i][c];
        }
        for (j, s) in col_score.iter_mut().enumerate() {
            *s += gain[r][j];
        }
        r = argmax(row_score.iter().copied()).0;
        c = argmin(col_score.iter().copied()).0;
    }
    let t = iterations as f64;
    let row_mix: Vec<f64> = row_counts.iter().map(|&k| k as f64 / t).collect();
    let col_mix: Vec<f64> = col_counts.iter().map(|&k| k as f64 / t).collect();
    let row_payoff: Vec<f64> = (0..m)
        .map(|i| (0..n).map(|j| gain[i][j] * col_mix[j]).sum())
        .collect();
    let col_payoff: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| gain[i][j] * row_mix[i]).sum())
        .collect();
    let value = row_mix.iter().zip(&row_payoff).map(|(p, v)| p * v).sum();
    Ok(MixedSolution {
        lower: argmin(col_payoff.iter().copied()).1,
        upper: argmax(row_payoff.iter().copied()).1,
        row_mix,
        col_mix,
        value,
        iterations,
    })
}

/// A per-node λ profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerAtom {
    pub name: String,
    pub lambda: Vec<f64>,
}

/// A per-node (δ, γ) profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenderAtom {
    pub name: String,
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Uniform high, uniform low, and high on the top `N/4` and `N/2` nodes by
/// degree (ties to the lower index).
pub fn attacker_atoms(params: &NodeParams, adjacency: &Adjacency) -> Vec<AttackerAtom> {
    let n = params.len();
    let hi: Vec<f64> = params.iter().map(|p| p.lambda.hi).collect();
    let lo: Vec<f64> = params.iter().map(|p| p.lambda.lo).collect();
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (std::cmp::Reverse(adjacency.degree(i)), i));
    let mut atoms = vec![
        AttackerAtom {
            name: "uniform_high".into(),
            lambda: hi.clone(),
        },
        AttackerAtom {
            name: "uniform_low".into(),
            lambda: lo.clone(),
        },
    ];
    for k in [n / 4, n / 2] {
        let mut lambda = lo.clone();
        for &i in &by_degree[..k] {
            lambda[i] = hi[i];
        }
        atoms.push(AttackerAtom {
            name: format!("top{k}_degree_high"),
            lambda,
        });
    }
    atoms
}

/// The four corners of the (δ, γ) box.
pub fn defender_atoms(params: &NodeParams) -> Vec<DefenderAtom> {
    let mut atoms = Vec::with_capacity(4);
    for (dn, dhi) in [("low", false), ("high", true)] {
        for (gn, ghi) in [("low", false), ("high", true)] {
            atoms.push(DefenderAtom {
                name: format!("delta_{dn}_gamma_{gn}"),
                delta: params
                    .iter()
                    .map(|p| if dhi { p.delta.hi } else { p.delta.lo })
                    .collect(),
                gamma: params
                    .iter()
                    .map(|p| if ghi { p.gamma.hi } else { p.gamma.lo })
                    .collect(),
            });
        }
    }
    atoms
}

/// Impact of holding the given per-node controls constant over a schedule.
pub fn constant_control_impact(
    schedule: &TopologySchedule,
    params: &NodeParams,
    costs: &CostFunctions,
    entry: &ExpectedState,
    controls: Vec<NodeControl>,
    grid_step: f64,
) -> Result<(ControlTrajectory, StateTrajectory, ImpactBreakdown)> {
    let grid = TimeGrid::for_schedule(schedule, grid_step)?;
    let control = ControlTrajectory::constant(grid, controls);
    let states = integrate_forward(entry, &control, schedule, params)?;
    let impact = impact_components(&states, &control, params, costs)?;
    Ok((control, states, impact))
}

/// Loss matrix for one slot of the scenario schedule, started from `entry`.
pub fn build_payoff_matrix(
    scenario: &Scenario,
    slot: usize,
    entry: &ExpectedState,
    attackers: &[AttackerAtom],
    defenders: &[DefenderAtom],
) -> Result<PayoffMatrix> {
    if attackers.is_empty() || defenders.is_empty() {
        return Err(Error::domain(
            "payoff matrix needs at least one atom per side",
        ));
    }
    let schedule = scenario.schedule.slot(slot)?;
    let cells: Vec<(usize, usize)> = (0..defenders.len())
        .flat_map(|i| (0..attackers.len()).map(move |j| (i, j)))
        .collect();
    let values = cells
        .par_iter()
        .map(|&(i, j)| {
            let (a, d) = (&attackers[j], &defenders[i]);
            let controls = (0..entry.len())
                .map(|k| NodeControl {
                    lambda: a.lambda[k],
                    delta: d.delta[k],
                    gamma: d.gamma[k],
                })
                .collect();
            constant_control_impact(
                &schedule,
                &scenario.params,
                &scenario.costs,
                entry,
                controls,
                scenario.sweep.grid_step,
            )
            .map(|r| r.2.total)
        })
        .collect::<Result<Vec<f64>>>()?;
    PayoffMatrix::new(
        values
            .chunks(attackers.len())
            .map(<[f64]>::to_vec)
            .collect(),
    )
}

/// Per node, λ_hi iff it strictly raises the rate of change of impact given
/// the defender's previous quarantine rates.
///
/// Raising λ moves mass from M to S, so the impact rate changes by
/// `M·(a2 + φ(δ) − a1)` per unit λ.
pub fn greedy_attacker(
    state: &ExpectedState,
    params: &NodeParams,
    costs: &CostFunctions,
    prev_delta: &[f64],
    lambda_hi: &[f64],
) -> Vec<f64> {
    (0..state.len())
        .map(|i| {
            let p = &params[i];
            let slope = state.m[i] * (p.a2 + costs[i].phi.value(prev_delta[i]) - p.a1);
            if slope > 0.0 {
                lambda_hi[i]
            } else {
                p.lambda.lo
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub attacker_lambda: Vec<f64>,
    pub threat: GradeList,
    pub recovery: Option<GradeList>,
    pub entry: ExpectedState,
    pub exit: ExpectedState,
    pub impact: ImpactBreakdown,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialRun {
    pub slots: Vec<SlotRecord>,
    /// Defender control over the whole horizon.
    pub control: ControlTrajectory,
    pub states: StateTrajectory,
    pub impact: ImpactBreakdown,
    pub warnings: Vec<String>,
}

impl SequentialRun {
    /// The attacker's λ profile for every slot.
    pub fn attacker_trace(&self) -> Vec<Vec<f64>> {
        self.slots
            .iter()
            .map(|s| s.attacker_lambda.clone())
            .collect()
    }

    /// CSV with columns `slot,t_start,t_end,iterations,converged,L,E,C,I`.
    pub fn write_slots_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "slot",
            "t_start",
            "t_end",
            "iterations",
            "converged",
            "L",
            "E",
            "C",
            "I",
        ])?;
        for s in &self.slots {
            w.serialize((
                s.slot,
                s.t_start,
                s.t_end,
                s.iterations,
                s.converged,
                s.impact.l,
                s.impact.e,
                s.impact.c,
                s.impact.total,
            ))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Joins per-slot trajectories on slot-local grids into one trajectory over
/// the full schedule.
pub(crate) fn join_slots(
    schedule: &TopologySchedule,
    parts: Vec<(ControlTrajectory, StateTrajectory)>,
) -> Result<(ControlTrajectory, StateTrajectory)> {
    let grids: Vec<TimeGrid> = parts
        .iter()
        .zip(schedule.intervals())
        .map(|((c, _), (t0, t1))| c.grid.placed(t0, t1))
        .collect();
    let grid = TimeGrid::concat(&grids)?;
    let mut steps = Vec::with_capacity(grid.n_steps());
    let mut states = Vec::with_capacity(grid.n_points());
    let mut worst: f64 = 0.0;
    for (k, (c, s)) in parts.into_iter().enumerate() {
        steps.extend(c.steps);
        let skip = usize::from(k > 0);
        states.extend(s.states.into_iter().skip(skip));
        worst = worst.max(s.max_box_violation);
    }
    Ok((
        ControlTrajectory::new(grid.clone(), steps)?,
        StateTrajectory {
            grid,
            states,
            max_box_violation: worst,
        },
    ))
}

/// Slot-by-slot game: graded bounds, the greedy attacker's λ, then a
/// defender sweep on the slot warm-started from the previous slot.
pub fn sequential_game_run(scenario: &Scenario) -> Result<SequentialRun> {
    let schedule = &scenario.schedule;
    let n = schedule.n_nodes();
    let params = &scenario.params;
    let mut grader = Grader::new(schedule, params, &scenario.service_weights)?;
    let mut entry = scenario.e0.clone();
    let mut prev: Option<Vec<NodeControl>> = None;
    let mut slots = Vec::with_capacity(schedule.len());
    let mut parts = Vec::with_capacity(schedule.len());
    let mut warnings = Vec::new();
    for (s, (t0, t1)) in schedule.intervals().into_iter().enumerate() {
        let inputs = grade_inputs(scenario, t0, s, &entry);
        let threat = grader.threat_grade(&inputs)?;
        let quarantined: Vec<usize> = (0..n)
            .filter(|&i| entry.q(i) >= QUARANTINE_CANDIDATE_MASS)
            .collect();
        let recovery = if quarantined.is_empty() {
            None
        } else {
            Some(grader.recovery_grade(&inputs, &quarantined)?)
        };
        let mut bounds = BoundsSchedule::from_params(params, 1);
        bounds.modulate_lambda(0, &threat.grades);
        if let Some(r) = &recovery {
            bounds.modulate_gamma(0, &r.candidate_grades());
        }
        let prev_delta: Vec<f64> = match &prev {
            Some(c) => c.iter().map(|c| c.delta).collect(),
            None => params.iter().map(|p| p.delta.lo).collect(),
        };
        let lambda_hi: Vec<f64> = bounds.segment(0).iter().map(|b| b.lambda.hi).collect();
        let attacker_lambda =
            greedy_attacker(&entry, params, &scenario.costs, &prev_delta, &lambda_hi);
        bounds.pin_lambda(0, &attacker_lambda);

        let slot_schedule = schedule.slot(s)?;
        let grid = TimeGrid::for_schedule(&slot_schedule, scenario.sweep.grid_step)?;
        let initial = match &prev {
            Some(c) => ControlTrajectory::constant(
                grid,
                bounds
                    .segment(0)
                    .iter()
                    .zip(c)
                    .map(|(b, &c)| b.clamp(c))
                    .collect(),
            ),
            None => bounds.midpoint_control(&grid),
        };
        let problem = ControlProblem {
            schedule: slot_schedule,
            params: params.clone(),
            costs: scenario.costs.clone(),
            e0: entry.clone(),
            service_weights: scenario.service_weights.clone(),
            service_floor: Some(scenario.u_floor),
            bounds,
        };
        let result = forward_backward_sweep(&problem, &initial, &scenario.sweep)?;
        if !result.converged {
            warnings.push(format!(
                "slot {s}: sweep stopped after {} iterations without converging",
                result.iterations
            ));
        }
        let exit = result.states.final_state().clone();
        prev = result.control.steps.last().cloned();
        slots.push(SlotRecord {
            slot: s,
            t_start: t0,
            t_end: t1,
            attacker_lambda,
            threat,
            recovery,
            entry: entry.clone(),
            exit: exit.clone(),
            impact: result.impact,
            iterations: result.iterations,
            converged: result.converged,
        });
        parts.push((result.control, result.states));
        entry = exit;
    }
    let impact = slots.iter().map(|s| s.impact).sum();
    let (control, states) = join_slots(schedule, parts)?;
    Ok(SequentialRun {
        slots,
        control,
        states,
        impact,
        warnings,
    })
}

/// Grade inputs shared by the sequential game and standalone grading.
pub(crate) fn grade_inputs(
    scenario: &Scenario,
    t: f64,
    k_start: usize,
    state: &ExpectedState,
) -> GradeInputs {
    let g = &scenario.grading;
    GradeInputs {
        t,
        state: state.clone(),
        u_total: scenario.u_total,
        u_floor: scenario.u_floor,
        i_bar: scenario.u_total / scenario.schedule.n_nodes() as f64,
        k_start,
        t_w: g.t_w,
        rho_phi: g.rho_phi,
        z_phi: g.z_phi,
        max_backtracks: g.max_backtracks.unwrap_or(usize::MAX),
        worst_case: g.worst_case,
    }
}
