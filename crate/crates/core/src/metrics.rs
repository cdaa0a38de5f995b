//! Evaluation metrics over a finished run: expected repair and quarantine
//! counts, resource occupancy, defense-resource utilization and service
//! stability.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::epidemic::{ControlTrajectory, StateTrajectory};
use crate::error::{Error, Result};

/// Weight of a repair relative to the reference cost.
pub const REPAIR_WEIGHT: f64 = 1.0;
/// Weight of a quarantine relative to the reference cost.
pub const QUARANTINE_WEIGHT: f64 = 2.0;
/// Reference cost weight.
pub const REFERENCE_WEIGHT: f64 = 4.0;
/// Share of the utility that the reference cost applies to.
pub const REFERENCE_SHARE: f64 = 0.1;
/// Per-node rate above which threshold mode counts an operation.
pub const COUNT_THRESHOLD: f64 = 0.05;

/// How operations are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    /// Integrals of rate times state mass.
    #[default]
    Expected,
    /// Nodes whose rate times mass exceeds [`COUNT_THRESHOLD`] somewhere in
    /// the slot.
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SlotCounts {
    /// Repairs.
    pub n_r: f64,
    /// Quarantine entries.
    pub n_q: f64,
}

fn slot_steps(control: &ControlTrajectory, slot: (f64, f64)) -> Result<std::ops::Range<usize>> {
    let t = control.grid.times();
    let eps = 1e-9 * (1.0 + slot.1.abs());
    if slot.0 < t[0] - eps || slot.1 > t[t.len() - 1] + eps || slot.0 > slot.1 {
        return Err(Error::domain(format!(
            "slot [{}, {}] outside the horizon [{}, {}]",
            slot.0,
            slot.1,
            t[0],
            t[t.len() - 1]
        )));
    }
    let first = (0..control.grid.n_steps())
        .find(|&k| t[k] >= slot.0 - eps)
        .unwrap_or(control.grid.n_steps());
    let end = (first..control.grid.n_steps())
        .find(|&k| t[k + 1] > slot.1 + eps)
        .unwrap_or(control.grid.n_steps());
    Ok(first..end)
}

/// `(N_r, N_q)` over a time slot: `∫ Σ γ Q` and `∫ Σ δ S` by the trapezoid
/// rule with each step's control at both ends.
pub fn expected_counts(
    traj: &StateTrajectory,
    control: &ControlTrajectory,
    slot: (f64, f64),
) -> Result<SlotCounts> {
    counts(traj, control, slot, CountMode::Expected)
}

pub fn counts(
    traj: &StateTrajectory,
    control: &ControlTrajectory,
    slot: (f64, f64),
    mode: CountMode,
) -> Result<SlotCounts> {
    if traj.grid != control.grid {
        return Err(Error::domain(
            "state and control trajectories are on different grids",
        ));
    }
    let steps = slot_steps(control, slot)?;
    let n = control.n_nodes();
    match mode {
        CountMode::Expected => {
            let mut out = SlotCounts::default();
            for k in steps {
                let u = &control.steps[k];
                let h = 0.5 * control.grid.step_len(k);
                for st in [&traj.states[k], &traj.states[k + 1]] {
                    for i in 0..n {
                        out.n_r += h * u[i].gamma * st.q(i);
                        out.n_q += h * u[i].delta * st.s[i];
                    }
                }
            }
            Ok(out)
        }
        CountMode::Threshold => {
            let mut repaired = vec![false; n];
            let mut quarantined = vec![false; n];
            for k in steps {
                let u = &control.steps[k];
                for st in [&traj.states[k], &traj.states[k + 1]] {
                    for i in 0..n {
                        repaired[i] |= u[i].gamma * st.q(i) > COUNT_THRESHOLD;
                        quarantined[i] |= u[i].delta * st.s[i] > COUNT_THRESHOLD;
                    }
                }
            }
            let count = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64;
            Ok(SlotCounts {
                n_r: count(&repaired),
                n_q: count(&quarantined),
            })
        }
    }
}

/// Everything the metrics need about one method's run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub states: StateTrajectory,
    pub control: ControlTrajectory,
    pub service_weights: Vec<f64>,
    pub u_total: f64,
    pub u_floor: f64,
    pub slots: Vec<(f64, f64)>,
    pub counts: Vec<SlotCounts>,
    /// Whether the service floor held at every grid point of each slot.
    pub stable: Vec<bool>,
}

/// Slack on the service-floor comparison, relative to the total utility.
const FLOOR_SLACK: f64 = 1e-9;

impl RunRecord {
    /// Counts and stability flags per slot. With `repairs_only`, quarantine
    /// entries are booked as repairs.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        method: impl Into<String>,
        states: StateTrajectory,
        control: ControlTrajectory,
        service_weights: Vec<f64>,
        u_floor: f64,
        slots: Vec<(f64, f64)>,
        mode: CountMode,
        repairs_only: bool,
    ) -> Result<Self> {
        if service_weights.len() != control.n_nodes() {
            return Err(Error::domain(
                "service weights and control disagree on the node count",
            ));
        }
        let u_total = service_weights.iter().sum();
        let mut slot_counts = Vec::with_capacity(slots.len());
        let mut stable = Vec::with_capacity(slots.len());
        let utility = service_series(&states, &service_weights);
        let t = states.grid.times();
        for &slot in &slots {
            let mut c = counts(&states, &control, slot, mode)?;
            if repairs_only {
                c.n_r += c.n_q;
                c.n_q = 0.0;
            }
            slot_counts.push(c);
            let eps = 1e-9 * (1.0 + slot.1.abs());
            let ok = t
                .iter()
                .zip(&utility)
                .filter(|(&tk, _)| tk >= slot.0 - eps && tk <= slot.1 + eps)
                .all(|(_, &u)| u >= u_floor - FLOOR_SLACK * u_total);
            stable.push(ok);
        }
        Ok(Self {
            method: method.into(),
            states,
            control,
            service_weights,
            u_total,
            u_floor,
            slots,
            counts: slot_counts,
            stable,
        })
    }

    fn sum_cr(&self) -> f64 {
        self.counts.iter().map(|c| c.n_r).sum()
    }

    fn sum_cq(&self) -> f64 {
        self.counts.iter().map(|c| c.n_q).sum()
    }

    fn consumption(&self) -> f64 {
        REPAIR_WEIGHT * self.sum_cr() + QUARANTINE_WEIGHT * self.sum_cq()
    }

    fn sum_u(&self) -> f64 {
        self.u_total * self.slots.len() as f64
    }

    fn sum_budget(&self) -> f64 {
        (self.u_total - self.u_floor) * self.slots.len() as f64
    }

    fn stable_slots(&self) -> usize {
        self.stable.iter().filter(|&&b| b).count()
    }

    /// CSV rows `method,slot,t_start,t_end,value` for repairs or quarantines.
    pub fn write_counts_csv<W: Write>(
        &self,
        w: &mut csv::Writer<W>,
        quarantine: bool,
    ) -> Result<()> {
        for (k, (slot, c)) in self.slots.iter().zip(&self.counts).enumerate() {
            let v = if quarantine { c.n_q } else { c.n_r };
            w.serialize((&self.method, k, slot.0, slot.1, v))?;
        }
        Ok(())
    }

    /// CSV rows `method,time,utility`.
    pub fn write_service_csv<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let utility = service_series(&self.states, &self.service_weights);
        for (t, u) in self.states.grid.times().iter().zip(utility) {
            w.serialize((&self.method, t, u))?;
        }
        Ok(())
    }
}

/// Delivered utility `Σ u_i (H_i + M_i + S_i)` at every grid point.
pub fn service_series(states: &StateTrajectory, weights: &[f64]) -> Vec<f64> {
    states
        .states
        .iter()
        .map(|st| {
            weights
                .iter()
                .enumerate()
                .map(|(i, u)| u * (1.0 - st.q(i)))
                .sum()
        })
        .collect()
}

/// `(1·ΣC_r + 2·ΣC_q) / (4·0.1·ΣU)`.
pub fn resource_occupancy(record: &RunRecord) -> Result<f64> {
    let denom = REFERENCE_WEIGHT * REFERENCE_SHARE * record.sum_u();
    if !(denom > 0.0) {
        return Err(Error::domain("occupancy denominator is zero"));
    }
    Ok(record.consumption() / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub value: f64,
    /// `4·0.1·Σ(U − U_n)`.
    pub budget: f64,
    /// `1·ΣC_r + 2·ΣC_q`.
    pub consumption: f64,
    /// Consumption fell short of the budget, so the value is negative.
    pub negative: bool,
}

/// `1 − 4·0.1·Σ(U − U_n) / (1·ΣC_r + 2·ΣC_q)`.
pub fn defense_resource_utilization(record: &RunRecord) -> Result<Utilization> {
    let consumption = record.consumption();
    if !(consumption > 0.0) {
        return Err(Error::domain("no defense resources were consumed"));
    }
    let budget = REFERENCE_WEIGHT * REFERENCE_SHARE * record.sum_budget();
    let value = 1.0 - budget / consumption;
    Ok(Utilization {
        value,
        budget,
        consumption,
        negative: value < 0.0,
    })
}

/// `(N_s / slots, 4·0.1·N_s / slots)`.
pub fn service_stability(record: &RunRecord) -> (f64, f64) {
    if record.slots.is_empty() {
        return (0.0, 0.0);
    }
    let frac = record.stable_slots() as f64 / record.slots.len() as f64;
    (frac, REFERENCE_WEIGHT * REFERENCE_SHARE * frac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct RawMetrics {
    pub sum_Cr: f64,
    pub sum_Cq: f64,
    pub sum_U: f64,
    pub sum_budget: f64,
    pub N_s: usize,
    pub slots: usize,
    pub utilization_negative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub occupancy: f64,
    /// `None` when nothing was consumed.
    pub utilization: Option<f64>,
    pub stability_normalized: f64,
    pub stability_literal: f64,
    pub raw: RawMetrics,
}

pub fn summarize(record: &RunRecord) -> Result<MetricsSummary> {
    let occupancy = resource_occupancy(record)?;
    let utilization = match defense_resource_utilization(record) {
        Ok(u) => Some(u),
        Err(Error::Domain(_)) => None,
        Err(e) => return Err(e),
    };
    let (stability_normalized, stability_literal) = service_stability(record);
    Ok(MetricsSummary {
        occupancy,
        utilization: utilization.map(|u| u.value),
        stability_normalized,
        stability_literal,
        raw: RawMetrics {
            sum_Cr: record.sum_cr(),
            sum_Cq: record.sum_cq(),
            sum_U: record.sum_u(),
            sum_budget: record.sum_budget(),
            N_s: record.stable_slots(),
            slots: record.slots.len(),
            utilization_negative: utilization.is_some_and(|u| u.negative),
        },
    })
}
