//! Threat and recovery grading of nodes across the topology schedule.
//!
//! Each node starts from the infection pressure around it and then walks the
//! schedule period by period, comparing how removing the node (threat
//! grading) or re-admitting it (recovery grading) changes the spectral radius
//! of the spreading matrix and the service utility. Periods that fail the
//! comparison send the walk one period back with the accumulated differences.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epidemic::{infection_pressure, ExpectedState, NodeParams};
use crate::error::{Error, Result};
use crate::topology::{
    betweenness, threshold_radius, utility_of_kept, Adjacency, GraphSnapshot, TopologySchedule,
    UtilityModel,
};

/// Mass in M+S below which a node counts as not yet compromised.
pub const COMPROMISED_MASS: f64 = 0.5;

/// Margin a period comparison must clear to count as an improvement.
const ADVANCE_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeInputs {
    pub t: f64,
    pub state: ExpectedState,
    /// Utility of the intact network.
    pub u_total: f64,
    /// Minimum utility that must be preserved.
    pub u_floor: f64,
    /// Mean utility of a single node.
    pub i_bar: f64,
    /// First period of the sweep (0-based segment index).
    pub k_start: usize,
    /// Aggregation window applied to neighbour pressure.
    pub t_w: f64,
    pub rho_phi: f64,
    pub z_phi: f64,
    pub max_backtracks: usize,
    /// Treat the most exposed healthy neighbour of each node as compromised
    /// when seeding its pressure.
    pub worst_case: bool,
}

impl GradeInputs {
    fn validate(&self, schedule: &TopologySchedule) -> Result<()> {
        if !(self.u_floor > 0.0 && self.u_floor < self.u_total) {
            return Err(Error::config(format!(
                "service floor {} must lie strictly between 0 and {}",
                self.u_floor, self.u_total
            )));
        }
        if !(self.i_bar > 0.0) {
            return Err(Error::config("mean node utility must be positive"));
        }
        if !(self.t_w > 0.0) {
            return Err(Error::config("aggregation window must be positive"));
        }
        if self.rho_phi < 0.0 || self.z_phi < 0.0 || !(self.rho_phi + self.z_phi > 0.0) {
            return Err(Error::config(
                "blend coefficients must be non-negative with a positive sum",
            ));
        }
        if self.k_start >= schedule.len() {
            return Err(Error::domain(format!(
                "start period {} outside a schedule of {} periods",
                self.k_start,
                schedule.len()
            )));
        }
        if self.state.len() != schedule.n_nodes() {
            return Err(Error::domain(
                "state and schedule disagree on the node count",
            ));
        }
        schedule.segment_index_at(self.t)?;
        Ok(())
    }
}

/// Normalized grades of every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeList {
    /// Grade of each node; nodes outside the candidate set get 0.
    pub grades: Vec<f64>,
    /// Candidates ordered by aggregated pressure, highest first.
    pub ranking: Vec<usize>,
    /// Number of leading ranks whose pressures form the normalizer.
    pub top: usize,
    /// Aggregated pressure of each node before normalization.
    pub pressure: Vec<f64>,
    /// Inner iterations spent on each node.
    pub iterations: Vec<usize>,
}

impl GradeList {
    /// `(node, grade)` pairs for the candidate set.
    pub fn candidate_grades(&self) -> Vec<(usize, f64)> {
        self.ranking.iter().map(|&i| (i, self.grades[i])).collect()
    }

    /// CSV with columns `node,grade,rank`; rank is 1-based, empty for nodes
    /// that were not graded.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut rank = vec![None; self.grades.len()];
        for (r, &i) in self.ranking.iter().enumerate() {
            rank[i] = Some(r + 1);
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["node", "grade", "rank"])?;
        for (i, g) in self.grades.iter().enumerate() {
            w.serialize((i, g, rank[i]))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `t_w · Σ_{j ∈ N(i)} pressure_j`.
pub fn neighbor_pressure(
    node: usize,
    state: &ExpectedState,
    adjacency: &Adjacency,
    params: &NodeParams,
    t_w: f64,
) -> f64 {
    t_w * adjacency
        .neighbors(node)
        .iter()
        .map(|&j| infection_pressure(state, params, adjacency, j))
        .sum::<f64>()
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Threat,
    Recovery,
}

/// Graded sweeps over one schedule, caching the per-period spectral radius
/// and utility of every modified network.
pub struct Grader<'a> {
    schedule: &'a TopologySchedule,
    params: &'a NodeParams,
    weights: &'a [f64],
    model: UtilityModel,
    recovery_rates: Vec<f64>,
    matrix_ids: Vec<usize>,
    cache: HashMap<(usize, Vec<usize>), (f64, f64)>,
}

impl<'a> Grader<'a> {
    /// Grader using the upper quarantine rates as the recovery side of the
    /// spreading matrix.
    pub fn new(
        schedule: &'a TopologySchedule,
        params: &'a NodeParams,
        weights: &'a [f64],
    ) -> Result<Self> {
        let n = schedule.n_nodes();
        if params.len() != n || weights.len() != n {
            return Err(Error::domain("grader inputs disagree on the node count"));
        }
        Ok(Self {
            schedule,
            params,
            weights,
            model: UtilityModel::default(),
            recovery_rates: params.iter().map(|p| p.delta.hi).collect(),
            matrix_ids: schedule.distinct_ids(),
            cache: HashMap::new(),
        })
    }

    pub fn with_utility_model(mut self, model: UtilityModel) -> Self {
        self.model = model;
        self.cache.clear();
        self
    }

    pub fn with_recovery_rates(mut self, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != self.params.len() {
            return Err(Error::domain("recovery rate vector has the wrong length"));
        }
        self.recovery_rates = rates;
        self.cache.clear();
        Ok(self)
    }

    pub fn threat_grade(&mut self, inputs: &GradeInputs) -> Result<GradeList> {
        inputs.validate(self.schedule)?;
        let n = self.schedule.n_nodes();
        let budget = (inputs.u_total - inputs.u_floor) / inputs.i_bar;
        let top = ((budget * (1.0 + 1e-12)).floor() as usize).min(n);
        if top == 0 {
            return Err(Error::config(format!(
                "loss budget {} covers no node of mean utility {}",
                inputs.u_total - inputs.u_floor,
                inputs.i_bar
            )));
        }
        let candidates: Vec<usize> = (0..n).collect();
        let removed: Vec<Vec<usize>> = candidates.iter().map(|&i| vec![i]).collect();
        self.run(inputs, &candidates, &removed, Mode::Threat, top)
    }

    pub fn recovery_grade(
        &mut self,
        inputs: &GradeInputs,
        quarantined: &[usize],
    ) -> Result<GradeList> {
        inputs.validate(self.schedule)?;
        let n = self.schedule.n_nodes();
        let mut candidates = quarantined.to_vec();
        candidates.sort_unstable();
        candidates.dedup();
        if candidates.is_empty() {
            return Err(Error::domain(
                "recovery grading needs at least one quarantined node",
            ));
        }
        if let Some(&bad) = candidates.iter().find(|&&i| i >= n) {
            return Err(Error::domain(format!(
                "quarantined node {bad} does not exist"
            )));
        }
        let removed: Vec<Vec<usize>> = candidates
            .iter()
            .map(|&i| candidates.iter().copied().filter(|&j| j != i).collect())
            .collect();
        let top = candidates.len();
        self.run(inputs, &candidates, &removed, Mode::Recovery, top)
    }

    /// Fills the cache for every (period, removed set) the sweep may visit.
    fn prefetch(&mut self, k_start: usize, removed: &[Vec<usize>]) {
        let mut wanted: Vec<(usize, usize, Vec<usize>)> = Vec::new();
        let segs = self.schedule.segments();
        let mut seen_ids = Vec::new();
        for k in k_start..segs.len() {
            let id = self.matrix_ids[k];
            if seen_ids.contains(&id) {
                continue;
            }
            seen_ids.push(id);
            for r in removed {
                if !self.cache.contains_key(&(id, r.clone())) {
                    wanted.push((id, k, r.clone()));
                }
            }
        }
        let alphas = self.params.alphas();
        let (rates, weights, model) = (&self.recovery_rates, self.weights, self.model);
        let values: Vec<((usize, Vec<usize>), (f64, f64))> = wanted
            .into_par_iter()
            .map(|(id, k, r)| {
                let adj = &segs[k].adjacency;
                let mut keep = vec![true; adj.len()];
                r.iter().for_each(|&i| keep[i] = false);
                let radius = threshold_radius(&alphas, adj, rates, &keep)
                    .expect("rates validated with the parameters");
                let snap = GraphSnapshot {
                    adjacency: adj.clone(),
                    service_weights: weights.to_vec(),
                };
                let z = utility_of_kept(&snap, &keep, model);
                ((id, r), (radius, z))
            })
            .collect();
        self.cache.extend(values);
    }

    fn value(&self, k: usize, removed: &[usize]) -> (f64, f64) {
        self.cache[&(self.matrix_ids[k], removed.to_vec())]
    }

    fn initial_pressure(&self, inputs: &GradeInputs, candidates: &[usize]) -> Vec<f64> {
        let adj = self
            .schedule
            .adjacency_at(inputs.t)
            .expect("time validated with the inputs");
        let state = &inputs.state;
        if !inputs.worst_case {
            return candidates
                .iter()
                .map(|&i| neighbor_pressure(i, state, adj, self.params, inputs.t_w))
                .collect();
        }
        let btw = betweenness(adj);
        let max_b = btw.iter().cloned().fold(0.0, f64::max);
        let max_u = self.weights.iter().cloned().fold(0.0, f64::max);
        let norm = |x: f64, m: f64| if m > 0.0 { x / m } else { 0.0 };
        let score: Vec<f64> = (0..adj.len())
            .map(|j| norm(btw[j], max_b) + norm(self.weights[j], max_u))
            .collect();
        candidates
            .iter()
            .map(|&i| {
                let exposed = adj
                    .neighbors(i)
                    .iter()
                    .copied()
                    .filter(|&j| state.m[j] + state.s[j] < COMPROMISED_MASS)
                    .fold(None, |best: Option<usize>, j| match best {
                        Some(b) if score[b] >= score[j] => Some(b),
                        _ => Some(j),
                    });
                let mass = |l: usize| {
                    if Some(l) == exposed {
                        1.0
                    } else {
                        state.m[l] + state.s[l]
                    }
                };
                inputs.t_w
                    * adj
                        .neighbors(i)
                        .iter()
                        .map(|&j| {
                            let p = &self.params[j];
                            p.beta
                                + p.alpha * adj.neighbors(j).iter().map(|&l| mass(l)).sum::<f64>()
                        })
                        .sum::<f64>()
            })
            .collect()
    }

    fn run(
        &mut self,
        inputs: &GradeInputs,
        candidates: &[usize],
        removed: &[Vec<usize>],
        mode: Mode,
        top: usize,
    ) -> Result<GradeList> {
        let n = self.schedule.n_nodes();
        self.prefetch(inputs.k_start, removed);
        let seeds = self.initial_pressure(inputs, candidates);
        let periods = self.schedule.len();
        let budget = periods * (periods + 1) / 2;
        let mut pressure = vec![0.0; n];
        let mut iterations = vec![0; n];
        for (c, &i) in candidates.iter().enumerate() {
            let mut p = seeds[c];
            let (mut rho_eps, mut z_eps) = (0.0, 0.0);
            let mut k = inputs.k_start;
            let mut iters = 0;
            let mut backs = 0;
            let mut revisited = vec![false; periods];
            while k < periods {
                iters += 1;
                p += inputs.rho_phi * rho_eps + inputs.z_phi * z_eps;
                let (rho_k, z_k) = self.value(k, &removed[c]);
                let (rho_prev, z_prev) = if k == inputs.k_start {
                    (rho_k, z_k)
                } else {
                    self.value(k - 1, &removed[c])
                };
                let (d_rho, d_z) = (rho_k - rho_prev, z_k - z_prev);
                let gain = match mode {
                    Mode::Threat => inputs.rho_phi * d_rho - inputs.z_phi * d_z,
                    Mode::Recovery => inputs.z_phi * d_z - inputs.rho_phi * d_rho,
                };
                let may_backtrack = k != inputs.k_start
                    && !revisited[k]
                    && backs < inputs.max_backtracks
                    && iters + (periods - k + 1) <= budget;
                if gain > ADVANCE_MARGIN || !may_backtrack {
                    k += 1;
                } else {
                    rho_eps += d_rho;
                    z_eps += d_z;
                    revisited[k] = true;
                    backs += 1;
                    k -= 1;
                }
            }
            pressure[i] = p.max(0.0);
            iterations[i] = iters;
        }
        let mut ranking = candidates.to_vec();
        ranking.sort_by(|&a, &b| pressure[b].total_cmp(&pressure[a]).then(a.cmp(&b)));
        let total: f64 = ranking[..top].iter().map(|&i| pressure[i]).sum();
        let mut grades = vec![0.0; n];
        if total > 0.0 {
            for &i in &ranking {
                grades[i] = pressure[i] / total;
            }
        } else {
            for &i in &ranking[..top] {
                grades[i] = 1.0 / top as f64;
            }
        }
        Ok(GradeList {
            grades,
            ranking,
            top,
            pressure,
            iterations,
        })
    }
}

/// Threat grades with a throwaway cache.
pub fn threat_grade(
    inputs: &GradeInputs,
    schedule: &TopologySchedule,
    params: &NodeParams,
    service_weights: &[f64],
) -> Result<GradeList> {
    Grader::new(schedule, params, service_weights)?.threat_grade(inputs)
}

/// Recovery grades of the quarantined nodes with a throwaway cache.
pub fn recovery_grade(
    inputs: &GradeInputs,
    quarantined: &[usize],
    schedule: &TopologySchedule,
    params: &NodeParams,
    service_weights: &[f64],
) -> Result<GradeList> {
    Grader::new(schedule, params, service_weights)?.recovery_grade(inputs, quarantined)
}
