//! Scenario configuration, the three built-in presets, the ER-adapted and
//! QAR-adapted baselines and the end-to-end comparison.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::SweepSettings;
use crate::epidemic::{
    ControlTrajectory, ExpectedState, Interval, NodeControl, NodeParam, NodeParams, StateTrajectory,
};
use crate::error::{Error, Result};
use crate::game::{
    constant_control_impact, greedy_attacker, join_slots, sequential_game_run, SequentialRun,
};
use crate::impact::{CostFamily, CostFunctions, ImpactBreakdown};
use crate::metrics::{summarize, CountMode, MetricsSummary, RunRecord};
use crate::topology::{generate_schedule, GraphModel, ScheduleKind, TopologySchedule};

pub const SCHEMA_VERSION: u32 = 1;

pub const PRESETS: [&str; 3] = ["setting1", "setting2", "setting3"];

/// Seed used by presets when none is given.
pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradingSettings {
    pub t_w: f64,
    pub rho_phi: f64,
    pub z_phi: f64,
    /// `None` leaves only the per-node iteration budget.
    pub max_backtracks: Option<usize>,
    pub worst_case: bool,
}

impl Default for GradingSettings {
    fn default() -> Self {
        Self {
            t_w: 1.0,
            rho_phi: 0.5,
            z_phi: 0.5,
            max_backtracks: None,
            worst_case: true,
        }
    }
}

/// Where the topology schedule comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum ScheduleSource {
    Inline {
        schedule: TopologySchedule,
    },
    /// JSON schedule file, relative to the config file.
    File {
        path: PathBuf,
    },
    /// Small-world schedule seeded with the scenario seed.
    Generate {
        #[serde(flatten)]
        kind: ScheduleKind,
        intervals: Vec<(f64, f64)>,
        #[serde(default)]
        model: GraphModel,
    },
}

/// On-disk scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub schedule: ScheduleSource,
    pub params: NodeParams,
    pub costs: CostFunctions,
    pub e0: ExpectedState,
    pub service_weights: Vec<f64>,
    #[serde(rename = "U")]
    pub u_total: f64,
    #[serde(rename = "U_n")]
    pub u_floor: f64,
    #[serde(default)]
    pub grading: GradingSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// A fully resolved scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub schedule: TopologySchedule,
    pub params: NodeParams,
    pub costs: CostFunctions,
    pub e0: ExpectedState,
    pub service_weights: Vec<f64>,
    pub u_total: f64,
    pub u_floor: f64,
    pub grading: GradingSettings,
    pub sweep: SweepSettings,
    pub output_dir: Option<PathBuf>,
}

impl Scenario {
    /// Resolves the schedule source; relative file paths start at `base`.
    pub fn from_config(cfg: ScenarioConfig, base: &Path) -> Result<Self> {
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        let n = cfg.params.len();
        let schedule = match cfg.schedule {
            ScheduleSource::Inline { schedule } => schedule,
            ScheduleSource::File { path } => {
                let path = base.join(path);
                let text = fs::read_to_string(&path)?;
                parse_json(&text)?
            }
            ScheduleSource::Generate {
                kind,
                intervals,
                model,
            } => generate_schedule(kind, n, &intervals, model, cfg.seed)?,
        };
        let sc = Self {
            name: cfg.name,
            seed: cfg.seed,
            schedule,
            params: cfg.params,
            costs: cfg.costs,
            e0: cfg.e0,
            service_weights: cfg.service_weights,
            u_total: cfg.u_total,
            u_floor: cfg.u_floor,
            grading: cfg.grading,
            sweep: cfg.sweep,
            output_dir: cfg.output_dir,
        };
        sc.validate()?;
        Ok(sc)
    }

    /// The same scenario with the schedule inlined.
    pub fn to_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            schema_version: SCHEMA_VERSION,
            name: self.name.clone(),
            seed: self.seed,
            schedule: ScheduleSource::Inline {
                schedule: self.schedule.clone(),
            },
            params: self.params.clone(),
            costs: self.costs.clone(),
            e0: self.e0.clone(),
            service_weights: self.service_weights.clone(),
            u_total: self.u_total,
            u_floor: self.u_floor,
            grading: self.grading,
            sweep: self.sweep,
            output_dir: self.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.params.len();
        if self.schedule.n_nodes() != n
            || self.costs.len() != n
            || self.e0.len() != n
            || self.service_weights.len() != n
        {
            return Err(Error::config(format!(
                "node counts disagree: schedule {}, params {n}, costs {}, e0 {}, service_weights {}",
                self.schedule.n_nodes(),
                self.costs.len(),
                self.e0.len(),
                self.service_weights.len()
            )));
        }
        self.e0.validate(1e-9)?;
        if self
            .service_weights
            .iter()
            .any(|u| !u.is_finite() || *u < 0.0)
        {
            return Err(Error::config(
                "service weights must be finite and non-negative",
            ));
        }
        let sum: f64 = self.service_weights.iter().sum();
        if (sum - self.u_total).abs() > 1e-9 * self.u_total.abs().max(1.0) {
            return Err(Error::config(format!(
                "U = {} but the service weights sum to {sum}",
                self.u_total
            )));
        }
        if !(self.u_floor > 0.0 && self.u_floor < self.u_total) {
            return Err(Error::config(format!(
                "U_n = {} must lie strictly between 0 and U = {}",
                self.u_floor, self.u_total
            )));
        }
        self.sweep.validate()
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    parse_json(text)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn save_config(cfg: &ScenarioConfig, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, cfg)?;
    writeln!(f)?;
    Ok(())
}

/// A preset name, or else a path to a config file.
pub fn load_scenario(source: &str, seed: Option<u64>) -> Result<Scenario> {
    if PRESETS.contains(&source) {
        return preset(source, seed.unwrap_or(DEFAULT_SEED));
    }
    let path = Path::new(source);
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Scenario::from_config(cfg, path.parent().unwrap_or(Path::new(".")))
}

const PRESET_NODES: usize = 100;

/// One of the built-in settings on 100-node small-world graphs.
///
/// Per-node weights are drawn from (0, 1] in the order a1, a2, b, u (all of
/// one before the next), from the seed's second ChaCha stream; the schedule
/// uses the first. The service weights are rescaled to sum to U = 1000.
pub fn preset(name: &str, seed: u64) -> Result<Scenario> {
    let (kind, intervals): (ScheduleKind, Vec<(f64, f64)>) = match name {
        "setting1" => (
            ScheduleKind::Static,
            vec![
                (0.0, 2.0),
                (2.0, 3.0),
                (3.0, 4.0),
                (4.0, 6.0),
                (6.0, 8.0),
                (8.0, 10.0),
                (10.0, 12.0),
            ],
        ),
        "setting2" => (
            ScheduleKind::Periodic { period: 2 },
            vec![(0.0, 2.0), (2.0, 3.0), (3.0, 4.0), (4.0, 6.0)],
        ),
        "setting3" => (
            ScheduleKind::General,
            vec![
                (0.0, 2.0),
                (2.0, 5.0),
                (5.0, 6.0),
                (6.0, 9.0),
                (9.0, 11.0),
                (11.0, 12.0),
            ],
        ),
        _ => {
            return Err(Error::config(format!(
                "unknown preset `{name}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    let n = PRESET_NODES;
    let u_total = 1000.0;
    let schedule = generate_schedule(kind, n, &intervals, GraphModel::default(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut draw = || -> Vec<f64> { (0..n).map(|_| 1.0 - rng.gen::<f64>()).collect() };
    let (a1, a2, b, raw_u) = (draw(), draw(), draw(), draw());
    let total: f64 = raw_u.iter().sum();
    let service_weights: Vec<f64> = raw_u.iter().map(|u| u * u_total / total).collect();
    let params = NodeParams::new(
        (0..n)
            .map(|i| NodeParam {
                alpha: 0.1,
                beta: 0.1,
                a1: a1[i],
                a2: a2[i],
                b: b[i],
                lambda: Interval::new(0.1, 0.6),
                delta: Interval::new(0.1, 0.4),
                gamma: Interval::new(0.1, 0.5),
            })
            .collect(),
    )?;
    let sc = Scenario {
        name: name.to_string(),
        seed,
        schedule,
        params,
        costs: CostFunctions::uniform(n, CostFamily::Sqrt),
        e0: ExpectedState::uniform(n, 0.8, 0.1, 0.1)?,
        u_total: service_weights.iter().sum(),
        service_weights,
        u_floor: 0.8 * u_total,
        grading: GradingSettings::default(),
        sweep: SweepSettings::default(),
        output_dir: None,
    };
    sc.validate()?;
    Ok(sc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    /// Maximum quarantine and recovery rates; every operation is booked as a
    /// repair.
    #[serde(rename = "ER-adapted")]
    Er,
    /// Maximum quarantine rate, minimum recovery rate.
    #[serde(rename = "QAR-adapted")]
    Qar,
}

impl BaselineKind {
    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::Er => "ER-adapted",
            BaselineKind::Qar => "QAR-adapted",
        }
    }
}

/// A run of fixed per-slot controls.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRun {
    pub kind: BaselineKind,
    pub attacker_trace: Vec<Vec<f64>>,
    pub control: ControlTrajectory,
    pub states: StateTrajectory,
    pub slot_impacts: Vec<ImpactBreakdown>,
    pub impact: ImpactBreakdown,
}

/// Baseline controls slot by slot. With `trace`, λ in slot `k` is
/// `trace[k]`; otherwise the greedy attacker plays against the baseline
/// itself.
pub fn run_baseline(
    scenario: &Scenario,
    kind: BaselineKind,
    trace: Option<&[Vec<f64>]>,
) -> Result<BaselineRun> {
    let sched = &scenario.schedule;
    let p = &scenario.params;
    if let Some(t) = trace {
        if t.len() != sched.len() || t.iter().any(|l| l.len() != p.len()) {
            return Err(Error::domain("attacker trace does not match the scenario"));
        }
    }
    let delta: Vec<f64> = p.iter().map(|p| p.delta.hi).collect();
    let gamma: Vec<f64> = p
        .iter()
        .map(|p| match kind {
            BaselineKind::Er => p.gamma.hi,
            BaselineKind::Qar => p.gamma.lo,
        })
        .collect();
    let lambda_hi: Vec<f64> = p.iter().map(|p| p.lambda.hi).collect();
    let mut entry = scenario.e0.clone();
    let mut parts = Vec::with_capacity(sched.len());
    let mut slot_impacts = Vec::with_capacity(sched.len());
    let mut attacker_trace = Vec::with_capacity(sched.len());
    for k in 0..sched.len() {
        let lambda = match trace {
            Some(t) => t[k].clone(),
            None => {
                let prev: Vec<f64> = if k == 0 {
                    p.iter().map(|p| p.delta.lo).collect()
                } else {
                    delta.clone()
                };
                greedy_attacker(&entry, p, &scenario.costs, &prev, &lambda_hi)
            }
        };
        let controls = (0..p.len())
            .map(|i| NodeControl {
                lambda: lambda[i],
                delta: delta[i],
                gamma: gamma[i],
            })
            .collect();
        let (c, s, imp) = constant_control_impact(
            &sched.slot(k)?,
            p,
            &scenario.costs,
            &entry,
            controls,
            scenario.sweep.grid_step,
        )?;
        entry = s.final_state().clone();
        parts.push((c, s));
        slot_impacts.push(imp);
        attacker_trace.push(lambda);
    }
    let (control, states) = join_slots(sched, parts)?;
    Ok(BaselineRun {
        kind,
        attacker_trace,
        control,
        states,
        impact: slot_impacts.iter().copied().sum(),
        slot_impacts,
    })
}

/// SHA-256 of the attacker trace's JSON encoding, hex.
pub fn trace_hash(trace: &[Vec<f64>]) -> String {
    let bytes = serde_json::to_vec(trace).expect("a trace of floats always serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn ppac_record(scenario: &Scenario, run: &SequentialRun) -> Result<RunRecord> {
    RunRecord::new(
        "PPAC",
        run.states.clone(),
        run.control.clone(),
        scenario.service_weights.clone(),
        scenario.u_floor,
        scenario.schedule.intervals(),
        CountMode::Expected,
        false,
    )
}

pub fn baseline_record(scenario: &Scenario, run: &BaselineRun) -> Result<RunRecord> {
    RunRecord::new(
        run.kind.label(),
        run.states.clone(),
        run.control.clone(),
        scenario.service_weights.clone(),
        scenario.u_floor,
        scenario.schedule.intervals(),
        CountMode::Expected,
        run.kind == BaselineKind::Er,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub impact: ImpactBreakdown,
    pub slot_impacts: Vec<ImpactBreakdown>,
    pub metrics: MetricsSummary,
    pub attacker_trace_sha256: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenario: String,
    pub seed: u64,
    pub n_nodes: usize,
    pub slots: Vec<(f64, f64)>,
    pub methods: Vec<MethodReport>,
}

/// Everything `compare` produces, before it is written out.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: ComparisonReport,
    pub ppac: SequentialRun,
    pub records: Vec<RunRecord>,
}

fn method_report(
    record: &RunRecord,
    impact: ImpactBreakdown,
    slot_impacts: Vec<ImpactBreakdown>,
    trace: &[Vec<f64>],
    warnings: Vec<String>,
) -> Result<MethodReport> {
    let metrics = summarize(record)?;
    Ok(MethodReport {
        method: record.method.clone(),
        impact,
        slot_impacts,
        metrics,
        attacker_trace_sha256: trace_hash(trace),
        warnings,
    })
}

/// PPAC through the sequential game, then both baselines against the same
/// attacker trace.
pub fn compare(scenario: &Scenario) -> Result<Comparison> {
    let ppac = sequential_game_run(scenario)?;
    let trace = ppac.attacker_trace();
    let (er, qar) = rayon::join(
        || run_baseline(scenario, BaselineKind::Er, Some(&trace)),
        || run_baseline(scenario, BaselineKind::Qar, Some(&trace)),
    );
    let (er, qar) = (er?, qar?);
    let ppac_rec = ppac_record(scenario, &ppac)?;
    let mut methods = vec![method_report(
        &ppac_rec,
        ppac.impact,
        ppac.slots.iter().map(|s| s.impact).collect(),
        &trace,
        ppac.warnings.clone(),
    )?];
    let mut records = vec![ppac_rec];
    for b in [&er, &qar] {
        let rec = baseline_record(scenario, b)?;
        methods.push(method_report(
            &rec,
            b.impact,
            b.slot_impacts.clone(),
            &b.attacker_trace,
            Vec::new(),
        )?);
        records.push(rec);
    }
    Ok(Comparison {
        report: ComparisonReport {
            scenario: scenario.name.clone(),
            seed: scenario.seed,
            n_nodes: scenario.schedule.n_nodes(),
            slots: scenario.schedule.intervals(),
            methods,
        },
        ppac,
        records,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

/// CSV with columns `slot,kind,node,grade,rank` for every graded slot.
pub fn write_slot_grades<W: Write>(run: &SequentialRun, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["slot", "kind", "node", "grade", "rank"])?;
    for s in &run.slots {
        let lists = [
            ("threat", Some(&s.threat)),
            ("recovery", s.recovery.as_ref()),
        ];
        for (kind, list) in lists {
            let Some(list) = list else { continue };
            let mut rank = vec![None; list.grades.len()];
            for (r, &i) in list.ranking.iter().enumerate() {
                rank[i] = Some(r + 1);
            }
            for &i in &list.ranking {
                w.serialize((s.slot, kind, i, list.grades[i], rank[i]))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json`, `metrics.json` and the CSV artifacts into `dir`.
pub fn write_comparison(cmp: &Comparison, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), &cmp.report)?;
    let metrics: serde_json::Map<String, serde_json::Value> = cmp
        .report
        .methods
        .iter()
        .map(|m| Ok((m.method.clone(), serde_json::to_value(m.metrics)?)))
        .collect::<Result<_>>()?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    cmp.ppac
        .control
        .write_csv(fs::File::create(dir.join("strategy.csv"))?)?;
    cmp.ppac
        .states
        .write_csv(fs::File::create(dir.join("states.csv"))?)?;
    write_slot_grades(&cmp.ppac, fs::File::create(dir.join("grades.csv"))?)?;
    for (file, quarantine) in [
        ("series_repairs.csv", false),
        ("series_quarantine.csv", true),
    ] {
        let mut w = csv::Writer::from_writer(fs::File::create(dir.join(file))?);
        let col = if quarantine { "N_q" } else { "N_r" };
        w.write_record(["method", "slot", "t_start", "t_end", col])?;
        for r in &cmp.records {
            r.write_counts_csv(&mut w, quarantine)?;
        }
        w.flush()?;
    }
    let mut w = csv::Writer::from_writer(fs::File::create(dir.join("series_service.csv"))?);
    w.write_record(["method", "time", "utility"])?;
    for r in &cmp.records {
        r.write_service_csv(&mut w)?;
    }
    w.flush()?;
    Ok(())
}
