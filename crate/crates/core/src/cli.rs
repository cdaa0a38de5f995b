//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code: 0 on success, 1 on a usage
//! error, 2 on a runtime error or when the run finished with warnings.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::control::{forward_backward_sweep, BoundsSchedule, ControlProblem, SweepResult};
use crate::epidemic::{
    integrate_forward, simulate_markov, ControlTrajectory, MarkovOptions, TimeGrid,
};
use crate::error::{Error, Result};
use crate::game::{
    attacker_atoms, build_payoff_matrix, defender_atoms, fictitious_play, grade_inputs,
    pure_maximin, sequential_game_run, QUARANTINE_CANDIDATE_MASS,
};
use crate::grading::{GradeList, Grader};
use crate::impact::write_impact_csv;
use crate::metrics::summarize;
use crate::scenario::{
    baseline_record, compare, load_scenario, ppac_record, run_baseline, save_config,
    write_comparison, write_slot_grades, BaselineKind, Scenario,
};

#[derive(Debug, Parser)]
#[command(
    name = "apt-repair",
    version,
    about = "APT repair strategies on time-varying networks"
)]
struct Cli {
    /// Scenario config file (JSON).
    #[arg(long, global = true, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario: setting1, setting2 or setting3.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Largest integration step.
    #[arg(long, global = true, value_name = "FLOAT")]
    grid_step: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the resolved scenario and its topology schedule.
    Generate,
    /// Threat (and, if any node is quarantined, recovery) grades at one slot.
    Grade {
        #[arg(long, default_value_t = 0)]
        slot: usize,
    },
    /// One forward-backward sweep over the whole horizon.
    Solve,
    /// Payoff matrix of one slot and its equilibria.
    Game {
        #[arg(long, default_value_t = 0)]
        slot: usize,
        #[arg(long, default_value_t = 100_000)]
        iterations: usize,
    },
    /// The sequential attacker/defender game.
    Run,
    /// One baseline against its own greedy attacker.
    Baseline {
        #[arg(long, value_enum)]
        kind: Kind,
    },
    /// The sequential game and both baselines on one attacker trace.
    Compare,
    /// Monte-Carlo run of the stochastic chain under midpoint controls.
    Simulate {
        #[arg(long, default_value_t = 2000)]
        runs: usize,
        /// Let new compromises enter S directly with probability λ.
        #[arg(long)]
        severity_split: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Er,
    Qar,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(warnings) if warnings.is_empty() => 0,
        Ok(warnings) => {
            for w in warnings {
                eprintln!("warning: {w}");
            }
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn scenario(cli: &Cli) -> Result<Scenario> {
    let source = match (&cli.config, &cli.preset) {
        (Some(p), None) => p.to_string_lossy().into_owned(),
        (None, Some(name)) => name.clone(),
        (None, None) => return Err(Error::config("pass either --config PATH or --preset NAME")),
        (Some(_), Some(_)) => unreachable!("clap rejects both"),
    };
    let mut sc = load_scenario(&source, cli.seed)?;
    if let Some(h) = cli.grid_step {
        sc.sweep.grid_step = h;
        sc.validate()?;
    }
    Ok(sc)
}

fn out_dir(cli: &Cli, sc: &Scenario) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| sc.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn execute(cli: &Cli) -> Result<Vec<String>> {
    let sc = scenario(cli)?;
    let dir = out_dir(cli, &sc)?;
    let mut warnings = Vec::new();
    match &cli.command {
        Command::Generate => {
            save_config(&sc.to_config(), &dir.join("scenario.json"))?;
            write_json(&dir.join("schedule.json"), &sc.schedule)?;
            for (k, seg) in sc.schedule.segments().iter().enumerate() {
                fs::write(
                    dir.join(format!("edges_{k}.txt")),
                    seg.adjacency.to_edge_list(),
                )?;
            }
        }
        Command::Grade { slot } => {
            let (threat, recovery) = grade_at(&sc, *slot)?;
            threat.write_csv(fs::File::create(dir.join("grades.csv"))?)?;
            if let Some(r) = &recovery {
                r.write_csv(fs::File::create(dir.join("recovery_grades.csv"))?)?;
            }
            #[derive(Serialize)]
            struct Out<'a> {
                slot: usize,
                threat: &'a GradeList,
                recovery: &'a Option<GradeList>,
            }
            write_json(
                &dir.join("grades.json"),
                &Out {
                    slot: *slot,
                    threat: &threat,
                    recovery: &recovery,
                },
            )?;
        }
        Command::Solve => {
            let result = solve(&sc)?;
            if !result.converged {
                warnings.push(format!(
                    "sweep stopped after {} iterations without converging",
                    result.iterations
                ));
            }
            result
                .control
                .write_csv(fs::File::create(dir.join("strategy.csv"))?)?;
            result
                .states
                .write_csv(fs::File::create(dir.join("states.csv"))?)?;
            write_impact_csv(
                &result.states,
                &result.control,
                &sc.params,
                &sc.costs,
                fs::File::create(dir.join("impact.csv"))?,
            )?;
            write_json(
                &dir.join("summary.json"),
                &serde_json::json!({
                    "iterations": result.iterations,
                    "converged": result.converged,
                    "impact": result.impact,
                    "log": result.log,
                }),
            )?;
        }
        Command::Game { slot, iterations } => {
            let adjacency = &sc
                .schedule
                .segments()
                .get(*slot)
                .ok_or_else(|| Error::domain(format!("slot {slot} out of range")))?
                .adjacency;
            let attackers = attacker_atoms(&sc.params, adjacency);
            let defenders = defender_atoms(&sc.params);
            let matrix = build_payoff_matrix(&sc, *slot, &sc.e0, &attackers, &defenders)?;
            let gain = matrix.defender_gain();
            let maximin = pure_maximin(&gain)?;
            let mixed = fictitious_play(&gain, *iterations)?;
            write_json(
                &dir.join("game.json"),
                &serde_json::json!({
                    "slot": slot,
                    "defender_atoms": defenders.iter().map(|a| &a.name).collect::<Vec<_>>(),
                    "attacker_atoms": attackers.iter().map(|a| &a.name).collect::<Vec<_>>(),
                    "loss": matrix,
                    "pure_maximin": maximin,
                    "fictitious_play": mixed,
                }),
            )?;
        }
        Command::Run => {
            let run = sequential_game_run(&sc)?;
            warnings.extend(run.warnings.iter().cloned());
            run.control
                .write_csv(fs::File::create(dir.join("strategy.csv"))?)?;
            run.states
                .write_csv(fs::File::create(dir.join("states.csv"))?)?;
            run.write_slots_csv(fs::File::create(dir.join("slots.csv"))?)?;
            write_slot_grades(&run, fs::File::create(dir.join("grades.csv"))?)?;
            let metrics = summarize(&ppac_record(&sc, &run)?)?;
            write_json(&dir.join("metrics.json"), &metrics)?;
            write_json(
                &dir.join("run.json"),
                &serde_json::json!({ "impact": run.impact, "slots": run.slots }),
            )?;
        }
        Command::Baseline { kind } => {
            let kind = match kind {
                Kind::Er => BaselineKind::Er,
                Kind::Qar => BaselineKind::Qar,
            };
            let run = run_baseline(&sc, kind, None)?;
            run.control
                .write_csv(fs::File::create(dir.join("strategy.csv"))?)?;
            run.states
                .write_csv(fs::File::create(dir.join("states.csv"))?)?;
            let metrics = summarize(&baseline_record(&sc, &run)?)?;
            write_json(&dir.join("metrics.json"), &metrics)?;
            write_json(
                &dir.join("baseline.json"),
                &serde_json::json!({
                    "method": kind.label(),
                    "impact": run.impact,
                    "slot_impacts": run.slot_impacts,
                    "attacker_trace": run.attacker_trace,
                }),
            )?;
        }
        Command::Compare => {
            let cmp = compare(&sc)?;
            write_comparison(&cmp, &dir)?;
            for m in &cmp.report.methods {
                warnings.extend(m.warnings.iter().map(|w| format!("{}: {w}", m.method)));
            }
        }
        Command::Simulate {
            runs,
            severity_split,
        } => {
            let grid = TimeGrid::for_schedule(&sc.schedule, sc.sweep.grid_step)?;
            let control =
                BoundsSchedule::from_params(&sc.params, sc.schedule.len()).midpoint_control(&grid);
            let mean = integrate_forward(&sc.e0, &control, &sc.schedule, &sc.params)?;
            let options = MarkovOptions {
                severity_split: *severity_split,
            };
            let seed = cli.seed.unwrap_or(sc.seed);
            let freq = simulate_markov(
                &sc.params,
                &control,
                &sc.schedule,
                &sc.e0,
                *runs,
                seed,
                options,
            )?;
            let mut gap: f64 = 0.0;
            for (a, b) in freq.states.iter().zip(&mean.states) {
                for i in 0..a.len() {
                    gap = gap
                        .max((a.h[i] - b.h[i]).abs())
                        .max((a.m[i] - b.m[i]).abs())
                        .max((a.s[i] - b.s[i]).abs());
                }
            }
            let markov = crate::epidemic::StateTrajectory {
                grid: freq.grid.clone(),
                states: freq.states,
                max_box_violation: 0.0,
            };
            markov.write_csv(fs::File::create(dir.join("markov.csv"))?)?;
            mean.write_csv(fs::File::create(dir.join("states.csv"))?)?;
            write_json(
                &dir.join("simulate.json"),
                &serde_json::json!({
                    "runs": runs,
                    "seed": seed,
                    "max_abs_gap": gap,
                }),
            )?;
        }
    }
    Ok(warnings)
}

/// Grades at the start of `slot` from the scenario's initial state.
pub fn grade_at(sc: &Scenario, slot: usize) -> Result<(GradeList, Option<GradeList>)> {
    let t = sc
        .schedule
        .intervals()
        .get(slot)
        .ok_or_else(|| Error::domain(format!("slot {slot} out of range")))?
        .0;
    let mut grader = Grader::new(&sc.schedule, &sc.params, &sc.service_weights)?;
    let inputs = grade_inputs(sc, t, slot, &sc.e0);
    let threat = grader.threat_grade(&inputs)?;
    let quarantined: Vec<usize> = (0..sc.e0.len())
        .filter(|&i| sc.e0.q(i) >= QUARANTINE_CANDIDATE_MASS)
        .collect();
    let recovery = if quarantined.is_empty() {
        None
    } else {
        Some(grader.recovery_grade(&inputs, &quarantined)?)
    };
    Ok((threat, recovery))
}

/// One sweep over the whole horizon with per-segment graded bounds, all
/// grades taken from the initial state.
pub fn solve(sc: &Scenario) -> Result<SweepResult> {
    let mut bounds = BoundsSchedule::from_params(&sc.params, sc.schedule.len());
    for k in 0..sc.schedule.len() {
        let (threat, recovery) = grade_at(sc, k)?;
        bounds.modulate_lambda(k, &threat.grades);
        if let Some(r) = recovery {
            bounds.modulate_gamma(k, &r.candidate_grades());
        }
    }
    let grid = TimeGrid::for_schedule(&sc.schedule, sc.sweep.grid_step)?;
    let initial: ControlTrajectory = bounds.midpoint_control(&grid);
    let problem = ControlProblem {
        schedule: sc.schedule.clone(),
        params: sc.params.clone(),
        costs: sc.costs.clone(),
        e0: sc.e0.clone(),
        service_weights: sc.service_weights.clone(),
        service_floor: Some(sc.u_floor),
        bounds,
    };
    forward_backward_sweep(&problem, &initial, &sc.sweep)
}
