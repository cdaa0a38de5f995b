//! Seeded control problems shared by the integration tests.

use apt_repair::control::{BoundsSchedule, ControlProblem};
use apt_repair::epidemic::{ExpectedState, Interval, NodeParam, NodeParams};
use apt_repair::impact::{CostFamily, CostFunctions};
use apt_repair::topology::{generate_schedule, GraphModel, ScheduleKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIXTURE_SEED: u64 = 42;

/// Ten nodes, two small-world segments over [0, 4], sqrt costs, weights drawn
/// from (0, 1], uniform service weights and a floor at 80%.
pub fn n10_fixture() -> ControlProblem {
    let n = 10;
    let schedule = generate_schedule(
        ScheduleKind::General,
        n,
        &[(0.0, 2.0), (2.0, 4.0)],
        GraphModel::default(),
        FIXTURE_SEED,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(FIXTURE_SEED);
    let params = NodeParams::new(
        (0..n)
            .map(|_| NodeParam {
                alpha: 0.1,
                beta: 0.1,
                a1: 1.0 - rng.gen::<f64>(),
                a2: 1.0 - rng.gen::<f64>(),
                b: 1.0 - rng.gen::<f64>(),
                lambda: Interval::new(0.1, 0.6),
                delta: Interval::new(0.1, 0.4),
                gamma: Interval::new(0.1, 0.5),
            })
            .collect(),
    )
    .unwrap();
    ControlProblem {
        bounds: BoundsSchedule::from_params(&params, schedule.len()),
        schedule,
        params,
        costs: CostFunctions::uniform(n, CostFamily::Sqrt),
        e0: ExpectedState::uniform(n, 0.8, 0.1, 0.1).unwrap(),
        service_weights: vec![100.0; n],
        service_floor: Some(800.0),
    }
}
