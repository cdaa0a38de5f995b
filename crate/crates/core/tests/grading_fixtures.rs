//! Grading on small fixtures, against values frozen from
//! `tests/oracles/grading_trace.py`.

#[allow(dead_code)]
mod common;

use apt_repair::grading::{recovery_grade, threat_grade};
use common::grading::{close, five, frozen, path4_four, path4_two};

#[test]
fn threat_path4_two_periods() {
    let fx = path4_two();
    let g = threat_grade(&fx.inputs(), &fx.schedule(), &fx.params(), &fx.w).unwrap();
    assert_eq!(g.top, 2);
    assert_eq!(g.ranking, frozen::PATH4_RANKING);
    assert!(
        close(&g.pressure, &frozen::PATH4_PRESSURE),
        "{:?}",
        g.pressure
    );
    assert!(close(&g.grades, &frozen::PATH4_GRADES), "{:?}", g.grades);
    assert_eq!(g.iterations, frozen::PATH4_ITERATIONS);
}

#[test]
fn threat_path4_four_periods_with_backtracking() {
    let fx = path4_four();
    let g = threat_grade(&fx.inputs(), &fx.schedule(), &fx.params(), &fx.w).unwrap();
    assert_eq!(g.ranking, frozen::PATH4_LONG_RANKING);
    assert!(
        close(&g.pressure, &frozen::PATH4_LONG_PRESSURE),
        "{:?}",
        g.pressure
    );
    assert!(
        close(&g.grades, &frozen::PATH4_LONG_GRADES),
        "{:?}",
        g.grades
    );
    assert_eq!(g.iterations, frozen::PATH4_LONG_ITERATIONS);
}

#[test]
fn recovery_five_nodes_two_quarantined() {
    let fx = five();
    let g = recovery_grade(&fx.inputs(), &[4, 1], &fx.schedule(), &fx.params(), &fx.w).unwrap();
    assert_eq!(g.ranking, frozen::FIVE_RANKING);
    assert!(close(&g.grades, &frozen::FIVE_GRADES), "{:?}", g.grades);
}
