//! Grading fixtures shared by the integration tests.

use apt_repair::epidemic::{ExpectedState, Interval, NodeParam, NodeParams};
use apt_repair::grading::GradeInputs;
use apt_repair::topology::{Adjacency, Segment, TopologySchedule};

pub struct Fixture {
    pub n: usize,
    pub periods: Vec<Vec<(usize, usize)>>,
    pub h: Vec<f64>,
    pub m: Vec<f64>,
    pub s: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub rec: Vec<f64>,
    pub w: Vec<f64>,
    pub u: f64,
    pub un: f64,
}

impl Fixture {
    pub fn schedule(&self) -> TopologySchedule {
        let segs = self
            .periods
            .iter()
            .enumerate()
            .map(|(k, e)| Segment {
                t_start: k as f64,
                t_end: (k + 1) as f64,
                adjacency: Adjacency::from_edges(self.n, e).unwrap(),
            })
            .collect();
        TopologySchedule::new(self.n, segs).unwrap()
    }

    pub fn params(&self) -> NodeParams {
        NodeParams::new(
            (0..self.n)
                .map(|i| NodeParam {
                    alpha: self.alpha[i],
                    beta: self.beta[i],
                    a1: 0.5,
                    a2: 0.8,
                    b: 0.3,
                    lambda: Interval::new(0.1, 0.6),
                    delta: Interval::new(0.1, self.rec[i]),
                    gamma: Interval::new(0.1, 0.5),
                })
                .collect(),
        )
        .unwrap()
    }

    pub fn inputs(&self) -> GradeInputs {
        GradeInputs {
            t: 0.0,
            state: ExpectedState::new(self.h.clone(), self.m.clone(), self.s.clone()).unwrap(),
            u_total: self.u,
            u_floor: self.un,
            i_bar: self.u / self.n as f64,
            k_start: 0,
            t_w: 1.0,
            rho_phi: 0.5,
            z_phi: 0.5,
            max_backtracks: usize::MAX,
            worst_case: true,
        }
    }
}

pub fn path4(periods: Vec<Vec<(usize, usize)>>) -> Fixture {
    Fixture {
        n: 4,
        periods,
        h: vec![0.9, 0.6, 0.7, 0.8],
        m: vec![0.05, 0.3, 0.1, 0.1],
        s: vec![0.05, 0.1, 0.2, 0.0],
        alpha: vec![0.1, 0.2, 0.15, 0.1],
        beta: vec![0.1, 0.05, 0.1, 0.2],
        rec: vec![0.4, 0.3, 0.4, 0.5],
        w: vec![100.0, 300.0, 250.0, 350.0],
        u: 1000.0,
        un: 500.0,
    }
}

pub fn path4_two() -> Fixture {
    path4(vec![
        vec![(0, 1), (1, 2), (2, 3)],
        vec![(0, 1), (1, 2), (1, 3)],
    ])
}

pub fn path4_four() -> Fixture {
    path4(vec![
        vec![(0, 1), (1, 2), (2, 3)],
        vec![(0, 1), (1, 2), (1, 3)],
        vec![(0, 1), (1, 2), (2, 3), (0, 3)],
        vec![(0, 2), (1, 2), (2, 3)],
    ])
}

pub fn five() -> Fixture {
    Fixture {
        n: 5,
        periods: vec![
            vec![(0, 1), (1, 2), (2, 3), (3, 4), (1, 3)],
            vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)],
        ],
        h: vec![0.7, 0.4, 0.8, 0.6, 0.5],
        m: vec![0.1, 0.1, 0.1, 0.2, 0.1],
        s: vec![0.1, 0.2, 0.05, 0.1, 0.2],
        alpha: vec![0.1, 0.1, 0.2, 0.1, 0.15],
        beta: vec![0.1, 0.1, 0.1, 0.05, 0.1],
        rec: vec![0.4, 0.4, 0.3, 0.4, 0.4],
        w: vec![150.0, 250.0, 200.0, 100.0, 300.0],
        u: 1000.0,
        un: 800.0,
    }
}

/// Values frozen from `tests/oracles/grading_trace.py`.
pub mod frozen {
    pub const PATH4_PRESSURE: [f64; 4] = [0.13, 0.315, 0.36, 0.175];
    pub const PATH4_RANKING: [usize; 4] = [2, 1, 3, 0];
    pub const PATH4_GRADES: [f64; 4] = [
        0.1925925925925926,
        0.4666666666666666,
        0.5333333333333333,
        0.25925925925925924,
    ];
    pub const PATH4_ITERATIONS: [usize; 4] = [2, 2, 2, 2];
    pub const PATH4_LONG_PRESSURE: [f64; 4] = [
        0.11513351970692276,
        1167.264561382664,
        750.6391208779668,
        0.175,
    ];
    pub const PATH4_LONG_RANKING: [usize; 4] = [1, 2, 3, 0];
    pub const PATH4_LONG_GRADES: [f64; 4] = [
        6.003091853456114e-05,
        0.6086147975933862,
        0.39138520240661373,
        9.12454580585234e-05,
    ];
    pub const PATH4_LONG_ITERATIONS: [usize; 4] = [8, 8, 8, 8];
    pub const FIVE_RANKING: [usize; 2] = [1, 4];
    pub const FIVE_GRADES: [f64; 5] = [0.0, 0.831081081081081, 0.0, 0.0, 0.16891891891891891];
}

pub fn close(got: &[f64], want: &[f64]) -> bool {
    got.len() == want.len()
        && got
            .iter()
            .zip(want)
            .all(|(g, w)| (g - w).abs() <= 1e-12 * w.abs().max(1.0))
}
