use std::hint::black_box;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::split::Label;

const CALIBRATION_POINTS: usize = 1025;

/// Synthetic compute attached to every oracle evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "ms", rename_all = "lowercase")]
pub enum TaskCost {
    Free,
    /// A fixed number of floating point operations, calibrated so that one
    /// evaluation takes about the given time on an idle core. Threads that
    /// share a core really do share the work, so this is the cost model for
    /// scaling measurements.
    Work(f64),
    /// Sleeps for the given time. Costs no CPU, so it measures scheduling
    /// and coordination overhead rather than compute throughput.
    Sleep(f64),
}

impl TaskCost {
    pub fn describe(&self) -> String {
        match self {
            TaskCost::Free => "free".into(),
            TaskCost::Work(ms) => format!("work {ms} ms"),
            TaskCost::Sleep(ms) => format!("sleep {ms} ms"),
        }
    }

    pub fn nominal(&self) -> Duration {
        match *self {
            TaskCost::Free => Duration::ZERO,
            TaskCost::Work(ms) | TaskCost::Sleep(ms) => Duration::from_secs_f64(ms / 1e3),
        }
    }

    pub fn spend(&self) {
        match *self {
            TaskCost::Free => {}
            TaskCost::Work(ms) => {
                burn((ms / 1e3 * work_rate()) as u64);
            }
            TaskCost::Sleep(ms) => std::thread::sleep(Duration::from_secs_f64(ms / 1e3)),
        }
    }
}

fn burn(iters: u64) -> f64 {
    let mut x = 1.0f64;
    for i in 0..iters {
        x = x.mul_add(0.999_999_9, (i & 7) as f64 * 1e-9);
    }
    black_box(x)
}

/// Loop iterations per second, measured once per process.
pub fn work_rate() -> f64 {
    static RATE: OnceLock<f64> = OnceLock::new();
    *RATE.get_or_init(|| {
        burn(1 << 16);
        let mut best = f64::INFINITY;
        let iters = 1u64 << 21;
        // best of several trials discounts preemption
        for _ in 0..5 {
            let t = Instant::now();
            burn(iters);
            best = best.min(t.elapsed().as_secs_f64());
        }
        iters as f64 / best.max(1e-9)
    })
}

/// Seeded synthetic stability margin. A point is stable iff
/// `g(u) = a·u + Σ q_i u_i² - c <= 0`, where `u` is the point mapped onto
/// `[-1, 1]^d` relative to the root bounds and `c` is the median of the raw
/// form over a seeded sample of the root, so both labels always occur.
#[derive(Debug, Clone)]
pub struct StabilityOracle {
    bounds: Vec<(f64, f64)>,
    linear: Vec<f64>,
    quadratic: Vec<f64>,
    offset: f64,
    cost: TaskCost,
}

impl StabilityOracle {
    pub fn new(bounds: &[(f64, f64)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let linear = bounds.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let quadratic = bounds.iter().map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut oracle = Self {
            bounds: bounds.to_vec(),
            linear,
            quadratic,
            offset: 0.0,
            cost: TaskCost::Free,
        };
        let mut sample: Vec<f64> = (0..CALIBRATION_POINTS)
            .map(|_| {
                let x: Vec<f64> = bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
                oracle.margin(&x)
            })
            .collect();
        sample.sort_by(f64::total_cmp);
        oracle.offset = sample[CALIBRATION_POINTS / 2];
        oracle
    }

    pub fn with_cost(mut self, cost: TaskCost) -> Self {
        self.cost = cost;
        self
    }

    pub fn cost(&self) -> TaskCost {
        self.cost
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn margin(&self, x: &[f64]) -> f64 {
        let mut g = -self.offset;
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            let u = 2.0 * (x[i] - lo) / (hi - lo) - 1.0;
            g += self.linear[i] * u + self.quadratic[i] * u * u;
        }
        g
    }

    pub fn classify(&self, x: &[f64]) -> Label {
        if self.margin(x) <= 0.0 {
            Label::Stable
        } else {
            Label::Unstable
        }
    }

    /// One schedulable task: spend the synthetic cost, then label the point.
    pub fn evaluate(&self, x: &[f64]) -> Label {
        self.cost.spend();
        self.classify(x)
    }
}
