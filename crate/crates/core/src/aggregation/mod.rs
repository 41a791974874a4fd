//! Window aggregation.
//!
//! Each multi-channel window is reduced channel by channel. `all` ships the
//! window unchanged; `sum`, `average` and `last` collapse it to one number per
//! channel; `phasor` keeps the amplitude and phase of the dominant
//! oscillation.

mod dft;
mod loss;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::window::MeasurementWindow;

pub use dft::{dft_direct, fft_bluestein, fft_radix2, normalize_phase, phasor_dft, spectrum, PhasorEstimate};
pub use loss::{
    bin_powers, empirical_mse, lag1_autocorrelation, loss_avg, loss_last, loss_phasor, mean,
    variance, LossEstimate,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("window is empty")]
    EmptyWindow,
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("signal has no non-DC component")]
    NoFundamental,
    #[error("sampling interval must be positive")]
    InvalidSamplingInterval,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("correlation {0} outside [-1, 1]")]
    RhoOutOfRange(f64),
    #[error("loss undefined for a signal with zero power")]
    UndefinedLoss,
    #[error("unknown aggregate kind {0:?}")]
    UnknownKind(String),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateKind {
    #[default]
    All,
    Sum,
    Average,
    Last,
    Phasor,
}

impl AggregateKind {
    pub const ALL: [AggregateKind; 5] = [
        AggregateKind::All,
        AggregateKind::Sum,
        AggregateKind::Average,
        AggregateKind::Last,
        AggregateKind::Phasor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregateKind::All => "all",
            AggregateKind::Sum => "sum",
            AggregateKind::Average => "average",
            AggregateKind::Last => "last",
            AggregateKind::Phasor => "phasor",
        }
    }

    /// Smallest window the method can reduce.
    pub fn min_samples(self) -> usize {
        match self {
            AggregateKind::Phasor => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for AggregateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregateKind {
    type Err = AggregationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AggregationError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarMethod {
    Sum,
    Average,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub ts: Timestamp,
    pub values: Vec<f64>,
}

/// Amplitude and phase of one channel plus the bin frequency it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phasor {
    pub amplitude: f64,
    pub phase: f64,
    pub frequency: f64,
}

impl From<PhasorEstimate> for Phasor {
    fn from(e: PhasorEstimate) -> Self {
        Phasor {
            amplitude: e.amplitude,
            phase: e.phase,
            frequency: e.frequency,
        }
    }
}

/// Reduced representation of a window, as shipped to the cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AggregatePayload {
    Series { points: Vec<SeriesPoint> },
    Scalar { method: ScalarMethod, values: Vec<f64> },
    Phasor { channels: Vec<Phasor> },
}

impl AggregatePayload {
    pub fn channels(&self) -> usize {
        match self {
            AggregatePayload::Series { points } => points.first().map_or(0, |p| p.values.len()),
            AggregatePayload::Scalar { values, .. } => values.len(),
            AggregatePayload::Phasor { channels } => channels.len(),
        }
    }
}

pub fn aggregate(
    window: &MeasurementWindow,
    kind: AggregateKind,
    sampling_interval: Duration,
) -> Result<AggregatePayload, AggregationError> {
    if window.is_empty() {
        return Err(AggregationError::EmptyWindow);
    }
    let channels = window.channels();
    let scalar = |method: ScalarMethod, f: &dyn Fn(&[f64]) -> f64| AggregatePayload::Scalar {
        method,
        values: (0..channels).map(|c| f(&window.channel(c))).collect(),
    };
    Ok(match kind {
        AggregateKind::All => AggregatePayload::Series {
            points: window
                .snapshot()
                .into_iter()
                .map(|m| SeriesPoint {
                    ts: m.timestamp,
                    values: m.values,
                })
                .collect(),
        },
        AggregateKind::Sum => scalar(ScalarMethod::Sum, &|xs| xs.iter().sum()),
        AggregateKind::Average => scalar(ScalarMethod::Average, &mean),
        AggregateKind::Last => scalar(ScalarMethod::Last, &|xs| xs[xs.len() - 1]),
        AggregateKind::Phasor => {
            if window.len() < 4 {
                return Err(AggregationError::InsufficientSamples {
                    needed: 4,
                    got: window.len(),
                });
            }
            let phasors = (0..channels)
                .map(|c| phasor_dft(&window.channel(c), sampling_interval).map(Phasor::from))
                .collect::<Result<Vec<_>, _>>()?;
            AggregatePayload::Phasor { channels: phasors }
        }
    })
}

/// Rebuilds `n` samples per channel from a payload.
///
/// Phasor reconstruction evaluates `A cos(2*pi*f*(t - window_start) + phi)`
/// at `t = window_start + i * sampling_interval`, i.e. the phase is
/// referenced to the first sample of the window.
pub fn reconstruct(
    payload: &AggregatePayload,
    n: usize,
    sampling_interval: Duration,
    window_start: Timestamp,
) -> Result<Vec<Vec<f64>>, AggregationError> {
    if n == 0 {
        return Err(AggregationError::Malformed("n must be at least 1".into()));
    }
    match payload {
        AggregatePayload::Series { points } => {
            let channels = payload.channels();
            if points.iter().any(|p| p.values.len() != channels) {
                return Err(AggregationError::Malformed("ragged series".into()));
            }
            Ok((0..channels)
                .map(|c| points.iter().map(|p| p.values[c]).collect())
                .collect())
        }
        AggregatePayload::Scalar { method, values } => Ok(values
            .iter()
            .map(|&v| {
                let level = match method {
                    ScalarMethod::Sum => v / n as f64,
                    ScalarMethod::Average | ScalarMethod::Last => v,
                };
                vec![level; n]
            })
            .collect()),
        AggregatePayload::Phasor { channels } => {
            let step = sampling_interval.as_nanos() as i64;
            let offsets: Vec<f64> = (0..n as i64)
                .map(|i| Timestamp(window_start.0 + i * step).duration_since(window_start).as_secs_f64())
                .collect();
            Ok(channels
                .iter()
                .map(|p| {
                    offsets
                        .iter()
                        .map(|t| p.amplitude * (2.0 * PI * p.frequency * t + p.phase).cos())
                        .collect()
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Measurement;
    use proptest::prelude::*;

    const MS: Duration = Duration::from_millis(1);

    fn window_of(values: &[f64]) -> MeasurementWindow {
        let mut w = MeasurementWindow::new("V", values.len().max(1), 1).unwrap();
        for (i, v) in values.iter().enumerate() {
            w.push(&Measurement::new(Timestamp::from_millis(i as i64), vec![*v], "V"))
                .unwrap();
        }
        w
    }

    fn scalar(p: &AggregatePayload) -> f64 {
        match p {
            AggregatePayload::Scalar { values, .. } => values[0],
            other => panic!("not a scalar: {other:?}"),
        }
    }

    #[test]
    fn scalar_methods() {
        let w = window_of(&[1.0, 2.0, 3.0]);
        assert_eq!(scalar(&aggregate(&w, AggregateKind::Average, MS).unwrap()), 2.0);
        assert_eq!(scalar(&aggregate(&w, AggregateKind::Sum, MS).unwrap()), 6.0);
        assert_eq!(scalar(&aggregate(&w, AggregateKind::Last, MS).unwrap()), 3.0);
    }

    #[test]
    fn all_keeps_window_order() {
        let w = window_of(&[4.0, 5.0]);
        let p = aggregate(&w, AggregateKind::All, MS).unwrap();
        let AggregatePayload::Series { points } = &p else { panic!() };
        assert_eq!(points.len(), 2);
        assert_eq!(points[1].values, vec![5.0]);
        assert_eq!(reconstruct(&p, 2, MS, Timestamp::ZERO).unwrap(), vec![vec![4.0, 5.0]]);
    }

    #[test]
    fn empty_and_short_windows() {
        let w = MeasurementWindow::new("V", 4, 1).unwrap();
        assert_eq!(aggregate(&w, AggregateKind::Sum, MS), Err(AggregationError::EmptyWindow));
        let w = window_of(&[1.0, -1.0, 1.0]);
        assert!(matches!(
            aggregate(&w, AggregateKind::Phasor, MS),
            Err(AggregationError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn per_channel_reduction() {
        let mut w = MeasurementWindow::new("V", 3, 2).unwrap();
        for t in 1..=3 {
            w.push_values(Timestamp(t), &[t as f64, -(t as f64)]).unwrap();
        }
        let p = aggregate(&w, AggregateKind::Sum, MS).unwrap();
        assert_eq!(p, AggregatePayload::Scalar { method: ScalarMethod::Sum, values: vec![6.0, -6.0] });
    }

    #[test]
    fn reconstruct_scalars() {
        let avg = AggregatePayload::Scalar { method: ScalarMethod::Average, values: vec![2.0] };
        assert_eq!(reconstruct(&avg, 3, MS, Timestamp::ZERO).unwrap(), vec![vec![2.0; 3]]);
        let sum = AggregatePayload::Scalar { method: ScalarMethod::Sum, values: vec![6.0] };
        assert_eq!(reconstruct(&sum, 3, MS, Timestamp::ZERO).unwrap(), vec![vec![2.0; 3]]);
        assert!(reconstruct(&sum, 0, MS, Timestamp::ZERO).is_err());
    }

    #[test]
    fn reconstruct_pure_phasor_is_lossless() {
        let n = 64;
        let ts = Duration::from_micros(250);
        let f = 1.0 / (n as f64 * ts.as_secs_f64());
        let p = AggregatePayload::Phasor {
            channels: vec![Phasor { amplitude: 1.0, phase: 0.0, frequency: f }],
        };
        let xs = reconstruct(&p, n, ts, Timestamp::from_millis(3)).unwrap();
        let truth: Vec<f64> = (0..n).map(|t| (2.0 * PI * t as f64 / n as f64).cos()).collect();
        assert!(empirical_mse(&truth, &xs[0]).unwrap().mse < 1e-12);
    }

    #[test]
    fn kind_strings_round_trip() {
        for k in AggregateKind::ALL {
            assert_eq!(k.as_str().parse::<AggregateKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
        assert!("median".parse::<AggregateKind>().is_err());
    }

    proptest! {
        #[test]
        fn scale_equivariance(
            xs in proptest::collection::vec(-100.0f64..100.0, 4..32),
            c in -10.0f64..10.0,
        ) {
            let w = window_of(&xs);
            let scaled: Vec<f64> = xs.iter().map(|x| c * x).collect();
            let ws = window_of(&scaled);
            for kind in [AggregateKind::Sum, AggregateKind::Average, AggregateKind::Last] {
                let a = scalar(&aggregate(&w, kind, MS).unwrap());
                let b = scalar(&aggregate(&ws, kind, MS).unwrap());
                prop_assert!((c * a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
            if c > 0.1 {
                if let (Ok(AggregatePayload::Phasor { channels: p }), Ok(AggregatePayload::Phasor { channels: q })) =
                    (aggregate(&w, AggregateKind::Phasor, MS), aggregate(&ws, AggregateKind::Phasor, MS))
                {
                    prop_assert!((q[0].amplitude - c * p[0].amplitude).abs() <= 1e-9 * (1.0 + q[0].amplitude));
                    prop_assert_eq!(q[0].frequency, p[0].frequency);
                }
            }
        }

        #[test]
        fn average_shift(xs in proptest::collection::vec(-100.0f64..100.0, 1..32), c in -50.0f64..50.0) {
            let a = scalar(&aggregate(&window_of(&xs), AggregateKind::Average, MS).unwrap());
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = scalar(&aggregate(&window_of(&shifted), AggregateKind::Average, MS).unwrap());
            prop_assert!((a + c - b).abs() < 1e-9);
        }
    }
}
