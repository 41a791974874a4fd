//! Information-loss estimators for aggregation.
//!
//! `empirical_mse` measures what a reconstruction actually lost; the
//! `loss_*` functions are the closed-form predictions for average,
//! last-value and phasor aggregation.

use serde::{Deserialize, Serialize};

use super::dft::{fundamental_bin, spectrum};
use super::AggregationError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    /// Mean squared reconstruction error, squared signal units.
    pub mse: f64,
    /// Fraction of the original variance lost, clamped to [0, 1]. Absent when
    /// the original has zero variance.
    pub relative: Option<f64>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divides by `n`).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn empirical_mse(original: &[f64], reconstructed: &[f64]) -> Result<LossEstimate, AggregationError> {
    if original.len() != reconstructed.len() {
        return Err(AggregationError::LengthMismatch {
            left: original.len(),
            right: reconstructed.len(),
        });
    }
    if original.is_empty() {
        return Err(AggregationError::EmptyWindow);
    }
    let mse = original
        .iter()
        .zip(reconstructed)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / original.len() as f64;
    let var = variance(original);
    let relative = (var > 0.0).then(|| (mse / var).clamp(0.0, 1.0));
    Ok(LossEstimate { mse, relative })
}

/// Expected loss of average aggregation over `n` samples of variance `sigma2`.
pub fn loss_avg(n: usize, sigma2: f64) -> f64 {
    assert!(n >= 1, "window size must be at least 1");
    (1.0 - 1.0 / n as f64) * sigma2
}

/// Expected loss of last-value aggregation for an AR(1) process with lag-1
/// correlation `rho`.
pub fn loss_last(rho: f64, sigma2: f64) -> Result<f64, AggregationError> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(AggregationError::RhoOutOfRange(rho));
    }
    Ok((1.0 - rho * rho) * sigma2)
}

/// Lag-1 sample autocorrelation, for plugging deployment data into
/// [`loss_last`]. `None` for fewer than two samples or zero variance.
pub fn lag1_autocorrelation(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let denom: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    if denom == 0.0 {
        return None;
    }
    let num: f64 = xs.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    Some(num / denom)
}

/// One-sided power per bin `0..=N/2`. Sums to the mean square of `samples`.
pub fn bin_powers(samples: &[f64]) -> Vec<f64> {
    let n = samples.len();
    let spec = spectrum(samples);
    let n2 = (n * n) as f64;
    (0..=n / 2)
        .map(|k| {
            let p = spec[k].norm_sqr() / n2;
            let mirrored = k != 0 && !(n.is_multiple_of(2) && k == n / 2);
            if mirrored {
                2.0 * p
            } else {
                p
            }
        })
        .collect()
}

/// `1 - P_fundamental / P_total` over the mean-removed signal, clamped to
/// [0, 1].
pub fn loss_phasor(samples: &[f64]) -> Result<f64, AggregationError> {
    let n = samples.len();
    if n < 4 {
        return Err(AggregationError::InsufficientSamples { needed: 4, got: n });
    }
    let m = mean(samples);
    let centered: Vec<f64> = samples.iter().map(|x| x - m).collect();
    let total = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    let scale = samples.iter().map(|x| x * x).fold(0.0, f64::max);
    if total <= 1e-24 * scale || total == 0.0 {
        return Err(AggregationError::UndefinedLoss);
    }
    let l1: f64 = centered.iter().map(|x| x.abs()).sum();
    let spec = spectrum(&centered);
    let k = fundamental_bin(&spec, l1).map_err(|_| AggregationError::UndefinedLoss)?;
    let powers = bin_powers(&centered);
    Ok((1.0 - powers[k] / total).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn tone(n: usize, k: usize, amp: f64) -> impl Iterator<Item = f64> {
        (0..n).map(move |t| amp * (2.0 * PI * (k * t) as f64 / n as f64).cos())
    }

    #[test]
    fn mse_examples() {
        assert_eq!(empirical_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap().mse, 0.0);
        let l = empirical_mse(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(l.mse, 1.0);
        assert_eq!(l.relative, Some(1.0));
        assert_eq!(empirical_mse(&[3.0, 3.0], &[3.0, 3.0]).unwrap().relative, None);
        assert!(matches!(
            empirical_mse(&[1.0], &[1.0, 2.0]),
            Err(AggregationError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn closed_form_losses() {
        assert!((loss_avg(10, 1.0) - 0.9).abs() < 1e-15);
        assert_eq!(loss_avg(1, 5.0), 0.0);
        assert!((loss_avg(1_000_000, 2.0) - 2.0).abs() < 1e-5);
        assert_eq!(loss_last(1.0, 3.0).unwrap(), 0.0);
        assert_eq!(loss_last(0.0, 1.0).unwrap(), 1.0);
        assert_eq!(loss_last(0.5, 4.0).unwrap(), 3.0);
        assert!(matches!(loss_last(1.5, 1.0), Err(AggregationError::RhoOutOfRange(_))));
    }

    #[test]
    fn phasor_loss_pure_and_two_tone() {
        let pure: Vec<f64> = tone(128, 3, 2.0).collect();
        assert!(loss_phasor(&pure).unwrap() < 1e-12);

        let n = 64;
        let two: Vec<f64> = tone(n, 1, 1.0).zip(tone(n, 3, 1.0)).map(|(a, b)| a + b).collect();
        assert!((loss_phasor(&two).unwrap() - 0.5).abs() < 1e-12);

        // a DC offset does not count as lost signal
        let offset: Vec<f64> = pure.iter().map(|x| x + 100.0).collect();
        assert!(loss_phasor(&offset).unwrap() < 1e-9);
    }

    #[test]
    fn phasor_loss_undefined_for_flat_signal() {
        assert_eq!(loss_phasor(&[2.5; 16]), Err(AggregationError::UndefinedLoss));
    }

    #[test]
    fn white_noise_loses_almost_everything() {
        // The fundamental is the strongest of N/2 noise bins, so its share is at
        // least the per-bin average 2/N and, for Gaussian noise, rarely more
        // than a few times 2*ln(N/2)/N.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1024;
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let loss = loss_phasor(&x).unwrap();
            assert!(loss <= 1.0 - 2.0 / n as f64 + 1e-12, "loss {loss}");
            assert!(loss > 1.0 - 4.0 * 2.0 * ((n / 2) as f64).ln() / n as f64, "loss {loss}");
        }
    }

    #[test]
    fn parseval_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &n in &[16usize, 63, 64, 100, 256, 1000] {
            let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let time_power = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let freq_power: f64 = bin_powers(&x).iter().sum();
            assert!(((freq_power - time_power) / time_power).abs() < 1e-9, "n={n}");
        }
    }

    #[test]
    fn lag1_of_ar1_process() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rho = 0.8;
        let innov = (1.0f64 - rho * rho).sqrt();
        let mut x = 0.0;
        let xs: Vec<f64> = (0..50_000)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = rho * x + innov * e;
                x
            })
            .collect();
        let r = lag1_autocorrelation(&xs).unwrap();
        assert!((r - rho).abs() < 0.02, "r = {r}");
        assert_eq!(lag1_autocorrelation(&[1.0]), None);
    }
}
