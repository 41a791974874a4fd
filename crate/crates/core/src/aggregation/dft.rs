//! Discrete Fourier transform and phasor extraction.
//!
//! Convention: `X_k = sum_t x_t * exp(-2*pi*i*k*t/N)`. For an on-bin cosine
//! `A cos(2*pi*k*t/N + phi)` this gives `X_k = (N*A/2) * exp(i*phi)`.
//!
//! Small windows use the direct O(N^2) sum. Larger power-of-two windows use
//! an iterative radix-2 FFT; other large sizes go through Bluestein's chirp-z
//! identity on top of the same radix-2 kernel.

use std::f64::consts::PI;
use std::time::Duration;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::AggregationError;

/// Sizes at or below this use the direct sum.
const DIRECT_MAX: usize = 64;

/// Relative magnitude difference under which two bins count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// Bin magnitude (relative to the signal's L1 norm) below which a window is
/// treated as carrying no oscillation at all.
const NO_FUNDAMENTAL_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasorEstimate {
    /// Peak amplitude, in signal units.
    pub amplitude: f64,
    /// Radians in (-pi, pi], cosine reference, relative to the first sample.
    pub phase: f64,
    /// Hertz.
    pub frequency: f64,
    /// Selected DFT bin.
    pub bin: usize,
}

/// Exact twiddle factors `exp(-2*pi*i*j/n)` for `j in 0..n`.
fn twiddles(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|j| {
            let angle = -2.0 * PI * j as f64 / n as f64;
            Complex64::new(angle.cos(), angle.sin())
        })
        .collect()
}

/// Reference O(N^2) transform. Indices are reduced modulo N before the
/// twiddle lookup so accuracy does not degrade with `k*t`.
pub fn dft_direct(samples: &[f64]) -> Vec<Complex64> {
    let n = samples.len();
    if n == 0 {
        return Vec::new();
    }
    let w = twiddles(n);
    (0..n)
        .map(|k| {
            samples
                .iter()
                .enumerate()
                .map(|(t, &x)| w[(k * t) % n] * x)
                .sum()
        })
        .collect()
}

/// In-place iterative radix-2 FFT. `data.len()` must be a power of two.
fn fft_radix2_in_place(data: &mut [Complex64], inverse: bool) {
    let n = data.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            data.swap(i, j);
        }
    }
    let mut w = twiddles(n);
    if inverse {
        w.iter_mut().for_each(|c| *c = c.conj());
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for j in 0..half {
                let t = w[j * stride] * data[start + j + half];
                let u = data[start + j];
                data[start + j] = u + t;
                data[start + j + half] = u - t;
            }
        }
        len <<= 1;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        data.iter_mut().for_each(|c| *c *= scale);
    }
}

pub fn fft_radix2(samples: &[f64]) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_radix2_in_place(&mut data, false);
    data
}

/// Arbitrary-length transform via the chirp-z identity
/// `k*t = (k^2 + t^2 - (k - t)^2) / 2`.
pub fn fft_bluestein(samples: &[f64]) -> Vec<Complex64> {
    let n = samples.len();
    if n == 0 {
        return Vec::new();
    }
    let m = (2 * n - 1).next_power_of_two();
    let two_n = 2 * n as u64;
    // chirp_j = exp(-i*pi*j^2/n); j^2 reduced mod 2n keeps the angle small.
    let chirp: Vec<Complex64> = (0..n as u64)
        .map(|j| {
            let q = (j * j) % two_n;
            let angle = -PI * q as f64 / n as f64;
            Complex64::new(angle.cos(), angle.sin())
        })
        .collect();

    let mut a = vec![Complex64::new(0.0, 0.0); m];
    for (t, &x) in samples.iter().enumerate() {
        a[t] = chirp[t] * x;
    }
    let mut b = vec![Complex64::new(0.0, 0.0); m];
    b[0] = chirp[0].conj();
    for j in 1..n {
        b[j] = chirp[j].conj();
        b[m - j] = chirp[j].conj();
    }
    fft_radix2_in_place(&mut a, false);
    fft_radix2_in_place(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= *y;
    }
    fft_radix2_in_place(&mut a, true);
    (0..n).map(|k| chirp[k] * a[k]).collect()
}

/// Full spectrum, choosing the cheapest exact-enough route for the size.
pub fn spectrum(samples: &[f64]) -> Vec<Complex64> {
    let n = samples.len();
    if n <= DIRECT_MAX {
        dft_direct(samples)
    } else if n.is_power_of_two() {
        fft_radix2(samples)
    } else {
        fft_bluestein(samples)
    }
}

/// Index of the fundamental: the largest-magnitude bin in `1..=N/2`, ties
/// going to the lower bin.
pub(crate) fn fundamental_bin(spec: &[Complex64], l1_norm: f64) -> Result<usize, AggregationError> {
    let n = spec.len();
    let mut best = 1;
    let mut best_mag = spec[1].norm();
    for (k, x) in spec.iter().enumerate().take(n / 2 + 1).skip(2) {
        let mag = x.norm();
        if mag > best_mag * (1.0 + TIE_TOLERANCE) + f64::MIN_POSITIVE {
            best = k;
            best_mag = mag;
        }
    }
    if best_mag <= NO_FUNDAMENTAL_TOLERANCE * l1_norm {
        return Err(AggregationError::NoFundamental);
    }
    Ok(best)
}

/// Maps an angle from `atan2` into (-pi, pi].
pub fn normalize_phase(phase: f64) -> f64 {
    let mut p = phase % (2.0 * PI);
    if p > PI {
        p -= 2.0 * PI;
    }
    if p <= -PI {
        p += 2.0 * PI;
    }
    p
}

/// Amplitude, phase and frequency of the dominant (non-DC) bin.
pub fn phasor_dft(samples: &[f64], sampling_interval: Duration) -> Result<PhasorEstimate, AggregationError> {
    let n = samples.len();
    if n < 4 {
        return Err(AggregationError::InsufficientSamples { needed: 4, got: n });
    }
    if sampling_interval.is_zero() {
        return Err(AggregationError::InvalidSamplingInterval);
    }
    let spec = spectrum(samples);
    let l1: f64 = samples.iter().map(|x| x.abs()).sum();
    let k = fundamental_bin(&spec, l1)?;
    let x = spec[k];
    // The Nyquist bin has no mirror image, so it carries the full amplitude.
    let scale = if n.is_multiple_of(2) && k == n / 2 { 1.0 } else { 2.0 };
    Ok(PhasorEstimate {
        amplitude: scale * x.norm() / n as f64,
        phase: normalize_phase(x.im.atan2(x.re)),
        frequency: k as f64 / (n as f64 * sampling_interval.as_secs_f64()),
        bin: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MS: Duration = Duration::from_millis(1);

    fn on_bin(n: usize, k: usize, amp: f64, phase: f64) -> Vec<f64> {
        (0..n)
            .map(|t| amp * (2.0 * PI * (k * t) as f64 / n as f64 + phase).cos())
            .collect()
    }

    fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn single_exact_bin() {
        let est = phasor_dft(&on_bin(16, 1, 1.0, 0.0), MS).unwrap();
        assert_eq!(est.bin, 1);
        assert!((est.amplitude - 1.0).abs() < 1e-12);
        assert!(est.phase.abs() < 1e-12);
    }

    #[test]
    fn shifted_on_bin_tone() {
        let est = phasor_dft(&on_bin(32, 2, 3.0, PI / 4.0), MS).unwrap();
        assert_eq!(est.bin, 2);
        assert!((est.amplitude - 3.0).abs() < 1e-12);
        assert!((est.phase - PI / 4.0).abs() < 1e-12);
        assert!((est.frequency - 2.0 / (32.0 * 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn harmonic_is_filtered() {
        let n = 64;
        let x: Vec<f64> = on_bin(n, 1, 1.0, 0.0)
            .iter()
            .zip(on_bin(n, 3, 0.2, 0.0))
            .map(|(a, b)| a + b)
            .collect();
        let est = phasor_dft(&x, MS).unwrap();
        assert_eq!(est.bin, 1);
        assert!((est.amplitude - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_signal_has_no_fundamental() {
        assert_eq!(
            phasor_dft(&[5.0; 32], MS),
            Err(AggregationError::NoFundamental)
        );
        assert_eq!(phasor_dft(&[0.0; 8], MS), Err(AggregationError::NoFundamental));
    }

    #[test]
    fn too_short_and_bad_interval() {
        assert!(matches!(
            phasor_dft(&[1.0, 2.0, 3.0], MS),
            Err(AggregationError::InsufficientSamples { needed: 4, got: 3 })
        ));
        assert_eq!(
            phasor_dft(&[1.0, 0.0, -1.0, 0.0], Duration::ZERO),
            Err(AggregationError::InvalidSamplingInterval)
        );
    }

    #[test]
    fn equal_tones_tie_to_lower_bin() {
        let n = 64;
        let x: Vec<f64> = on_bin(n, 2, 1.0, 0.0)
            .iter()
            .zip(on_bin(n, 5, 1.0, 0.0))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(phasor_dft(&x, MS).unwrap().bin, 2);
    }

    #[test]
    fn nyquist_bin_amplitude() {
        let x: Vec<f64> = (0..16).map(|t| if t % 2 == 0 { 2.0 } else { -2.0 }).collect();
        let est = phasor_dft(&x, MS).unwrap();
        assert_eq!(est.bin, 8);
        assert!((est.amplitude - 2.0).abs() < 1e-12);
    }

    #[test]
    fn phase_normalization_range() {
        assert!((normalize_phase(-PI) - PI).abs() < 1e-15);
        assert!((normalize_phase(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_phase(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fast_routes_agree_with_direct_sum() {
        for &n in &[2usize, 8, 128, 256, 100, 97, 1000] {
            let x: Vec<f64> = (0..n).map(|t| ((t * 7919) % 31) as f64 - 15.0).collect();
            let direct = dft_direct(&x);
            let tol = 1e-9 * x.iter().map(|v| v.abs()).sum::<f64>();
            if n.is_power_of_two() {
                assert!(max_abs_diff(&direct, &fft_radix2(&x)) < tol, "radix2 n={n}");
            }
            assert!(max_abs_diff(&direct, &fft_bluestein(&x)) < tol, "bluestein n={n}");
        }
    }

    proptest! {
        #[test]
        fn on_bin_round_trip(
            log_n in 3u32..11,
            k_frac in 0.0f64..1.0,
            amp in 0.1f64..1000.0,
            phase in -PI..PI,
        ) {
            let n = 1usize << log_n;
            let k = 1 + ((n / 4 - 1) as f64 * k_frac).round() as usize;
            let phase = normalize_phase(phase + 1e-9);
            let est = phasor_dft(&on_bin(n, k, amp, phase), MS).unwrap();
            prop_assert_eq!(est.bin, k);
            prop_assert!((est.amplitude - amp).abs() <= 1e-9 * amp);
            let dphi = normalize_phase(est.phase - phase);
            prop_assert!(dphi.abs() <= 1e-9 * PI);
        }
    }
}
