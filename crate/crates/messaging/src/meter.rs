use std::collections::BTreeMap;
use std::time::Duration;

use edgetwin_core::Timestamp;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no metering window has completed yet")]
pub struct NotReady;

/// Byte counter bucketed into fixed windows.
///
/// Window `i` covers the half-open span `(origin + i*w, origin + (i+1)*w]`,
/// so a frame stamped exactly on a boundary belongs to the window that the
/// boundary closes. Frames are bucketed by their own timestamp, which makes
/// the count independent of delivery latency and of the clock used.
#[derive(Debug, Clone)]
pub struct BandwidthMeter {
    window: Duration,
    origin: Timestamp,
    buckets: BTreeMap<i64, (u64, u64)>,
    total_bytes: u64,
    total_frames: u64,
}

impl BandwidthMeter {
    pub fn new(window: Duration, origin: Timestamp) -> Self {
        assert!(!window.is_zero(), "metering window must be positive");
        Self {
            window,
            origin,
            buckets: BTreeMap::new(),
            total_bytes: 0,
            total_frames: 0,
        }
    }

    pub fn window(&self) -> Duration {
        self.window
    }

    fn w(&self) -> i64 {
        self.window.as_nanos() as i64
    }

    fn index(&self, ts: Timestamp) -> i64 {
        (ts.as_nanos() - self.origin.as_nanos() - 1).div_euclid(self.w())
    }

    pub fn record(&mut self, ts: Timestamp, bytes: usize) {
        let i = self.index(ts);
        let b = self.buckets.entry(i).or_default();
        b.0 += bytes as u64;
        b.1 += 1;
        self.total_bytes += bytes as u64;
        self.total_frames += 1;
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn total_frames(&self) -> u64 {
        self.total_frames
    }

    /// Index of the newest window whose end is at or before `now`.
    fn last_completed(&self, now: Timestamp) -> Result<i64, NotReady> {
        let elapsed = now.as_nanos() - self.origin.as_nanos();
        if elapsed < self.w() {
            return Err(NotReady);
        }
        Ok(elapsed.div_euclid(self.w()) - 1)
    }

    /// Bytes per second in the newest completed window.
    pub fn rate(&self, now: Timestamp) -> Result<f64, NotReady> {
        let i = self.last_completed(now)?;
        let bytes = self.buckets.get(&i).map_or(0, |b| b.0);
        Ok(bytes as f64 / self.window.as_secs_f64())
    }

    /// Bytes per second averaged over every completed window since the
    /// origin.
    pub fn mean_rate(&self, now: Timestamp) -> Result<f64, NotReady> {
        let last = self.last_completed(now)?;
        let bytes: u64 = self.buckets.range(0..=last).map(|(_, b)| b.0).sum();
        Ok(bytes as f64 / ((last + 1) as f64 * self.window.as_secs_f64()))
    }

    /// `(window start, bytes, frames)` for each completed window.
    pub fn windows(&self, now: Timestamp) -> Vec<(Timestamp, u64, u64)> {
        let Ok(last) = self.last_completed(now) else {
            return Vec::new();
        };
        (0..=last)
            .map(|i| {
                let (bytes, frames) = self.buckets.get(&i).copied().unwrap_or_default();
                (Timestamp(self.origin.as_nanos() + i * self.w()), bytes, frames)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: Duration = Duration::from_secs(1);

    #[test]
    fn ten_frames_of_hundred_bytes() {
        let mut m = BandwidthMeter::new(S, Timestamp::ZERO);
        for i in 1..=10 {
            m.record(Timestamp::from_millis(i * 100), 100);
        }
        assert_eq!(m.rate(Timestamp::from_millis(1000)), Ok(1000.0));
        // empty second window
        assert_eq!(m.rate(Timestamp::from_millis(2000)), Ok(0.0));
        assert_eq!(m.mean_rate(Timestamp::from_millis(2000)), Ok(500.0));
    }

    #[test]
    fn not_ready_before_first_window() {
        let m = BandwidthMeter::new(S, Timestamp::from_secs_f64(5.0));
        assert_eq!(m.rate(Timestamp::from_secs_f64(5.5)), Err(NotReady));
        assert!(m.windows(Timestamp::from_secs_f64(5.5)).is_empty());
    }

    #[test]
    fn boundary_frame_closes_its_window() {
        let mut m = BandwidthMeter::new(S, Timestamp::ZERO);
        m.record(Timestamp::from_millis(1000), 7);
        m.record(Timestamp::from_millis(1001), 9);
        let w = m.windows(Timestamp::from_millis(2000));
        assert_eq!(w, vec![(Timestamp::ZERO, 7, 1), (Timestamp::from_millis(1000), 9, 1)]);
        assert_eq!(m.total_bytes(), 16);
    }
}
