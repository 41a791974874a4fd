use crate::clock::Timestamp;
use crate::model::{Measurement, ModelError};

/// Fixed-capacity circular buffer of the most recent measurements of one
/// sensor.
///
/// Values are stored flat (`capacity * channels` slots) so a push never
/// allocates; once full, each push overwrites the oldest entry.
#[derive(Debug, Clone)]
pub struct MeasurementWindow {
    source: String,
    capacity: usize,
    channels: usize,
    timestamps: Vec<Timestamp>,
    values: Vec<f64>,
    head: usize,
    count: usize,
    last_timestamp: Option<Timestamp>,
}

impl MeasurementWindow {
    pub fn new(source: impl Into<String>, capacity: usize, channels: usize) -> Result<Self, ModelError> {
        if capacity == 0 {
            return Err(ModelError::ZeroCapacity);
        }
        if channels == 0 {
            return Err(ModelError::NoChannels(source.into()));
        }
        Ok(Self {
            source: source.into(),
            capacity,
            channels,
            timestamps: vec![Timestamp::ZERO; capacity],
            values: vec![0.0; capacity * channels],
            head: 0,
            count: 0,
            last_timestamp: None,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn is_full(&self) -> bool {
        self.count == self.capacity
    }

    /// Number of value slots in the backing store. Constant for the lifetime
    /// of the window.
    pub fn backing_len(&self) -> usize {
        self.values.len()
    }

    pub fn push(&mut self, m: &Measurement) -> Result<(), ModelError> {
        self.push_values(m.timestamp, &m.values)
    }

    pub fn push_values(&mut self, timestamp: Timestamp, values: &[f64]) -> Result<(), ModelError> {
        if values.len() != self.channels {
            return Err(ModelError::Shape {
                expected: self.channels,
                actual: values.len(),
            });
        }
        if let Some(previous) = self.last_timestamp {
            if timestamp <= previous {
                return Err(ModelError::NonIncreasingTimestamp {
                    previous,
                    got: timestamp,
                });
            }
        }
        let slot = self.head;
        self.timestamps[slot] = timestamp;
        self.values[slot * self.channels..(slot + 1) * self.channels].copy_from_slice(values);
        self.head = (self.head + 1) % self.capacity;
        self.count = (self.count + 1).min(self.capacity);
        self.last_timestamp = Some(timestamp);
        Ok(())
    }

    /// Physical slot of the i-th oldest entry.
    fn slot(&self, i: usize) -> usize {
        let oldest = (self.head + self.capacity - self.count) % self.capacity;
        (oldest + i) % self.capacity
    }

    /// Entries oldest to newest.
    pub fn snapshot(&self) -> Vec<Measurement> {
        (0..self.count)
            .map(|i| {
                let s = self.slot(i);
                Measurement {
                    timestamp: self.timestamps[s],
                    values: self.values[s * self.channels..(s + 1) * self.channels].to_vec(),
                    source: self.source.clone(),
                }
            })
            .collect()
    }

    pub fn timestamps(&self) -> Vec<Timestamp> {
        (0..self.count).map(|i| self.timestamps[self.slot(i)]).collect()
    }

    /// One channel's values, oldest to newest.
    pub fn channel(&self, channel: usize) -> Vec<f64> {
        assert!(channel < self.channels, "channel {channel} out of range");
        (0..self.count)
            .map(|i| self.values[self.slot(i) * self.channels + channel])
            .collect()
    }

    pub fn latest(&self) -> Option<Measurement> {
        if self.count == 0 {
            return None;
        }
        let s = self.slot(self.count - 1);
        Some(Measurement {
            timestamp: self.timestamps[s],
            values: self.values[s * self.channels..(s + 1) * self.channels].to_vec(),
            source: self.source.clone(),
        })
    }

    pub fn oldest_timestamp(&self) -> Option<Timestamp> {
        (self.count > 0).then(|| self.timestamps[self.slot(0)])
    }
}
