//! Embedded time-series store.
//!
//! Records live in memory, indexed by series key, and are appended to a text
//! file with one `series\tts_ns\tvalue` record per line.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use edgetwin_core::Timestamp;
use serde::Serialize;

pub const FLUSH_RECORDS: usize = 1000;
pub const FLUSH_INTERVAL: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Point {
    pub ts: Timestamp,
    pub value: f64,
}

struct Persistence {
    path: PathBuf,
    writer: BufWriter<File>,
    pending: usize,
    last_flush: Instant,
}

#[derive(Default)]
pub struct TimeSeriesStore {
    series: BTreeMap<String, Vec<Point>>,
    file: Option<Persistence>,
    retention: Option<Duration>,
    records: usize,
}

fn parse_line(line: &str) -> Option<(&str, Point)> {
    let mut parts = line.rsplitn(3, '\t');
    let value = parts.next()?.parse().ok()?;
    let ts = parts.next()?.parse().ok()?;
    let series = parts.next()?;
    Some((series, Point { ts: Timestamp(ts), value }))
}

impl TimeSeriesStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens `path`, loading any records already in it. Malformed lines are
    /// skipped with a warning.
    pub fn open(path: impl AsRef<Path>, retention: Option<Duration>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self::in_memory();
        store.retention = retention;
        if path.exists() {
            for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                match parse_line(&line) {
                    Some((series, p)) => store.insert(series, p),
                    None if line.is_empty() => {}
                    None => log::warn!("{}:{}: skipping malformed record", path.display(), n + 1),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        store.file = Some(Persistence {
            path,
            writer: BufWriter::new(file),
            pending: 0,
            last_flush: Instant::now(),
        });
        Ok(store)
    }

    fn insert(&mut self, series: &str, p: Point) {
        let points = self.series.entry(series.to_string()).or_default();
        // appends are almost always in order
        let at = if points.last().is_none_or(|l| l.ts <= p.ts) {
            points.len()
        } else {
            points.partition_point(|q| q.ts <= p.ts)
        };
        points.insert(at, p);
        self.records += 1;
    }

    pub fn append(&mut self, series: &str, ts: Timestamp, value: f64) -> io::Result<()> {
        let p = Point { ts, value };
        self.insert(series, p);
        if let Some(f) = &mut self.file {
            writeln!(f.writer, "{series}\t{}\t{value:?}", ts.as_nanos())?;
            f.pending += 1;
            if f.pending >= FLUSH_RECORDS || f.last_flush.elapsed() >= FLUSH_INTERVAL {
                self.flush()?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        if let Some(f) = &mut self.file {
            f.writer.flush()?;
            f.pending = 0;
            f.last_flush = Instant::now();
        }
        Ok(())
    }

    /// Flushes when the time bound has passed; called periodically by the
    /// ingestion loop so quiet stores still become durable.
    pub fn maybe_flush(&mut self) -> io::Result<()> {
        match &self.file {
            Some(f) if f.pending > 0 && f.last_flush.elapsed() >= FLUSH_INTERVAL => self.flush(),
            _ => Ok(()),
        }
    }

    /// Drops records older than the retention horizon and rewrites the file
    /// without them. Returns the number of records dropped.
    pub fn apply_retention(&mut self, now: Timestamp) -> io::Result<usize> {
        let Some(horizon) = self.retention else {
            return Ok(0);
        };
        let cutoff = Timestamp(now.as_nanos() - horizon.as_nanos() as i64);
        let mut dropped = 0;
        for points in self.series.values_mut() {
            let keep_from = points.partition_point(|p| p.ts < cutoff);
            dropped += keep_from;
            points.drain(..keep_from);
        }
        self.series.retain(|_, v| !v.is_empty());
        self.records -= dropped;
        if dropped > 0 {
            self.rewrite()?;
        }
        Ok(dropped)
    }

    fn rewrite(&mut self) -> io::Result<()> {
        let Some(f) = &mut self.file else {
            return Ok(());
        };
        f.writer.flush()?;
        let tmp = f.path.with_extension("compact");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            for (series, points) in &self.series {
                for p in points {
                    writeln!(w, "{series}\t{}\t{:?}", p.ts.as_nanos(), p.value)?;
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, &f.path)?;
        f.writer = BufWriter::new(OpenOptions::new().append(true).open(&f.path)?);
        f.pending = 0;
        f.last_flush = Instant::now();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records == 0
    }

    pub fn series_keys(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    /// Records with `t0 <= ts <= t1`, sorted by timestamp. With more than
    /// `max_points` records the range is cut into `max_points` buckets of
    /// (near) equal count and each bucket is reduced to its mean timestamp
    /// and mean value.
    pub fn query(&self, series: &str, t0: Timestamp, t1: Timestamp, max_points: usize) -> Vec<Point> {
        let Some(points) = self.series.get(series) else {
            return Vec::new();
        };
        let lo = points.partition_point(|p| p.ts < t0);
        let hi = points.partition_point(|p| p.ts <= t1);
        let range = &points[lo..hi.max(lo)];
        if range.len() <= max_points || max_points == 0 {
            return range.to_vec();
        }
        downsample(range, max_points)
    }
}

pub fn downsample(points: &[Point], buckets: usize) -> Vec<Point> {
    let n = points.len();
    (0..buckets)
        .map(|b| {
            let chunk = &points[b * n / buckets..(b + 1) * n / buckets];
            let k = chunk.len() as f64;
            let ts = chunk.iter().map(|p| p.ts.as_nanos() as i128).sum::<i128>() / chunk.len() as i128;
            Point {
                ts: Timestamp(ts as i64),
                value: chunk.iter().map(|p| p.value).sum::<f64>() / k,
            }
        })
        .collect()
}

impl Drop for TimeSeriesStore {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
