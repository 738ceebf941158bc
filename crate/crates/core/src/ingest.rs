//! Streaming CSV ingest of raw GPS records.
//!
//! Records are line-delimited, comma-separated, unquoted. The canonical column
//! order is `vehicle_id, timestamp, lat, lon, speed, bearing, status`; a
//! [`Schema`] remaps columns for feeds that use a different order. Malformed
//! records are counted and skipped, only I/O failures abort the stream.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One timestamped vehicle observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsSample {
    pub vehicle_id: String,
    /// Unix seconds.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    /// km/h.
    pub speed: Option<f64>,
    /// Degrees clockwise from north, in `[0, 360)`.
    pub bearing: Option<f64>,
    /// Device/fleet status bits, carried but not interpreted.
    pub status: u32,
    /// Seconds since this vehicle's previous sample; absent for its first.
    pub interval: Option<f64>,
}

impl GpsSample {
    pub fn new(vehicle_id: impl Into<String>, timestamp: i64, lat: f64, lon: f64) -> Self {
        GpsSample {
            vehicle_id: vehicle_id.into(),
            timestamp,
            lat,
            lon,
            speed: None,
            bearing: None,
            status: 0,
            interval: None,
        }
    }

    pub fn with_speed(mut self, speed: f64) -> Self {
        self.speed = Some(speed);
        self
    }

    pub fn with_bearing(mut self, bearing: f64) -> Self {
        self.bearing = Some(bearing);
        self
    }

    /// Checks the range invariants that ingest enforces on every record.
    pub fn validate(&self) -> Result<()> {
        if self.vehicle_id.is_empty() {
            return Err(Error::data("empty vehicle id"));
        }
        if !(self.lat.is_finite() && (-90.0..=90.0).contains(&self.lat)) {
            return Err(Error::data(format!("latitude {} out of range", self.lat)));
        }
        if !(self.lon.is_finite() && (-180.0..=180.0).contains(&self.lon)) {
            return Err(Error::data(format!("longitude {} out of range", self.lon)));
        }
        if let Some(s) = self.speed {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::data(format!("speed {s} out of range")));
            }
        }
        if let Some(b) = self.bearing {
            if !(b.is_finite() && (0.0..360.0).contains(&b)) {
                return Err(Error::data(format!("bearing {b} out of range")));
            }
        }
        if let Some(i) = self.interval {
            if !(i.is_finite() && i > 0.0) {
                return Err(Error::data(format!("interval {i} must be positive")));
            }
        }
        Ok(())
    }

    /// Formats the sample as a canonical CSV record (no trailing newline).
    pub fn to_csv_record(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.vehicle_id,
            self.timestamp,
            self.lat,
            self.lon,
            opt(self.speed),
            opt(self.bearing),
            self.status
        )
    }
}

/// Column positions of each field within a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub vehicle_id: usize,
    pub timestamp: usize,
    pub lat: usize,
    pub lon: usize,
    pub speed: usize,
    pub bearing: usize,
    pub status: usize,
    /// Skip the first line of the stream.
    pub has_header: bool,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            vehicle_id: 0,
            timestamp: 1,
            lat: 2,
            lon: 3,
            speed: 4,
            bearing: 5,
            status: 6,
            has_header: false,
        }
    }
}

impl Schema {
    pub fn with_header(mut self, has_header: bool) -> Self {
        self.has_header = has_header;
        self
    }

    fn column_count(&self) -> usize {
        [
            self.vehicle_id,
            self.timestamp,
            self.lat,
            self.lon,
            self.speed,
            self.bearing,
            self.status,
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
            + 1
    }

    /// Parses and validates one record.
    pub fn parse_line(&self, line: &str) -> Result<GpsSample> {
        let line = line.trim_end_matches(['\r', '\n']);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != self.column_count() {
            return Err(Error::data(format!(
                "expected {} fields, found {}",
                self.column_count(),
                fields.len()
            )));
        }
        let num = |idx: usize, name: &str| -> Result<Option<f64>> {
            let raw = fields[idx].trim();
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse::<f64>()
                .map(Some)
                .map_err(|_| Error::data(format!("bad {name} {raw:?}")))
        };
        let required = |idx: usize, name: &str| -> Result<f64> {
            num(idx, name)?.ok_or_else(|| Error::data(format!("missing {name}")))
        };

        let timestamp = fields[self.timestamp]
            .trim()
            .parse::<i64>()
            .map_err(|_| Error::data(format!("bad timestamp {:?}", fields[self.timestamp])))?;
        let status_raw = fields[self.status].trim();
        let status = if status_raw.is_empty() {
            0
        } else {
            status_raw
                .parse::<u32>()
                .map_err(|_| Error::data(format!("bad status {status_raw:?}")))?
        };

        let sample = GpsSample {
            vehicle_id: fields[self.vehicle_id].trim().to_string(),
            timestamp,
            lat: required(self.lat, "lat")?,
            lon: required(self.lon, "lon")?,
            speed: num(self.speed, "speed")?,
            bearing: num(self.bearing, "bearing")?,
            status,
            interval: None,
        };
        sample.validate()?;
        Ok(sample)
    }
}

/// Record counts for one ingest pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub total: u64,
    pub accepted: u64,
    pub rejected: u64,
}

/// Iterator over the validated samples of a record stream.
///
/// Holds one line buffer; nothing else grows with the stream. Malformed
/// records are skipped and counted in [`SampleReader::summary`]. Blank lines
/// are not records.
pub struct SampleReader<R> {
    reader: R,
    schema: Schema,
    line: String,
    header_pending: bool,
    summary: IngestSummary,
    failed: bool,
}

/// Starts parsing `reader` with the given column layout.
pub fn parse_samples<R: BufRead>(reader: R, schema: Schema) -> SampleReader<R> {
    SampleReader {
        reader,
        header_pending: schema.has_header,
        schema,
        line: String::new(),
        summary: IngestSummary::default(),
        failed: false,
    }
}

impl<R> SampleReader<R> {
    pub fn summary(&self) -> IngestSummary {
        self.summary
    }
}

impl<R: BufRead> Iterator for SampleReader<R> {
    type Item = Result<GpsSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            self.line.clear();
            match self.reader.read_line(&mut self.line) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::Io(e)));
                }
            }
            if self.header_pending {
                self.header_pending = false;
                continue;
            }
            if self.line.trim().is_empty() {
                continue;
            }
            self.summary.total += 1;
            match self.schema.parse_line(&self.line) {
                Ok(sample) => {
                    self.summary.accepted += 1;
                    return Some(Ok(sample));
                }
                Err(_) => self.summary.rejected += 1,
            }
        }
    }
}

/// All samples of one vehicle, in timestamp order.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub vehicle_id: String,
    pub samples: Vec<GpsSample>,
}

/// Groups samples per vehicle (first-appearance order) and stable-sorts each
/// group by timestamp.
pub fn group_by_vehicle(samples: impl IntoIterator<Item = GpsSample>) -> Vec<Track> {
    let mut slots: HashMap<String, usize> = HashMap::new();
    let mut tracks: Vec<Track> = Vec::new();
    for s in samples {
        let idx = *slots.entry(s.vehicle_id.clone()).or_insert_with(|| {
            tracks.push(Track {
                vehicle_id: s.vehicle_id.clone(),
                samples: Vec::new(),
            });
            tracks.len() - 1
        });
        tracks[idx].samples.push(s);
    }
    for t in &mut tracks {
        t.samples.sort_by_key(|s| s.timestamp);
    }
    tracks
}

/// Fills `interval` for every sample of every track and drops samples whose
/// timestamp does not advance past the previously kept one (duplicates and
/// out-of-order records). Returns the number of dropped samples.
///
/// Running it twice gives the same tracks.
pub fn derive_intervals(tracks: &mut [Track]) -> u64 {
    let mut rejected = 0u64;
    for track in tracks.iter_mut() {
        let mut last: Option<i64> = None;
        let before = track.samples.len();
        track.samples.retain_mut(|s| match last {
            Some(prev) if s.timestamp <= prev => false,
            Some(prev) => {
                s.interval = Some((s.timestamp - prev) as f64);
                last = Some(s.timestamp);
                true
            }
            None => {
                s.interval = None;
                last = Some(s.timestamp);
                true
            }
        });
        rejected += (before - track.samples.len()) as u64;
    }
    rejected
}

/// Groups, sorts, and derives intervals in one step.
pub fn prepare_tracks(samples: impl IntoIterator<Item = GpsSample>) -> (Vec<Track>, u64) {
    let mut tracks = group_by_vehicle(samples);
    let rejected = derive_intervals(&mut tracks);
    (tracks, rejected)
}

/// Reads a whole sample file into memory, returning tracks with intervals.
pub fn read_tracks<R: BufRead>(reader: R, schema: Schema) -> Result<(Vec<Track>, IngestSummary)> {
    let mut parser = parse_samples(reader, schema);
    let samples = parser.by_ref().collect::<Result<Vec<_>>>()?;
    let mut summary = parser.summary();
    let (tracks, dropped) = prepare_tracks(samples);
    summary.accepted -= dropped;
    summary.rejected += dropped;
    Ok((tracks, summary))
}
