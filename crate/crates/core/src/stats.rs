//! Dataset statistics: sampling interval and speed histograms, and detection
//! of the measurement quantum of coordinates, speed and bearing.
//!
//! [`StatsAccumulator`] keeps state per vehicle only (last timestamp and a
//! bitmask of quanta still consistent with its values), so a feed of any
//! length can be summarised in one streaming pass.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::{GpsSample, Track};

/// Absolute tolerance of the "is an integer multiple of q" test.
pub const MULTIPLE_TOLERANCE: f64 = 1e-9;

/// Candidate quanta as `(mantissa, decimal exponent)`; value = mantissa / 10^exp.
///
/// Decimal steps `{1,2,5} x 10^-6 ..= 10^0` plus the coarse integer steps
/// seen on bearing sensors (3, 10, 15, 45 degrees).
const QUANTA: [(u32, i32); 25] = [
    (1, 6),
    (2, 6),
    (5, 6),
    (1, 5),
    (2, 5),
    (5, 5),
    (1, 4),
    (2, 4),
    (5, 4),
    (1, 3),
    (2, 3),
    (5, 3),
    (1, 2),
    (2, 2),
    (5, 2),
    (1, 1),
    (2, 1),
    (5, 1),
    (1, 0),
    (2, 0),
    (3, 0),
    (5, 0),
    (10, 0),
    (15, 0),
    (45, 0),
];

const ALL_QUANTA: u32 = (1 << QUANTA.len()) - 1;

static QUANTUM_VALUES: LazyLock<[f64; QUANTA.len()]> = LazyLock::new(|| {
    let mut out = [0.0; QUANTA.len()];
    for (o, &(m, e)) in out.iter_mut().zip(QUANTA.iter()) {
        *o = m as f64 / 10f64.powi(e);
    }
    out
});

fn quantum(idx: usize) -> f64 {
    QUANTUM_VALUES[idx]
}

/// Every candidate quantum, ascending.
pub fn candidate_quanta() -> Vec<f64> {
    (0..QUANTA.len()).map(quantum).collect()
}

fn is_multiple(v: f64, q: f64) -> bool {
    (v - (v / q).round() * q).abs() <= MULTIPLE_TOLERANCE
}

/// Clears the bits of `mask` whose quantum `v` is not a multiple of.
fn narrow(mut mask: u32, v: f64) -> u32 {
    let mut bits = mask;
    while bits != 0 {
        let i = bits.trailing_zeros() as usize;
        bits &= bits - 1;
        if !is_multiple(v, quantum(i)) {
            mask &= !(1 << i);
        }
    }
    mask
}

/// Largest candidate in `mask`, i.e. the coarsest quantum consistent with
/// every observed value.
fn coarsest(mask: u32) -> Option<f64> {
    if mask == 0 {
        None
    } else {
        Some(quantum(31 - mask.leading_zeros() as usize))
    }
}

/// Estimates the measurement quantum of a set of values: the largest
/// candidate quantum q such that every value is an integer multiple of q.
/// Returns `None` for an empty set or when no candidate fits.
pub fn detect_resolution(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut mask = ALL_QUANTA;
    let mut any = false;
    for v in values {
        any = true;
        mask = narrow(mask, v);
        if mask == 0 {
            return None;
        }
    }
    if any {
        coarsest(mask)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Lower edge of the bin (integer seconds or integer km/h).
    pub bin: i64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumGroup {
    pub quantum: f64,
    pub vehicles: u64,
}

/// Resolution of one field: dataset-wide estimate plus the number of vehicles
/// whose own values are consistent with each quantum.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResolutionEstimate {
    pub overall: Option<f64>,
    pub per_vehicle: Vec<QuantumGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    /// One bin per integer second; meant to be plotted on a log count axis.
    pub interval_histogram: Vec<HistogramBin>,
    /// One bin per integer km/h (floor).
    pub speed_histogram: Vec<HistogramBin>,
    pub lat_lon_resolution: ResolutionEstimate,
    pub speed_resolution: ResolutionEstimate,
    pub bearing_resolution: ResolutionEstimate,
    pub sample_count: u64,
    pub vehicle_count: u64,
    pub rejected_count: u64,
}

impl StatsReport {
    /// Bin with the highest count, ties resolved towards the lower bin.
    pub fn interval_mode(&self) -> Option<i64> {
        self.interval_histogram
            .iter()
            .max_by(|a, b| a.count.cmp(&b.count).then(b.bin.cmp(&a.bin)))
            .map(|b| b.bin)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Writes a histogram as a two-column `bin,count` CSV.
pub fn write_histogram_csv<W: Write>(mut w: W, bins: &[HistogramBin]) -> Result<()> {
    writeln!(w, "bin,count")?;
    for b in bins {
        writeln!(w, "{},{}", b.bin, b.count)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct VehicleState {
    last_timestamp: i64,
    lat_lon: u32,
    speed: u32,
    bearing: u32,
    has_speed: bool,
    has_bearing: bool,
}

/// Why a streamed sample was not counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamReject {
    /// Timestamp does not advance past the vehicle's previous sample.
    NonIncreasing,
}

/// Single-pass statistics over a sample stream.
#[derive(Debug, Default)]
pub struct StatsAccumulator {
    vehicles: HashMap<String, VehicleState>,
    intervals: BTreeMap<i64, u64>,
    speeds: BTreeMap<i64, u64>,
    samples: u64,
    rejected: u64,
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds records rejected upstream (e.g. by the parser).
    pub fn add_rejected(&mut self, n: u64) {
        self.rejected += n;
    }

    /// Number of vehicles tracked so far; the accumulator's memory is
    /// proportional to this plus the number of distinct histogram bins.
    pub fn tracked_vehicles(&self) -> usize {
        self.vehicles.len()
    }

    pub fn histogram_bins(&self) -> usize {
        self.intervals.len() + self.speeds.len()
    }

    /// Observes a sample whose interval was already derived.
    pub fn observe(&mut self, s: &GpsSample) {
        self.record(s, s.interval);
    }

    /// Observes a sample from a stream that is time-ordered per vehicle,
    /// deriving its interval on the fly. Samples that do not advance the
    /// vehicle's clock are rejected and counted.
    pub fn observe_streamed(&mut self, s: &GpsSample) -> Result<Option<f64>, StreamReject> {
        let interval = match self.vehicles.get(&s.vehicle_id) {
            Some(v) if s.timestamp <= v.last_timestamp => {
                self.rejected += 1;
                return Err(StreamReject::NonIncreasing);
            }
            Some(v) => Some((s.timestamp - v.last_timestamp) as f64),
            None => None,
        };
        self.record(s, interval);
        Ok(interval)
    }

    fn record(&mut self, s: &GpsSample, interval: Option<f64>) {
        self.samples += 1;
        if !self.vehicles.contains_key(&s.vehicle_id) {
            self.vehicles.insert(
                s.vehicle_id.clone(),
                VehicleState {
                    last_timestamp: s.timestamp,
                    lat_lon: ALL_QUANTA,
                    speed: ALL_QUANTA,
                    bearing: ALL_QUANTA,
                    has_speed: false,
                    has_bearing: false,
                },
            );
        }
        let state = self.vehicles.get_mut(&s.vehicle_id).expect("inserted above");
        state.last_timestamp = state.last_timestamp.max(s.timestamp);
        state.lat_lon = narrow(narrow(state.lat_lon, s.lat), s.lon);
        if let Some(v) = s.speed {
            state.speed = narrow(state.speed, v);
            state.has_speed = true;
            *self.speeds.entry(v.floor() as i64).or_default() += 1;
        }
        if let Some(b) = s.bearing {
            state.bearing = narrow(state.bearing, b);
            state.has_bearing = true;
        }
        if let Some(i) = interval {
            *self.intervals.entry(i.floor() as i64).or_default() += 1;
        }
    }

    pub fn finish(self) -> StatsReport {
        let mut ll = ResolutionAgg::default();
        let mut sp = ResolutionAgg::default();
        let mut br = ResolutionAgg::default();
        for v in self.vehicles.values() {
            ll.add(v.lat_lon, true);
            sp.add(v.speed, v.has_speed);
            br.add(v.bearing, v.has_bearing);
        }
        let bins = |m: BTreeMap<i64, u64>| {
            m.into_iter()
                .map(|(bin, count)| HistogramBin { bin, count })
                .collect()
        };
        StatsReport {
            interval_histogram: bins(self.intervals),
            speed_histogram: bins(self.speeds),
            lat_lon_resolution: ll.finish(),
            speed_resolution: sp.finish(),
            bearing_resolution: br.finish(),
            sample_count: self.samples,
            vehicle_count: self.vehicles.len() as u64,
            rejected_count: self.rejected,
        }
    }
}

#[derive(Default)]
struct ResolutionAgg {
    mask: Option<u32>,
    groups: BTreeMap<usize, u64>,
}

impl ResolutionAgg {
    fn add(&mut self, mask: u32, observed: bool) {
        if !observed {
            return;
        }
        self.mask = Some(self.mask.unwrap_or(ALL_QUANTA) & mask);
        if mask != 0 {
            *self
                .groups
                .entry(31 - mask.leading_zeros() as usize)
                .or_default() += 1;
        }
    }

    fn finish(self) -> ResolutionEstimate {
        ResolutionEstimate {
            overall: self.mask.and_then(coarsest),
            per_vehicle: self
                .groups
                .into_iter()
                .map(|(idx, vehicles)| QuantumGroup {
                    quantum: quantum(idx),
                    vehicles,
                })
                .collect(),
        }
    }
}

/// Statistics of tracks whose intervals have been derived.
pub fn dataset_stats(tracks: &[Track], rejected: u64) -> StatsReport {
    let mut acc = StatsAccumulator::new();
    acc.add_rejected(rejected);
    for s in tracks.iter().flat_map(|t| &t.samples) {
        acc.observe(s);
    }
    acc.finish()
}
