//! Synthetic data: labelled road tiles and large quantized GPS feeds.

use std::io::Read;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::derive_seed;
use crate::error::{Error, Result};
use crate::extract::{LabeledRaster, Mask};
use crate::geo::{project, unproject, PixelPoint, TileSpec};
use crate::ingest::GpsSample;
use crate::render::render_count;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub tiles: usize,
    pub size: u32,
    /// Meters per pixel.
    pub resolution: f64,
    /// Roads per tile, drawn uniformly from `[lo, hi]`.
    pub roads: [usize; 2],
    pub road_width_px: f64,
    /// Cross-track noise in pixels.
    pub noise_sigma_px: f64,
    /// Meters of road per sample.
    pub sample_spacing_m: f64,
    /// Seconds between consecutive samples of one vehicle.
    pub interval_s: i64,
    /// Upper-left corner of the first tile.
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tiles: 10,
            size: 1024,
            resolution: 0.5,
            roads: [3, 5],
            road_width_px: 8.0,
            noise_sigma_px: 2.0,
            sample_spacing_m: 2.0,
            interval_s: 3,
            origin_lat: 39.95,
            origin_lon: 116.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles == 0 || self.size < 16 {
            return Err(Error::config("need at least one tile of at least 16 px"));
        }
        if !(self.resolution > 0.0 && self.sample_spacing_m > 0.0 && self.road_width_px > 0.0) {
            return Err(Error::config("resolution, spacing and road width must be positive"));
        }
        if self.noise_sigma_px.is_nan() || self.noise_sigma_px < 0.0 {
            return Err(Error::config("noise sigma must be >= 0"));
        }
        if self.roads[0] == 0 || self.roads[0] > self.roads[1] {
            return Err(Error::config("road count range must satisfy 1 <= lo <= hi"));
        }
        if self.interval_s < 1 {
            return Err(Error::config("interval must be >= 1 s"));
        }
        Ok(())
    }
}

/// One generated tile with its samples and label.
#[derive(Debug, Clone)]
pub struct SynthTile {
    pub tile: TileSpec,
    pub samples: Vec<GpsSample>,
    pub truth: Mask,
    /// Road centerlines as `(row, col)` pixel polylines.
    pub roads: Vec<Vec<(f64, f64)>>,
}

impl SynthTile {
    pub fn points(&self) -> Vec<PixelPoint> {
        self.tile.project_samples(&self.samples)
    }

    pub fn labeled_raster(&self) -> LabeledRaster {
        LabeledRaster {
            count: render_count(&self.points(), &self.tile),
            truth: self.truth.clone(),
        }
    }
}

/// Distance from `p` to segment `a b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Pixels whose center lies within `width / 2` of any polyline.
pub fn road_mask(tile: &TileSpec, roads: &[Vec<(f64, f64)>], width: f64) -> Mask {
    let half = width / 2.0;
    let mut m = Mask::empty(tile);
    let (h, w) = (tile.height as i64, tile.width as i64);
    for road in roads {
        for seg in road.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let r0 = ((a.0.min(b.0) - half).floor() as i64).max(0);
            let r1 = ((a.0.max(b.0) + half).ceil() as i64).min(h - 1);
            let c0 = ((a.1.min(b.1) - half).floor() as i64).max(0);
            let c1 = ((a.1.max(b.1) + half).ceil() as i64).min(w - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let center = (r as f64 + 0.5, c as f64 + 0.5);
                    if segment_distance(center, a, b) <= half {
                        m.set(r as usize, c as usize, true);
                    }
                }
            }
        }
    }
    m
}

/// A point on the tile border, `side` 0..4 = top, right, bottom, left.
fn border_point(side: usize, size: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u = rng.random_range(0.05 * size..0.95 * size);
    match side {
        0 => (0.0, u),
        1 => (u, size),
        2 => (size, u),
        _ => (u, 0.0),
    }
}

/// Border-to-border polyline through one or two interior bends.
fn random_road(size: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let s0 = rng.random_range(0..4);
    let s1 = (s0 + rng.random_range(1..4)) % 4;
    let mut road = vec![border_point(s0, size, rng)];
    for _ in 0..rng.random_range(1..=2) {
        road.push((
            rng.random_range(0.15 * size..0.85 * size),
            rng.random_range(0.15 * size..0.85 * size),
        ));
    }
    road.push(border_point(s1, size, rng));
    road
}

fn polyline_length(road: &[(f64, f64)]) -> f64 {
    road.windows(2)
        .map(|s| ((s[1].0 - s[0].0).powi(2) + (s[1].1 - s[0].1).powi(2)).sqrt())
        .sum()
}

/// Position and unit direction at arc length `u` along the polyline.
fn along(road: &[(f64, f64)], mut u: f64) -> ((f64, f64), (f64, f64)) {
    let last = road.len().saturating_sub(2);
    for (i, s) in road.windows(2).enumerate() {
        let (dr, dc) = (s[1].0 - s[0].0, s[1].1 - s[0].1);
        let len = (dr * dr + dc * dc).sqrt();
        if u <= len || i == last {
            let t = if len > 0.0 { (u / len).min(1.0) } else { 0.0 };
            let dir = if len > 0.0 { (dr / len, dc / len) } else { (0.0, 1.0) };
            return ((s[0].0 + t * dr, s[0].1 + t * dc), dir);
        }
        u -= len;
    }
    (road[0], (0.0, 1.0))
}

/// Bearing in degrees clockwise from north of a pixel-space direction.
fn bearing_of(dir: (f64, f64)) -> f64 {
    let b = dir.1.atan2(-dir.0).to_degrees();
    let b = if b < 0.0 { b + 360.0 } else { b };
    if b >= 360.0 { 0.0 } else { b }
}

/// Generates one tile. Each road is driven by its own vehicle; samples are
/// placed uniformly at random along the centerline and pushed off it by
/// Gaussian cross-track noise.
pub fn generate_tile(config: &SynthConfig, index: usize) -> Result<SynthTile> {
    config.validate()?;
    let (x0, y0) = project(config.origin_lat, config.origin_lon)?;
    let span = config.size as f64 * config.resolution;
    let id = format!("synth-{index:03}");
    // tiles sit side by side, one tile width apart
    let tile = TileSpec::new(id.clone(), x0 + index as f64 * span, y0)
        .with_size(config.size, config.size)
        .with_resolution(config.resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &id, "roads"));
    let size = config.size as f64;
    let n_roads = rng.random_range(config.roads[0]..=config.roads[1]);
    let roads: Vec<Vec<(f64, f64)>> = (0..n_roads).map(|_| random_road(size, &mut rng)).collect();
    let truth = road_mask(&tile, &roads, config.road_width_px);

    let noise = Normal::new(0.0, config.noise_sigma_px.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config(e.to_string()))?;
    let px_per_sample = config.sample_spacing_m / config.resolution;
    let speed = config.sample_spacing_m / config.interval_s as f64 * 3.6;
    let mut samples = Vec::new();
    for (j, road) in roads.iter().enumerate() {
        let len = polyline_length(road);
        let n = (len / px_per_sample).round() as usize;
        let mut us: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..len)).collect();
        us.sort_by(f64::total_cmp);
        let vehicle = format!("{id}-v{j}");
        for (i, u) in us.into_iter().enumerate() {
            let ((r, c), dir) = along(road, u);
            let e = if config.noise_sigma_px > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            // normal to the travel direction
            let (row, col) = (r + e * dir.1, c - e * dir.0);
            let (x, y) = tile.from_pixel(row, col);
            let (lat, lon) = unproject(x, y);
            samples.push(
                GpsSample::new(&vehicle, 1_500_000_000 + i as i64 * config.interval_s, lat, lon)
                    .with_speed(speed)
                    .with_bearing(bearing_of(dir)),
            );
        }
    }
    Ok(SynthTile {
        tile,
        samples,
        truth,
        roads,
    })
}

/// All tiles of a dataset, generated in parallel.
pub fn generate_dataset(config: &SynthConfig) -> Result<Vec<SynthTile>> {
    use rayon::prelude::*;
    config.validate()?;
    (0..config.tiles)
        .into_par_iter()
        .map(|i| generate_tile(config, i))
        .collect()
}

/// Random-walk fleet whose coordinates and speeds sit on fixed measurement
/// grids, for exercising ingest and resolution detection at scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedConfig {
    pub vehicles: usize,
    pub samples: u64,
    /// Lat/lon quantum of each vehicle, assigned round robin.
    pub latlon_quanta: Vec<f64>,
    /// Speed quantum (km/h) of each vehicle, assigned round robin.
    pub speed_quanta: Vec<f64>,
    /// Sampling intervals in seconds, drawn uniformly per step.
    pub intervals: Vec<i64>,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub seed: u64,
}

impl Default for FeedConfig {
    fn default() -> Self {
        FeedConfig {
            vehicles: 1000,
            samples: 100_000,
            latlon_quanta: vec![1e-5, 1e-4],
            speed_quanta: vec![1.0, 2.0],
            intervals: vec![1, 2, 3, 5, 10, 15, 30, 60],
            origin_lat: 39.9,
            origin_lon: 116.4,
            seed: 0,
        }
    }
}

struct Vehicle {
    id: String,
    lat_k: i64,
    lon_k: i64,
    quantum: f64,
    speed_quantum: f64,
    ts: i64,
}

/// Streaming sample source for a [`FeedConfig`]; state is one entry per
/// vehicle regardless of how many samples are drawn.
pub struct FeedGenerator {
    vehicles: Vec<Vehicle>,
    intervals: Vec<i64>,
    remaining: u64,
    next: usize,
    rng: ChaCha8Rng,
}

impl FeedGenerator {
    pub fn new(config: &FeedConfig) -> Result<Self> {
        if config.vehicles == 0 || config.latlon_quanta.is_empty() || config.speed_quanta.is_empty() {
            return Err(Error::config("feed needs vehicles and quanta"));
        }
        if config.intervals.is_empty() || config.intervals.iter().any(|&i| i < 1) {
            return Err(Error::config("feed intervals must be >= 1 s"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "feed", "vehicles"));
        let vehicles = (0..config.vehicles)
            .map(|v| {
                let q = config.latlon_quanta[v % config.latlon_quanta.len()];
                let lat = config.origin_lat + rng.random_range(-0.1..0.1);
                let lon = config.origin_lon + rng.random_range(-0.1..0.1);
                Vehicle {
                    id: format!("veh{v:06}"),
                    lat_k: (lat / q).round() as i64,
                    lon_k: (lon / q).round() as i64,
                    quantum: q,
                    speed_quantum: config.speed_quanta[v % config.speed_quanta.len()],
                    ts: 1_500_000_000 + rng.random_range(0..3600),
                }
            })
            .collect();
        Ok(FeedGenerator {
            vehicles,
            intervals: config.intervals.clone(),
            remaining: config.samples,
            next: 0,
            rng,
        })
    }
}

/// `k * q` rounded to the quantum's decimal precision, so the printed value
/// is the shortest decimal on the grid.
fn on_grid(k: i64, q: f64) -> f64 {
    let digits = (-q.log10()).ceil().max(0.0) as i32 + 1;
    let scale = 10f64.powi(digits);
    ((k as f64 * q) * scale).round() / scale
}

impl Iterator for FeedGenerator {
    type Item = GpsSample;

    fn next(&mut self) -> Option<GpsSample> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let rng = &mut self.rng;
        let n = self.vehicles.len();
        let v = &mut self.vehicles[self.next];
        self.next = (self.next + 1) % n;
        v.ts += *self.intervals.choose(rng).expect("non-empty");
        let step = (2e-4 / v.quantum).max(1.0) as i64;
        v.lat_k += rng.random_range(-step..=step);
        v.lon_k += rng.random_range(-step..=step);
        let speed = rng.random_range(0..=60) as f64 * v.speed_quantum;
        let bearing = rng.random_range(0..360) as f64;
        Some(
            GpsSample::new(
                v.id.clone(),
                v.ts,
                on_grid(v.lat_k, v.quantum),
                on_grid(v.lon_k, v.quantum),
            )
            .with_speed(speed)
            .with_bearing(bearing),
        )
    }
}

/// Renders a [`FeedGenerator`] as canonical CSV on the fly.
pub struct FeedReader {
    generator: FeedGenerator,
    buf: Vec<u8>,
    pos: usize,
}

impl FeedReader {
    pub fn new(config: &FeedConfig) -> Result<Self> {
        Ok(FeedReader {
            generator: FeedGenerator::new(config)?,
            buf: Vec::with_capacity(1 << 16),
            pos: 0,
        })
    }
}

impl Read for FeedReader {
    fn read(&mut self, out: &mut [u8]) -> std::io::Result<usize> {
        if self.pos == self.buf.len() {
            self.buf.clear();
            self.pos = 0;
            while self.buf.len() < 1 << 16 {
                let Some(s) = self.generator.next() else { break };
                self.buf.extend_from_slice(s.to_csv_record().as_bytes());
                self.buf.push(b'\n');
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            tiles: 2,
            size: 128,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn segment_distance_cases() {
        assert_eq!(segment_distance((0.0, 5.0), (0.0, 0.0), (0.0, 10.0)), 0.0);
        assert_eq!(segment_distance((3.0, 5.0), (0.0, 0.0), (0.0, 10.0)), 3.0);
        assert_eq!(segment_distance((0.0, 14.0), (0.0, 0.0), (0.0, 10.0)), 4.0);
    }

    #[test]
    fn straight_road_mask_has_road_width() {
        let tile = TileSpec::new("t", 0.0, 0.0).with_size(32, 32);
        let m = road_mask(&tile, &[vec![(16.0, 0.0), (16.0, 32.0)]], 8.0);
        // centers 12.5..=19.5 are within 4 of row 16
        assert_eq!(m.count_ones(), 8 * 32);
        assert!(m.get(12, 5) && m.get(19, 5) && !m.get(11, 5) && !m.get(20, 5));
    }

    #[test]
    fn tiles_are_deterministic_and_sampled_at_spacing() {
        let cfg = small();
        let a = generate_tile(&cfg, 1).unwrap();
        let b = generate_tile(&cfg, 1).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.truth, b.truth);
        let length_px: f64 = a.roads.iter().map(|r| polyline_length(r)).sum();
        let expected = length_px / (cfg.sample_spacing_m / cfg.resolution);
        assert!((a.samples.len() as f64 - expected).abs() <= a.roads.len() as f64);
        for s in &a.samples {
            s.validate().unwrap();
        }
        let pts = a.points();
        let inside = pts.iter().filter(|p| p.in_bounds(&a.tile)).count();
        assert!(inside as f64 > 0.95 * pts.len() as f64);
    }

    #[test]
    fn noiseless_samples_fall_on_the_road() {
        let cfg = SynthConfig {
            noise_sigma_px: 0.0,
            ..small()
        };
        let t = generate_tile(&cfg, 0).unwrap();
        for p in t.points() {
            if let Some((r, c)) = p.pixel(&t.tile) {
                assert!(t.truth.get(r, c), "({r}, {c}) off road");
            }
        }
    }

    #[test]
    fn feed_values_sit_on_their_grids() {
        let cfg = FeedConfig {
            vehicles: 4,
            samples: 400,
            ..FeedConfig::default()
        };
        let samples: Vec<GpsSample> = FeedGenerator::new(&cfg).unwrap().collect();
        assert_eq!(samples.len(), 400);
        for (i, s) in samples.iter().enumerate() {
            let q = cfg.latlon_quanta[i % 4 % 2];
            let k = s.lat / q;
            assert!((k - k.round()).abs() < 1e-6, "{} not on {q}", s.lat);
            let sq = cfg.speed_quanta[i % 4 % 2];
            assert_eq!(s.speed.unwrap() % sq, 0.0);
        }
        let mut text = String::new();
        FeedReader::new(&cfg).unwrap().read_to_string(&mut text).unwrap();
        assert_eq!(text.lines().count(), 400);
        assert_eq!(text.lines().next().unwrap(), samples[0].to_csv_record());
    }
}
