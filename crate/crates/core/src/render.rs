//! Rasterization of point sets into tile-aligned input channels.
//!
//! Density channels come in three flavours (binary occupancy, raw counts,
//! Gaussian-smoothed counts) with an optional `ln(1 + v)` scale. Feature
//! channels hold the per-pixel mean of a sample attribute. Rasters are left
//! un-normalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{project, PixelPoint, TileSpec};
use crate::ingest::GpsSample;

pub const DENSITY: &str = "gps_density";
pub const BINARY: &str = "gps_binary";
pub const SEGMENTS: &str = "gps_segments";

/// Default largest time gap, in seconds, bridged by a rendered segment.
pub const DEFAULT_MAX_SEGMENT_INTERVAL: f64 = 60.0;

/// Multi-channel float raster over a tile, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub tile: TileSpec,
    pub channels: usize,
    pub data: Vec<f32>,
    pub channel_names: Vec<String>,
}

impl Raster {
    pub fn zeros(tile: &TileSpec, names: &[&str]) -> Self {
        Raster {
            tile: tile.clone(),
            channels: names.len(),
            data: vec![0.0; names.len() * tile.pixel_count()],
            channel_names: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.tile.width as usize
    }

    pub fn height(&self) -> usize {
        self.tile.height as usize
    }

    pub fn plane_len(&self) -> usize {
        self.tile.pixel_count()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height() + row) * self.width() + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Checks the dimension and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::data("raster has no channels"));
        }
        if self.data.len() != self.channels * self.plane_len() {
            return Err(Error::data(format!(
                "raster payload has {} values, expected {}",
                self.data.len(),
                self.channels * self.plane_len()
            )));
        }
        if self.channel_names.len() != self.channels {
            return Err(Error::data("channel name count does not match channel count"));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("raster contains non-finite values"));
        }
        Ok(())
    }

    fn map_values(&self, f: impl Fn(f32) -> f32) -> Raster {
        Raster {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Binary,
    Count,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Interval,
    Speed,
    BearingSin,
}

impl Feature {
    pub fn channel_name(self) -> &'static str {
        match self {
            Feature::Interval => "gps_interval",
            Feature::Speed => "gps_speed",
            Feature::BearingSin => "gps_bearing_sin",
        }
    }

    /// Feature value of a sample, if it carries one.
    pub fn value(self, s: &GpsSample) -> Option<f64> {
        match self {
            Feature::Interval => s.interval,
            Feature::Speed => s.speed,
            Feature::BearingSin => s.bearing.map(|b| (b * std::f64::consts::PI / 180.0).sin()),
        }
    }
}

impl std::str::FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "interval" => Ok(Feature::Interval),
            "speed" => Ok(Feature::Speed),
            "bearing_sin" | "bearing" => Ok(Feature::BearingSin),
            other => Err(Error::config(format!("unknown feature {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub mode: RenderMode,
    /// Gaussian half-width in pixels; the window is `(2k+1)^2`.
    pub kernel_size: u32,
    pub scale: Scale,
    pub feature_channels: Vec<Feature>,
    pub segments: bool,
    pub max_segment_interval: f64,
}

impl Default for RenderConfig {
    /// Gaussian density with kernel size 3 plus the sampling interval channel.
    fn default() -> Self {
        RenderConfig {
            mode: RenderMode::Gaussian,
            kernel_size: 3,
            scale: Scale::Linear,
            feature_channels: vec![Feature::Interval],
            segments: false,
            max_segment_interval: DEFAULT_MAX_SEGMENT_INTERVAL,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == RenderMode::Gaussian && self.kernel_size < 1 {
            return Err(Error::config("gaussian rendering needs kernel_size >= 1"));
        }
        if self.max_segment_interval.is_nan() || self.max_segment_interval < 0.0 {
            return Err(Error::config("max_segment_interval must be >= 0"));
        }
        Ok(())
    }
}

/// Counts points per pixel. Returns the raster and the number of points that
/// fell outside the tile.
pub fn render_count_report(points: &[PixelPoint], tile: &TileSpec) -> (Raster, usize) {
    let mut r = Raster::zeros(tile, &[DENSITY]);
    let w = tile.width as usize;
    let mut outside = 0;
    for p in points {
        match p.pixel(tile) {
            Some((row, col)) => r.data[row * w + col] += 1.0,
            None => outside += 1,
        }
    }
    (r, outside)
}

/// Number of points per pixel; points outside the tile are ignored.
pub fn render_count(points: &[PixelPoint], tile: &TileSpec) -> Raster {
    render_count_report(points, tile).0
}

/// 1 where at least one point falls in the pixel, else 0.
pub fn render_binary(points: &[PixelPoint], tile: &TileSpec) -> Raster {
    let mut r = render_count(points, tile).map_values(|v| if v > 0.0 { 1.0 } else { 0.0 });
    r.channel_names = vec![BINARY.to_string()];
    r
}

/// Normalized 1D Gaussian taps for half-width `k` (`sigma = k / 2`).
pub fn gaussian_taps(k: u32) -> Vec<f64> {
    let sigma = k as f64 / 2.0;
    let k = k as i64;
    let raw: Vec<f64> = (-k..=k)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// The `(2k+1) x (2k+1)` smoothing kernel, row-major. It is the outer product
/// of [`gaussian_taps`] with itself and sums to 1.
pub fn gaussian_kernel_2d(k: u32) -> Vec<f64> {
    let t = gaussian_taps(k);
    t.iter().flat_map(|a| t.iter().map(move |b| a * b)).collect()
}

/// Convolves each channel with the normalized truncated Gaussian of
/// half-width `k`, zero padded. Mass within `k` pixels of a border partly
/// leaves the tile.
pub fn gaussian_smooth(raster: &Raster, k: u32) -> Result<Raster> {
    if k < 1 {
        return Err(Error::config("gaussian kernel size must be >= 1"));
    }
    let taps = gaussian_taps(k);
    let (h, w) = (raster.height(), raster.width());
    let mut out = raster.clone();
    let mut tmp = vec![0.0f64; h * w];
    for c in 0..raster.channels {
        separable_pass(raster.channel(c), &mut tmp, out.channel_mut(c), h, w, &taps);
    }
    Ok(out)
}

fn separable_pass(src: &[f32], tmp: &mut [f64], dst: &mut [f32], h: usize, w: usize, taps: &[f64]) {
    let k = taps.len() / 2;
    // horizontal
    for row in 0..h {
        let line = &src[row * w..(row + 1) * w];
        let out = &mut tmp[row * w..(row + 1) * w];
        out.iter_mut().for_each(|v| *v = 0.0);
        for (col, &v) in line.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let lo = col.saturating_sub(k);
            let hi = (col + k).min(w - 1);
            for j in lo..=hi {
                out[j] += v as f64 * taps[j + k - col];
            }
        }
    }
    // vertical
    let mut acc = vec![0.0f64; w];
    for row in 0..h {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let lo = row.saturating_sub(k);
        let hi = (row + k).min(h - 1);
        for r in lo..=hi {
            let t = taps[r + k - row];
            for (a, &v) in acc.iter_mut().zip(&tmp[r * w..(r + 1) * w]) {
                *a += v * t;
            }
        }
        for (d, &a) in dst[row * w..(row + 1) * w].iter_mut().zip(&acc) {
            *d = a as f32;
        }
    }
}

/// `ln(1 + v)` elementwise.
pub fn apply_log_scale(raster: &Raster) -> Result<Raster> {
    if let Some(v) = raster.data.iter().find(|&&v| v < 0.0) {
        return Err(Error::data(format!("log scale needs non-negative values, found {v}")));
    }
    Ok(raster.map_values(|v| v.ln_1p()))
}

pub fn apply_scale(raster: Raster, scale: Scale) -> Result<Raster> {
    match scale {
        Scale::Linear => Ok(raster),
        Scale::Log => apply_log_scale(&raster),
    }
}

/// Per-pixel mean of a sample feature. `points[i].sample` indexes `samples`;
/// samples without the feature do not contribute and empty pixels are 0.
pub fn render_feature(
    points: &[PixelPoint],
    samples: &[GpsSample],
    tile: &TileSpec,
    feature: Feature,
) -> Raster {
    let n = tile.pixel_count();
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    let w = tile.width as usize;
    for p in points {
        let Some((row, col)) = p.pixel(tile) else { continue };
        let Some(v) = samples.get(p.sample).and_then(|s| feature.value(s)) else { continue };
        sum[row * w + col] += v;
        count[row * w + col] += 1;
    }
    Raster {
        tile: tile.clone(),
        channels: 1,
        data: sum
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
            .collect(),
        channel_names: vec![feature.channel_name().to_string()],
    }
}

/// Integer pixels on the line from `a` to `b`, endpoints included.
pub fn line_pixels(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut r, mut c) = a;
    let dr = (b.0 - a.0).abs();
    let dc = -(b.1 - a.1).abs();
    let sr = if a.0 < b.0 { 1 } else { -1 };
    let sc = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dr + dc;
    let mut out = Vec::with_capacity((dr.max(-dc) + 1) as usize);
    loop {
        out.push((r, c));
        if (r, c) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
    out
}

/// Draws a line between consecutive samples of the same vehicle whose time
/// gap is at most `max_interval` seconds, adding 1 to each covered pixel.
/// `samples` must be grouped per vehicle and time-ordered within a group.
pub fn render_segments(samples: &[GpsSample], tile: &TileSpec, max_interval: f64) -> Raster {
    let mut r = Raster::zeros(tile, &[SEGMENTS]);
    let (h, w) = (tile.height as i64, tile.width as i64);
    let pixel = |s: &GpsSample| {
        project(s.lat, s.lon).ok().map(|(x, y)| {
            let p = tile.to_pixel(x, y, 0);
            (p.row.floor() as i64, p.col.floor() as i64)
        })
    };
    for pair in samples.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.vehicle_id != b.vehicle_id {
            continue;
        }
        let gap = (b.timestamp - a.timestamp) as f64;
        if gap <= 0.0 || gap > max_interval {
            continue;
        }
        let (Some(pa), Some(pb)) = (pixel(a), pixel(b)) else { continue };
        for (row, col) in line_pixels(pa, pb) {
            if (0..h).contains(&row) && (0..w).contains(&col) {
                r.data[(row * w + col) as usize] += 1.0;
            }
        }
    }
    r
}

/// Stacks rasters of identical geometry into one multi-channel raster.
pub fn compose_input(rasters: &[Raster]) -> Result<Raster> {
    let first = rasters
        .first()
        .ok_or_else(|| Error::config("compose_input needs at least one raster"))?;
    let mut out = Raster {
        tile: first.tile.clone(),
        channels: 0,
        data: Vec::with_capacity(rasters.iter().map(|r| r.data.len()).sum()),
        channel_names: Vec::new(),
    };
    for r in rasters {
        if !r.tile.same_geometry(&first.tile) {
            return Err(Error::geometry(format!(
                "tile {} ({}x{}) does not match {} ({}x{})",
                r.tile.tile_id, r.tile.width, r.tile.height, first.tile.tile_id, first.tile.width, first.tile.height
            )));
        }
        out.channels += r.channels;
        out.data.extend_from_slice(&r.data);
        out.channel_names.extend(r.channel_names.iter().cloned());
    }
    Ok(out)
}

/// Density channel according to `config.mode` and `config.scale`.
pub fn render_density(config: &RenderConfig, points: &[PixelPoint], tile: &TileSpec) -> Result<Raster> {
    config.validate()?;
    let base = match config.mode {
        RenderMode::Binary => render_binary(points, tile),
        RenderMode::Count => render_count(points, tile),
        RenderMode::Gaussian => gaussian_smooth(&render_count(points, tile), config.kernel_size)?,
    };
    apply_scale(base, config.scale)
}

/// Full input stack for one tile: density, then each feature channel, then
/// the segment channel if enabled.
pub fn render_tile(
    config: &RenderConfig,
    tile: &TileSpec,
    points: &[PixelPoint],
    samples: &[GpsSample],
) -> Result<Raster> {
    let mut layers = vec![render_density(config, points, tile)?];
    for &f in &config.feature_channels {
        layers.push(render_feature(points, samples, tile, f));
    }
    if config.segments {
        layers.push(render_segments(samples, tile, config.max_segment_interval));
    }
    compose_input(&layers)
}
