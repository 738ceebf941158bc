//! Spherical Web Mercator projection, tile pixel geometry, and a uniform grid
//! index for bounding-box queries over projected samples.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::GpsSample;

pub const EARTH_RADIUS: f64 = 6_378_137.0;

/// Latitude bound of the projection domain, in degrees.
pub const MAX_LATITUDE: f64 = 85.06;

pub const DEFAULT_TILE_SIZE: u32 = 1024;
pub const DEFAULT_RESOLUTION: f64 = 0.5;

/// Projects geographic degrees to spherical Mercator meters.
pub fn project(lat: f64, lon: f64) -> Result<(f64, f64)> {
    if !lat.is_finite() || lat.abs() >= MAX_LATITUDE {
        return Err(Error::OutOfDomain(lat));
    }
    let x = EARTH_RADIUS * lon.to_radians();
    // atanh(sin(lat)) == ln(tan(pi/4 + lat/2)), exact at the equator
    let y = EARTH_RADIUS * lat.to_radians().sin().atanh();
    Ok((x, y))
}

/// Inverse of [`project`]: Mercator meters to `(lat, lon)` degrees.
pub fn unproject(x: f64, y: f64) -> (f64, f64) {
    let lat = (2.0 * (y / EARTH_RADIUS).exp().atan() - PI / 2.0).to_degrees();
    let lon = (x / EARTH_RADIUS).to_degrees();
    (lat, lon)
}

/// Axis-aligned rectangle in Mercator meters. Contains points with
/// `min <= p < max` on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        BBox {
            min_x,
            min_y,
            max_x,
            max_y,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.max_x > self.min_x && self.max_y > self.min_y)
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x < self.max_x && y >= self.min_y && y < self.max_y
    }
}

/// Georeferenced raster window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub tile_id: String,
    /// Mercator x of the top-left corner.
    pub origin_x: f64,
    /// Mercator y of the top-left corner.
    pub origin_y: f64,
    /// Meters per pixel.
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default = "default_size")]
    pub width: u32,
    #[serde(default = "default_size")]
    pub height: u32,
}

fn default_resolution() -> f64 {
    DEFAULT_RESOLUTION
}

fn default_size() -> u32 {
    DEFAULT_TILE_SIZE
}

impl TileSpec {
    /// A 1024x1024 tile at 0.5 m/px.
    pub fn new(tile_id: impl Into<String>, origin_x: f64, origin_y: f64) -> Self {
        TileSpec {
            tile_id: tile_id.into(),
            origin_x,
            origin_y,
            resolution: DEFAULT_RESOLUTION,
            width: DEFAULT_TILE_SIZE,
            height: DEFAULT_TILE_SIZE,
        }
    }

    pub fn with_size(mut self, width: u32, height: u32) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn with_resolution(mut self, resolution: f64) -> Self {
        self.resolution = resolution;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(Error::config(format!(
                "tile {}: resolution must be positive",
                self.tile_id
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config(format!("tile {}: empty size", self.tile_id)));
        }
        if !(self.origin_x.is_finite() && self.origin_y.is_finite()) {
            return Err(Error::config(format!("tile {}: non-finite origin", self.tile_id)));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Same raster grid (ignores the id).
    pub fn same_geometry(&self, other: &TileSpec) -> bool {
        self.origin_x == other.origin_x
            && self.origin_y == other.origin_y
            && self.resolution == other.resolution
            && self.width == other.width
            && self.height == other.height
    }

    /// Mercator extent covered by the tile.
    pub fn bbox(&self) -> BBox {
        BBox::new(
            self.origin_x,
            self.origin_y - self.height as f64 * self.resolution,
            self.origin_x + self.width as f64 * self.resolution,
            self.origin_y,
        )
    }

    pub fn to_pixel(&self, x: f64, y: f64, sample: usize) -> PixelPoint {
        PixelPoint {
            row: (self.origin_y - y) / self.resolution,
            col: (x - self.origin_x) / self.resolution,
            sample,
        }
    }

    /// Mercator position of fractional pixel coordinates.
    pub fn from_pixel(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.resolution,
            self.origin_y - row * self.resolution,
        )
    }

    /// Projects samples into this tile's pixel space. Points outside the tile
    /// are kept (flagged by [`PixelPoint::in_bounds`]); samples outside the
    /// Mercator domain are dropped. `sample` indexes into `samples`.
    pub fn project_samples(&self, samples: &[GpsSample]) -> Vec<PixelPoint> {
        samples
            .iter()
            .enumerate()
            .filter_map(|(i, s)| project(s.lat, s.lon).ok().map(|(x, y)| self.to_pixel(x, y, i)))
            .collect()
    }
}

/// Reads a JSON array of tile specs.
pub fn read_manifest(path: &Path) -> Result<Vec<TileSpec>> {
    let text = std::fs::read_to_string(path)?;
    let tiles: Vec<TileSpec> = serde_json::from_str(&text)?;
    for t in &tiles {
        t.validate()?;
    }
    Ok(tiles)
}

pub fn write_manifest(path: &Path, tiles: &[TileSpec]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(tiles)?)?;
    Ok(())
}

/// A sample position in a tile's fractional pixel space (row grows south).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub row: f64,
    pub col: f64,
    /// Index of the originating sample.
    pub sample: usize,
}

impl PixelPoint {
    pub fn new(row: f64, col: f64, sample: usize) -> Self {
        PixelPoint { row, col, sample }
    }

    #[inline]
    pub fn in_bounds(&self, tile: &TileSpec) -> bool {
        self.row >= 0.0
            && self.row < tile.height as f64
            && self.col >= 0.0
            && self.col < tile.width as f64
    }

    /// Integer pixel `(row, col)` the point falls in, if inside the tile.
    #[inline]
    pub fn pixel(&self, tile: &TileSpec) -> Option<(usize, usize)> {
        self.in_bounds(tile)
            .then(|| (self.row.floor() as usize, self.col.floor() as usize))
    }
}

/// Uniform grid over Mercator space mapping cells to sample indices.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    cell_size: f64,
    positions: Vec<(f64, f64)>,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl SpatialIndex {
    /// Default cell size: one default tile width in meters.
    pub const DEFAULT_CELL_SIZE: f64 = DEFAULT_TILE_SIZE as f64 * DEFAULT_RESOLUTION;

    /// Indexes Mercator positions; entry `i` is reported as sample `i`.
    pub fn build(positions: Vec<(f64, f64)>, cell_size: f64) -> Result<Self> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::config("cell size must be positive"));
        }
        if let Some(i) = positions
            .iter()
            .position(|(x, y)| !(x.is_finite() && y.is_finite()))
        {
            return Err(Error::data(format!("non-finite position for sample {i}")));
        }
        Ok(Self::grid(positions, cell_size))
    }

    /// Projects and indexes samples. Samples outside the projection domain
    /// are not indexed; their indices are returned alongside.
    pub fn from_samples(samples: &[GpsSample], cell_size: f64) -> Result<(Self, Vec<usize>)> {
        let mut skipped = Vec::new();
        let mut positions = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            match project(s.lat, s.lon) {
                Ok(p) => positions.push(p),
                Err(_) => {
                    // keep indices aligned with `samples`
                    positions.push((f64::NAN, f64::NAN));
                    skipped.push(i);
                }
            }
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::config("cell size must be positive"));
        }
        Ok((Self::grid(positions, cell_size), skipped))
    }

    /// Non-finite positions are left out of the grid.
    fn grid(positions: Vec<(f64, f64)>, cell_size: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &(x, y)) in positions.iter().enumerate() {
            if x.is_finite() && y.is_finite() {
                cells.entry(Self::cell_of(cell_size, x, y)).or_default().push(i);
            }
        }
        SpatialIndex {
            cell_size,
            positions,
            cells,
        }
    }

    fn cell_of(cell_size: f64, x: f64, y: f64) -> (i64, i64) {
        ((x / cell_size).floor() as i64, (y / cell_size).floor() as i64)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn position(&self, sample: usize) -> (f64, f64) {
        self.positions[sample]
    }

    /// Indices of the samples inside `bbox`, ascending.
    pub fn query(&self, bbox: &BBox) -> Vec<usize> {
        if bbox.is_degenerate() {
            return Vec::new();
        }
        let (cx0, cy0) = Self::cell_of(self.cell_size, bbox.min_x, bbox.min_y);
        let (cx1, cy1) = Self::cell_of(self.cell_size, bbox.max_x, bbox.max_y);
        let span = (cx1 - cx0 + 1) as f64 * (cy1 - cy0 + 1) as f64;
        let mut out = Vec::new();
        let mut take = |ids: &Vec<usize>| {
            out.extend(ids.iter().copied().filter(|&i| {
                let (x, y) = self.positions[i];
                bbox.contains(x, y)
            }))
        };
        if span > self.cells.len() as f64 {
            for ((cx, cy), ids) in &self.cells {
                if (cx0..=cx1).contains(cx) && (cy0..=cy1).contains(cy) {
                    take(ids);
                }
            }
        } else {
            for cx in cx0..=cx1 {
                for cy in cy0..=cy1 {
                    if let Some(ids) = self.cells.get(&(cx, cy)) {
                        take(ids);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Samples falling inside a tile.
    pub fn query_tile(&self, tile: &TileSpec) -> Vec<usize> {
        self.query(&tile.bbox())
    }
}
