//! Kernel density road extraction: smooth the count raster, optionally log
//! scale it, and keep pixels at or above a threshold.

use bitvec::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::TileSpec;
use crate::render::{apply_scale, gaussian_smooth, Raster, Scale};

/// Binary road raster, one bit per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub tile: TileSpec,
    bits: BitVec<u64, Lsb0>,
}

impl Mask {
    pub fn empty(tile: &TileSpec) -> Self {
        Mask {
            tile: tile.clone(),
            bits: bitvec![u64, Lsb0; 0; tile.pixel_count()],
        }
    }

    pub fn full(tile: &TileSpec) -> Self {
        Mask {
            tile: tile.clone(),
            bits: bitvec![u64, Lsb0; 1; tile.pixel_count()],
        }
    }

    /// Builds a mask from a per-pixel predicate over `(row, col)`.
    pub fn from_fn(tile: &TileSpec, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let w = tile.width as usize;
        let mut m = Mask::empty(tile);
        for i in 0..tile.pixel_count() {
            if f(i / w, i % w) {
                m.bits.set(i, true);
            }
        }
        m
    }

    pub fn from_bools(tile: &TileSpec, values: &[bool]) -> Result<Self> {
        if values.len() != tile.pixel_count() {
            return Err(Error::geometry(format!(
                "{} mask values for a {}x{} tile",
                values.len(),
                tile.width,
                tile.height
            )));
        }
        let mut m = Mask::empty(tile);
        for (i, &v) in values.iter().enumerate() {
            m.bits.set(i, v);
        }
        Ok(m)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.tile.width as usize + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        let w = self.tile.width as usize;
        self.bits.set(row * w + col, value);
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.bits.iter().by_vals()
    }

    fn check_geometry(&self, other: &Mask) -> Result<()> {
        if self.tile.width != other.tile.width || self.tile.height != other.tile.height {
            return Err(Error::geometry(format!(
                "mask {}x{} vs {}x{}",
                self.tile.width, self.tile.height, other.tile.width, other.tile.height
            )));
        }
        Ok(())
    }

    /// `(|a ∩ b|, |a ∪ b|)`.
    pub fn overlap(&self, other: &Mask) -> Result<(usize, usize)> {
        self.check_geometry(other)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.bits.as_raw_slice().iter().zip(other.bits.as_raw_slice()) {
            inter += (a & b).count_ones() as usize;
            union += (a | b).count_ones() as usize;
        }
        Ok((inter, union))
    }

    /// Every set pixel of `self` is set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> Result<bool> {
        self.check_geometry(other)?;
        Ok(self
            .bits
            .as_raw_slice()
            .iter()
            .zip(other.bits.as_raw_slice())
            .all(|(a, b)| a & !b == 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionParams {
    pub kernel_size: u32,
    pub threshold: f64,
    #[serde(default)]
    pub scale: Scale,
}

impl ExtractionParams {
    pub fn new(kernel_size: u32, threshold: f64) -> Self {
        ExtractionParams {
            kernel_size,
            threshold,
            scale: Scale::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 1 {
            return Err(Error::config("kernel_size must be >= 1"));
        }
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(Error::config("threshold must be finite and >= 0"));
        }
        Ok(())
    }
}

fn check_count_raster(raster: &Raster) -> Result<()> {
    if raster.channels != 1 {
        return Err(Error::data(format!(
            "KDE extraction needs a single-channel raster, got {}",
            raster.channels
        )));
    }
    if raster.data.iter().any(|&v| v < 0.0) {
        return Err(Error::data("count raster has negative values"));
    }
    Ok(())
}

/// Smoothed (and scaled) density surface used by [`kde_extract`].
pub fn kde_surface(count_raster: &Raster, kernel_size: u32, scale: Scale) -> Result<Raster> {
    check_count_raster(count_raster)?;
    apply_scale(gaussian_smooth(count_raster, kernel_size)?, scale)
}

pub fn threshold_mask(surface: &Raster, threshold: f64) -> Mask {
    let mut m = Mask::empty(&surface.tile);
    for (i, &v) in surface.channel(0).iter().enumerate() {
        if v as f64 >= threshold {
            m.bits.set(i, true);
        }
    }
    m
}

/// Road mask: `scale(gaussian_smooth(raster, k)) >= threshold`.
pub fn kde_extract(count_raster: &Raster, params: &ExtractionParams) -> Result<Mask> {
    params.validate()?;
    let surface = kde_surface(count_raster, params.kernel_size, params.scale)?;
    Ok(threshold_mask(&surface, params.threshold))
}

/// A count raster with its ground-truth mask.
#[derive(Debug, Clone)]
pub struct LabeledRaster {
    pub count: Raster,
    pub truth: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kernel_size: u32,
    pub threshold: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: ExtractionParams,
    pub best_iou: f64,
    /// One row per `(kernel, threshold)`, kernels outermost, in input order.
    pub table: Vec<SweepRow>,
}

/// IoU with the both-empty case counted as 1.
fn iou_from_counts(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Order-independent mean: values are summed in ascending order.
pub(crate) fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// IoU of every threshold for one smoothed surface, in one pass over the
/// pixels. `sorted` must be ascending.
fn ious_for_thresholds(surface: &Raster, truth: &Mask, sorted: &[f64]) -> Vec<f64> {
    let t = sorted.len();
    let mut pred_hist = vec![0u64; t + 1];
    let mut inter_hist = vec![0u64; t + 1];
    let mut truth_total = 0u64;
    for (v, road) in surface.channel(0).iter().zip(truth.iter()) {
        // thresholds 0..idx are <= v, so v is predicted road for them
        let idx = sorted.partition_point(|&th| th <= *v as f64);
        pred_hist[idx] += 1;
        if road {
            inter_hist[idx] += 1;
            truth_total += 1;
        }
    }
    let mut out = vec![0.0; t];
    let (mut pred, mut inter) = (0u64, 0u64);
    for j in (0..t).rev() {
        pred += pred_hist[j + 1];
        inter += inter_hist[j + 1];
        out[j] = iou_from_counts(inter, pred + truth_total - inter);
    }
    out
}

/// Exhaustive grid search of kernel size and threshold by mean IoU over the
/// labelled tiles. Ties go to the smaller kernel, then the smaller threshold.
pub fn sweep_params(
    tiles: &[LabeledRaster],
    kernel_sizes: &[u32],
    thresholds: &[f64],
    scale: Scale,
) -> Result<SweepResult> {
    if tiles.is_empty() {
        return Err(Error::config("sweep needs at least one labelled tile"));
    }
    if kernel_sizes.is_empty() || thresholds.is_empty() {
        return Err(Error::config("sweep grids must be non-empty"));
    }
    for &k in kernel_sizes {
        ExtractionParams { kernel_size: k, threshold: 0.0, scale }.validate()?;
    }
    if thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::config("thresholds must be finite and >= 0"));
    }
    for t in tiles {
        check_count_raster(&t.count)?;
        if t.count.tile.width != t.truth.tile.width || t.count.tile.height != t.truth.tile.height {
            return Err(Error::geometry(format!("labels of tile {} do not match", t.count.tile.tile_id)));
        }
    }
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let position = |th: f64| sorted.iter().position(|&s| s == th).expect("threshold present");

    let mut table = Vec::with_capacity(kernel_sizes.len() * thresholds.len());
    for &k in kernel_sizes {
        let per_tile: Vec<Vec<f64>> = tiles
            .par_iter()
            .map(|t| {
                let surface = kde_surface(&t.count, k, scale)?;
                Ok(ious_for_thresholds(&surface, &t.truth, &sorted))
            })
            .collect::<Result<_>>()?;
        for &th in thresholds {
            let j = position(th);
            let mut v: Vec<f64> = per_tile.iter().map(|ious| ious[j]).collect();
            table.push(SweepRow {
                kernel_size: k,
                threshold: th,
                mean_iou: stable_mean(&mut v),
            });
        }
    }
    let best = table
        .iter()
        .min_by(|a, b| {
            b.mean_iou
                .total_cmp(&a.mean_iou)
                .then(a.kernel_size.cmp(&b.kernel_size))
                .then(a.threshold.total_cmp(&b.threshold))
        })
        .expect("non-empty table");
    Ok(SweepResult {
        best: ExtractionParams {
            kernel_size: best.kernel_size,
            threshold: best.threshold,
            scale,
        },
        best_iou: best.mean_iou,
        table,
    })
}

/// Writes a sweep table as `kernel_size,threshold,mean_iou` CSV.
pub fn write_sweep_csv<W: std::io::Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "kernel_size,threshold,mean_iou")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.kernel_size, r.threshold, r.mean_iou)?;
    }
    Ok(())
}

/// Per-pixel agreement class between two road probability maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TriState {
    /// Both maps are confident the pixel is road.
    Confirmed,
    /// The first map is confident, the second is confident it is not.
    Unconfirmed,
    Neutral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriStateRaster {
    pub tile: TileSpec,
    pub classes: Vec<TriState>,
}

impl TriStateRaster {
    pub fn count(&self, class: TriState) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }
}

#[inline]
pub fn classify(a: f64, b: f64, t_hi: f64, t_lo: f64) -> TriState {
    if a >= t_hi && b >= t_hi {
        TriState::Confirmed
    } else if a >= t_hi && b <= t_lo {
        TriState::Unconfirmed
    } else {
        TriState::Neutral
    }
}

/// Compares a prediction `a` against an independent prediction `b` (e.g. a
/// GPS-only model) pixel by pixel.
pub fn confidence_compare(a: &Raster, b: &Raster, t_hi: f64, t_lo: f64) -> Result<TriStateRaster> {
    if !(0.0 <= t_lo && t_lo <= t_hi && t_hi <= 1.0) {
        return Err(Error::config("thresholds must satisfy 0 <= t_lo <= t_hi <= 1"));
    }
    if !a.tile.same_geometry(&b.tile) || a.channels != 1 || b.channels != 1 {
        return Err(Error::geometry("probability rasters must be single-channel with equal geometry"));
    }
    Ok(TriStateRaster {
        tile: a.tile.clone(),
        classes: a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| classify(x as f64, y as f64, t_hi, t_lo))
            .collect(),
    })
}
