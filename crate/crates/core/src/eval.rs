//! IoU evaluation, dataset splits and degradation curves.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::{derive_seed, sub_resolution, subsample, RngStream};
use crate::error::{Error, Result};
use crate::extract::{kde_extract, stable_mean, sweep_params, ExtractionParams, LabeledRaster, Mask};
use crate::geo::{PixelPoint, TileSpec};
use crate::render::{render_count, Scale};

/// Road-class IoU. Two empty masks score 1.
pub fn iou(pred: &Mask, truth: &Mask) -> Result<f64> {
    let (inter, union) = pred.overlap(truth)?;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileIou {
    pub tile_id: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_tile: Vec<TileIou>,
    /// Unweighted mean over tiles.
    pub mean_iou: f64,
    #[serde(default)]
    pub config: Value,
    #[serde(default)]
    pub provenance: Value,
}

impl EvalReport {
    pub fn with_config(mut self, config: Value) -> Self {
        self.config = config;
        self
    }

    pub fn with_provenance(mut self, provenance: Value) -> Self {
        self.provenance = provenance;
        self
    }

    /// `tile_id,iou` rows followed by a `mean` row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tile_id,iou")?;
        for t in &self.per_tile {
            writeln!(w, "{},{}", t.tile_id, t.iou)?;
        }
        writeln!(w, "mean,{}", self.mean_iou)?;
        Ok(())
    }
}

/// Per-pair IoU (tile ids from the prediction) and their mean.
pub fn mean_iou(pairs: &[(&Mask, &Mask)]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::config("mean IoU of zero tiles"));
    }
    let per_tile = pairs
        .par_iter()
        .map(|(p, t)| {
            Ok(TileIou {
                tile_id: p.tile.tile_id.clone(),
                iou: iou(p, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values: Vec<f64> = per_tile.iter().map(|t| t.iou).collect();
    Ok(EvalReport {
        mean_iou: stable_mean(&mut values),
        per_tile,
        config: Value::Null,
        provenance: Value::Null,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    /// `(tile_id, split)` in input order.
    pub assignments: Vec<(String, Split)>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitAssignment {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn get(&self, tile_id: &str) -> Option<Split> {
        self.assignments.iter().find(|(id, _)| id == tile_id).map(|(_, s)| *s)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tile_id,split")?;
        for (id, s) in &self.assignments {
            writeln!(w, "{id},{}", s.as_str())?;
        }
        Ok(())
    }
}

/// Seeded shuffle, then contiguous train/validation/test cuts at the rounded
/// cumulative ratios.
pub fn split_dataset(tile_ids: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::config("split ratios must be finite and >= 0"));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {ratios:?} do not sum to 1")));
    }
    let n = tile_ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "dataset", "split")));
    let cut1 = (ratios[0] * n as f64).round() as usize;
    let cut2 = (((ratios[0] + ratios[1]) * n as f64).round() as usize).max(cut1).min(n);
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        split[i] = if rank < cut1 {
            Split::Train
        } else if rank < cut2 {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(SplitAssignment {
        assignments: tile_ids.iter().cloned().zip(split).collect(),
        ratios,
        seed,
    })
}

/// Projected points of one tile with its label.
#[derive(Debug, Clone)]
pub struct LabeledPoints {
    pub tile: TileSpec,
    pub points: Vec<PixelPoint>,
    pub truth: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub kernels: Vec<u32>,
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub scale: Scale,
}

impl SweepGrid {
    /// `per_decade` log-spaced thresholds per decade from `lo` to `hi`.
    pub fn log_thresholds(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
        let decades = (hi / lo).log10();
        let n = (decades * per_decade as f64).round() as usize;
        (0..=n)
            .map(|i| lo * 10f64.powf(i as f64 / per_decade as f64))
            .collect()
    }
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            kernels: (1..=8).collect(),
            thresholds: SweepGrid::log_thresholds(1e-4, 1.0, 16),
            scale: Scale::Linear,
        }
    }
}

/// How a degradation curve picks its KDE parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    Fixed(ExtractionParams),
    /// Swept once on the undegraded tuning tiles, then frozen for every level.
    TunedOnce(SweepGrid),
    /// Re-swept at every level on equally degraded tuning tiles.
    TunedPerLevel(SweepGrid),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationAxis {
    SubsampleRatio,
    ResolutionFactor,
}

impl DegradationAxis {
    /// Level that leaves the input unchanged.
    pub fn identity_level(self) -> f64 {
        1.0
    }

    fn validate(self, level: f64) -> Result<()> {
        let ok = match self {
            DegradationAxis::SubsampleRatio => level > 0.0 && level <= 1.0,
            DegradationAxis::ResolutionFactor => level >= 1.0 && level.fract() == 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("level {level} is invalid for {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub level: f64,
    pub mean_iou: f64,
    pub kernel_size: u32,
    pub threshold: f64,
}

/// Applies one degradation level to a tile's points. Subsampling draws from
/// a stream keyed by `(seed, tile, level)`.
pub fn degrade(
    points: &[PixelPoint],
    tile: &TileSpec,
    axis: DegradationAxis,
    level: f64,
    seed: u64,
) -> Result<Vec<PixelPoint>> {
    axis.validate(level)?;
    match axis {
        DegradationAxis::SubsampleRatio => {
            let mut rng = RngStream::derive(seed, &tile.tile_id, &format!("curve-subsample-{level}"));
            subsample(points, level, &mut rng)
        }
        DegradationAxis::ResolutionFactor => sub_resolution(points, level as u32),
    }
}

fn rasterize(tiles: &[LabeledPoints], axis: DegradationAxis, level: f64, seed: u64) -> Result<Vec<LabeledRaster>> {
    tiles
        .par_iter()
        .map(|t| {
            let pts = degrade(&t.points, &t.tile, axis, level, seed)?;
            Ok(LabeledRaster {
                count: render_count(&pts, &t.tile),
                truth: t.truth.clone(),
            })
        })
        .collect()
}

fn evaluate(params: &ExtractionParams, tiles: &[LabeledRaster]) -> Result<f64> {
    let mut ious = tiles
        .par_iter()
        .map(|t| iou(&kde_extract(&t.count, params)?, &t.truth))
        .collect::<Result<Vec<_>>>()?;
    Ok(stable_mean(&mut ious))
}

/// Mean held-out IoU of KDE extraction at each degradation level, one row
/// per level in input order.
pub fn degradation_curve(
    extractor: &Extractor,
    tuning: &[LabeledPoints],
    heldout: &[LabeledPoints],
    axis: DegradationAxis,
    levels: &[f64],
    seed: u64,
) -> Result<Vec<CurveRow>> {
    if levels.is_empty() {
        return Err(Error::config("degradation curve needs at least one level"));
    }
    if heldout.is_empty() {
        return Err(Error::config("degradation curve needs held-out tiles"));
    }
    for &l in levels {
        axis.validate(l)?;
    }
    let needs_tuning = !matches!(extractor, Extractor::Fixed(_));
    if needs_tuning && tuning.is_empty() {
        return Err(Error::config("a tuned extractor needs tuning tiles"));
    }
    let frozen = match extractor {
        Extractor::Fixed(p) => Some(*p),
        Extractor::TunedOnce(g) => {
            let base = rasterize(tuning, axis, axis.identity_level(), seed)?;
            Some(sweep_params(&base, &g.kernels, &g.thresholds, g.scale)?.best)
        }
        Extractor::TunedPerLevel(_) => None,
    };
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let params = match (frozen, extractor) {
            (Some(p), _) => p,
            (None, Extractor::TunedPerLevel(g)) => {
                let tune = rasterize(tuning, axis, level, seed)?;
                sweep_params(&tune, &g.kernels, &g.thresholds, g.scale)?.best
            }
            _ => unreachable!("only per-level tuning leaves parameters open"),
        };
        let test = rasterize(heldout, axis, level, seed)?;
        rows.push(CurveRow {
            level,
            mean_iou: evaluate(&params, &test)?,
            kernel_size: params.kernel_size,
            threshold: params.threshold,
        });
    }
    Ok(rows)
}

pub fn write_curve_csv<W: Write>(mut w: W, rows: &[CurveRow]) -> Result<()> {
    writeln!(w, "level,mean_iou,kernel_size,threshold")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.level, r.mean_iou, r.kernel_size, r.threshold)?;
    }
    Ok(())
}

/// Median of each level across repeated curves over the same levels.
pub fn median_curve(runs: &[Vec<CurveRow>]) -> Result<Vec<(f64, f64)>> {
    let first = runs.first().ok_or_else(|| Error::config("no curves to aggregate"))?;
    first
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut v = runs
                .iter()
                .map(|r| {
                    r.get(i)
                        .filter(|x| x.level == row.level)
                        .map(|x| x.mean_iou)
                        .ok_or_else(|| Error::config("curves disagree on levels"))
                })
                .collect::<Result<Vec<_>>>()?;
            v.sort_by(f64::total_cmp);
            let m = v.len();
            let med = if m % 2 == 1 { v[m / 2] } else { (v[m / 2 - 1] + v[m / 2]) / 2.0 };
            Ok((row.level, med))
        })
        .collect()
}
