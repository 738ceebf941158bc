//! Seeded augmentation of projected GPS point sets.
//!
//! Four transforms degrade a tile's points the way a different data source
//! would: fewer devices ([`subsample`]), coarser receivers
//! ([`sub_resolution`]), receiver noise ([`perturb`]), and coverage holes
//! ([`omit_region`]). [`apply_pipeline`] draws their parameters from an
//! [`AugmentConfig`] and applies them in that order.
//!
//! Every random draw comes from an [`RngStream`] keyed by
//! `(master_seed, tile_id, transform)`, so results do not depend on the order
//! or thread in which tiles are processed.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{PixelPoint, TileSpec};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a stream seed: FNV-1a 64 over `master_seed` (little endian), a
/// `0xff` separator, `tile_id`, `0xff`, `transform`, finished with one
/// SplitMix64 step.
pub fn derive_seed(master_seed: u64, tile_id: &str, transform: &str) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &master_seed.to_le_bytes());
    h = fnv1a(h, &[0xff]);
    h = fnv1a(h, tile_id.as_bytes());
    h = fnv1a(h, &[0xff]);
    h = fnv1a(h, transform.as_bytes());
    splitmix64(h)
}

/// Deterministic random stream (ChaCha8 seeded through
/// `ChaCha8Rng::seed_from_u64` with [`derive_seed`]).
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn derive(master_seed: u64, tile_id: &str, transform: &str) -> Self {
        Self::from_seed(derive_seed(master_seed, tile_id, transform))
    }

    pub fn from_seed(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Keeps exactly `round(ratio * n)` points chosen uniformly without
/// replacement, in their original order.
pub fn subsample(points: &[PixelPoint], ratio: f64, rng: &mut RngStream) -> Result<Vec<PixelPoint>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("subsample ratio {ratio} not in (0, 1]")));
    }
    let n = points.len();
    let keep = subsample_count(n, ratio);
    let mut picked = index::sample(rng, n, keep).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| points[i]).collect())
}

/// `round(ratio * n)`, half away from zero.
pub fn subsample_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).min(n)
}

/// Snaps every point to the center of its `factor x factor` pixel block.
/// Factor 1 leaves points untouched.
pub fn sub_resolution(points: &[PixelPoint], factor: u32) -> Result<Vec<PixelPoint>> {
    if factor < 1 {
        return Err(Error::config("sub-resolution factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(points.to_vec());
    }
    let f = factor as f64;
    let snap = |v: f64| ((v / f).floor() + 0.5) * f;
    Ok(points
        .iter()
        .map(|p| PixelPoint {
            row: snap(p.row),
            col: snap(p.col),
            sample: p.sample,
        })
        .collect())
}

/// Adds independent zero-mean Gaussian noise of `sigma_m / resolution`
/// pixels to row and col.
pub fn perturb(
    points: &[PixelPoint],
    sigma_m: f64,
    resolution: f64,
    rng: &mut RngStream,
) -> Result<Vec<PixelPoint>> {
    if !(sigma_m.is_finite() && sigma_m >= 0.0) {
        return Err(Error::config(format!("perturbation sigma {sigma_m} must be >= 0")));
    }
    if resolution.is_nan() || resolution <= 0.0 {
        return Err(Error::config("resolution must be positive"));
    }
    if sigma_m == 0.0 {
        return Ok(points.to_vec());
    }
    let noise = Normal::new(0.0, sigma_m / resolution).map_err(|e| Error::config(e.to_string()))?;
    Ok(points
        .iter()
        .map(|p| {
            let dr = noise.sample(rng);
            let dc = noise.sample(rng);
            PixelPoint {
                row: p.row + dr,
                col: p.col + dc,
                sample: p.sample,
            }
        })
        .collect())
}

/// Square pixel window `[row, row + size) x [col, col + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelSquare {
    pub row: u32,
    pub col: u32,
    pub size: u32,
}

impl PixelSquare {
    pub fn contains(&self, p: &PixelPoint) -> bool {
        let (r0, c0, s) = (self.row as f64, self.col as f64, self.size as f64);
        p.row >= r0 && p.row < r0 + s && p.col >= c0 && p.col < c0 + s
    }
}

/// Drops every point inside `region`.
pub fn omit_region(points: &[PixelPoint], region: &PixelSquare) -> Vec<PixelPoint> {
    points.iter().filter(|p| !region.contains(p)).copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Subsampling ratio is drawn uniformly from `[lo, hi]`.
    pub subsample_ratio_range: [f64; 2],
    /// Sub-resolution factor is drawn uniformly from this set.
    pub resolution_factors: Vec<u32>,
    /// Perturbation standard deviation in meters.
    pub perturb_sigma: f64,
    pub omit_probability: f64,
    /// Side of the omitted square in pixels; `None` means half the tile's
    /// shorter side.
    pub omit_size: Option<u32>,
    pub master_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            subsample_ratio_range: [0.1, 1.0],
            resolution_factors: vec![1, 2, 4, 8],
            perturb_sigma: 2.0,
            omit_probability: 0.3,
            omit_size: None,
            master_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Leaves every point set unchanged.
    pub fn neutral() -> Self {
        AugmentConfig {
            subsample_ratio_range: [1.0, 1.0],
            resolution_factors: vec![1],
            perturb_sigma: 0.0,
            omit_probability: 0.0,
            omit_size: Some(0),
            master_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.subsample_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "subsample ratio range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"
            )));
        }
        if self.resolution_factors.is_empty() || self.resolution_factors.contains(&0) {
            return Err(Error::config("resolution factors must be a non-empty set of integers >= 1"));
        }
        if !(self.perturb_sigma.is_finite() && self.perturb_sigma >= 0.0) {
            return Err(Error::config("perturb_sigma must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.omit_probability) {
            return Err(Error::config("omit_probability must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Parameters drawn for one tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentTrace {
    pub ratio: f64,
    pub factor: u32,
    pub omitted: Option<PixelSquare>,
}

/// Draws per-tile parameters and applies subsample, sub-resolution,
/// perturbation and omission in that order.
pub fn apply_pipeline(
    config: &AugmentConfig,
    tile: &TileSpec,
    points: &[PixelPoint],
) -> Result<(Vec<PixelPoint>, AugmentTrace)> {
    config.validate()?;
    let seed = config.master_seed;
    let id = tile.tile_id.as_str();

    let mut params = RngStream::derive(seed, id, "params");
    let [lo, hi] = config.subsample_ratio_range;
    let ratio = if lo == hi { lo } else { params.random_range(lo..=hi) };
    let factor = config.resolution_factors[params.random_range(0..config.resolution_factors.len())];
    let omit = config.omit_probability > 0.0 && params.random_bool(config.omit_probability);
    let omitted = omit.then(|| {
        let size = config.omit_size.unwrap_or(tile.width.min(tile.height) / 2);
        let row = params.random_range(0..=tile.height.saturating_sub(size));
        let col = params.random_range(0..=tile.width.saturating_sub(size));
        PixelSquare { row, col, size }
    });

    let pts = subsample(points, ratio, &mut RngStream::derive(seed, id, "subsample"))?;
    let pts = sub_resolution(&pts, factor)?;
    let pts = perturb(
        &pts,
        config.perturb_sigma,
        tile.resolution,
        &mut RngStream::derive(seed, id, "perturb"),
    )?;
    let pts = match &omitted {
        Some(sq) => omit_region(&pts, sq),
        None => pts,
    };
    Ok((pts, AugmentTrace { ratio, factor, omitted }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore};

    fn grid_points(n: usize, side: f64) -> Vec<PixelPoint> {
        let mut rng = RngStream::from_seed(99);
        (0..n)
            .map(|i| PixelPoint::new(rng.random_range(0.0..side), rng.random_range(0.0..side), i))
            .collect()
    }

    #[test]
    fn seed_derivation_is_stable() {
        // Independent reference computation of FNV-1a + SplitMix64.
        assert_eq!(derive_seed(42, "tile-0", "subsample"), 0x46af_3409_c926_daf7);
        assert_ne!(derive_seed(1, "t", "subsample"), derive_seed(1, "t", "perturb"));
        assert_ne!(derive_seed(1, "ab", "c"), derive_seed(1, "a", "bc"));
        let a: Vec<u64> = {
            let mut r = RngStream::derive(7, "tile", "x");
            (0..4).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::derive(7, "tile", "x");
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn subsample_identity_and_count() {
        let pts = grid_points(100, 64.0);
        let mut rng = RngStream::from_seed(1);
        assert_eq!(subsample(&pts, 1.0, &mut rng).unwrap(), pts);
        let mut rng = RngStream::from_seed(1);
        assert_eq!(subsample(&pts, 0.6, &mut rng).unwrap().len(), 60);
    }

    #[test]
    fn subsample_rejects_bad_ratio() {
        let mut rng = RngStream::from_seed(1);
        assert!(subsample(&[], 0.0, &mut rng).is_err());
        assert!(subsample(&[], 1.5, &mut rng).is_err());
    }

    #[test]
    fn subsample_rounds_half_away() {
        assert_eq!(subsample_count(5, 0.5), 3);
        assert_eq!(subsample_count(3, 0.5), 2);
        assert_eq!(subsample_count(10, 0.04), 0);
    }

    #[test]
    fn subsample_is_seeded() {
        let pts = grid_points(500, 64.0);
        let a = subsample(&pts, 0.3, &mut RngStream::from_seed(5)).unwrap();
        let b = subsample(&pts, 0.3, &mut RngStream::from_seed(5)).unwrap();
        let c = subsample(&pts, 0.3, &mut RngStream::from_seed(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sub_resolution_factor_eight() {
        let pts: Vec<_> = (0..8).map(|c| PixelPoint::new(0.0, c as f64, c)).collect();
        let out = sub_resolution(&pts, 8).unwrap();
        assert!(out.iter().all(|p| p.row == 4.0 && p.col == 4.0));
        assert_eq!(out.len(), 8);
    }

    #[test]
    fn sub_resolution_factor_one_is_noop() {
        let pts = grid_points(10, 8.0);
        assert_eq!(sub_resolution(&pts, 1).unwrap(), pts);
        assert!(sub_resolution(&pts, 0).is_err());
    }

    #[test]
    fn perturb_std_matches() {
        let pts = vec![PixelPoint::new(0.0, 0.0, 0); 10_000];
        let out = perturb(&pts, 2.0, 0.5, &mut RngStream::from_seed(3)).unwrap();
        for axis in [0, 1] {
            let v: Vec<f64> = out.iter().map(|p| if axis == 0 { p.row } else { p.col }).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            assert!((var.sqrt() - 4.0).abs() < 0.2, "std {}", var.sqrt());
        }
        let again = perturb(&pts, 2.0, 0.5, &mut RngStream::from_seed(3)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn perturb_zero_is_identity() {
        let pts = grid_points(50, 16.0);
        assert_eq!(perturb(&pts, 0.0, 0.5, &mut RngStream::from_seed(0)).unwrap(), pts);
    }

    #[test]
    fn omit_left_square() {
        let pts: Vec<_> = (0..64 * 64)
            .map(|i| PixelPoint::new((i / 64) as f64 + 0.5, (i % 64) as f64 + 0.5, i))
            .collect();
        let sq = PixelSquare { row: 0, col: 0, size: 32 };
        let out = omit_region(&pts, &sq);
        assert_eq!(out.len(), 64 * 64 - 32 * 32);
        assert!(out.iter().all(|p| p.row >= 32.0 || p.col >= 32.0));
        assert!(omit_region(&pts, &PixelSquare { row: 0, col: 0, size: 64 }).is_empty());
        assert_eq!(omit_region(&pts, &PixelSquare { row: 5, col: 5, size: 0 }), pts);
    }

    #[test]
    fn neutral_pipeline_is_identity() {
        let tile = TileSpec::new("t", 0.0, 0.0).with_size(64, 64);
        let pts = grid_points(300, 64.0);
        let (out, trace) = apply_pipeline(&AugmentConfig::neutral(), &tile, &pts).unwrap();
        assert_eq!(out, pts);
        assert_eq!(trace.factor, 1);
        assert_eq!(trace.omitted, None);
    }

    #[test]
    fn full_omission_empties_tile() {
        let tile = TileSpec::new("t", 0.0, 0.0).with_size(64, 64);
        let pts = grid_points(300, 64.0);
        let cfg = AugmentConfig {
            omit_probability: 1.0,
            omit_size: Some(64),
            ..AugmentConfig::neutral()
        };
        let (out, _) = apply_pipeline(&cfg, &tile, &pts).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn pipeline_is_deterministic_per_tile() {
        let pts = grid_points(1000, 1024.0);
        let cfg = AugmentConfig::default().with_seed(11);
        let t1 = TileSpec::new("a", 0.0, 0.0);
        let t2 = TileSpec::new("b", 0.0, 0.0);
        let a = apply_pipeline(&cfg, &t1, &pts).unwrap();
        let b = apply_pipeline(&cfg, &t1, &pts).unwrap();
        let c = apply_pipeline(&cfg, &t2, &pts).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            AugmentConfig { subsample_ratio_range: [0.5, 0.2], ..Default::default() },
            AugmentConfig { subsample_ratio_range: [0.0, 1.0], ..Default::default() },
            AugmentConfig { resolution_factors: vec![], ..Default::default() },
            AugmentConfig { resolution_factors: vec![0, 2], ..Default::default() },
            AugmentConfig { perturb_sigma: -1.0, ..Default::default() },
            AugmentConfig { omit_probability: 1.5, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    proptest! {
        #[test]
        fn subsample_is_subset_of_exact_size(n in 0usize..400, ratio in 0.01f64..=1.0, seed: u64) {
            let pts = grid_points(n, 32.0);
            let out = subsample(&pts, ratio, &mut RngStream::from_seed(seed)).unwrap();
            prop_assert_eq!(out.len(), subsample_count(n, ratio));
            prop_assert!(out.windows(2).all(|w| w[0].sample < w[1].sample));
            prop_assert!(out.iter().all(|p| pts[p.sample] == *p));
        }

        #[test]
        fn sub_resolution_conserves_and_is_idempotent(n in 0usize..200, factor in 1u32..16) {
            let pts = grid_points(n, 128.0);
            let once = sub_resolution(&pts, factor).unwrap();
            prop_assert_eq!(once.len(), pts.len());
            prop_assert_eq!(sub_resolution(&once, factor).unwrap(), once);
        }
    }
}
