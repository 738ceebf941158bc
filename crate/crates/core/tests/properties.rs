//! Invariants of the GPS side of the pipeline.

use proptest::prelude::*;
use roadgps::augment::{omit_region, perturb, sub_resolution, subsample, PixelSquare, RngStream};
use roadgps::eval::{iou, split_dataset, Split};
use roadgps::extract::{kde_extract, Mask};
use roadgps::geo::{project, unproject, BBox, PixelPoint, SpatialIndex, TileSpec};
use roadgps::ingest::{group_by_vehicle, GpsSample, Schema};
use roadgps::render::{gaussian_smooth, render_binary, render_count};
use roadgps::ExtractionParams;

fn tile(w: u32, h: u32) -> TileSpec {
    TileSpec::new("p", 0.0, 0.0).with_size(w, h)
}

fn points(max: f64) -> impl Strategy<Value = Vec<PixelPoint>> {
    prop::collection::vec((-4.0..max + 4.0, -4.0..max + 4.0), 0..300).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (r, c))| PixelPoint::new(r, c, i))
            .collect()
    })
}

fn mask(n: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), n)
}

proptest! {
    #[test]
    fn mercator_round_trip(lat in -85.0f64..85.0, lon in -180.0f64..180.0) {
        let (x, y) = project(lat, lon).unwrap();
        let (la, lo) = unproject(x, y);
        prop_assert!((la - lat).abs() < 1e-9 && (lo - lon).abs() < 1e-9);
    }

    #[test]
    fn mercator_is_monotone_in_latitude(a in -85.0f64..85.0, b in -85.0f64..85.0) {
        let (ya, yb) = (project(a, 0.0).unwrap().1, project(b, 0.0).unwrap().1);
        prop_assert_eq!(a < b, ya < yb);
    }

    #[test]
    fn pixel_round_trip(r in -10.0f64..2000.0, c in -10.0f64..2000.0, ox in -1e6f64..1e6, oy in -1e6f64..1e6) {
        let t = TileSpec::new("p", ox, oy);
        let (x, y) = t.from_pixel(r, c);
        let p = t.to_pixel(x, y, 0);
        prop_assert!((p.row - r).abs() < 1e-6 && (p.col - c).abs() < 1e-6);
    }

    #[test]
    fn index_query_matches_brute_force(
        pos in prop::collection::vec((-500.0f64..500.0, -500.0f64..500.0), 0..200),
        cell in 1.0f64..200.0,
        x0 in -600.0f64..600.0, y0 in -600.0f64..600.0, w in 0.1f64..400.0, h in 0.1f64..400.0,
    ) {
        let bbox = BBox::new(x0, y0, x0 + w, y0 + h);
        let index = SpatialIndex::build(pos.clone(), cell).unwrap();
        let mut got = index.query(&bbox);
        got.sort_unstable();
        let want: Vec<usize> = (0..pos.len()).filter(|&i| bbox.contains(pos[i].0, pos[i].1)).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn csv_record_round_trip(
        id in "[a-z0-9_-]{1,12}", ts in 0i64..4_000_000_000,
        lat in -80.0f64..80.0, lon in -179.0f64..179.0,
        speed in proptest::option::of(0.0f64..200.0), bearing in proptest::option::of(0.0f64..360.0),
    ) {
        let mut s = GpsSample::new(id, ts, lat, lon);
        s.speed = speed;
        s.bearing = bearing;
        prop_assert_eq!(Schema::default().parse_line(&s.to_csv_record()).unwrap(), s);
    }

    #[test]
    fn tracks_are_sorted_and_complete(ts in prop::collection::vec((0u8..5, 0i64..1000), 0..100)) {
        let samples: Vec<GpsSample> = ts.iter().map(|&(v, t)| GpsSample::new(format!("v{v}"), t, 1.0, 2.0)).collect();
        let tracks = group_by_vehicle(samples.clone());
        prop_assert_eq!(tracks.iter().map(|t| t.samples.len()).sum::<usize>(), samples.len());
        for t in &tracks {
            prop_assert!(t.samples.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
            prop_assert!(t.samples.iter().all(|s| s.vehicle_id == t.vehicle_id));
        }
    }

    #[test]
    fn count_raster_conserves_in_bounds_points(pts in points(40.0)) {
        let t = tile(40, 40);
        let inside = pts.iter().filter(|p| p.row >= 0.0 && p.row < 40.0 && p.col >= 0.0 && p.col < 40.0).count();
        prop_assert_eq!(render_count(&pts, &t).sum(), inside as f64);
        let binary = render_binary(&pts, &t);
        prop_assert!(binary.channel(0).iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(binary.sum() <= inside as f64);
    }

    #[test]
    fn smoothing_keeps_interior_mass(r in 8usize..24, c in 8usize..24, k in 1u32..=8) {
        let t = tile(32, 32);
        let raster = render_count(&[PixelPoint::new(r as f64 + 0.5, c as f64 + 0.5, 0)], &t);
        let s = gaussian_smooth(&raster, k).unwrap();
        // mass within the tile is 1 only if the window fits inside it
        let fits = r >= k as usize && c >= k as usize && r + (k as usize) < 32 && c + (k as usize) < 32;
        prop_assert!(!fits || (s.sum() - 1.0).abs() < 1e-6);
        prop_assert!(s.sum() <= 1.0 + 1e-6);
        prop_assert!(s.channel(0).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn subsample_is_an_exact_size_subset(pts in points(64.0), ratio in 0.01f64..=1.0, seed in any::<u64>()) {
        let mut rng = RngStream::from_seed(seed);
        let out = subsample(&pts, ratio, &mut rng).unwrap();
        prop_assert_eq!(out.len(), (ratio * pts.len() as f64).round() as usize);
        let mut ids: Vec<usize> = out.iter().map(|p| p.sample).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), out.len());
        prop_assert!(out.iter().all(|p| pts[p.sample] == *p));
    }

    #[test]
    fn sub_resolution_snaps_to_block_grid(pts in points(64.0), f in prop::sample::select(vec![1u32, 2, 4, 8])) {
        let out = sub_resolution(&pts, f).unwrap();
        prop_assert_eq!(out.len(), pts.len());
        for (a, b) in pts.iter().zip(&out) {
            // stays within the same f x f block
            prop_assert_eq!((a.row / f as f64).floor(), (b.row / f as f64).floor());
            prop_assert_eq!((a.col / f as f64).floor(), (b.col / f as f64).floor());
        }
        prop_assert_eq!(sub_resolution(&out, f).unwrap(), out);
    }

    #[test]
    fn perturb_is_seeded(pts in points(64.0), seed in any::<u64>()) {
        let a = perturb(&pts, 2.0, 0.5, &mut RngStream::from_seed(seed)).unwrap();
        let b = perturb(&pts, 2.0, 0.5, &mut RngStream::from_seed(seed)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(perturb(&pts, 0.0, 0.5, &mut RngStream::from_seed(seed)).unwrap(), pts);
    }

    #[test]
    fn omission_removes_exactly_the_square(pts in points(64.0), row in 0u32..60, col in 0u32..60, size in 1u32..40) {
        let sq = PixelSquare { row, col, size };
        let kept = omit_region(&pts, &sq);
        prop_assert!(kept.iter().all(|p| !sq.contains(p)));
        prop_assert_eq!(kept.len() + pts.iter().filter(|p| sq.contains(p)).count(), pts.len());
    }

    #[test]
    fn iou_is_a_similarity(a in mask(64), b in mask(64)) {
        let t = tile(8, 8);
        let (ma, mb) = (Mask::from_bools(&t, &a).unwrap(), Mask::from_bools(&t, &b).unwrap());
        let v = iou(&ma, &mb).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&mb, &ma).unwrap());
        prop_assert_eq!(iou(&ma, &ma).unwrap(), 1.0);
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        if union > 0 {
            prop_assert!((v - inter as f64 / union as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn kde_mask_shrinks_as_threshold_rises(pts in points(32.0), k in 1u32..6, t1 in 1e-4f64..0.5, t2 in 1e-4f64..0.5) {
        let raster = render_count(&pts, &tile(32, 32));
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a = kde_extract(&raster, &ExtractionParams::new(k, hi)).unwrap();
        let b = kde_extract(&raster, &ExtractionParams::new(k, lo)).unwrap();
        prop_assert!(a.is_subset_of(&b).unwrap());
    }

    #[test]
    fn split_is_a_seeded_partition(n in 0usize..60, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let s = split_dataset(&ids, [0.7, 0.1, 0.2], seed).unwrap();
        prop_assert_eq!(&s, &split_dataset(&ids, [0.7, 0.1, 0.2], seed).unwrap());
        let count = |x: Split| s.ids(x).len();
        prop_assert_eq!(count(Split::Train) + count(Split::Validation) + count(Split::Test), n);
        prop_assert_eq!(count(Split::Train), (0.7 * n as f64).round() as usize);
        prop_assert!(ids.iter().all(|id| s.get(id).is_some()));
    }
}
