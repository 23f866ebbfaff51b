use mitocascade::classifier::{refine_detections, EnsembleWeights, PatchScorer};
use mitocascade::eval::{match_detections, pr_curve};
use mitocascade::geometry::{reflect_index, tile_frame, DihedralTransform};
use mitocascade::types::{BoundingBox, Detection, Frame, Point, ScannerDomain};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn points(max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..200.0f64, 0.0..200.0f64), 0..max)
}

/// Mean brightness of the patch centre row as a probability.
struct Brightness;

impl PatchScorer for Brightness {
    fn probability(&self, patch: &Array3<u8>) -> mitocascade::Result<f64> {
        let (h, w, _) = patch.dim();
        let row = h / 2;
        let s: f64 = (0..w).map(|c| f64::from(patch[[row, c, 0]])).sum();
        Ok(s / (w as f64 * 255.0))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matching_partitions_and_respects_radius(preds in points(12), gts in points(12), radius in 1.0..60.0f64) {
        let scored: Vec<(Point, f64)> = preds.iter().enumerate().map(|(i, &(x, y))| (Point::new(x, y), 1.0 / (i + 1) as f64)).collect();
        let g: Vec<Point> = gts.iter().map(|&(x, y)| Point::new(x, y)).collect();
        let m = match_detections(&scored, &g, radius);
        prop_assert_eq!(m.tp.len() + m.fp.len(), preds.len());
        prop_assert_eq!(m.tp.len() + m.fn_.len(), gts.len());
        for &(p, q, d) in &m.tp {
            prop_assert!(d <= radius);
            prop_assert!((scored[p].0.distance(&g[q]) - d).abs() < 1e-12);
        }
        let again = match_detections(&scored, &g, radius);
        prop_assert_eq!(again, m);
    }

    #[test]
    fn pr_curve_recall_falls_as_threshold_rises(preds in points(15), gts in points(10)) {
        let scored: Vec<(Point, f64)> = preds.iter().enumerate().map(|(i, &(x, y))| (Point::new(x, y), ((i * 37) % 11) as f64 / 10.0)).collect();
        let g: Vec<Point> = gts.iter().map(|&(x, y)| Point::new(x, y)).collect();
        let c = pr_curve(&scored, &g, 25.0);
        prop_assert!((0.0..=1.0).contains(&c.auc));
        let mut pts = c.points.clone();
        pts.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
        for w in pts.windows(2) {
            prop_assert!(w[1].recall <= w[0].recall + 1e-12);
        }
    }

    #[test]
    fn reflect_stays_in_range(i in -1000i64..1000, n in 1usize..50) {
        let r = reflect_index(i, n);
        prop_assert!(r < n);
        if (0..n as i64).contains(&i) {
            prop_assert_eq!(r as i64, i);
        }
    }

    #[test]
    fn dihedral_inverse_roundtrips(n in 1usize..9, seed in any::<u64>(), k in 0u8..8) {
        let img = Array3::from_shape_fn((n, n, 3), |(r, c, ch)| (seed.wrapping_mul(31).wrapping_add((r * 97 + c * 13 + ch) as u64) % 251) as u8);
        let t = DihedralTransform::new(k).unwrap();
        let back = t.inverse().apply(&t.apply(&img).unwrap()).unwrap();
        prop_assert_eq!(back, img.clone());
        let m = Array2::from_shape_fn((n, n), |(r, c)| (r * n + c) as u32);
        prop_assert_eq!(t.inverse().apply_2d(&t.apply_2d(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn weights_normalise_and_merge_is_a_mean(raw in prop::collection::vec(0.01..5.0f64, 1..5), probs in prop::collection::vec(0.0..=1.0f64, 5)) {
        let w = EnsembleWeights::new(raw.clone()).unwrap();
        prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = &probs[..raw.len()];
        let merged = w.merge(p).unwrap();
        let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(merged >= lo - 1e-12 && merged <= hi + 1e-12);
    }

    #[test]
    fn tiles_cover_every_pixel(h in 1usize..90, w in 1usize..90, tile in 8usize..40, overlap in 0usize..8) {
        let frame = Frame::new("t", ScannerDomain::Xr, Array3::zeros((h, w, 3))).unwrap();
        let tiles = tile_frame(&frame, tile, overlap).unwrap();
        let mut seen = Array2::<u8>::zeros((h, w));
        for t in &tiles {
            let (th, tw, _) = t.pixels.dim();
            prop_assert!(t.y + th <= h && t.x + tw <= w);
            seen.slice_mut(ndarray::s![t.y..t.y + th, t.x..t.x + tw]).fill(1);
        }
        prop_assert!(seen.iter().all(|&v| v == 1));
    }

    #[test]
    fn refinement_is_monotone_in_threshold(cands in points(10), t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
        let px = Array3::from_shape_fn((200, 200, 3), |(r, c, _)| ((r * 7 + c * 3) % 256) as u8);
        let frame = Frame::new("f", ScannerDomain::Xr, px).unwrap();
        let dets: Vec<Detection> = cands
            .iter()
            .map(|&(x, y)| Detection::candidate(BoundingBox::new(x - 4.0, y - 4.0, x + 4.0, y + 4.0).unwrap(), 0.5))
            .collect();
        let w = EnsembleWeights::equal(1).unwrap();
        let members: [&dyn PatchScorer; 1] = [&Brightness];
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let keep_lo = refine_detections(dets.clone(), &members, &w, &frame, lo, 16).unwrap();
        let keep_hi = refine_detections(dets.clone(), &members, &w, &frame, hi, 16).unwrap();
        prop_assert!(keep_hi.len() <= keep_lo.len());
        for d in &keep_hi {
            prop_assert!(keep_lo.iter().any(|e| e.centroid == d.centroid));
            prop_assert!(dets.iter().any(|e| e.centroid == d.centroid));
            prop_assert!(d.merged_score.unwrap() >= hi);
        }
    }
}
