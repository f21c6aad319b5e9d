mod common;

use ndarray::Array3;
use tdnet::data::SegmentationMask;
use tdnet::metrics::{dice_score, surface_metrics};

use common::metric_oracle::{self as oracle, Mask};

fn to_mask(dims: (usize, usize, usize), m: &Mask) -> SegmentationMask {
    SegmentationMask::new(Array3::from_shape_fn(dims, |(z, y, x)| m[z][y][x] as u16), 2).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + b.abs())
}

#[test]
fn metrics_match_all_pairs_oracle() {
    for seed in 0..200 {
        let (dims, a, b, spacing) = oracle::random_pair(seed);
        let (pa, pb) = (to_mask(dims, &a), to_mask(dims, &b));
        assert_eq!(dice_score(&pa, &pb, 1).unwrap(), oracle::dice(&a, &b), "dice seed {seed}");
        let got = surface_metrics(&pa, &pb, 1, spacing).unwrap();
        let rev = surface_metrics(&pb, &pa, 1, spacing).unwrap();
        assert_eq!(got.asd, rev.asd);
        assert_eq!(got.hd95, rev.hd95);
        match oracle::surface_distances(&a, &b, spacing) {
            Some((asd, hd95, hd100)) => {
                assert!(close(got.asd, asd), "asd seed {seed}: {} vs {asd}", got.asd);
                assert!(close(got.hd95, hd95), "hd95 seed {seed}: {} vs {hd95}", got.hd95);
                assert!(got.hd95 <= hd100 + 1e-12);
                assert!(got.flag.is_none());
            }
            None => assert!(got.flag.is_some()),
        }
    }
}
