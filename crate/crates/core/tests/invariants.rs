use minmaxcam::ndtensor::{Tape, Tensor};
use minmaxcam::wsoleval::{feature_dispersion, iou, BBox, Mask};
use proptest::prelude::*;

fn plane(h: usize, w: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    prop::collection::vec(-5.0f64..5.0, h * w).prop_map(move |v| (h, w, v))
}

fn any_plane() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..7, 1usize..7).prop_flat_map(|(h, w)| plane(h, w))
}

fn bbox(side: usize) -> impl Strategy<Value = BBox> {
    (0..side - 1, 0..side - 1)
        .prop_flat_map(move |(x0, y0)| (Just(x0), Just(y0), x0 + 1..=side, y0 + 1..=side))
        .prop_map(|(x0, y0, x1, y1)| BBox::new(x0, y0, x1, y1).unwrap())
}

fn normalize(h: usize, w: usize, v: &[f64]) -> Vec<f64> {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, h, w], v.to_vec()).unwrap());
    let y = t.minmax_normalize(x, 1e-12, false).unwrap();
    t.value(y).data().to_vec()
}

fn resize(h: usize, w: usize, v: &[f64], oh: usize, ow: usize) -> Vec<f64> {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, h, w], v.to_vec()).unwrap());
    let y = t.bilinear_resize(x, oh, ow).unwrap();
    t.value(y).data().to_vec()
}

proptest! {
    #[test]
    fn normalized_map_spans_unit_interval((h, w, v) in any_plane()) {
        let out = normalize(h, w, &v);
        let lo = out.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo.abs() < 1e-12);
        prop_assert!(hi <= 1.0);
        let spread = v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min);
        if spread > 1e-3 {
            prop_assert!(hi > 1.0 - 1e-8);
        }
    }

    #[test]
    fn normalization_ignores_positive_affine_maps((h, w, v) in any_plane(), a in 0.1f64..10.0, b in -3.0f64..3.0) {
        let spread = v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        for (p, q) in normalize(h, w, &v).iter().zip(normalize(h, w, &moved)) {
            prop_assert!((p - q).abs() < 1e-7);
        }
    }

    #[test]
    fn resize_stays_within_input_range((h, w, v) in any_plane(), oh in 1usize..12, ow in 1usize..12) {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for y in resize(h, w, &v, oh, ow) {
            prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        }
    }

    #[test]
    fn resize_keeps_constant_maps(h in 1usize..6, w in 1usize..6, c in -3.0f64..3.0, oh in 1usize..12, ow in 1usize..12) {
        for y in resize(h, w, &vec![c; h * w], oh, ow) {
            prop_assert!((y - c).abs() < 1e-12);
        }
    }

    #[test]
    fn same_size_resize_is_identity((h, w, v) in any_plane()) {
        for (a, b) in resize(h, w, &v, h, w).iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(12), b in bbox(12)) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn tight_box_covers_mask(bits in prop::collection::vec(any::<bool>(), 64)) {
        let mask = Mask::new(8, 8, bits.clone()).unwrap();
        match mask.tight_box() {
            None => prop_assert!(bits.iter().all(|b| !b)),
            Some(b) => {
                for y in 0..8 {
                    for x in 0..8 {
                        if mask.get(y, x) {
                            prop_assert!(b.contains(x, y));
                        }
                    }
                }
                // every edge of a tight box touches the mask
                prop_assert!((b.y0..b.y1).any(|y| mask.get(y, b.x0)));
                prop_assert!((b.y0..b.y1).any(|y| mask.get(y, b.x1 - 1)));
                prop_assert!((b.x0..b.x1).any(|x| mask.get(b.y0, x)));
                prop_assert!((b.x0..b.x1).any(|x| mask.get(b.y1 - 1, x)));
            }
        }
    }

    #[test]
    fn dispersion_ignores_shared_translation(
        feats in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 6),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let labels = [0, 0, 0, 1, 1, 1];
        let moved: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let (m, s) = feature_dispersion(&feats, &labels).unwrap();
        let (m2, s2) = feature_dispersion(&moved, &labels).unwrap();
        prop_assert!((m - m2).abs() < 1e-9 && (s - s2).abs() < 1e-9);
        prop_assert!(m >= 0.0 && s >= 0.0);
    }
}
