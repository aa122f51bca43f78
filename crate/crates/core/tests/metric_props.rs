use minmaxcam::cam::LocalizationMap;
use minmaxcam::ndtensor::Tensor;
use minmaxcam::wsoleval::{max_box_acc, pxap, BBox, BoxOptions, Mask, ThresholdGrid};
use proptest::prelude::*;

const SIDE: usize = 8;

fn image() -> impl Strategy<Value = (Vec<f64>, BBox)> {
    (
        prop::collection::vec(0.0..=1.0f64, SIDE * SIDE),
        (0..SIDE - 1, 0..SIDE - 1, 1..=SIDE, 1..=SIDE),
    )
        .prop_map(|(v, (x0, y0, w, h))| {
            let b = BBox {
                x0,
                y0,
                x1: (x0 + w).min(SIDE),
                y1: (y0 + h).min(SIDE),
            };
            (v, b)
        })
}

fn build(images: &[(Vec<f64>, BBox)]) -> (Vec<LocalizationMap>, Vec<Vec<BBox>>, Vec<Mask>) {
    let maps = images
        .iter()
        .map(|(v, _)| LocalizationMap::new(Tensor::new(vec![SIDE, SIDE], v.clone()).unwrap(), 0, "x").unwrap())
        .collect();
    let boxes = images.iter().map(|(_, b)| vec![*b]).collect();
    let masks = images
        .iter()
        .map(|(_, b)| Mask::new(SIDE, SIDE, (0..SIDE * SIDE).map(|i| b.contains(i % SIDE, i / SIDE)).collect()).unwrap())
        .collect();
    (maps, boxes, masks)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accuracy_never_rises_with_delta(images in prop::collection::vec(image(), 1..5)) {
        let (maps, boxes, _) = build(&images);
        let deltas = [0.1, 0.3, 0.5, 0.7, 0.9];
        let acc = max_box_acc(&maps, &boxes, &deltas, &ThresholdGrid::new(20).unwrap(), &BoxOptions::default()).unwrap();
        for w in acc.max_box_acc.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        for curve in &acc.curves {
            prop_assert!(curve.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn metrics_ignore_image_order(images in prop::collection::vec(image(), 2..5), rot in 1usize..4) {
        let grid = ThresholdGrid::new(20).unwrap();
        let (maps, boxes, masks) = build(&images);
        let mut shuffled = images.clone();
        shuffled.rotate_left(rot % images.len());
        shuffled.reverse();
        let (maps2, boxes2, masks2) = build(&shuffled);
        let a = max_box_acc(&maps, &boxes, &[0.5], &grid, &BoxOptions::default()).unwrap();
        let b = max_box_acc(&maps2, &boxes2, &[0.5], &grid, &BoxOptions::default()).unwrap();
        prop_assert_eq!(a.max_box_acc, b.max_box_acc);
        let (p, q) = (pxap(&maps, &masks, &grid).unwrap(), pxap(&maps2, &masks2, &grid).unwrap());
        prop_assert!((p - q).abs() < 1e-12);
    }

    #[test]
    fn pxap_is_a_probability(images in prop::collection::vec(image(), 1..5)) {
        let (maps, _, masks) = build(&images);
        let p = pxap(&maps, &masks, &ThresholdGrid::default()).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
    }

    #[test]
    fn mask_indicator_map_gives_perfect_pxap(images in prop::collection::vec(image(), 1..4)) {
        let (_, _, masks) = build(&images);
        let maps: Vec<_> = masks
            .iter()
            .map(|k| {
                let v = k.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
                LocalizationMap::new(Tensor::new(vec![SIDE, SIDE], v).unwrap(), 0, "x").unwrap()
            })
            .collect();
        let p = pxap(&maps, &masks, &ThresholdGrid::default()).unwrap();
        prop_assert!((p - 1.0).abs() < 1e-12);
    }
}
