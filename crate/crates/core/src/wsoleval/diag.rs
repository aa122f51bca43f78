use std::collections::BTreeMap;

use super::boxes::{BBox, Mask};
use crate::error::{arg_err, Result};

/// Ground truth against which a predicted box is compared.
#[derive(Clone, Copy, Debug)]
pub enum GtRegion<'a> {
    Box(BBox),
    Mask(&'a Mask),
}

/// Fraction of `pred`'s pixels outside the ground-truth region.
/// Pixels of `pred` beyond the mask's extent count as outside.
pub fn bg_proportion(pred: &BBox, gt: GtRegion<'_>) -> f64 {
    let outside = match gt {
        GtRegion::Box(g) => pred.area() - pred.intersection(&g),
        GtRegion::Mask(m) => {
            let mut n = 0;
            for y in pred.y0..pred.y1 {
                for x in pred.x0..pred.x1 {
                    if y >= m.height || x >= m.width || !m.get(y, x) {
                        n += 1;
                    }
                }
            }
            n
        }
    };
    outside as f64 / pred.area() as f64
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per class: population std of distances to the class centroid. Returns the
/// mean and population std of those values across classes.
pub fn feature_dispersion(features: &[Vec<f64>], labels: &[usize]) -> Result<(f64, f64)> {
    if features.len() != labels.len() {
        return Err(arg_err!("{} features but {} labels", features.len(), labels.len()));
    }
    if features.is_empty() {
        return Err(arg_err!("no features given"));
    }
    let k = features[0].len();
    if features.iter().any(|f| f.len() != k) {
        return Err(arg_err!("features have differing lengths"));
    }
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (f, &c) in features.iter().zip(labels) {
        groups.entry(c).or_default().push(f);
    }
    let mut per_class = Vec::with_capacity(groups.len());
    for (c, fs) in &groups {
        if fs.len() < 2 {
            return Err(arg_err!("class {c} has {} sample(s); dispersion needs at least 2", fs.len()));
        }
        let mut centroid = vec![0.0; k];
        for f in fs {
            for (m, v) in centroid.iter_mut().zip(f.iter()) {
                *m += v;
            }
        }
        centroid.iter_mut().for_each(|m| *m /= fs.len() as f64);
        let dists: Vec<f64> = fs
            .iter()
            .map(|f| f.iter().zip(&centroid).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .collect();
        per_class.push(mean_std(&dists).1);
    }
    Ok(mean_std(&per_class))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bg_examples() {
        let g = BBox::new(0, 0, 5, 10).unwrap();
        let pred = BBox::new(0, 0, 10, 10).unwrap();
        assert_eq!(bg_proportion(&pred, GtRegion::Box(g)), 0.5);
        assert_eq!(bg_proportion(&BBox::new(1, 1, 3, 3).unwrap(), GtRegion::Box(g)), 0.0);
        assert_eq!(bg_proportion(&BBox::new(6, 0, 9, 3).unwrap(), GtRegion::Box(g)), 1.0);
    }

    #[test]
    fn bg_prefers_mask_shape() {
        // diagonal mask inside a full box
        let m = Mask::new(2, 2, vec![true, false, false, true]).unwrap();
        let pred = BBox::new(0, 0, 2, 2).unwrap();
        assert_eq!(bg_proportion(&pred, GtRegion::Mask(&m)), 0.5);
        assert_eq!(bg_proportion(&BBox::new(0, 0, 4, 2).unwrap(), GtRegion::Mask(&m)), 0.75);
    }

    #[test]
    fn dispersion_examples() {
        let same = vec![vec![1.0, 2.0]; 4];
        assert_eq!(feature_dispersion(&same, &[0, 0, 1, 1]).unwrap(), (0.0, 0.0));
        let two = vec![vec![0.0], vec![2.0]];
        assert_eq!(feature_dispersion(&two, &[0, 0]).unwrap(), (0.0, 0.0));
        let three = vec![vec![0.0], vec![0.0], vec![3.0]];
        let (m, s) = feature_dispersion(&three, &[0, 0, 0]).unwrap();
        assert!((m - 2f64.sqrt() / 3.0).abs() < 1e-12);
        assert!((m - 0.4714).abs() < 1e-4);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn dispersion_across_classes() {
        // class 0 std 0, class 1 std 2/3·√2 → mean √2/3, std √2/3
        let f = vec![vec![0.0], vec![2.0], vec![0.0], vec![0.0], vec![6.0]];
        let (m, s) = feature_dispersion(&f, &[0, 0, 1, 1, 1]).unwrap();
        let c1 = 2.0 * 2f64.sqrt() / 3.0;
        assert!((m - c1 / 2.0).abs() < 1e-12);
        assert!((s - c1 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_class_rejected() {
        assert!(feature_dispersion(&[vec![0.0], vec![1.0], vec![2.0]], &[0, 0, 1]).is_err());
    }
}
