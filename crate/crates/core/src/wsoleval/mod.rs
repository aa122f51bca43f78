//! Threshold-free localization metrics and the diagnostics built on them.
//!
//! Every metric sweeps a fixed grid of thresholds over `[0, 1)` and
//! reports the best operating point, so results never depend on a
//! hand-picked binarization threshold.

mod boxes;
mod diag;
mod metrics;

pub use boxes::{components, extract_boxes, iou, BBox, Component, Connectivity, Mask};
pub use diag::{bg_proportion, feature_dispersion, GtRegion};
pub use metrics::{
    best_box, max_box_acc, pxap, pxap_per_image, ranked_classes, topk_loc, BoxAccuracy, BoxOptions, EvalResult,
};

use crate::error::{arg_err, Result};

/// Thresholds `τ_t = t / T` for `t = 0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdGrid {
    values: Vec<f64>,
}

pub const DEFAULT_GRID_SIZE: usize = 100;
pub const V2_DELTAS: [f64; 3] = [0.3, 0.5, 0.7];

impl ThresholdGrid {
    pub fn new(intervals: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(arg_err!("threshold grid needs at least one interval"));
        }
        Ok(ThresholdGrid {
            values: (0..intervals).map(|t| t as f64 / intervals as f64).collect(),
        })
    }

    /// Uses the given thresholds verbatim; they must be strictly increasing.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(arg_err!("thresholds must be non-empty and strictly increasing"));
        }
        Ok(ThresholdGrid { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of thresholds `τ` with `τ ≤ v`, i.e. how many grid points a value of `v` survives.
    pub fn passed(&self, v: f64) -> usize {
        self.values.partition_point(|&t| t <= v)
    }
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid::new(DEFAULT_GRID_SIZE).expect("positive grid size")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid() {
        let g = ThresholdGrid::default();
        assert_eq!(g.len(), 100);
        assert_eq!(g.values()[0], 0.0);
        assert!((g.values()[99] - 0.99).abs() < 1e-15);
        assert!(g.values().windows(2).all(|w| w[0] < w[1]));
        assert!(ThresholdGrid::new(0).is_err());
    }

    #[test]
    fn passed_counts_thresholds_at_or_below() {
        let g = ThresholdGrid::new(4).unwrap();
        assert_eq!(g.passed(-0.1), 0);
        assert_eq!(g.passed(0.0), 1);
        assert_eq!(g.passed(0.5), 3);
        assert_eq!(g.passed(1.0), 4);
    }
}
