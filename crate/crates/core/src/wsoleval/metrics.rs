use super::boxes::{components, iou, BBox, Connectivity, Mask};
use super::ThresholdGrid;
use crate::cam::LocalizationMap;
use crate::error::{arg_err, Result};

/// How predicted boxes are derived from a thresholded map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BoxOptions {
    pub connectivity: Connectivity,
    /// Score only the largest component instead of the best-matching one.
    pub largest_only: bool,
}

/// Box accuracy over the threshold grid for each IoU criterion `δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxAccuracy {
    pub deltas: Vec<f64>,
    pub taus: Vec<f64>,
    /// `curves[d][t]`: fraction of images localized at `taus[t]` under `deltas[d]`.
    pub curves: Vec<Vec<f64>>,
    pub max_box_acc: Vec<f64>,
    /// First threshold attaining each maximum.
    pub best_tau: Vec<f64>,
    /// Mean of `max_box_acc` over the deltas.
    pub v2: f64,
}

impl BoxAccuracy {
    pub fn at_delta(&self, delta: f64) -> Option<(f64, f64)> {
        self.deltas
            .iter()
            .position(|&d| (d - delta).abs() < 1e-12)
            .map(|i| (self.max_box_acc[i], self.best_tau[i]))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalResult {
    pub boxes: Option<BoxAccuracy>,
    pub pxap: Option<f64>,
}

/// Candidate boxes of `map` at `tau` under `opts`.
fn candidates(map: &LocalizationMap, tau: f64, opts: &BoxOptions) -> Vec<BBox> {
    let comps = components(map.values().data(), map.height(), map.width(), tau, opts.connectivity);
    if opts.largest_only {
        // first of the largest in scan order
        comps
            .iter()
            .fold(None::<&super::Component>, |best, c| match best {
                Some(b) if b.area >= c.area => Some(b),
                _ => Some(c),
            })
            .map(|c| vec![c.bbox])
            .unwrap_or_default()
    } else {
        comps.iter().map(|c| c.bbox).collect()
    }
}

/// The candidate box with the highest IoU against any ground-truth box, with that IoU.
/// Ties keep the earliest candidate. `None` when no pixel passes `tau`.
pub fn best_box(map: &LocalizationMap, gts: &[BBox], tau: f64, opts: &BoxOptions) -> Option<(BBox, f64)> {
    candidates(map, tau, opts).into_iter().fold(None, |best, p| {
        let v = gts.iter().map(|g| iou(&p, g)).fold(0.0, f64::max);
        match best {
            Some((_, b)) if b >= v => best,
            _ => Some((p, v)),
        }
    })
}

fn best_iou(map: &LocalizationMap, gts: &[BBox], tau: f64, opts: &BoxOptions) -> f64 {
    best_box(map, gts, tau, opts).map_or(0.0, |(_, v)| v)
}

/// GT-known box accuracy swept over `grid`, maximized per `δ`.
pub fn max_box_acc(
    maps: &[LocalizationMap],
    gts: &[Vec<BBox>],
    deltas: &[f64],
    grid: &ThresholdGrid,
    opts: &BoxOptions,
) -> Result<BoxAccuracy> {
    if maps.len() != gts.len() {
        return Err(arg_err!("{} maps but {} ground-truth entries", maps.len(), gts.len()));
    }
    if maps.is_empty() {
        return Err(arg_err!("no images to evaluate"));
    }
    if deltas.is_empty() {
        return Err(arg_err!("no IoU thresholds given"));
    }
    if let Some(i) = gts.iter().position(Vec::is_empty) {
        return Err(arg_err!("image {i} has no ground-truth box"));
    }
    let taus = grid.values();
    let mut correct = vec![vec![0usize; taus.len()]; deltas.len()];
    for (map, gt) in maps.iter().zip(gts) {
        for (t, &tau) in taus.iter().enumerate() {
            let best = best_iou(map, gt, tau, opts);
            for (d, &delta) in deltas.iter().enumerate() {
                if best >= delta {
                    correct[d][t] += 1;
                }
            }
        }
    }
    let total = maps.len() as f64;
    let curves: Vec<Vec<f64>> = correct
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / total).collect())
        .collect();
    let mut max_box_acc = Vec::with_capacity(deltas.len());
    let mut best_tau = Vec::with_capacity(deltas.len());
    for curve in &curves {
        let (t, &m) = curve
            .iter()
            .enumerate()
            .fold((0, &curve[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        max_box_acc.push(m);
        best_tau.push(taus[t]);
    }
    let v2 = max_box_acc.iter().sum::<f64>() / max_box_acc.len() as f64;
    Ok(BoxAccuracy {
        deltas: deltas.to_vec(),
        taus: taus.to_vec(),
        curves,
        max_box_acc,
        best_tau,
        v2,
    })
}

fn check_aligned(maps: &[LocalizationMap], masks: &[Mask]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(arg_err!("{} maps but {} masks", maps.len(), masks.len()));
    }
    for (i, (m, k)) in maps.iter().zip(masks).enumerate() {
        if m.resolution() != (k.height, k.width) {
            return Err(arg_err!(
                "image {i}: map {:?} and mask {}×{} differ in resolution",
                m.resolution(),
                k.height,
                k.width
            ));
        }
    }
    Ok(())
}

/// Histograms of how many thresholds each pixel passes, split by mask label.
fn pass_histograms<'a>(
    pairs: impl Iterator<Item = (&'a LocalizationMap, &'a Mask)>,
    grid: &ThresholdGrid,
) -> (Vec<u64>, Vec<u64>) {
    let mut all = vec![0u64; grid.len() + 1];
    let mut pos = vec![0u64; grid.len() + 1];
    for (map, mask) in pairs {
        for (&v, &m) in map.values().data().iter().zip(&mask.data) {
            let k = grid.passed(v);
            all[k] += 1;
            if m {
                pos[k] += 1;
            }
        }
    }
    (all, pos)
}

/// Area under the precision-recall curve from pass histograms (rectangle rule, decreasing recall).
fn ap_from_histograms(all: &[u64], pos: &[u64]) -> Option<f64> {
    let total_pos: u64 = pos.iter().sum();
    if total_pos == 0 {
        return None;
    }
    let t_count = all.len() - 1;
    // predicted(t) = #pixels passing threshold t = Σ_{k > t} hist[k]
    let mut pred = vec![0u64; t_count + 1];
    let mut tp = vec![0u64; t_count + 1];
    for t in (0..t_count).rev() {
        pred[t] = pred[t + 1] + all[t + 1];
        tp[t] = tp[t + 1] + pos[t + 1];
    }
    let recall = |t: usize| tp[t] as f64 / total_pos as f64;
    let mut ap = 0.0;
    for t in 0..t_count {
        let precision = if pred[t] == 0 { 0.0 } else { tp[t] as f64 / pred[t] as f64 };
        let next = if t + 1 < t_count { recall(t + 1) } else { 0.0 };
        ap += precision * (recall(t) - next);
    }
    Some(ap)
}

/// Pixel average precision pooled over every pixel of every image.
pub fn pxap(maps: &[LocalizationMap], masks: &[Mask], grid: &ThresholdGrid) -> Result<f64> {
    check_aligned(maps, masks)?;
    let (all, pos) = pass_histograms(maps.iter().zip(masks), grid);
    ap_from_histograms(&all, &pos).ok_or_else(|| arg_err!("ground truth has no positive pixels"))
}

/// Mean of per-image pixel AP; images without positive pixels are skipped.
pub fn pxap_per_image(maps: &[LocalizationMap], masks: &[Mask], grid: &ThresholdGrid) -> Result<f64> {
    check_aligned(maps, masks)?;
    let aps: Vec<f64> = maps
        .iter()
        .zip(masks)
        .filter_map(|pair| {
            let (all, pos) = pass_histograms(std::iter::once(pair), grid);
            ap_from_histograms(&all, &pos)
        })
        .collect();
    if aps.is_empty() {
        return Err(arg_err!("ground truth has no positive pixels"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Classes ranked by descending logit, ties broken by class index.
pub fn ranked_classes(logits: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx
}

/// Fraction of images whose label is in the classifier's top `k` and whose map,
/// thresholded at `tau`, yields a box with IoU ≥ 0.5.
pub fn topk_loc(
    maps: &[LocalizationMap],
    gts: &[Vec<BBox>],
    logits: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    tau: f64,
    opts: &BoxOptions,
) -> Result<f64> {
    let n = maps.len();
    if gts.len() != n || logits.len() != n || labels.len() != n {
        return Err(arg_err!("topk_loc inputs have mismatched lengths"));
    }
    if n == 0 {
        return Err(arg_err!("no images to evaluate"));
    }
    if k == 0 {
        return Err(arg_err!("k must be at least 1"));
    }
    let mut hits = 0usize;
    for i in 0..n {
        let c = logits[i].len();
        if labels[i] >= c {
            return Err(arg_err!("label {} outside classifier's {c} classes", labels[i]));
        }
        let in_topk = ranked_classes(&logits[i]).iter().take(k).any(|&j| j == labels[i]);
        if in_topk && best_iou(&maps[i], &gts[i], tau, opts) >= 0.5 {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}
