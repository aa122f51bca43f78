//! Model-level evaluation: ground-truth-class maps for a dataset split,
//! scored by the threshold-free metrics, plus the feature diagnostics.

use crate::cam::{localization_maps, CamOptions, LocalizationMap};
use crate::error::{arg_err, Result};
use crate::minmax::MaskVariant;
use crate::ndtensor::Tape;
use crate::nets::Model;
use crate::synthbench::{Dataset, Split};
use crate::wsoleval::{
    best_box, bg_proportion, max_box_acc, pxap, pxap_per_image, ranked_classes, topk_loc, BBox, BoxAccuracy, BoxOptions, EvalResult, GtRegion, Mask, ThresholdGrid,
    V2_DELTAS,
};

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub cam: CamOptions,
    pub grid: ThresholdGrid,
    pub deltas: Vec<f64>,
    pub boxes: BoxOptions,
    /// Average PxAP per image instead of pooling all pixels.
    pub per_image_pxap: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            cam: CamOptions::default(),
            grid: ThresholdGrid::default(),
            deltas: V2_DELTAS.to_vec(),
            boxes: BoxOptions::default(),
            per_image_pxap: false,
        }
    }
}

fn chunks(indices: &[usize]) -> impl Iterator<Item = &[usize]> {
    indices.chunks(EVAL_CHUNK)
}

/// Maps for the given records, each for the class in `classes` (same order).
pub fn maps_for_classes(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    classes: &[usize],
    cam: &CamOptions,
) -> Result<Vec<LocalizationMap>> {
    if indices.len() != classes.len() {
        return Err(arg_err!("{} records but {} classes", indices.len(), classes.len()));
    }
    model.expect_classes(dataset.num_classes)?;
    let mut out = Vec::with_capacity(indices.len());
    for (start, part) in (0..).step_by(EVAL_CHUNK).zip(chunks(indices)) {
        let cls = &classes[start..start + part.len()];
        let maps = localization_maps(model, &dataset.images(part)?, cls, cam)?;
        let (h, w) = (dataset.height, dataset.width);
        for (j, (&i, &c)) in part.iter().zip(cls).enumerate() {
            let plane = maps.slice_outer(j, 1)?.reshape([h, w])?;
            out.push(LocalizationMap::new(plane, c, dataset.records[i].image_id.clone())?);
        }
    }
    Ok(out)
}

/// Ground-truth-class maps for the given records.
pub fn gt_maps(model: &Model, dataset: &Dataset, indices: &[usize], cam: &CamOptions) -> Result<Vec<LocalizationMap>> {
    maps_for_classes(model, dataset, indices, &dataset.labels(indices), cam)
}

pub fn gt_boxes(dataset: &Dataset, indices: &[usize]) -> Vec<Vec<BBox>> {
    indices.iter().map(|&i| dataset.records[i].gt_boxes.clone()).collect()
}

pub fn gt_masks(dataset: &Dataset, indices: &[usize]) -> Vec<Mask> {
    indices.iter().map(|&i| dataset.mask(i).clone()).collect()
}

/// Scores precomputed maps against the records they belong to.
pub fn score_maps(maps: &[LocalizationMap], dataset: &Dataset, indices: &[usize], opts: &EvalOptions) -> Result<EvalResult> {
    let boxes = max_box_acc(maps, &gt_boxes(dataset, indices), &opts.deltas, &opts.grid, &opts.boxes)?;
    let masks = gt_masks(dataset, indices);
    let px = if opts.per_image_pxap {
        pxap_per_image(maps, &masks, &opts.grid)?
    } else {
        pxap(maps, &masks, &opts.grid)?
    };
    Ok(EvalResult {
        boxes: Some(boxes),
        pxap: Some(px),
    })
}

/// Ground-truth-known localization metrics of `model` on `split`.
pub fn evaluate(model: &Model, dataset: &Dataset, split: Split, opts: &EvalOptions) -> Result<(EvalResult, Vec<LocalizationMap>)> {
    let indices = dataset.split(split);
    if indices.is_empty() {
        return Err(arg_err!("split {split} is empty"));
    }
    let maps = gt_maps(model, dataset, &indices, &opts.cam)?;
    Ok((score_maps(&maps, dataset, &indices, opts)?, maps))
}

/// Which class's map supplies the box in top-k localization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TopkMapClass {
    #[default]
    GroundTruth,
    Predicted,
}

/// Logits `[n, C]` of `model` for the given records as rows.
pub fn logits_rows(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(indices.len());
    for part in chunks(indices) {
        let l = model.logits(&dataset.images(part)?)?;
        rows.extend(l.data().chunks(model.classes).map(<[f64]>::to_vec));
    }
    Ok(rows)
}

pub fn classification_accuracy(model: &Model, dataset: &Dataset, split: Split) -> Result<f64> {
    let indices = dataset.split(split);
    let logits = logits_rows(model, dataset, &indices)?;
    let labels = dataset.labels(&indices);
    let hits = logits
        .iter()
        .zip(&labels)
        .filter(|(l, &y)| ranked_classes(l)[0] == y)
        .count();
    Ok(hits as f64 / indices.len().max(1) as f64)
}

/// Top-k localization of `loc_model`'s maps with `classifier` supplying the class ranking.
/// The threshold is the dataset-level optimum of MaxBoxAcc at δ = 0.5.
pub fn topk_localization(
    loc_model: &Model,
    classifier: &Model,
    dataset: &Dataset,
    split: Split,
    ks: &[usize],
    map_class: TopkMapClass,
    opts: &EvalOptions,
) -> Result<(f64, Vec<f64>)> {
    if loc_model.classes != classifier.classes {
        return Err(arg_err!(
            "localization model has {} classes but the classifier has {}",
            loc_model.classes,
            classifier.classes
        ));
    }
    let indices = dataset.split(split);
    let labels = dataset.labels(&indices);
    let gts = gt_boxes(dataset, &indices);
    let known = gt_maps(loc_model, dataset, &indices, &opts.cam)?;
    let acc: BoxAccuracy = max_box_acc(&known, &gts, &[0.5], &opts.grid, &opts.boxes)?;
    let tau = acc.best_tau[0];
    let logits = logits_rows(classifier, dataset, &indices)?;
    let maps = match map_class {
        TopkMapClass::GroundTruth => known,
        TopkMapClass::Predicted => {
            let pred: Vec<usize> = logits.iter().map(|l| ranked_classes(l)[0]).collect();
            maps_for_classes(loc_model, dataset, &indices, &pred, &opts.cam)?
        }
    };
    let scores = ks
        .iter()
        .map(|&k| topk_loc(&maps, &gts, &logits, &labels, k, tau, &opts.boxes))
        .collect::<Result<Vec<_>>>()?;
    Ok((tau, scores))
}

/// Per-record `(f, f°)`: pooled features of the masked and the original image.
pub fn feature_pairs(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    cam: &CamOptions,
    variant: MaskVariant,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    model.expect_classes(dataset.num_classes)?;
    let k = model.feature_channels();
    let (mut f, mut f0) = (Vec::with_capacity(indices.len()), Vec::with_capacity(indices.len()));
    for part in chunks(indices) {
        let images = dataset.images(part)?;
        let labels = dataset.labels(part);
        let s = images.shape().to_vec();
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape);
        let x = tape.constant(images);
        let fmap = model.forward_features(&mut tape, &bound, x)?;
        let orig = tape.gap(fmap)?;
        let raw = crate::cam::cam_raw_batch(&mut tape, fmap, bound.head.w, &labels)?;
        let maps = crate::cam::finalize_map(&mut tape, raw, s[2], s[3], cam)?;
        let masked = match variant {
            MaskVariant::Input => {
                let xm = crate::cam::mask_image(&mut tape, x, maps)?;
                let fm = model.forward_features(&mut tape, &bound, xm)?;
                tape.gap(fm)?
            }
            MaskVariant::Feature => crate::cam::mask_features(&mut tape, fmap, maps)?,
        };
        f.extend(tape.value(masked).data().chunks(k).map(<[f64]>::to_vec));
        f0.extend(tape.value(orig).data().chunks(k).map(<[f64]>::to_vec));
    }
    Ok((f, f0))
}

/// Share of each predicted box lying outside the object mask, at threshold `tau`.
/// The predicted box is the one the box metric would match; `None` where no pixel passes.
pub fn background_proportions(
    maps: &[LocalizationMap],
    dataset: &Dataset,
    indices: &[usize],
    tau: f64,
    opts: &BoxOptions,
) -> Result<Vec<Option<f64>>> {
    if maps.len() != indices.len() {
        return Err(arg_err!("{} maps for {} records", maps.len(), indices.len()));
    }
    Ok(maps
        .iter()
        .zip(indices)
        .map(|(m, &i)| {
            best_box(m, &dataset.records[i].gt_boxes, tau, opts)
                .map(|(b, _)| bg_proportion(&b, GtRegion::Mask(dataset.mask(i))))
        })
        .collect())
}
