//! Two-stage training: classification on backbone and head, then
//! head-only training against the common-region and full-region losses
//! with the backbone frozen.

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cam::{cam_raw_batch, finalize_map, mask_features, mask_image, CamOptions};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::ndtensor::{ParamSet, Tape, Tensor, Var};
use crate::nets::{BackboneSpec, Model, HEAD_W};
use crate::synthbench::{Dataset, Split};

/// Where the localization map is applied when forming `f`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskVariant {
    /// `f = gap(B(I ⊙ H))`.
    #[default]
    Input,
    /// `f = gap(B(I) ⊙ H↓)`.
    Feature,
}

impl std::str::FromStr for MaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(MaskVariant::Input),
            "feature" => Ok(MaskVariant::Feature),
            _ => Err(arg_err!("unknown mask variant `{s}` (expected input or feature)")),
        }
    }
}

impl std::fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskVariant::Input => "input",
            MaskVariant::Feature => "feature",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageTwoConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Defaults to the Stage I rate when `None`.
    pub lr2: Option<f64>,
    /// Epochs of Stage I alone before Stage II steps begin.
    pub warmup_epochs: usize,
}

impl StageTwoConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        StageTwoConfig {
            lambda1,
            lambda2,
            lr2: None,
            warmup_epochs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(arg_err!("lambda1 and lambda2 must be non-negative"));
        }
        if let Some(lr) = self.lr2 {
            if !(lr > 0.0) {
                return Err(arg_err!("lr2 must be positive"));
            }
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.lambda1 != 0.0 || self.lambda2 != 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub backbone: BackboneSpec,
    pub epochs: usize,
    /// Mini-batches per epoch; `None` means one pass worth of training images.
    pub batches_per_epoch: Option<usize>,
    pub lr1: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Images per class group.
    pub set_size: usize,
    /// Class groups per mini-batch.
    pub groups: usize,
    /// `None` trains Stage I only.
    pub stage2: Option<StageTwoConfig>,
    /// Stage I multiplies each image by a factor drawn uniformly from this range.
    pub intensity_aug: Option<(f64, f64)>,
    pub mask_variant: MaskVariant,
    pub cam: CamOptions,
}

pub const DEFAULT_INTENSITY_RANGE: (f64, f64) = (0.5, 1.5);

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: BackboneSpec::desk(true),
            epochs: 10,
            batches_per_epoch: None,
            lr1: 0.02,
            momentum: 0.9,
            seed: 0,
            set_size: 5,
            groups: 12,
            stage2: Some(StageTwoConfig::new(1.0, 1.0)),
            intensity_aug: None,
            mask_variant: MaskVariant::Input,
            cam: CamOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.epochs == 0 || self.batches_per_epoch == Some(0) {
            return Err(arg_err!("training needs at least one epoch and one batch"));
        }
        if !(self.lr1 >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(arg_err!("lr1 must be ≥ 0 and momentum in [0, 1)"));
        }
        if self.set_size == 0 || self.groups == 0 {
            return Err(arg_err!("set_size and groups must be positive"));
        }
        if let Some((lo, hi)) = self.intensity_aug {
            if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi) {
                return Err(arg_err!("intensity range must satisfy 0 < lo ≤ 1 ≤ hi, got ({lo}, {hi})"));
            }
        }
        if let Some(s2) = &self.stage2 {
            s2.validate()?;
            if s2.lambda1 > 0.0 && self.set_size < 2 {
                return Err(arg_err!("common-region loss needs set_size ≥ 2"));
            }
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.groups * self.set_size
    }
}

/// `N` class groups of `S` consecutive same-class samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SetBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
    pub groups: usize,
    pub set_size: usize,
}

/// Draws `groups` classes, then `set_size` members of each
/// (without replacement when the class is large enough, with replacement otherwise).
/// Classes are distinct while `groups` does not exceed the classes on offer; beyond that
/// every class gets a group before any class gets another.
/// `by_class[c]` lists the candidates of class `c`. Returns `(indices, labels)`.
pub fn sample_set_indices<R: Rng>(
    by_class: &[Vec<usize>],
    groups: usize,
    set_size: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let available: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    if available.is_empty() {
        return Err(arg_err!("no class has images"));
    }
    if set_size == 0 {
        return Err(arg_err!("set_size must be positive"));
    }
    let mut indices = Vec::with_capacity(groups * set_size);
    let mut labels = Vec::with_capacity(groups * set_size);
    let mut picks = Vec::with_capacity(groups);
    while picks.len() < groups {
        let take = (groups - picks.len()).min(available.len());
        picks.extend(index::sample(rng, available.len(), take).into_iter().map(|p| available[p]));
    }
    for c in picks {
        let members = &by_class[c];
        if members.len() >= set_size {
            indices.extend(index::sample(rng, members.len(), set_size).into_iter().map(|i| members[i]));
        } else {
            indices.extend((0..set_size).map(|_| members[rng.gen_range(0..members.len())]));
        }
        labels.extend(std::iter::repeat(c).take(set_size));
    }
    Ok((indices, labels))
}

pub fn sample_set_batch<R: Rng>(
    dataset: &Dataset,
    split: Split,
    groups: usize,
    set_size: usize,
    rng: &mut R,
) -> Result<SetBatch> {
    let (indices, labels) = sample_set_indices(&dataset.by_class(split), groups, set_size, rng)?;
    Ok(SetBatch {
        images: dataset.images(&indices)?,
        labels,
        indices,
        groups,
        set_size,
    })
}

/// `(1 / (S(S−1))) Σ_{i,j} ‖f_i − f_j‖²` over the rows of `features` (`[S, K]`).
pub fn crr(tape: &mut Tape, features: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 2 {
        return Err(shape_err!("set features must be [S, K], got {s:?}"));
    }
    let n = s[0];
    if n < 2 {
        return Err(arg_err!("common-region loss needs at least 2 features, got {n}"));
    }
    let rows: Vec<Var> = (0..n)
        .map(|i| tape.slice_outer(features, i, 1))
        .collect::<Result<_>>()?;
    let mut total: Option<Var> = None;
    for i in 0..n {
        for j in i + 1..n {
            let d = tape.sq_l2(rows[i], rows[j])?;
            total = Some(match total {
                None => d,
                Some(t) => tape.add(t, d)?,
            });
        }
    }
    // each unordered pair appears twice in the full grid; the diagonal is zero
    tape.scale(total.expect("n ≥ 2"), 2.0 / (n * (n - 1)) as f64)
}

/// `(1/S) Σ ‖f_i − f°_i‖²` for `[S, K]` rows.
pub fn frr(tape: &mut Tape, f: Var, f_orig: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 2 {
        return Err(shape_err!("features must be [S, K], got {s:?}"));
    }
    let d = tape.sq_l2(f, f_orig)?;
    tape.scale(d, 1.0 / s[0] as f64)
}

/// One Stage I update on backbone and head. Returns the cross-entropy before the update.
pub fn stage1_step(model: &mut Model, images: &Tensor, labels: &[usize], lr1: f64, momentum: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(images.clone());
    let logits = model.classify(&mut tape, &bound, x)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    model.params.collect_grads(&tape, &bound.vars)?;
    model.params.sgd_step(lr1, momentum)?;
    Ok(value)
}

/// Nodes of the Stage II objective.
#[derive(Clone, Copy, Debug)]
pub struct StageTwoGraph {
    pub loss: Var,
    pub crr: Option<Var>,
    pub frr: Var,
    /// Localization maps `[N·S, 1, H, W]`.
    pub maps: Var,
}

/// Inputs of the Stage II objective that do not depend on the head.
#[derive(Clone, Copy, Debug)]
pub struct StageTwoInputs<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
    pub groups: usize,
    pub set_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub variant: MaskVariant,
    pub cam: &'a CamOptions,
}

/// Records `λ₁·CRR + λ₂·FRR` on `tape` as a function of the head weights `head_w`.
///
/// The backbone enters only as constants; `B(I)` and `f°` are computed on a separate tape.
pub fn stage2_graph(tape: &mut Tape, model: &Model, head_w: Var, inp: &StageTwoInputs<'_>) -> Result<StageTwoGraph> {
    let s = inp.images.shape().to_vec();
    let n = inp.groups * inp.set_size;
    if s.len() != 4 || s[0] != n || inp.labels.len() != n {
        return Err(shape_err!(
            "expected {n} images and labels for {}×{}, got images {s:?} and {} labels",
            inp.groups,
            inp.set_size,
            inp.labels.len()
        ));
    }
    if inp.lambda1 > 0.0 && inp.set_size < 2 {
        return Err(arg_err!("common-region loss needs set_size ≥ 2"));
    }
    let (fmap, f_orig) = {
        let mut t = Tape::new();
        let bound = model.bind_frozen(&mut t);
        let x = t.constant(inp.images.clone());
        let f = model.forward_features(&mut t, &bound, x)?;
        let g = t.gap(f)?;
        (t.value(f).clone(), t.value(g).clone())
    };
    let fmap = tape.constant(fmap);
    let f_orig = tape.constant(f_orig);
    let raw = cam_raw_batch(tape, fmap, head_w, inp.labels)?;
    let maps = finalize_map(tape, raw, s[2], s[3], inp.cam)?;
    let f = match inp.variant {
        MaskVariant::Input => {
            let x = tape.constant(inp.images.clone());
            let masked = mask_image(tape, x, maps)?;
            let bound = model.bind_frozen(tape);
            let fm = model.forward_features(tape, &bound, masked)?;
            tape.gap(fm)?
        }
        MaskVariant::Feature => mask_features(tape, fmap, maps)?,
    };

    let crr_var = if inp.set_size >= 2 {
        let mut sum: Option<Var> = None;
        for g in 0..inp.groups {
            let fg = tape.slice_outer(f, g * inp.set_size, inp.set_size)?;
            let c = crr(tape, fg)?;
            sum = Some(match sum {
                None => c,
                Some(t) => tape.add(t, c)?,
            });
        }
        Some(tape.scale(sum.expect("groups ≥ 1"), 1.0 / inp.groups as f64)?)
    } else {
        None
    };
    let frr_var = frr(tape, f, f_orig)?;
    let weighted_frr = tape.scale(frr_var, inp.lambda2)?;
    let loss = match crr_var {
        Some(c) => {
            let wc = tape.scale(c, inp.lambda1)?;
            tape.add(wc, weighted_frr)?
        }
        None => weighted_frr,
    };
    Ok(StageTwoGraph {
        loss,
        crr: crr_var,
        frr: frr_var,
        maps,
    })
}

/// Optimizer state of Stage II: momentum for the head weights only, kept apart from Stage I.
#[derive(Clone, Debug)]
pub struct StageTwoState {
    params: ParamSet,
}

impl StageTwoState {
    pub fn new(model: &Model) -> Self {
        let mut params = ParamSet::new();
        params
            .insert(HEAD_W, model.head_weights().clone(), true)
            .expect("fresh parameter set");
        StageTwoState { params }
    }
}

/// Losses reported by one Stage II step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageTwoLosses {
    pub crr: f64,
    pub frr: f64,
}

/// One Stage II update of the head weights. Backbone parameters and the head bias are never written.
pub fn stage2_step(
    model: &mut Model,
    batch: &SetBatch,
    cfg: &StageTwoConfig,
    variant: MaskVariant,
    cam: &CamOptions,
    lr_default: f64,
    momentum: f64,
    state: &mut StageTwoState,
) -> Result<StageTwoLosses> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let w = tape.leaf(model.head_weights().clone(), true);
    let inputs = StageTwoInputs {
        images: &batch.images,
        labels: &batch.labels,
        groups: batch.groups,
        set_size: batch.set_size,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        variant,
        cam,
    };
    let g = stage2_graph(&mut tape, model, w, &inputs)?;
    let losses = StageTwoLosses {
        crr: g.crr.map_or(0.0, |c| tape.value(c).data()[0]),
        frr: tape.value(g.frr).data()[0],
    };
    if !cfg.is_active() {
        return Ok(losses);
    }
    tape.backward(g.loss)?;
    let grad = tape.grad(w).cloned().unwrap_or_else(|| Tensor::zeros(model.head_weights().shape().to_vec()));
    let p = state.params.get_mut(HEAD_W).expect("head entry");
    p.value = model.head_weights().clone();
    p.grad = Some(grad);
    state.params.sgd_step(cfg.lr2.unwrap_or(lr_default), momentum)?;
    let updated = state.params.value(HEAD_W)?.clone();
    *model
        .params
        .get_mut(HEAD_W)
        .map(|p| &mut p.value)
        .expect("head entry") = updated;
    Ok(losses)
}

/// One training-log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub ce: f64,
    pub crr: f64,
    pub frr: f64,
    pub wall_ms: u128,
}

pub const LOG_HEADER: &str = "epoch,batch,ce,crr,frr,wall_ms";

impl LogRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.batch, self.ce, self.crr, self.frr, self.wall_ms)
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Scales each image of `[N, C, H, W]` by its own factor from `range`.
pub fn scale_intensity<R: Rng>(images: &Tensor, range: (f64, f64), rng: &mut R) -> Tensor {
    let n = images.shape()[0];
    let per = images.numel() / n;
    let mut out = images.clone();
    for chunk in out.data_mut().chunks_mut(per) {
        let g = if range.0 < range.1 { rng.gen_range(range.0..=range.1) } else { range.0 };
        chunk.iter_mut().for_each(|v| *v *= g);
    }
    out
}

const BATCH_STREAM: u64 = 0x5EED_BA7C;

/// Builds a model from `cfg.seed` and trains it on the training split.
///
/// Per mini-batch: sample a set batch, take a Stage I step, then (when configured)
/// a Stage II step on the same images with maps from the updated head.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<(Model, Vec<LogRow>)> {
    cfg.validate()?;
    let mut model = Model::build(cfg.backbone.clone(), dataset.num_classes, cfg.seed)?;
    let mut state = StageTwoState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM);
    let per_epoch = cfg
        .batches_per_epoch
        .unwrap_or_else(|| dataset.split(Split::Train).len().div_ceil(cfg.batch_size()).max(1));
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs * per_epoch);
    for epoch in 0..cfg.epochs {
        for b in 0..per_epoch {
            let batch = sample_set_batch(dataset, Split::Train, cfg.groups, cfg.set_size, &mut rng)?;
            let ce = match cfg.intensity_aug {
                Some(range) => {
                    let aug = scale_intensity(&batch.images, range, &mut rng);
                    stage1_step(&mut model, &aug, &batch.labels, cfg.lr1, cfg.momentum)?
                }
                None => stage1_step(&mut model, &batch.images, &batch.labels, cfg.lr1, cfg.momentum)?,
            };
            let (crr, frr) = match &cfg.stage2 {
                Some(s2) if epoch >= s2.warmup_epochs => {
                    let l = stage2_step(&mut model, &batch, s2, cfg.mask_variant, &cfg.cam, cfg.lr1, cfg.momentum, &mut state)?;
                    (l.crr, l.frr)
                }
                _ => (0.0, 0.0),
            };
            log.push(LogRow {
                epoch,
                batch: b,
                ce,
                crr,
                frr,
                wall_ms: start.elapsed().as_millis(),
            });
        }
    }
    Ok((model, log))
}
