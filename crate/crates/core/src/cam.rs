//! Class activation maps and the two ways of applying them as masks.

use std::path::{Path, PathBuf};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::nets::Model;
use crate::ndtensor::{Tape, Tensor, Var, DEFAULT_EPS};
use crate::pnm::Pnm;

/// Order of min-max normalization and resizing when finalizing a map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormOrder {
    #[default]
    NormalizeThenResize,
    ResizeThenNormalize,
}

impl std::str::FromStr for NormOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalize_first" => Ok(NormOrder::NormalizeThenResize),
            "resize_first" => Ok(NormOrder::ResizeThenNormalize),
            _ => Err(arg_err!("unknown normalization order `{s}` (normalize_first|resize_first)")),
        }
    }
}

impl std::fmt::Display for NormOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormOrder::NormalizeThenResize => "normalize_first",
            NormOrder::ResizeThenNormalize => "resize_first",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CamOptions {
    pub eps: f64,
    /// Treat the min and max of the raw map as constants when differentiating.
    pub detach_norm: bool,
    pub order: NormOrder,
}

impl Default for CamOptions {
    fn default() -> Self {
        CamOptions {
            eps: DEFAULT_EPS,
            detach_norm: false,
            order: NormOrder::NormalizeThenResize,
        }
    }
}

/// A `[0, 1]` heatmap at image resolution for one image and class.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationMap {
    values: Tensor,
    pub class_id: usize,
    pub image_id: String,
}

/// Values may dip below zero by at most this much (eps slack of the normalization).
pub const MAP_SLACK: f64 = 1e-9;

impl LocalizationMap {
    pub fn new(values: Tensor, class_id: usize, image_id: impl Into<String>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(shape_err!("localization map must be H×W, got {:?}", values.shape()));
        }
        if let Some(v) = values
            .data()
            .iter()
            .find(|v| !(**v >= -MAP_SLACK && **v <= 1.0 + MAP_SLACK))
        {
            return Err(arg_err!("localization map value {v} outside [0, 1]"));
        }
        Ok(LocalizationMap {
            values,
            class_id,
            image_id: image_id.into(),
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values.data()[y * self.width() + x]
    }

    pub fn file_name(&self) -> String {
        format!("{}_{}.pgm", self.image_id, self.class_id)
    }

    /// 16-bit grey image with samples `round(clamp(v, 0, 1) · 65535)`.
    pub fn to_pgm(&self) -> Pnm {
        Pnm {
            width: self.width(),
            height: self.height(),
            channels: 1,
            maxval: u16::MAX,
            samples: self
                .values
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect(),
        }
    }

    pub fn from_pgm(img: &Pnm, class_id: usize, image_id: impl Into<String>) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::format("heatmap", "expected a grey (P5) image"));
        }
        let scale = f64::from(img.maxval);
        let values = Tensor::new(
            [img.height, img.width],
            img.samples.iter().map(|&s| f64::from(s) / scale).collect(),
        )?;
        Self::new(values, class_id, image_id)
    }

    /// Writes `<image_id>_<class_id>.pgm` under `dir` and returns its path.
    pub fn save_pgm(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(self.file_name());
        self.to_pgm().save(&path)?;
        Ok(path)
    }

    /// Reads a map back, recovering image and class ids from the file name.
    pub fn load_pgm(path: &Path) -> Result<Self> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::format("heatmap file name", path.display().to_string()))?;
        let (image_id, class) = stem
            .rsplit_once('_')
            .ok_or_else(|| Error::format("heatmap file name", format!("`{stem}` lacks _<class>")))?;
        let class_id = class
            .parse()
            .map_err(|_| Error::format("heatmap file name", format!("bad class in `{stem}`")))?;
        Self::from_pgm(&Pnm::load(path)?, class_id, image_id)
    }
}

/// `Σ_k w[c, k] · features[k]` for one image: `features` is `[K, h, w]`, the result `[h, w]`.
pub fn compute_cam_raw(tape: &mut Tape, features: Var, head_w: Var, class: usize) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("features must be [K, h, w], got {s:?}"));
    }
    let batched = tape.reshape(features, [1, s[0], s[1], s[2]])?;
    let raw = tape.cam_raw(batched, head_w, &[class])?;
    tape.reshape(raw, [s[1], s[2]])
}

/// Batched raw maps `[N, 1, h, w]` from `[N, K, h, w]` features, one class per sample.
pub fn cam_raw_batch(tape: &mut Tape, features: Var, head_w: Var, classes: &[usize]) -> Result<Var> {
    tape.cam_raw(features, head_w, classes)
}

/// Min-max normalization and bilinear resizing of every trailing `h×w` plane of `raw`.
pub fn finalize_map(tape: &mut Tape, raw: Var, out_h: usize, out_w: usize, opts: &CamOptions) -> Result<Var> {
    match opts.order {
        NormOrder::NormalizeThenResize => {
            let n = tape.minmax_normalize(raw, opts.eps, opts.detach_norm)?;
            tape.bilinear_resize(n, out_h, out_w)
        }
        NormOrder::ResizeThenNormalize => {
            let r = tape.bilinear_resize(raw, out_h, out_w)?;
            tape.minmax_normalize(r, opts.eps, opts.detach_norm)
        }
    }
}

/// `I ⊙ H` with `H` (`[N, 1, H, W]`) replicated across image channels.
pub fn mask_image(tape: &mut Tape, images: Var, maps: Var) -> Result<Var> {
    let (is, ms) = (tape.shape(images), tape.shape(maps));
    if is.len() != 4 || ms.len() != 4 || is[0] != ms[0] || is[2..] != ms[2..] {
        return Err(shape_err!("map batch {ms:?} does not match image batch {is:?}"));
    }
    tape.mul_broadcast(images, maps)
}

/// Masks `[N, K, h, w]` feature maps with `H` resized down to `h×w`, then pools to `[N, K]`.
pub fn mask_features(tape: &mut Tape, fmap: Var, maps: Var) -> Result<Var> {
    let fs = tape.shape(fmap).to_vec();
    if fs.len() != 4 {
        return Err(shape_err!("feature map must be [N, K, h, w], got {fs:?}"));
    }
    let small = tape.bilinear_resize(maps, fs[2], fs[3])?;
    let masked = tape.mul_broadcast(fmap, small)?;
    tape.gap(masked)
}

/// Maps for `classes` at image resolution, without gradient tracking. Returns `[N, H, W]`.
pub fn localization_maps(model: &Model, images: &Tensor, classes: &[usize], opts: &CamOptions) -> Result<Tensor> {
    let s = images.shape().to_vec();
    if s.len() != 4 {
        return Err(shape_err!("images must be NCHW, got {s:?}"));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= model.classes) {
        return Err(arg_err!("class {c} out of range for {} classes", model.classes));
    }
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let x = tape.constant(images.clone());
    let f = model.forward_features(&mut tape, &bound, x)?;
    let raw = cam_raw_batch(&mut tape, f, bound.head.w, classes)?;
    let maps = finalize_map(&mut tape, raw, s[2], s[3], opts)?;
    tape.value(maps).clone().reshape([s[0], s[2], s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{BackboneSpec, HEAD_W};
    use crate::ndtensor::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn raw_cam_examples() {
        let mut tape = Tape::new();
        let a = random(&[1, 3, 4], 1);
        let f = tape.constant(a.clone());
        let w = tape.constant(t(&[2, 1], &[1.0, 0.0]));
        let raw = compute_cam_raw(&mut tape, f, w, 0).unwrap();
        assert_eq!(tape.value(raw).data(), a.data());
        assert_eq!(tape.shape(raw), &[3, 4]);
        let zero = compute_cam_raw(&mut tape, f, w, 1).unwrap();
        assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));
        assert!(matches!(compute_cam_raw(&mut tape, f, w, 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn raw_cam_two_channel_difference() {
        let mut tape = Tape::new();
        let ab = random(&[2, 2, 3], 2);
        let f = tape.constant(ab.clone());
        let w = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let raw = compute_cam_raw(&mut tape, f, w, 0).unwrap();
        let (a, b) = ab.data().split_at(6);
        let expect: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        assert_eq!(tape.value(raw).data(), expect.as_slice());
    }

    #[test]
    fn finalize_examples() {
        let opts = CamOptions::default();
        let mut tape = Tape::new();
        let raw = tape.constant(t(&[3, 1], &[2., 4., 6.]));
        let m = finalize_map(&mut tape, raw, 3, 1, &opts).unwrap();
        let v = tape.value(m).data();
        assert!((v[0]).abs() < 1e-11 && (v[1] - 0.5).abs() < 1e-11 && (v[2] - 1.0).abs() < 1e-11);

        let unit = tape.constant(t(&[2, 2], &[0., 0.25, 1., 0.5]));
        let m = finalize_map(&mut tape, unit, 2, 2, &opts).unwrap();
        let v = tape.value(m).data().to_vec();
        assert!(v.iter().zip([0., 0.25, 1., 0.5]).all(|(a, b)| (a - b).abs() < 1e-11));

        let flat = tape.constant(Tensor::full([3, 3], 5.0));
        let m = finalize_map(&mut tape, flat, 6, 6, &opts).unwrap();
        assert!(tape.value(m).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn finalized_maps_stay_in_unit_interval() {
        for order in [NormOrder::NormalizeThenResize, NormOrder::ResizeThenNormalize] {
            let opts = CamOptions { order, ..Default::default() };
            let mut tape = Tape::new();
            let raw = tape.constant(random(&[3, 1, 5, 4], 8).map(|v| 10.0 * v - 3.0));
            let m = finalize_map(&mut tape, raw, 17, 9, &opts).unwrap();
            let v = tape.value(m);
            assert!(v.data().iter().all(|&x| (-MAP_SLACK..=1.0).contains(&x)));
            for plane in v.data().chunks_exact(17 * 9) {
                let mx = plane.iter().copied().fold(f64::MIN, f64::max);
                let mn = plane.iter().copied().fold(f64::MAX, f64::min);
                assert!(mn >= -MAP_SLACK && mx <= 1.0);
                if order == NormOrder::ResizeThenNormalize {
                    assert!(mn.abs() < 1e-9 && (mx - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn normalized_map_invariant_to_positive_weight_scaling() {
        let feats = random(&[2, 3, 4], 3);
        let w = random(&[2, 2], 4);
        let run = |scale: f64| {
            let mut tape = Tape::new();
            let f = tape.constant(feats.clone());
            let wv = tape.constant(w.map(|v| v * scale));
            let raw = compute_cam_raw(&mut tape, f, wv, 1).unwrap();
            let raw_v = tape.value(raw).clone();
            let m = finalize_map(&mut tape, raw, 3, 4, &CamOptions::default()).unwrap();
            (raw_v, tape.value(m).clone())
        };
        let (r1, m1) = run(1.0);
        let (r3, m3) = run(3.0);
        assert!(r1.data().iter().zip(r3.data()).all(|(a, b)| (3.0 * a - b).abs() < 1e-12));
        assert!(m1.data().iter().zip(m3.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn mask_image_and_features() {
        let mut tape = Tape::new();
        let img = random(&[1, 3, 4, 4], 5);
        let i = tape.constant(img.clone());
        let ones = tape.constant(Tensor::ones([1, 1, 4, 4]));
        let m = mask_image(&mut tape, i, ones).unwrap();
        assert_eq!(tape.value(m), &img);
        let zeros = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let m = mask_image(&mut tape, i, zeros).unwrap();
        assert!(tape.value(m).data().iter().all(|&v| v == 0.0));
        let small = tape.constant(Tensor::ones([1, 1, 2, 4]));
        assert!(matches!(mask_image(&mut tape, i, small), Err(Error::InvalidShape(_))));

        let fmap = random(&[1, 3, 2, 2], 6);
        let f = tape.constant(fmap.clone());
        let g = tape.gap(f).unwrap();
        let ones2 = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let masked = mask_features(&mut tape, f, ones2).unwrap();
        assert_eq!(tape.value(masked), tape.value(g));
        let zeros2 = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let masked = mask_features(&mut tape, f, zeros2).unwrap();
        assert!(tape.value(masked).data().iter().all(|&v| v == 0.0));
        let corner = tape.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 0.]));
        let masked = mask_features(&mut tape, f, corner).unwrap();
        for k in 0..3 {
            assert!((tape.value(masked).data()[k] - fmap.data()[k * 4] / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_image_gradients_match_finite_differences() {
        for seed in 0..5 {
            let inputs = vec![random(&[2, 3, 4, 4], seed), random(&[2, 1, 4, 4], seed + 10)];
            let rep = check_gradients(&inputs, &[0, 1], 1e-4, |tp, v| {
                let m = mask_image(tp, v[0], v[1])?;
                let f = tp.gap(m)?;
                let z = tp.constant(Tensor::full([2, 3], 0.3));
                tp.sq_l2(f, z)
            })
            .unwrap();
            assert!(rep.max_rel_error() <= 1e-5);
        }
    }

    #[test]
    fn pgm_round_trip_and_name() {
        let dir = tempfile::tempdir().unwrap();
        let vals = t(&[2, 3], &[0., 0.5, 1., 0.25, 1e-10, 0.75]);
        let map = LocalizationMap::new(vals, 3, "img_007").unwrap();
        let path = map.save_pgm(dir.path()).unwrap();
        assert!(path.ends_with("img_007_3.pgm"));
        let back = LocalizationMap::load_pgm(&path).unwrap();
        assert_eq!(back.class_id, 3);
        assert_eq!(back.image_id, "img_007");
        assert_eq!(back.to_pgm(), map.to_pgm());
        assert!(back.values().data().iter().zip(map.values().data()).all(|(a, b)| (a - b).abs() <= 0.5 / 65535.0));
    }

    #[test]
    fn out_of_range_maps_rejected() {
        assert!(LocalizationMap::new(t(&[1, 2], &[0.0, 1.5]), 0, "x").is_err());
        assert!(LocalizationMap::new(t(&[1, 2], &[-1e-3, 0.5]), 0, "x").is_err());
        assert!(LocalizationMap::new(t(&[1, 2], &[-1e-12, 0.5]), 0, "x").is_ok());
    }

    #[test]
    fn cam_ignores_head_bias() {
        let mut model = Model::build(BackboneSpec::plain(3, &[4], 6, false), 3, 1).unwrap();
        let imgs = random(&[2, 3, 8, 8], 9);
        let a = localization_maps(&model, &imgs, &[0, 2], &CamOptions::default()).unwrap();
        model.params.get_mut("head.b").unwrap().value = Tensor::new([3], vec![5.0, -3.0, 9.0]).unwrap();
        let b = localization_maps(&model, &imgs, &[0, 2], &CamOptions::default()).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &[2, 8, 8]);
        let _ = model.params.value(HEAD_W).unwrap();
    }
}
