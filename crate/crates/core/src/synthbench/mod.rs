//! Synthetic localization benchmark: one analytic shape per image over a
//! procedural background, written as PPM/PGM files plus a CSV manifest.
//!
//! Every sample draws from its own RNG stream keyed by
//! `(seed, split, class, index)`, so output does not depend on generation order.

mod dataset;
mod render;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{Dataset, SampleRecord};
pub use render::{class_color, class_shape, marker_color, Shape, MAX_CLASSES};

use crate::error::{arg_err, Error, Result};
use crate::pnm::Pnm;
use crate::wsoleval::{BBox, Mask};
use render::{covers, Canvas, Placement, Texture};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(arg_err!("unknown split `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BgMode {
    /// Fresh texture family, palette and phase per image.
    #[default]
    Varied,
    /// One fixed texture per class.
    Common,
}

impl FromStr for BgMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<BgMode> {
        match s {
            "varied" => Ok(BgMode::Varied),
            "common" => Ok(BgMode::Common),
            _ => Err(arg_err!("unknown background mode `{s}` (expected varied or common)")),
        }
    }
}

impl fmt::Display for BgMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BgMode::Varied => "varied",
            BgMode::Common => "common",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub bg_mode: BgMode,
    /// Add a small class-unique patch inside each object.
    pub marker_mode: bool,
    /// Object extent as a fraction of the image side, `[lo, hi]`.
    pub object_scale: (f64, f64),
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 8,
            train_per_class: 200,
            val_per_class: 100,
            test_per_class: 100,
            image_size: 64,
            bg_mode: BgMode::Varied,
            marker_mode: false,
            object_scale: (0.3, 0.6),
            noise: 0.03,
            seed: 0,
        }
    }
}

/// Border pixels objects never touch.
pub const MARGIN: usize = 2;
/// Largest share of the object a marker may cover.
pub const MARKER_MAX_FRACTION: f64 = 0.1;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.object_scale;
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return Err(arg_err!("num_classes must be in 2..={MAX_CLASSES}, got {}", self.num_classes));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(arg_err!("train and test splits need at least one image per class"));
        }
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(arg_err!("object_scale must satisfy 0 < lo ≤ hi < 1, got ({lo}, {hi})"));
        }
        if self.image_size < 16 {
            return Err(arg_err!("image_size must be at least 16"));
        }
        if hi * self.image_size as f64 > (self.image_size - 2 * MARGIN) as f64 {
            return Err(arg_err!("object_scale upper bound leaves no border margin"));
        }
        if lo * (self.image_size as f64) < 4.0 {
            return Err(arg_err!("objects smaller than 4 px are not supported"));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(arg_err!("noise must be in [0, 0.5)"));
        }
        Ok(())
    }

    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "num_classes={}\ntrain_per_class={}\nval_per_class={}\ntest_per_class={}\nimage_size={}\n\
             bg_mode={}\nmarker_mode={}\nobject_scale={},{}\nnoise={}\nseed={}\n",
            self.num_classes,
            self.train_per_class,
            self.val_per_class,
            self.test_per_class,
            self.image_size,
            self.bg_mode,
            self.marker_mode,
            self.object_scale.0,
            self.object_scale.1,
            self.noise,
            self.seed
        )
    }

    pub fn from_text(text: &str) -> Result<SynthConfig> {
        let mut cfg = SynthConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("dataset.cfg", format!("expected key=value, got `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || arg_err!("bad value `{value}` for `{key}`");
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad());
        match key {
            "num_classes" => self.num_classes = int(value)?,
            "train_per_class" => self.train_per_class = int(value)?,
            "val_per_class" => self.val_per_class = int(value)?,
            "test_per_class" => self.test_per_class = int(value)?,
            "image_size" => self.image_size = int(value)?,
            "bg_mode" => self.bg_mode = value.parse()?,
            "marker_mode" => self.marker_mode = value.parse().map_err(|_| bad())?,
            "object_scale" => {
                let (lo, hi) = value.split_once(',').ok_or_else(bad)?;
                self.object_scale = (
                    lo.trim().parse().map_err(|_| bad())?,
                    hi.trim().parse().map_err(|_| bad())?,
                );
            }
            "noise" => self.noise = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(arg_err!("unknown dataset key `{key}`")),
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(parts: &[u64]) -> ChaCha8Rng {
    let key = parts.iter().fold(0u64, |h, &p| splitmix(h ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(key)
}

/// One rendered sample before it reaches the disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub split: Split,
    pub class_id: usize,
    /// Interleaved 8-bit RGB.
    pub rgb: Vec<u8>,
    pub mask: Mask,
    pub gt_box: BBox,
    /// Marker square, when one was placed.
    pub marker: Option<BBox>,
}

pub fn image_id(split: Split, class: usize, index: usize) -> String {
    format!("{split}-{class:02}-{index:04}")
}

const COMMON_STREAM: u64 = 0xC0;

/// Renders sample `index` of `class` in `split`.
pub fn render_sample(cfg: &SynthConfig, split: Split, class: usize, index: usize) -> Result<Sample> {
    cfg.validate()?;
    if class >= cfg.num_classes {
        return Err(arg_err!("class {class} out of range"));
    }
    let size = cfg.image_size;
    let mut rng = stream(&[cfg.seed, split.index(), class as u64, index as u64]);
    let texture = match cfg.bg_mode {
        BgMode::Varied => Texture::random(&mut rng, size),
        BgMode::Common => Texture::random(&mut stream(&[cfg.seed, COMMON_STREAM, class as u64]), size),
    };

    let extent = rng.gen_range(cfg.object_scale.0..=cfg.object_scale.1) * size as f64;
    let lo = MARGIN as f64 + extent / 2.0;
    let hi = (size - MARGIN) as f64 - extent / 2.0;
    let place = Placement {
        cx: rng.gen_range(lo..=hi),
        cy: rng.gen_range(lo..=hi),
        extent,
    };
    let shape = class_shape(class);
    let gain = rng.gen_range(0.8..1.2);
    let body = class_color(class).map(|c| c * gain);

    let mut canvas = Canvas {
        rgb: Vec::with_capacity(size * size),
    };
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let inside = covers(shape, &place, x, y);
            mask[y * size + x] = inside;
            canvas.rgb.push(if inside { body } else { texture.sample(x, y) });
        }
    }
    let mask = Mask::new(size, size, mask)?;
    let gt_box = mask
        .tight_box()
        .ok_or_else(|| arg_err!("object for {} rasterized to no pixels", image_id(split, class, index)))?;

    let marker = if cfg.marker_mode {
        place_marker(&mask, &gt_box, &mut rng)
    } else {
        None
    };
    if let Some(m) = marker {
        let color = marker_color(class, cfg.num_classes);
        for y in m.y0..m.y1 {
            for x in m.x0..m.x1 {
                canvas.rgb[y * size + x] = color;
            }
        }
    }
    if cfg.noise > 0.0 {
        for px in &mut canvas.rgb {
            for v in px.iter_mut() {
                *v += rng.gen_range(-cfg.noise..=cfg.noise);
            }
        }
    }
    Ok(Sample {
        image_id: image_id(split, class, index),
        split,
        class_id: class,
        rgb: canvas.to_bytes(),
        mask,
        gt_box,
        marker,
    })
}

/// A square fully inside the mask covering at most [`MARKER_MAX_FRACTION`] of it.
fn place_marker<R: Rng>(mask: &Mask, bbox: &BBox, rng: &mut R) -> Option<BBox> {
    let side = ((MARKER_MAX_FRACTION * mask.count() as f64).sqrt().floor() as usize).max(1);
    let mut spots = Vec::new();
    for y0 in bbox.y0..bbox.y1.saturating_sub(side - 1) {
        for x0 in bbox.x0..bbox.x1.saturating_sub(side - 1) {
            if (y0..y0 + side).all(|y| (x0..x0 + side).all(|x| mask.get(y, x))) {
                spots.push((x0, y0));
            }
        }
    }
    if spots.is_empty() {
        return None;
    }
    let (x0, y0) = spots[rng.gen_range(0..spots.len())];
    Some(BBox {
        x0,
        y0,
        x1: x0 + side,
        y1: y0 + side,
    })
}

pub const MANIFEST: &str = "manifest.csv";
pub const CONFIG_FILE: &str = "dataset.cfg";

/// One manifest line; an image with several boxes has several lines.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_id: String,
    pub split: Split,
    pub class_id: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Writes every split to `out_dir` and returns the manifest rows.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rows = Vec::new();
    for split in Split::ALL {
        for class in 0..cfg.num_classes {
            for index in 0..cfg.per_class(split) {
                let s = render_sample(cfg, split, class, index)?;
                write_sample(&s, &images, &masks)?;
                rows.push(ManifestRow {
                    image_id: s.image_id,
                    split,
                    class_id: class,
                    x0: s.gt_box.x0,
                    y0: s.gt_box.y0,
                    x1: s.gt_box.x1,
                    y1: s.gt_box.y1,
                });
            }
        }
    }
    let manifest = out_dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_err(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(rows)
}

fn write_sample(s: &Sample, images: &Path, masks: &Path) -> Result<()> {
    let size = s.mask.width;
    Pnm {
        width: size,
        height: s.mask.height,
        channels: 3,
        maxval: 255,
        samples: s.rgb.iter().map(|&b| b as u16).collect(),
    }
    .save(&images.join(format!("{}.ppm", s.image_id)))?;
    Pnm {
        width: size,
        height: s.mask.height,
        channels: 1,
        maxval: 255,
        samples: s.mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
    }
    .save(&masks.join(format!("{}.pgm", s.image_id)))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Load(format!("{}: {e}", path.display()))
}
