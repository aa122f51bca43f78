use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{csv_err, ManifestRow, Split, SynthConfig, CONFIG_FILE, MANIFEST};
use crate::error::{arg_err, Error, Result};
use crate::ndtensor::Tensor;
use crate::pnm::Pnm;
use crate::wsoleval::{BBox, Mask};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image_id: String,
    pub split: Split,
    pub class_id: usize,
    /// One or more ground-truth boxes; synthetic data always has one.
    pub gt_boxes: Vec<BBox>,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// A loaded, validated dataset with decoded pixels held as bytes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// `dataset.cfg` contents, when present.
    pub config: Option<SynthConfig>,
    pixels: Vec<Vec<u8>>,
    masks: Vec<Mask>,
}

fn integrity(record: &str, detail: impl Into<String>) -> Error {
    Error::Integrity {
        record: record.to_string(),
        detail: detail.into(),
    }
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = dir.join(MANIFEST);
        if !manifest.is_file() {
            return Err(Error::Load(format!("{}: manifest not found", manifest.display())));
        }
        let mut reader = csv::Reader::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
        let mut records: Vec<SampleRecord> = Vec::new();
        let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
        for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
            let row = row.map_err(|e| csv_err(&manifest, e))?;
            let b = BBox::new(row.x0, row.y0, row.x1, row.y1)
                .map_err(|e| Error::Load(format!("{} line {}: {e}", manifest.display(), line + 2)))?;
            match by_id.get(&row.image_id) {
                Some(&i) => {
                    let r = &mut records[i];
                    if r.split != row.split || r.class_id != row.class_id {
                        return Err(integrity(&row.image_id, "rows disagree on split or class"));
                    }
                    r.gt_boxes.push(b);
                }
                None => {
                    by_id.insert(row.image_id.clone(), records.len());
                    records.push(SampleRecord {
                        image_path: dir.join("images").join(format!("{}.ppm", row.image_id)),
                        mask_path: dir.join("masks").join(format!("{}.pgm", row.image_id)),
                        image_id: row.image_id,
                        split: row.split,
                        class_id: row.class_id,
                        gt_boxes: vec![b],
                    });
                }
            }
        }
        if records.is_empty() {
            return Err(Error::Load(format!("{}: no records", manifest.display())));
        }

        let cfg_path = dir.join(CONFIG_FILE);
        let config = if cfg_path.is_file() {
            let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
            Some(SynthConfig::from_text(&text)?)
        } else {
            None
        };
        let max_class = records.iter().map(|r| r.class_id).max().unwrap_or(0);
        let num_classes = config.as_ref().map_or(max_class + 1, |c| c.num_classes);
        if max_class >= num_classes {
            return Err(Error::Load(format!(
                "class id {max_class} exceeds the configured {num_classes} classes"
            )));
        }

        let mut pixels = Vec::with_capacity(records.len());
        let mut masks = Vec::with_capacity(records.len());
        let mut dims = None;
        for r in &records {
            let (img, mask) = read_pair(r)?;
            let d = (mask.height, mask.width);
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(integrity(
                        &r.image_id,
                        format!("image is {}×{} but earlier images are {}×{}", d.0, d.1, prev.0, prev.1),
                    ))
                }
                _ => {}
            }
            pixels.push(img);
            masks.push(mask);
        }
        let (height, width) = dims.expect("at least one record");
        Ok(Dataset {
            root: dir.to_path_buf(),
            records,
            num_classes,
            height,
            width,
            config,
            pixels,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices in `split`, in manifest order.
    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Record indices in `split` grouped by class id.
    pub fn by_class(&self, split: Split) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for i in self.split(split) {
            groups[self.records[i].class_id].push(i);
        }
        groups
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.records[i].class_id).collect()
    }

    pub fn mask(&self, i: usize) -> &Mask {
        &self.masks[i]
    }

    /// `[n, 3, H, W]` images with 8-bit values mapped to `k / 255`.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor> {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * 3 * plane);
        for &i in indices {
            let px = self
                .pixels
                .get(i)
                .ok_or_else(|| arg_err!("record index {i} out of range"))?;
            for c in 0..3 {
                data.extend(px.iter().skip(c).step_by(3).map(|&v| v as f64 / 255.0));
            }
        }
        Tensor::new([indices.len(), 3, self.height, self.width], data)
    }
}

fn read_pair(r: &SampleRecord) -> Result<(Vec<u8>, Mask)> {
    let load = |p: &Path| {
        Pnm::load(p).map_err(|e| match e {
            Error::Io { .. } => Error::Load(format!("record `{}`: cannot read {}", r.image_id, p.display())),
            Error::Format { detail, .. } => integrity(&r.image_id, detail),
            e => e,
        })
    };
    let img = load(&r.image_path)?;
    if img.channels != 3 || img.maxval != 255 {
        return Err(integrity(&r.image_id, "image must be 8-bit P6"));
    }
    let m = load(&r.mask_path)?;
    if m.channels != 1 {
        return Err(integrity(&r.image_id, "mask must be P5"));
    }
    if (m.width, m.height) != (img.width, img.height) {
        return Err(integrity(
            &r.image_id,
            format!("mask {}×{} vs image {}×{}", m.width, m.height, img.width, img.height),
        ));
    }
    let mask = Mask::new(m.height, m.width, m.samples.iter().map(|&s| s > 0).collect())?;
    let tight = mask
        .tight_box()
        .ok_or_else(|| integrity(&r.image_id, "mask is empty"))?;
    if let Some(b) = r.gt_boxes.iter().find(|b| !b.fits(img.height, img.width)) {
        return Err(integrity(&r.image_id, format!("box {b:?} exceeds the image")));
    }
    let hull = r.gt_boxes.iter().skip(1).fold(r.gt_boxes[0], |h, b| BBox {
        x0: h.x0.min(b.x0),
        y0: h.y0.min(b.y0),
        x1: h.x1.max(b.x1),
        y1: h.y1.max(b.y1),
    });
    if hull != tight {
        return Err(integrity(
            &r.image_id,
            format!("mask tight box {tight:?} does not match ground-truth boxes {:?}", r.gt_boxes),
        ));
    }
    Ok((img.samples.iter().map(|&s| s as u8).collect(), mask))
}
