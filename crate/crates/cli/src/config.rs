//! Flat `key=value` run configuration with per-key provenance.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

use minmaxcam::cam::CamOptions;
use minmaxcam::evaluate::EvalOptions;
use minmaxcam::minmax::{StageTwoConfig, TrainConfig};
use minmaxcam::nets::BackboneSpec;
use minmaxcam::synthbench::{Split, SynthConfig};
use minmaxcam::wsoleval::{BoxOptions, Connectivity, ThresholdGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Default => "default",
            Provenance::File => "file",
            Provenance::Flag => "flag",
        })
    }
}

/// Every recognized key with its default. An empty default means "unset".
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "mmc-out"),
    ("data.dir", ""),
    ("data.classes", "8"),
    ("data.train_per_class", "200"),
    ("data.val_per_class", "100"),
    ("data.test_per_class", "100"),
    ("data.image_size", "64"),
    ("data.bg_mode", "varied"),
    ("data.marker_mode", "true"),
    ("data.scale_min", "0.3"),
    ("data.scale_max", "0.6"),
    ("data.noise", "0.03"),
    ("model.widths", "16,32,32"),
    ("model.k", "32"),
    ("model.stride_mod", "true"),
    ("train.epochs", "10"),
    ("train.batches_per_epoch", ""),
    ("train.lr1", "0.01"),
    ("train.lr2", ""),
    ("train.momentum", "0.9"),
    ("train.set_size", "5"),
    ("train.groups", "4"),
    ("train.lambda1", "1"),
    ("train.lambda2", "1"),
    ("train.stage2", "true"),
    ("train.warmup_epochs", "8"),
    ("train.intensity_aug", "false"),
    ("train.intensity_min", "0.5"),
    ("train.intensity_max", "1.5"),
    ("train.mask_variant", "input"),
    ("cam.eps", "1e-12"),
    ("cam.detach_norm", "false"),
    ("cam.order", "normalize_first"),
    ("eval.split", "test"),
    ("eval.grid", "100"),
    ("eval.deltas", "0.3,0.5,0.7"),
    ("eval.connectivity", "8"),
    ("eval.largest_only", "false"),
    ("eval.per_image_pxap", "false"),
    ("checkpoint", ""),
    ("maps.dir", ""),
    ("ablate.seeds", "0,1,2"),
    ("ablate.values", ""),
    ("ablate.batch", "20"),
];

/// Keys that only locate files; checkpoints are identified by content hash instead.
const UNHASHED: &[&str] = &["out", "checkpoint"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<&'static str, (String, Provenance)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            entries: KEYS
                .iter()
                .map(|&(k, v)| (k, (v.to_string(), Provenance::Default)))
                .collect(),
        }
    }
}

fn known(key: &str) -> Result<&'static str> {
    KEYS.iter()
        .map(|&(k, _)| k)
        .find(|&k| k == key)
        .ok_or_else(|| anyhow!("unknown config key `{key}`"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: impl Into<String>, from: Provenance) -> Result<()> {
        let key = known(key)?;
        self.entries.insert(key, (value.into(), from));
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
    pub fn merge_text(&mut self, text: &str, from: Provenance) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got `{line}`", n + 1))?;
            self.set(k.trim(), v.trim(), from).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.merge_text(&text, Provenance::File)
            .with_context(|| format!("in config {}", path.display()))
    }

    pub fn raw(&self, key: &str) -> &str {
        let key = known(key).expect("keys used in code are registered");
        &self.entries[key].0
    }

    pub fn provenance(&self, key: &str) -> Option<Provenance> {
        self.entries.get(key).map(|e| e.1)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| anyhow!("config key `{key}`: cannot parse `{raw}`: {e}"))
    }

    /// `None` when the key is unset.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| anyhow!("config key `{key}`: cannot parse `{s}`: {e}")))
            .collect()
    }

    /// A path key that must be set; `flag` names the command-line spelling in the error.
    pub fn required_path(&self, key: &str, flag: &str) -> Result<PathBuf> {
        match self.raw(key) {
            "" => bail!("missing {flag} (config key `{key}`)"),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    /// Resolved configuration, one `key=value` per line with its provenance as a comment.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, (v, p))| format!("{k}={v}  # {p}\n"))
            .collect()
    }

    /// SHA-256 over the canonical `key=value` lines, excluding output locations.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, (v, _)) in &self.entries {
            if !UNHASHED.contains(k) {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex(&h.finalize())
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.resolved");
        std::fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            num_classes: self.get("data.classes")?,
            train_per_class: self.get("data.train_per_class")?,
            val_per_class: self.get("data.val_per_class")?,
            test_per_class: self.get("data.test_per_class")?,
            image_size: self.get("data.image_size")?,
            bg_mode: self.get("data.bg_mode")?,
            marker_mode: self.get("data.marker_mode")?,
            object_scale: (self.get("data.scale_min")?, self.get("data.scale_max")?),
            noise: self.get("data.noise")?,
            seed: self.get("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn backbone(&self) -> Result<BackboneSpec> {
        let widths: Vec<usize> = self.list("model.widths")?;
        Ok(BackboneSpec::plain(3, &widths, self.get("model.k")?, self.get("model.stride_mod")?))
    }

    pub fn cam(&self) -> Result<CamOptions> {
        Ok(CamOptions {
            eps: self.get("cam.eps")?,
            detach_norm: self.get("cam.detach_norm")?,
            order: self.get("cam.order")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let stage2 = if self.get("train.stage2")? {
            Some(StageTwoConfig {
                lambda1: self.get("train.lambda1")?,
                lambda2: self.get("train.lambda2")?,
                lr2: self.get_opt("train.lr2")?,
                warmup_epochs: self.get("train.warmup_epochs")?,
            })
        } else {
            None
        };
        let intensity_aug = if self.get("train.intensity_aug")? {
            Some((self.get("train.intensity_min")?, self.get("train.intensity_max")?))
        } else {
            None
        };
        let cfg = TrainConfig {
            backbone: self.backbone()?,
            epochs: self.get("train.epochs")?,
            batches_per_epoch: self.get_opt("train.batches_per_epoch")?,
            lr1: self.get("train.lr1")?,
            momentum: self.get("train.momentum")?,
            seed: self.get("seed")?,
            set_size: self.get("train.set_size")?,
            groups: self.get("train.groups")?,
            stage2,
            intensity_aug,
            mask_variant: self.get("train.mask_variant")?,
            cam: self.cam()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval(&self) -> Result<EvalOptions> {
        let deltas: Vec<f64> = self.list("eval.deltas")?;
        if deltas.is_empty() {
            bail!("config key `eval.deltas` is empty");
        }
        Ok(EvalOptions {
            cam: self.cam()?,
            grid: ThresholdGrid::new(self.get("eval.grid")?)?,
            deltas,
            boxes: BoxOptions {
                connectivity: Connectivity::from_count(self.get("eval.connectivity")?)?,
                largest_only: self.get("eval.largest_only")?,
            },
            per_image_pxap: self.get("eval.per_image_pxap")?,
        })
    }

    pub fn split(&self) -> Result<Split> {
        self.get("eval.split")
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_valid_configs() {
        let c = RunConfig::default();
        c.synth().unwrap();
        c.train().unwrap();
        c.eval().unwrap();
        assert_eq!(c.provenance("seed"), Some(Provenance::Default));
    }

    #[test]
    fn file_then_flag_provenance() {
        let mut c = RunConfig::default();
        c.merge_text("# comment\n\ntrain.lambda1 = 0.5\nseed=3 # trailing\n", Provenance::File)
            .unwrap();
        c.set("seed", "4", Provenance::Flag).unwrap();
        assert_eq!(c.raw("train.lambda1"), "0.5");
        assert_eq!(c.provenance("train.lambda1"), Some(Provenance::File));
        assert_eq!(c.get::<u64>("seed").unwrap(), 4);
        assert_eq!(c.provenance("seed"), Some(Provenance::Flag));
    }

    #[test]
    fn unknown_keys_and_bad_lines_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("train.lamda1", "1", Provenance::Flag).is_err());
        let e = c.merge_text("seed=1\nnonsense\n", Provenance::File).unwrap_err();
        assert!(format!("{e:#}").contains("line 2"));
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.set("train.epochs", "3", Provenance::Flag).unwrap();
        let mut d = RunConfig::default();
        d.merge_text(&c.to_text(), Provenance::File).unwrap();
        assert_eq!(c.hash(), d.hash());
    }

    #[test]
    fn hash_ignores_output_location() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        a.set("out", "x", Provenance::Flag).unwrap();
        b.set("out", "y", Provenance::Flag).unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "9", Provenance::Flag).unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn missing_required_path_names_the_flag() {
        let e = RunConfig::default().required_path("data.dir", "--data").unwrap_err();
        assert!(e.to_string().contains("--data"));
    }
}
