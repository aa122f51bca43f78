//! Small convolutional backbones with a GAP + linear classification head.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::ndtensor::{io as ndt, ParamSet, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMC1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

impl ConvLayer {
    fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

/// Layer stack of a backbone.
///
/// `stride_mod` turns the last down-sampling conv into a stride-1 conv,
/// doubling the resolution of the final feature map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    pub layers: Vec<ConvLayer>,
    pub stride_mod: bool,
}

impl BackboneSpec {
    /// 3×3 convs with ReLU: stride-2 blocks for every entry of `widths`, then a stride-1 block with `k` channels.
    pub fn plain(in_channels: usize, widths: &[usize], k: usize, stride_mod: bool) -> Self {
        let mut layers = Vec::new();
        let mut prev = in_channels;
        for &w in widths {
            layers.push(ConvLayer {
                in_ch: prev,
                out_ch: w,
                kernel: 3,
                stride: 2,
                pad: 1,
                relu: true,
            });
            prev = w;
        }
        layers.push(ConvLayer {
            in_ch: prev,
            out_ch: k,
            kernel: 3,
            stride: 1,
            pad: 1,
            relu: true,
        });
        BackboneSpec { layers, stride_mod }
    }

    /// The default desk-scale backbone: channels 16-32-64-64, 64×64 input → 8×8 (16×16 with `stride_mod`).
    pub fn desk(stride_mod: bool) -> Self {
        Self::plain(3, &[16, 32, 64], 64, stride_mod)
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_ch)
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_ch)
    }

    /// Layers as executed, with the stride modification applied.
    pub fn effective_layers(&self) -> Vec<ConvLayer> {
        let mut layers = self.layers.clone();
        if self.stride_mod {
            if let Some(l) = layers.iter_mut().rev().find(|l| l.stride > 1) {
                l.stride = 1;
            }
        }
        layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("backbone has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_ch == 0 || l.out_ch == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::InvalidSpec(format!("layer {i} has a zero extent: {l:?}")));
            }
            if i > 0 && self.layers[i - 1].out_ch != l.in_ch {
                return Err(Error::InvalidSpec(format!(
                    "layer {i} expects {} channels but layer {} produces {}",
                    l.in_ch,
                    i - 1,
                    self.layers[i - 1].out_ch
                )));
            }
        }
        Ok(())
    }

    /// Final feature-map extent for a square-or-not input, or `None` if some layer has no valid placement.
    pub fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.effective_layers()
            .iter()
            .try_fold((h, w), |(h, w), l| Some((l.out_extent(h)?, l.out_extent(w)?)))
    }

    /// Smallest square input every layer accepts.
    pub fn min_input_size(&self) -> usize {
        (1..)
            .find(|&s| self.output_extent(s, s).is_some())
            .expect("some input size always fits")
    }
}

/// GAP followed by a linear layer `w ∈ R^{C×K}`; `bias` is only used for classification.
#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub w: Var,
    pub bias: Var,
}

/// Model parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub convs: Vec<(Var, Var)>,
    pub head: BoundHead,
    pub vars: Vec<(String, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: BackboneSpec,
    pub classes: usize,
    pub params: ParamSet,
}

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

fn conv_names(i: usize) -> (String, String) {
    (format!("conv{i}.w"), format!("conv{i}.b"))
}

impl Model {
    /// Fan-in scaled normal weights, zero biases; fully determined by `seed`.
    pub fn build(spec: BackboneSpec, classes: usize, seed: u64) -> Result<Model> {
        spec.validate()?;
        if classes < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: Vec<usize>, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
        };
        let mut params = ParamSet::new();
        for (i, l) in spec.layers.iter().enumerate() {
            let fan_in = (l.in_ch * l.kernel * l.kernel) as f64;
            let (wn, bn) = conv_names(i);
            params.insert(
                wn,
                normal(vec![l.out_ch, l.in_ch, l.kernel, l.kernel], (2.0 / fan_in).sqrt())?,
                true,
            )?;
            params.insert(bn, Tensor::zeros([l.out_ch]), true)?;
        }
        let k = spec.feature_channels();
        params.insert(HEAD_W, normal(vec![classes, k], (1.0 / k as f64).sqrt())?, true)?;
        params.insert(HEAD_B, Tensor::zeros([classes]), true)?;
        Ok(Model { spec, classes, params })
    }

    pub fn feature_channels(&self) -> usize {
        self.spec.feature_channels()
    }

    pub fn head_weights(&self) -> &Tensor {
        self.params.value(HEAD_W).expect("head weights always present")
    }

    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with("conv")
    }

    /// Puts parameters on `tape`, honoring each parameter's trainable flag.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let vars = self.params.bind(tape);
        let find = |name: &str| {
            vars.iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .expect("parameter bound")
        };
        let convs = (0..self.spec.layers.len())
            .map(|i| {
                let (w, b) = conv_names(i);
                (find(&w), find(&b))
            })
            .collect();
        let head = BoundHead {
            w: find(HEAD_W),
            bias: find(HEAD_B),
        };
        BoundModel { convs, head, vars }
    }

    /// Backbone feature maps `[N, K, h, w]` for `[N, C, H, W]` images.
    pub fn forward_features(&self, tape: &mut Tape, bound: &BoundModel, images: Var) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.spec.in_channels() {
            return Err(shape_err!(
                "images must be [N, {}, H, W], got {s:?}",
                self.spec.in_channels()
            ));
        }
        let min = self.spec.min_input_size();
        if s[2] < min || s[3] < min || self.spec.output_extent(s[2], s[3]).is_none() {
            return Err(shape_err!("input {}×{} below the minimum size {min}", s[2], s[3]));
        }
        let mut x = images;
        for (layer, &(w, b)) in self.spec.effective_layers().iter().zip(&bound.convs) {
            x = tape.conv2d(x, w, Some(b), layer.stride, layer.pad)?;
            if layer.relu {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Logits `linear(gap(features))`.
    pub fn classify(&self, tape: &mut Tape, bound: &BoundModel, images: Var) -> Result<Var> {
        let f = self.forward_features(tape, bound, images)?;
        let pooled = tape.gap(f)?;
        tape.linear(pooled, bound.head.w, Some(bound.head.bias))
    }

    /// Feature maps without gradient tracking.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let f = self.forward_features(&mut tape, &bound, x)?;
        Ok(tape.value(f).clone())
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let l = self.classify(&mut tape, &bound, x)?;
        Ok(tape.value(l).clone())
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundModel {
        let mut frozen = self.clone();
        for p in frozen.params.iter_mut() {
            p.trainable = false;
        }
        frozen.bind(tape)
    }

    fn descriptor(&self) -> String {
        let mut s = String::new();
        writeln!(s, "classes={}", self.classes).unwrap();
        writeln!(s, "stride_mod={}", self.spec.stride_mod).unwrap();
        for l in &self.spec.layers {
            writeln!(
                s,
                "layer={},{},{},{},{},{}",
                l.in_ch,
                l.out_ch,
                l.kernel,
                l.stride,
                l.pad,
                if l.relu { "relu" } else { "linear" }
            )
            .unwrap();
        }
        let names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        writeln!(s, "params={}", names.join(",")).unwrap();
        s
    }

    /// `MMC1`, `u32` descriptor length, key=value descriptor text, then one `NDT1` record per parameter.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let desc = self.descriptor();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        for p in self.params.iter() {
            ndt::write_tensor(&mut out, &p.value).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
        let bad = |d: String| Error::format("checkpoint", d);
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing MMC1 magic".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let desc = bytes
            .get(8..8 + len)
            .ok_or_else(|| bad("truncated descriptor".into()))?;
        let desc = std::str::from_utf8(desc).map_err(|e| bad(e.to_string()))?;

        let mut classes = None;
        let mut stride_mod = false;
        let mut layers = Vec::new();
        let mut names = Vec::new();
        for line in desc.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("descriptor line `{line}`")))?;
            match key {
                "classes" => classes = Some(value.parse().map_err(|_| bad(format!("classes `{value}`")))?),
                "stride_mod" => stride_mod = value.parse().map_err(|_| bad(format!("stride_mod `{value}`")))?,
                "layer" => {
                    let f: Vec<&str> = value.split(',').collect();
                    if f.len() != 6 {
                        return Err(bad(format!("layer `{value}`")));
                    }
                    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("layer `{value}`")));
                    layers.push(ConvLayer {
                        in_ch: num(f[0])?,
                        out_ch: num(f[1])?,
                        kernel: num(f[2])?,
                        stride: num(f[3])?,
                        pad: num(f[4])?,
                        relu: f[5] == "relu",
                    });
                }
                "params" => names = value.split(',').map(str::to_owned).collect(),
                other => return Err(bad(format!("unknown descriptor key `{other}`"))),
            }
        }
        let classes = classes.ok_or_else(|| bad("descriptor lacks classes".into()))?;
        let spec = BackboneSpec { layers, stride_mod };
        let mut model = Model::build(spec, classes, 0)?;
        let expected: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
        if names != expected {
            return Err(bad(format!("parameter list {names:?} does not match {expected:?}")));
        }
        let mut rest = &bytes[8 + len..];
        for name in &names {
            let t = ndt::read_tensor(&mut rest)?;
            let p = model.params.get_mut(name).expect("name checked");
            if t.shape() != p.value.shape() {
                return Err(bad(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), p.value.shape())));
            }
            p.value = t;
        }
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// True when every parameter matches `other` bit for bit.
    pub fn bit_eq(&self, other: &Model) -> bool {
        self.spec == other.spec
            && self.classes == other.classes
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }

    /// Checks that `classes` agrees with this model's class count.
    pub fn expect_classes(&self, classes: usize) -> Result<()> {
        if self.classes == classes {
            Ok(())
        } else {
            Err(arg_err!(
                "model has {} classes but the data has {classes}",
                self.classes
            ))
        }
    }
}
