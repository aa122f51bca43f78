//! Finite-difference checks of every differentiable operation and of the
//! full Stage II objective, on seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cam::CamOptions;
use crate::error::Result;
use crate::minmax::{stage2_graph, MaskVariant, StageTwoInputs};
use crate::ndtensor::gradcheck::check_gradients;
use crate::ndtensor::{Tape, Tensor, Var, DEFAULT_EPS};
use crate::nets::{BackboneSpec, Model};

/// Step used by the suite.
pub const STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub seeds: Vec<u64>,
    pub rel_errors: Vec<f64>,
}

impl CaseResult {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Entries bounded away from zero, so ReLU kinks stay out of the finite-difference stencil.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    wrt: &'static [usize],
    build: Build,
}

// Every case ends in `sq_l2` against a random target so upstream gradients are not uniform.
const OP_CASES: &[OpCase] = &[
    OpCase {
        name: "conv2d",
        inputs: |r| vec![random(&[2, 2, 5, 5], r), random(&[3, 2, 3, 3], r), random(&[3], r), random(&[2, 3, 3, 3], r)],
        wrt: &[0, 1, 2],
        build: |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            t.sq_l2(y, v[3])
        },
    },
    OpCase {
        name: "relu",
        inputs: |r| vec![off_zero(&[2, 3, 4], r), random(&[2, 3, 4], r)],
        wrt: &[0],
        build: |t, v| {
            let y = t.relu(v[0])?;
            t.sq_l2(y, v[1])
        },
    },
    OpCase {
        name: "gap",
        inputs: |r| vec![random(&[2, 3, 3, 4], r), random(&[2, 3], r)],
        wrt: &[0],
        build: |t, v| {
            let y = t.gap(v[0])?;
            t.sq_l2(y, v[1])
        },
    },
    OpCase {
        name: "linear",
        inputs: |r| vec![random(&[3, 4], r), random(&[5, 4], r), random(&[5], r), random(&[3, 5], r)],
        wrt: &[0, 1, 2],
        build: |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            t.sq_l2(y, v[3])
        },
    },
    OpCase {
        name: "mul_broadcast",
        inputs: |r| vec![random(&[2, 3, 4, 4], r), random(&[2, 1, 4, 4], r), random(&[2, 3, 4, 4], r)],
        wrt: &[0, 1],
        build: |t, v| {
            let y = t.mul_broadcast(v[0], v[1])?;
            t.sq_l2(y, v[2])
        },
    },
    OpCase {
        name: "minmax_normalize",
        inputs: |r| vec![random(&[2, 1, 3, 4], r), random(&[2, 1, 3, 4], r)],
        wrt: &[0],
        build: |t, v| {
            let y = t.minmax_normalize(v[0], DEFAULT_EPS, false)?;
            t.sq_l2(y, v[1])
        },
    },
    OpCase {
        name: "bilinear_resize",
        inputs: |r| vec![random(&[2, 1, 3, 4], r), random(&[2, 1, 7, 5], r)],
        wrt: &[0],
        build: |t, v| {
            let y = t.bilinear_resize(v[0], 7, 5)?;
            t.sq_l2(y, v[1])
        },
    },
    OpCase {
        name: "softmax_cross_entropy",
        inputs: |r| vec![random(&[4, 5], r)],
        wrt: &[0],
        build: |t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 3]),
    },
    OpCase {
        name: "sq_l2",
        inputs: |r| vec![random(&[3, 4], r), random(&[3, 4], r)],
        wrt: &[0, 1],
        build: |t, v| t.sq_l2(v[0], v[1]),
    },
    OpCase {
        name: "sum_scale_add",
        inputs: |r| vec![random(&[3, 4], r), random(&[3, 4], r)],
        wrt: &[0, 1],
        build: |t, v| {
            let a = t.scale(v[0], -1.7)?;
            let b = t.add(a, v[1])?;
            let s = t.sq_l2(b, v[0])?;
            let m = t.sum(b)?;
            let m2 = t.sq_l2(m, s)?;
            t.add(m2, s)
        },
    },
    OpCase {
        name: "slice_reshape",
        inputs: |r| vec![random(&[4, 3, 2], r), random(&[2, 6], r)],
        wrt: &[0],
        build: |t, v| {
            let s = t.slice_outer(v[0], 1, 2)?;
            let y = t.reshape(s, [2, 6])?;
            t.sq_l2(y, v[1])
        },
    },
    OpCase {
        name: "cam_raw",
        inputs: |r| vec![random(&[3, 4, 2, 3], r), random(&[5, 4], r), random(&[3, 1, 2, 3], r)],
        wrt: &[0, 1],
        build: |t, v| {
            let y = t.cam_raw(v[0], v[1], &[4, 0, 4])?;
            t.sq_l2(y, v[2])
        },
    },
];

/// Model small enough for exhaustive finite differences: one stride-2 block, then a linear `K = 2` layer.
pub fn tiny_model(seed: u64) -> Result<Model> {
    let mut spec = BackboneSpec::plain(3, &[4], 2, false);
    if let Some(last) = spec.layers.last_mut() {
        // a linear last layer keeps the head gradient away from dead-unit degeneracy
        last.relu = false;
    }
    Model::build(spec, 3, seed)
}

fn stage2_case(seed: u64, variant: MaskVariant) -> Result<f64> {
    let model = tiny_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let n = 3 * 4 * 4 * 4;
    let images = Tensor::new(vec![4, 3, 4, 4], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let labels = [0, 0, 2, 2];
    let cam = CamOptions::default();
    let inputs = StageTwoInputs {
        images: &images,
        labels: &labels,
        groups: 2,
        set_size: 2,
        lambda1: 0.7,
        lambda2: 1.3,
        variant,
        cam: &cam,
    };
    let report = check_gradients(&[model.head_weights().clone()], &[0], STEP, |tape, v| {
        Ok(stage2_graph(tape, &model, v[0], &inputs)?.loss)
    })?;
    Ok(report.max_rel_error())
}

/// Runs every case on every seed.
pub fn run(seeds: &[u64]) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for case in OP_CASES {
        let mut rel_errors = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (case.inputs)(&mut rng);
            rel_errors.push(check_gradients(&inputs, case.wrt, STEP, case.build)?.max_rel_error());
        }
        out.push(CaseResult {
            name: case.name,
            seeds: seeds.to_vec(),
            rel_errors,
        });
    }
    for (name, variant) in [("stage2_masked_input", MaskVariant::Input), ("stage2_masked_feature", MaskVariant::Feature)] {
        let rel_errors = seeds.iter().map(|&s| stage2_case(s, variant)).collect::<Result<_>>()?;
        out.push(CaseResult {
            name,
            seeds: seeds.to_vec(),
            rel_errors,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_five_seeds() {
        let results = run(&[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(results.len(), OP_CASES.len() + 2);
        for r in &results {
            assert!(r.max_rel_error() <= 1e-4, "{}: {:?}", r.name, r.rel_errors);
        }
    }
}
