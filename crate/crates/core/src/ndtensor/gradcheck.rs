//! Central finite-difference gradient checking.
//!
//! The numerical side only ever runs forward passes on fresh tapes, so it
//! shares no code with the backward rules it is checking.

use super::{Tape, Tensor, Var};
use crate::error::{arg_err, Result};

/// Outcome of comparing analytic and numerical gradients for a set of inputs.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` per checked input.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

fn eval_scalar<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.value(out)
        .item()
        .ok_or_else(|| arg_err!("gradient check needs a scalar output"))
}

/// Checks `d build(inputs) / d inputs[i]` for every `i` in `wrt`.
pub fn check_gradients<F>(inputs: &[Tensor], wrt: &[usize], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone(), wrt.contains(&i)))
        .collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = GradCheckReport {
        rel_errors: vec![],
        analytic: vec![],
        numeric: vec![],
    };
    for &i in wrt {
        let shape = inputs[i].shape().to_vec();
        let analytic = tape
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.clone()));
        let mut numeric = vec![0.0; inputs[i].numel()];
        let mut probe = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval_scalar(&build, &probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval_scalar(&build, &probe)?;
            probe[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        report.rel_errors.push(rel_error(analytic.data(), &numeric));
        report.analytic.push(analytic);
        report.numeric.push(Tensor::from_parts(shape, numeric));
    }
    Ok(report)
}
