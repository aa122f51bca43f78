use super::{Tape, Tensor, Var};
use crate::error::{arg_err, shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
    pub momentum: Option<Tensor>,
}

/// Named parameters with per-parameter trainable flags and momentum buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index(&name).is_some() {
            return Err(arg_err!("duplicate parameter name `{name}`"));
        }
        self.params.push(Param {
            name,
            value,
            trainable,
            grad: None,
            momentum: None,
        });
        Ok(())
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| arg_err!("unknown parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| arg_err!("unknown parameter `{name}`"))
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| arg_err!("unknown parameter `{name}`"))?;
        if grad.shape() != p.value.shape() {
            return Err(shape_err!(
                "gradient {:?} for `{name}` does not match {:?}",
                grad.shape(),
                p.value.shape()
            ));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Places every parameter on `tape`; trainable ones are tracked for gradients.
    pub fn bind(&self, tape: &mut Tape) -> Vec<(String, Var)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), tape.leaf(p.value.clone(), p.trainable)))
            .collect()
    }

    /// Copies gradients of bound trainable parameters from `tape`.
    /// Trainable parameters the loss did not reach receive a zero gradient.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &[(String, Var)]) -> Result<()> {
        for (name, var) in bound {
            let p = self
                .get_mut(name)
                .ok_or_else(|| arg_err!("unknown parameter `{name}`"))?;
            if !p.trainable {
                continue;
            }
            let g = tape
                .grad(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            p.grad = Some(g);
        }
        Ok(())
    }

    /// Momentum SGD: `v ← momentum·v + grad; p ← p − lr·v` for trainable parameters.
    ///
    /// Frozen parameters are not read or written. Gradients are consumed.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let grad = p.grad.take().expect("checked above");
            let v = p
                .momentum
                .get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            for ((w, vel), g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *vel = momentum * *vel + g;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }
}
