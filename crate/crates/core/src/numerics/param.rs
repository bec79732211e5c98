//! Trainable parameters and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::numerics::tensor::Tensor;

/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A named weight tensor with its Adam state.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.numel();
        Self {
            name: name.into(),
            value,
            grad: None,
            m1: vec![0.0; n],
            m2: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    /// Seeded Gaussian initialization, mean 0.
    pub fn add_randn<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn as_mut_slice(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `tape`, as gradient-receiving leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }

    /// Adds the gradients of a backward sweep into each parameter's buffer.
    /// Parameters that the sweep did not reach get a zero gradient.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_>, grads: &Gradients) {
        for (p, var) in self.params.iter_mut().zip(&bound.vars) {
            let buf = p.grad.get_or_insert_with(|| vec![0.0; p.value.numel()]);
            if let Some(g) = grads.get_slice(*var) {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Byte-level equality of all parameter values.
    pub fn values_bit_identical(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Parameters of one [`ParamSet`] placed on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Consumes the accumulated gradients.
pub fn adam_step(params: &mut [Parameter], config: &AdamConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::invalid(format!(
            "adam_step: parameter {} has no gradient",
            p.name
        )));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = *config;
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        p.step += 1;
        let bc1 = 1.0 - beta1.powi(p.step as i32);
        let bc2 = 1.0 - beta2.powi(p.step as i32);
        let values = p.value.data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            p.m1[i] = beta1 * p.m1[i] + (1.0 - beta1) * g;
            p.m2[i] = beta2 * p.m2[i] + (1.0 - beta2) * g * g;
            let m_hat = p.m1[i] / bc1;
            let v_hat = p.m2[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
