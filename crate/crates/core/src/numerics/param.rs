use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Trainable matrix with its gradient and Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of parameters. Declaration order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
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

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.as_slice().len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.learning_rate.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// One bias-corrected Adam update over every parameter, then zeroes grads.
/// Parameters are untouched if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    state.validate()?;
    if let Some(bad) = store.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NumericDivergence {
            param: bad.name.clone(),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    for p in store.iter_mut() {
        let vals = p.value.as_mut_slice();
        let grads = p.grad.as_slice();
        let ms = p.adam_m.as_mut_slice();
        let vs = p.adam_v.as_mut_slice();
        for i in 0..vals.len() {
            let g = grads[i];
            ms[i] = b1 * ms[i] + (1.0 - b1) * g;
            vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
            if g == 0.0 && ms[i] == 0.0 {
                continue;
            }
            let m_hat = ms[i] / bc1;
            let v_hat = vs[i] / bc2;
            vals[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.grad.fill(0.0);
    }
    Ok(())
}

/// Central-difference gradient of `loss` with respect to every scalar of every
/// parameter. Parameters are restored bit-exactly afterwards.
pub fn finite_diff_gradient<F>(store: &mut ParamStore, eps: f64, mut loss: F) -> Vec<Matrix>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids().collect::<Vec<_>>() {
        let (r, c) = store.value(id).shape();
        let mut g = Matrix::zeros(r, c);
        for i in 0..r * c {
            let orig = store.get(id).value.as_slice()[i];
            store.get_mut(id).value.as_mut_slice()[i] = orig + eps;
            let plus = loss(store);
            store.get_mut(id).value.as_mut_slice()[i] = orig - eps;
            let minus = loss(store);
            store.get_mut(id).value.as_mut_slice()[i] = orig;
            g.as_mut_slice()[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// Largest relative error `|a − n| / max(|a|, |n|, floor)` over all entries.
pub fn max_relative_error(analytic: &[Matrix], numeric: &[Matrix], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.as_slice().iter().zip(n.as_slice()))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
