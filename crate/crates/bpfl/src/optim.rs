//! SGD and Adam over named parameters.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::{Param, ParamSet};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Moment buffers are keyed by qualified parameter name and created lazily,
/// so one optimizer can span several `ParamSet`s (body, head, projections).
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `entries` with the given gradients. Entries without a
    /// gradient (frozen or out-of-path parameters) are untouched, bit for bit.
    pub fn step_entries<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (String, &'a mut Param)>,
        grads: &IndexMap<String, Tensor>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        for (name, param) in entries {
            let grad = match grads.get(&name) {
                Some(g) => g,
                None => continue,
            };
            if !param.trainable {
                return Err(Error::Usage(format!(
                    "gradient supplied for frozen parameter {name:?}"
                )));
            }
            if !grad.same_shape(&param.value) {
                return Err(Error::Shape(format!(
                    "gradient for {name:?} has shape {:?}, parameter is {:?}",
                    grad.shape(),
                    param.value.shape()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    param.value = param.value.zip_map(grad, |p, g| p - self.learning_rate * g)?;
                }
                OptimizerKind::Adam => {
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(param.value.shape().to_vec()));
                    *m = m.zip_map(grad, |m, g| ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g)?;
                    let m = m.clone();
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(param.value.shape().to_vec()));
                    *v = v.zip_map(grad, |v, g| ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g)?;
                    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
                    let lr = self.learning_rate;
                    let mut data = Vec::with_capacity(m.len());
                    for i in 0..m.len() {
                        let mhat = m.data()[i] / bc1;
                        let vhat = v.data()[i] / bc2;
                        data.push(param.value.data()[i] - lr * mhat / (vhat.sqrt() + ADAM_EPS));
                    }
                    param.value = Tensor::new(param.value.shape().to_vec(), data)?;
                }
            }
            param.value.check_finite(&format!("optimizer update of {name}"))?;
        }
        Ok(())
    }

    /// Convenience wrapper for a single `ParamSet`.
    pub fn step_params(
        &mut self,
        params: &mut ParamSet,
        grads: &IndexMap<String, Tensor>,
    ) -> Result<()> {
        let entries: Vec<(String, &mut Param)> = params
            .iter_mut()
            .map(|(n, p)| (n.to_string(), p))
            .collect();
        self.step_entries(entries, grads)
    }

    // -- checkpoint support ------------------------------------------------

    /// Serializes moments and step counter into a ParamSet.
    pub fn to_paramset(&self) -> ParamSet {
        let mut out = ParamSet::new();
        out.insert("step", Tensor::scalar(self.step as f64), false)
            .expect("fresh set");
        for (name, t) in &self.m {
            out.insert(&format!("m.{name}"), t.clone(), false).expect("unique");
        }
        for (name, t) in &self.v {
            out.insert(&format!("v.{name}"), t.clone(), false).expect("unique");
        }
        out
    }

    pub fn restore_from_paramset(&mut self, set: &ParamSet) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.step = set.get("step")?.value.data()[0] as u64;
        for (name, p) in set.iter() {
            if let Some(rest) = name.strip_prefix("m.") {
                self.m.insert(rest.to_string(), p.value.clone());
            } else if let Some(rest) = name.strip_prefix("v.") {
                self.v.insert(rest.to_string(), p.value.clone());
            }
        }
        Ok(())
    }
}
