//! Named parameters with per-parameter Adam moments.

use crate::error::{Error, Result};
use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub value: Array2<f64>,
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParameterStore {
    params: IndexMap<String, Param>,
    pub step: u64,
}

pub enum Init {
    Zeros,
    Ones,
    /// Xavier-uniform over `[-sqrt(6/(fan_in+fan_out)), +...]`.
    Xavier,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let value = match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
            }
        };
        self.params.insert(
            name.to_string(),
            Param {
                value,
                m: Array2::zeros((rows, cols)),
                v: Array2::zeros((rows, cols)),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    /// Overwrite one parameter's value; shape must match.
    pub fn set_value(&mut self, name: &str, value: &Array2<f64>) -> Result<()> {
        let param = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if param.value.dim() != value.dim() {
            return Err(Error::Shape(format!(
                "value shape {:?} != parameter shape {:?} for {name}",
                value.dim(),
                param.value.dim()
            )));
        }
        param.value.assign(value);
        Ok(())
    }

    /// Copy values (not moments) for every name present in both stores.
    pub fn copy_common_values_from(&mut self, other: &ParameterStore) {
        for (name, param) in &mut self.params {
            if let Some(src) = other.params.get(name) {
                if src.value.dim() == param.value.dim() {
                    param.value.assign(&src.value);
                }
            }
        }
    }

    /// One Adam step with bias correction (beta1=0.9, beta2=0.98, eps=1e-9).
    pub fn adam_step(
        &mut self,
        grads: &IndexMap<String, Array2<f64>>,
        lr: f64,
    ) -> Result<()> {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.98;
        const EPS: f64 = 1e-9;

        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for (name, g) in grads {
            let param = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if param.value.dim() != g.dim() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} != parameter shape {:?} for {name}",
                    g.dim(),
                    param.value.dim()
                )));
            }
            azip_update(param, g, lr, BETA1, BETA2, EPS, bc1, bc2);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    param: &mut Param,
    g: &Array2<f64>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for ((w, (m, v)), &gi) in param
        .value
        .iter_mut()
        .zip(param.m.iter_mut().zip(param.v.iter_mut()))
        .zip(g.iter())
    {
        *m = beta1 * *m + (1.0 - beta1) * gi;
        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Inverse-square-root schedule with linear warmup, peaking exactly at
/// `step == warmup`.
pub fn inv_sqrt_lr(step: u64, warmup: u64, peak: f64) -> f64 {
    assert!(step >= 1 && warmup >= 1);
    let s = step as f64;
    let w = warmup as f64;
    peak * s.powf(-0.5).min(s * w.powf(-1.5)) * w.sqrt()
}
