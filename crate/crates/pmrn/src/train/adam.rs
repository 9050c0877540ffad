//! First-order optimizer with bias-corrected moment estimates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One update over every parameter. Missing gradients count as zero;
/// shape mismatches are rejected.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hp: &AdamHyper,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - hp.beta1.powi(t);
    let bias2 = 1.0 - hp.beta2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let value = params.get_mut(&name).expect("listed name");
        let zero;
        let grad = match grads.get(&name) {
            Some(g) => {
                if g.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        lhs: value.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                g
            }
            None => {
                zero = Tensor::zeros(value.shape());
                &zero
            }
        };
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; value.numel()]);
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; value.numel()]);
        for ((p, &g), (m, v)) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}
