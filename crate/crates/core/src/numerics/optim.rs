use std::collections::BTreeMap;

use super::{NumericsError, ParamStore, Scalar, Tensor};

/// Adam moments and hyper-parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar = f32> {
    pub first_moment: BTreeMap<String, Tensor<T>>,
    pub second_moment: BTreeMap<String, Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    /// Number of schedule steps the base learning rate is annealed over.
    pub horizon: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(base_lr: f64, horizon: usize) -> Self {
        Self {
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
            horizon,
        }
    }
}

/// One Adam update with bias correction. Parameters without a gradient entry
/// are left alone and their moments are not touched.
pub fn adam_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    lr: f64,
) -> Result<(), NumericsError> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| NumericsError::Contract(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(NumericsError::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pv, mv), vv), &gv) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            let gd = gv.to_f64();
            let m_new = b1 * mv.to_f64() + (1.0 - b1) * gd;
            let v_new = b2 * vv.to_f64() + (1.0 - b2) * gd * gd;
            *mv = T::from_f64(m_new);
            *vv = T::from_f64(v_new);
            let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
            *pv = T::from_f64(pv.to_f64() - update);
        }
    }
    Ok(())
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_anneal_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64, NumericsError> {
    if total == 0 || step > total {
        return Err(NumericsError::Contract(format!(
            "cosine schedule needs 0 <= step <= total and total > 0 (step {step}, total {total})"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}
