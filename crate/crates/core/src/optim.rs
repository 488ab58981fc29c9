//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::OptimizerConfig;
use crate::error::{Result, SaipError};
use crate::params::{applies_weight_decay, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// First and second moment estimates, keyed by trainable parameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: ParamStore<T> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update at 1-based iteration `t`. Every parameter must have a
    /// gradient of its own shape.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        opt: &OptimizerConfig,
        lr: f64,
        t: u64,
    ) -> Result<()> {
        let (b1, b2) = (opt.beta1, opt.beta2);
        let bc1 = 1.0 - b1.powf(t as f64);
        let bc2 = 1.0 - b2.powf(t as f64);
        let lr_t = T::lit(lr);
        let decay = T::lit(lr * opt.weight_decay);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (c1, c2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        let eps = T::lit(opt.eps);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| SaipError::Parameter {
                name: name.clone(),
                reason: "no gradient".into(),
            })?;
            let m = self.m.get_mut(name).ok_or_else(|| SaipError::Parameter {
                name: name.clone(),
                reason: "no optimizer moments".into(),
            })?;
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(SaipError::Parameter {
                    name: name.clone(),
                    reason: format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                });
            }
            let v = self.v.get_mut(name).expect("moments created together");
            let wd = applies_weight_decay(name);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                if wd {
                    *pv -= decay * *pv;
                }
                *mv = b1t * *mv + c1 * gv;
                *vv = b2t * *vv + c2 * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
