//! SGD with momentum and coupled weight decay.

use crate::error::{invalid, Result};
use crate::network::{ModelParams, ParamGroup};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-parameter momentum buffers, aligned with model order.
///
/// Update: `g ← g + wd·p`, `v ← μ·v + g`, `p ← p − lr·v`. A buffer starts at
/// zero, so the first step moves by `lr·g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<S> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(model: &ModelParams<S>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: model.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn buffers(&self) -> &[Tensor<S>] {
        &self.buffers
    }

    pub fn set_buffer(&mut self, index: usize, value: Tensor<S>) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(index)
            .ok_or_else(|| invalid(format!("no momentum buffer {index}")))?;
        if slot.shape() != value.shape() {
            return Err(invalid(format!("momentum buffer {index} has the wrong shape")));
        }
        *slot = value;
        Ok(())
    }

    /// Applies `grads` (`(param index, gradient)`), with the rate chosen per group.
    pub fn step(
        &mut self,
        model: &mut ModelParams<S>,
        grads: &[(usize, Tensor<S>)],
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<()> {
        let mu = S::lit(self.momentum);
        let wd = S::lit(self.weight_decay);
        for (index, ((name, p), v)) in model.iter_mut().zip(self.buffers.iter_mut()).enumerate() {
            let Some((_, g)) = grads.iter().find(|(i, _)| *i == index) else {
                continue;
            };
            if g.shape() != p.shape() {
                return Err(invalid(format!("gradient for {name} has the wrong shape")));
            }
            let group = ParamGroup::of(name).ok_or_else(|| invalid(format!("ungrouped parameter {name}")))?;
            let rate = S::lit(lr(group));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gv + wd * *pv;
                *vv = mu * *vv + d;
                *pv -= rate * *vv;
            }
        }
        Ok(())
    }
}
