use std::collections::BTreeMap;

use super::{Element, Result, Tensor, TensorError};

pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// A named trainable tensor and the learning-rate group it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Element = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub group: usize,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>, group: usize) -> Self {
        Param {
            name: name.into(),
            tensor,
            group,
        }
    }

    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

/// SGD-with-momentum state: one velocity buffer per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Element = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<usize, Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &[Param<T>], momentum: f64, weight_decay: f64) -> Self {
        let mut state = OptimizerState {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        };
        state.rebind(params);
        state
    }

    /// Makes the velocity set match the currently trainable parameters:
    /// new ones start at zero, frozen ones lose their buffer.
    pub fn rebind(&mut self, params: &[Param<T>]) {
        self.velocity.retain(|&i, v| {
            params
                .get(i)
                .is_some_and(|p| p.trainable() && p.tensor.len() == v.len())
        });
        for (i, p) in params.iter().enumerate() {
            if p.trainable() {
                self.velocity
                    .entry(i)
                    .or_insert_with(|| vec![T::zero(); p.tensor.len()]);
            }
        }
    }

    pub fn velocity(&self, param_index: usize) -> Option<&[T]> {
        self.velocity.get(&param_index).map(Vec::as_slice)
    }

    pub fn tracked(&self) -> impl Iterator<Item = usize> + '_ {
        self.velocity.keys().copied()
    }

    /// One update over every trainable parameter that holds a gradient:
    /// `g += wd·w; v = momentum·v + g; w -= lr·v` with `lr = group_lrs[group]`.
    ///
    /// Returns the number of tensors updated. Frozen parameters are never
    /// touched; a zero rate leaves the weights bit-identical.
    pub fn step(&mut self, params: &mut [Param<T>], group_lrs: &[f64]) -> Result<usize> {
        if let Some(lr) = group_lrs.iter().find(|lr| !lr.is_finite() || **lr < 0.0) {
            return Err(TensorError::Optimizer(format!(
                "learning rate {lr} is not a nonnegative number"
            )));
        }
        let momentum = T::from_f64_lossy(self.momentum);
        let decay = T::from_f64_lossy(self.weight_decay);
        let mut updated = 0;
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable() {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let lr = *group_lrs.get(p.group).ok_or_else(|| {
                TensorError::Optimizer(format!("no learning rate for group {} of {}", p.group, p.name))
            })?;
            let velocity = self
                .velocity
                .get_mut(&i)
                .ok_or_else(|| TensorError::Optimizer(format!("no velocity buffer for {}", p.name)))?;
            if velocity.len() != grad.len() || grad.len() != p.tensor.len() {
                return Err(TensorError::Optimizer(format!(
                    "{}: parameter/gradient/velocity sizes {} / {} / {}",
                    p.name,
                    p.tensor.len(),
                    grad.len(),
                    velocity.len()
                )));
            }
            let weights = p.tensor.data();
            for ((v, g), &w) in velocity.iter_mut().zip(grad).zip(weights) {
                let g = if self.weight_decay != 0.0 { g + decay * w } else { g };
                *v = momentum * *v + g;
            }
            if lr != 0.0 {
                let lr = T::from_f64_lossy(lr);
                for (w, &v) in p.tensor.data_mut().iter_mut().zip(velocity.iter()) {
                    *w = *w - lr * v;
                }
            }
            updated += 1;
        }
        Ok(updated)
    }
}

/// Clears every parameter gradient.
pub fn zero_grads<T: Element>(params: &mut [Param<T>]) {
    params.iter_mut().for_each(|p| p.tensor.clear_grad());
}
