//! Poly learning-rate schedule and momentum SGD with weight decay.

use alloc::{format, vec::Vec};

use num_traits::Float;

use crate::{
    error::{Error, Result},
    scalar::Scalar,
    tensor::Tensor,
};

/// `base_lr · (1 − iter/iter_total)^power`.
pub fn poly_lr(base_lr: f64, iter: u64, iter_total: u64, power: f64) -> Result<f64> {
    if iter_total == 0 || iter > iter_total {
        return Err(Error::InvalidArgument(format!(
            "poly_lr: iteration {iter} outside [0, {iter_total}]"
        )));
    }
    Ok(base_lr * Float::powf(1.0 - iter as f64 / iter_total as f64, power))
}

/// Momentum buffers (one per parameter) and the global iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub momentum: Vec<Tensor<T>>,
    pub iteration: u64,
}

impl<T: Scalar> SgdState<T> {
    /// Zeroed buffers shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Self {
            momentum: params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            iteration: 0,
        }
    }
}

/// One step of `g' = g + wd·w; buf = momentum·buf + g'; w −= lr·buf`.
pub fn sgd_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.momentum.len() {
        return Err(Error::InvalidArgument(format!(
            "sgd_step: {} parameters, {} gradients, {} momentum buffers",
            params.len(),
            grads.len(),
            state.momentum.len()
        )));
    }
    for ((p, g), b) in params.iter().zip(grads).zip(&state.momentum) {
        if p.shape() != g.shape() || p.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: if p.shape() != g.shape() {
                    g.shape().to_vec()
                } else {
                    b.shape().to_vec()
                },
            });
        }
    }
    let (lr, m, wd) = (
        T::from_f64_lossy(lr),
        T::from_f64_lossy(momentum),
        T::from_f64_lossy(weight_decay),
    );
    for ((p, g), buf) in params.into_iter().zip(grads).zip(state.momentum.iter_mut()) {
        for ((w, &gv), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
            let gd = gv + wd * *w;
            *b = m * *b + gd;
            *w = *w - lr * *b;
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Number of optimizer iterations in one epoch over `samples`.
pub fn batches_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size.max(1))
}
