//! Dense tensor autograd engine and the feature-fused context-encoding
//! segmentation network built on top of it.
//!
//! The crate is `no_std` (it only needs `alloc`). File formats, datasets,
//! the training loop and the command line live in the `ffce` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod network;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use crate::{
    error::{Error, Result},
    graph::{Graph, Mode, Var},
    losses::{ClassWeights, LossReport, LossWeights},
    network::{FfceNet, ForwardInputs, ForwardOptions, ForwardOutput, NetworkConfig},
    optim::{poly_lr, sgd_step, SgdState},
    params::{Buffer, ParamStore, Parameter},
    scalar::{DType, Scalar},
    tensor::Tensor,
};
