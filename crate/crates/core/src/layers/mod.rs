//! Differentiable layer primitives, each a forward function plus its backward.

mod batchnorm;
mod conv;
mod dense;
mod dropout;
mod pool;
mod residual;
mod softmax;

use serde::{Deserialize, Serialize};

pub use batchnorm::{
    batchnorm, batchnorm_backward, BatchNormCache, BatchNormGrads, BatchNormOutput, BatchNormParams,
    BatchStats, DEFAULT_EPSILON as BN_EPSILON, DEFAULT_MOMENTUM as BN_MOMENTUM,
};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams};
pub use dense::{dense_per_pixel, dense_per_pixel_backward, DenseGrads, DenseParams};
pub use dropout::{dropout, dropout_backward, DropoutMask};
pub use pool::{maxpool2, maxpool2_backward, PoolIndices};
pub use residual::{residual_add, residual_add_backward};
pub use softmax::{softmax_backward, softmax_per_pixel};

/// Whether stochastic and batch-statistics layers run in training or inference form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    Train,
    Eval,
}
