//! Differentiable kernels: each forward has a matching `*_backward`.

pub mod activation;
pub mod concat;
pub mod conv;
pub mod gemm;
pub mod linear;
pub mod loss;
pub mod mode4;
pub mod norm;
pub mod pool;

pub use activation::{activation, activation_backward, sigmoid_scalar, Activation};
pub use concat::{concat, split_last};
pub use conv::{conv2d, conv2d_backward, ConvSpec};
pub use linear::{linear, linear_backward};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_backward};
pub use mode4::{mode4_product, mode4_product_backward, stack_last, unstack_last};
pub use norm::{batch_norm, BatchStats, Phase, RunningStats};
pub use pool::{global_avg_pool, global_avg_pool_backward};
