//! Tensor primitives. Every forward function here is a pure function of its
//! arguments; backward functions take the forward inputs explicitly.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod se;
pub mod shuffle;

pub use activation::{hard_swish, relu, Activation};
pub use conv::{conv2d, conv2d_backward, ConvWeights};
pub use linear::{fully_connected, fully_connected_backward};
pub use norm::{batch_norm, batch_norm_backward, batch_norm_forward, Mode, RunningStats};
pub use pool::{avg_pool, avg_pool_backward, global_avg_pool, global_avg_pool_backward};
pub use se::{se_block, SeWeights};
pub use shuffle::{channel_shuffle, channel_unshuffle};
