//! Network assembly: configuration, feature buffer, dense layers and cost accounting.

pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod layer;
pub mod net;

pub use buffer::{FeatureBuffer, Segment, SegmentOwner};
pub use config::{BlockSpec, Dataset, HeadSpec, NetworkConfig, StemSpec, PRESETS};
pub use cost::{config_cost, count_flops, count_params, network_cost, Cost, CostBreakdown, Sparsity};
pub use layer::{DenseLayer, DenseLayerSpec};
pub use net::{softmax_cross_entropy, LossOutput, Network};
