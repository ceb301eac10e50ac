//! Connectivity analysis, heatmap export and ablation sweeps.

pub mod connectivity;
pub mod heatmap;
pub mod sweep;

pub use connectivity::{aggregate_layers, connectivity, group_connectivity, Aggregation, Cell, ConnectivityMatrix, Granularity};
pub use heatmap::{export_heatmap, from_csv, to_csv, to_pgm};
pub use sweep::{ablation_sweep, sweep_csv, Axis, SweepRow};
