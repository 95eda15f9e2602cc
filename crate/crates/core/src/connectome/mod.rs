//! Windowed Pearson connectivity: ROI time series to dynamic brain networks.

mod export;
mod network;
mod pearson;
mod window;

pub use export::{read_network_json, snapshot_edge_csv, write_network_json, NetworkDocument};
pub use network::{build_dynamic_network, BrainGraphSnapshot, DynamicBrainNetwork};
pub use pearson::{fisher_z, pearson_matrix, PearsonMatrix};
pub use window::{split_windows, WindowSpec};
