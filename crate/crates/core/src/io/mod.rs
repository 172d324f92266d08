//! Files: images, datasets, run configs, weights and heatmaps.

mod config;
mod dataset;
mod heatmap;
mod netpbm;
mod weights;

pub use config::RunConfig;
pub use dataset::{load_dataset, load_manifest, worker_threads, DatasetManifest, MANIFEST};
pub use heatmap::{export_heatmap, heatmap_image};
pub use netpbm::{decode_pnm, encode_pnm, read_pnm, write_pnm};
pub use weights::{apply_weights, decode_weights, encode_weights, load_weights, save_weights};
