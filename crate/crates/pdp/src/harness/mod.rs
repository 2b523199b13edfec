//! Desk-scale experiment substrate: a small model zoo, dataset ingestion,
//! metrics (sparsity, MAC, mask-flip dynamics), and the hard-mask
//! magnitude baseline used for soft-vs-hard comparisons.

pub mod baseline;
pub mod data;
pub mod mac;
pub mod metrics;
pub mod model;

pub use baseline::hard_mask_bits;
pub use data::{load_mnist, synthetic_task, DataError, Dataset};
pub use mac::{mac_count, MacReport};
pub use metrics::{
    sparsity_report, EpochRecord, FlipTracker, Histogram, RunMetrics, SparsityReport,
};
pub use model::{LayerSpec, Model, ModelSpec};
