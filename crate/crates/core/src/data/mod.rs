//! Synthetic data, non-iid partitioning, stale-client selection and
//! streaming data variation.

mod blobs;
mod csv;
mod partition;
mod staleness;
mod variation;

pub use blobs::{make_blobs, BlobFamily};
pub use csv::{read_dataset_csv, write_dataset_csv};
pub use partition::{
    dirichlet_partition, dirichlet_partition_indices, one_class_partition_indices,
    sample_dirichlet, PartitionSpec,
};
pub use staleness::{select_stale_clients, Cadence, StalenessPlan};
pub use variation::{apply_variation, cumulative_replacements, VariationSpec};
