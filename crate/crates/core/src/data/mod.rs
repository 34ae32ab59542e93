//! Dataset ingestion, synthetic mixture construction and the binary file
//! formats shared with the command-line tools.

mod dataset;
mod idx;
mod msmx;
mod patterns;
mod pool;

pub use dataset::{case_frequencies, compose_mixtures, split, DatasetMeta, MixtureDataset};
pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, pool_from_idx,
    IdxImages, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use msmx::{
    decode_dataset, encode_dataset, load_dataset, load_matrix, save_dataset, MSMX_MAGIC,
};
pub use patterns::{render_pattern, synthetic_pool, PATTERN_FAMILIES};
pub use pool::{pool_from_dataset, pool_to_dataset, subsample_labels, SourceGroup, SourcePool};
