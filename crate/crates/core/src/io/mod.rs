//! File formats: the PFKV binary tensor format, the flat run
//! configuration, salience-head checkpoints, and cache snapshots.

mod checkpoint;
mod config;
mod tensor_file;

pub use checkpoint::{load_checkpoint, save_cache_snapshot, save_checkpoint};
pub use config::RunConfig;
pub use tensor_file::{decode_tensor, encode_tensor, read_tensor, write_tensor, MAGIC, VERSION};
