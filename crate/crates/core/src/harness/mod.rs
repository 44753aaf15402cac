//! Toy chunk-wise autoregressive rollout harness: a deterministic
//! attention-stack generator, a denoising schedule, cache-managed
//! inference, teacher-supervised salience-head training, and the
//! planted-anchor policy benchmark.

mod model;
mod planted;
mod rollout;
mod schedule;
mod train;

pub use model::{head_major_to_rows, ChunkActivations, KvView, PlantedAnchors, ToyModel, ToyModelConfig};
pub use planted::{planted_salience_benchmark, PlantedConfig, PolicyOutcome};
pub use rollout::{
    rollout_infer, teacher_salience, ChunkQkv, ChunkRecord, RolloutOptions, RolloutTrace,
    TraceSummary,
};
pub use schedule::DenoiseSchedule;
pub use train::{concat_chunk_qkv, train_seh_loop, TrainCurves};
