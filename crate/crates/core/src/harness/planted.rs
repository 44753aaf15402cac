//! Planted-anchor retention benchmark.
//!
//! A known set of first-chunk tokens gets keys aligned with a direction
//! every query is biased toward, so all future chunks attend to them
//! strongly. A policy that reads salience should keep those anchors
//! resident; FIFO forgets them once they age out of the window. The
//! benchmark reports, per policy, the fraction of anchors still cached at
//! the end of the rollout and the mean retained-attention-mass.

use serde::Serialize;

use crate::cache::{EvictionOrder, Policy};
use crate::error::{Error, Result};
use crate::salience::HeadReduce;

use super::model::{PlantedAnchors, ToyModel, ToyModelConfig};
use super::rollout::{rollout_infer, RolloutOptions, RolloutTrace};
use super::schedule::DenoiseSchedule;

#[derive(Debug, Clone)]
pub struct PlantedConfig {
    pub model: ToyModelConfig,
    pub schedule_steps: usize,
    pub capacity: usize,
    pub sink_count: usize,
    pub block_len: usize,
    pub head_reduce: HeadReduce,
    pub num_frames: usize,
    /// How many anchors to plant right after the pinned prefix.
    pub anchor_count: usize,
    pub key_boost: f64,
    pub query_gain: f64,
    pub policies: Vec<Policy>,
}

impl PlantedConfig {
    /// Anchor token ids: the first unpinned tokens of the first chunk.
    pub fn anchor_ids(&self) -> Vec<u64> {
        let start = self.sink_count as u64;
        (start..start + self.anchor_count as u64).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyOutcome {
    pub policy: String,
    /// Fraction of planted anchors still resident when the rollout ends.
    pub anchor_recall: f64,
    pub mean_retained_mass: Option<f64>,
    pub evictions: usize,
}

/// Run the same seeded rollout once per policy over a model with planted
/// anchors and measure anchor retention.
pub fn planted_salience_benchmark(cfg: &PlantedConfig, seed: u64) -> Result<Vec<PolicyOutcome>> {
    if cfg.anchor_count == 0 {
        return Err(Error::Argument("anchor_count must be >= 1".into()));
    }
    if cfg.sink_count + cfg.anchor_count > cfg.model.chunk_tokens() {
        return Err(Error::Argument(format!(
            "{} pinned + {} anchor tokens exceed the {}-token first chunk",
            cfg.sink_count,
            cfg.anchor_count,
            cfg.model.chunk_tokens()
        )));
    }
    let anchors = cfg.anchor_ids();
    let model = ToyModel::new(cfg.model.clone()).with_planted(PlantedAnchors {
        ids: anchors.clone(),
        key_boost: cfg.key_boost,
        query_gain: cfg.query_gain,
    });
    let sched = DenoiseSchedule::linear(cfg.schedule_steps)?;

    let mut outcomes = Vec::with_capacity(cfg.policies.len());
    for &policy in &cfg.policies {
        let opts = RolloutOptions {
            capacity: cfg.capacity,
            sink_count: cfg.sink_count,
            policy,
            order: EvictionOrder::ConcatThenTopK,
            block_len: cfg.block_len,
            head_reduce: cfg.head_reduce,
            track_retained_mass: true,
        };
        let trace = rollout_infer(&model, &sched, &opts, cfg.num_frames, seed, None)?;
        outcomes.push(outcome_from_trace(&trace, &anchors, policy));
    }
    Ok(outcomes)
}

fn outcome_from_trace(trace: &RolloutTrace, anchors: &[u64], policy: Policy) -> PolicyOutcome {
    let resident = trace
        .records
        .last()
        .map(|r| r.report.retained.clone())
        .unwrap_or_default();
    let hits = anchors
        .iter()
        .filter(|a| resident.binary_search(a).is_ok())
        .count();
    let summary = trace.summary();
    PolicyOutcome {
        policy: policy.name().to_string(),
        anchor_recall: hits as f64 / anchors.len() as f64,
        mean_retained_mass: summary.mean_retained_mass,
        evictions: summary.evictions,
    }
}
