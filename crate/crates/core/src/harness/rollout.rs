//! Chunk-wise autoregressive rollout with cache maintenance.
//!
//! Each chunk starts from seeded noise, is denoised over the schedule while
//! attending to the retained cache, and at the final step emits its
//! final-layer q/k/v, gets scored, and is appended to the cache under the
//! configured eviction policy. Retention decisions are made once, on the
//! final layer's salience, and the same retained index set is applied to
//! every layer's store.

use std::time::Instant;

use serde::Serialize;

use crate::attention::{attention_weights, AttentionBatch};
use crate::cache::{
    set_policy_scores, EvictionOrder, EvictionReport, KvCache, KvCacheConfig, Policy,
};
use crate::error::{Error, Result};
use crate::metrics::retained_attention_mass;
use crate::rng::Rng;
use crate::salience::{salience_scores_with, BlockGeometry, HeadReduce, SalienceVector};
use crate::seh::{seh_forward, SehParams};
use crate::tensor::{dot, softmax_rows, Tensor};

use super::model::{KvView, ToyModel};
use super::schedule::DenoiseSchedule;

// Salt labels for the independent noise streams.
const STREAM_CHUNK_INIT: u64 = 0x1a17;
const STREAM_RENOISE: u64 = 0x2e10;

#[derive(Debug, Clone)]
pub struct RolloutOptions {
    pub capacity: usize,
    pub sink_count: usize,
    pub policy: Policy,
    pub order: EvictionOrder,
    /// Block length for the oracle scoring path.
    pub block_len: usize,
    pub head_reduce: HeadReduce,
    /// Record, per chunk, how much of its attention mass fell on tokens the
    /// previous eviction retained.
    pub track_retained_mass: bool,
}

/// Final-layer activations of one chunk, head-major `[N, T, D]`.
#[derive(Debug, Clone, Default)]
pub struct ChunkQkv {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub t_len: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChunkRecord {
    /// 1-based chunk index.
    pub chunk: usize,
    /// Global token ids generated in this chunk.
    pub token_ids: Vec<u64>,
    pub cache_before: usize,
    pub cache_after: usize,
    pub report: EvictionReport,
    /// Scores the policy recorded for this chunk's tokens.
    pub predicted: Vec<f64>,
    /// Teacher scores for the same tokens, when a caller computed them.
    pub teacher: Option<Vec<f64>>,
    /// Attention mass this chunk paid to tokens retained by the previous
    /// eviction decision, over that decision's full candidate set.
    pub retained_mass: Option<f64>,
    #[serde(skip)]
    pub wall_time_ns: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutTrace {
    pub policy: String,
    pub seed: u64,
    pub frames: usize,
    pub chunk_tokens: usize,
    pub records: Vec<ChunkRecord>,
    /// Per-chunk token states at the final timestep, `[T, d_model]` each.
    /// These are the states whose final-layer projections were scored, so
    /// a bidirectional teacher pass over their concatenation sees exactly
    /// what the causal path saw on a single-chunk sequence.
    #[serde(skip)]
    pub chunk_states: Vec<Vec<f64>>,
    #[serde(skip)]
    pub chunk_qkv: Vec<ChunkQkv>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceSummary {
    pub policy: String,
    pub seed: u64,
    pub frames: usize,
    pub chunks: usize,
    pub tokens_generated: u64,
    pub evictions: usize,
    pub final_cache_len: usize,
    pub mean_retained_mass: Option<f64>,
}

impl RolloutTrace {
    pub fn evictions(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.report.evicted_any())
            .count()
    }

    pub fn summary(&self) -> TraceSummary {
        let masses: Vec<f64> = self
            .records
            .iter()
            .filter_map(|r| r.retained_mass)
            .collect();
        TraceSummary {
            policy: self.policy.clone(),
            seed: self.seed,
            frames: self.frames,
            chunks: self.records.len(),
            tokens_generated: self
                .records
                .iter()
                .map(|r| r.token_ids.len() as u64)
                .sum(),
            evictions: self.evictions(),
            final_cache_len: self
                .records
                .last()
                .map(|r| r.cache_after)
                .unwrap_or(0),
            mean_retained_mass: if masses.is_empty() {
                None
            } else {
                Some(masses.iter().sum::<f64>() / masses.len() as f64)
            },
        }
    }

    /// One JSON object per chunk record, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    /// Fill each record's `teacher` field with the bidirectional teacher's
    /// scores over the whole generated sequence, sliced per chunk.
    pub fn annotate_teacher(
        &mut self,
        model: &ToyModel,
        block_len: usize,
        head_reduce: HeadReduce,
    ) -> Result<()> {
        let full_states: Vec<f64> = self.chunk_states.iter().flatten().copied().collect();
        let scores = teacher_salience(model, &full_states, block_len, head_reduce)?;
        let mut offset = 0;
        for record in &mut self.records {
            let t_len = record.token_ids.len();
            record.teacher = Some(scores.row(0)[offset..offset + t_len].to_vec());
            offset += t_len;
        }
        Ok(())
    }
}

// Mirror of the canonical cache for one non-final layer: same token ids,
// that layer's k/v rows.
struct LayerStore {
    ids: Vec<u64>,
    k_rows: Vec<f64>,
    v_rows: Vec<f64>,
    width: usize,
}

impl LayerStore {
    fn new(width: usize) -> Self {
        LayerStore {
            ids: Vec::new(),
            k_rows: Vec::new(),
            v_rows: Vec::new(),
            width,
        }
    }

    fn append(&mut self, ids: &[u64], k_rows: &[f64], v_rows: &[f64]) {
        self.ids.extend_from_slice(ids);
        self.k_rows.extend_from_slice(k_rows);
        self.v_rows.extend_from_slice(v_rows);
    }

    fn retain(&mut self, keep: &[u64]) {
        let mut ids = Vec::with_capacity(keep.len());
        let mut k_rows = Vec::with_capacity(keep.len() * self.width);
        let mut v_rows = Vec::with_capacity(keep.len() * self.width);
        for (i, &id) in self.ids.iter().enumerate() {
            if keep.binary_search(&id).is_ok() {
                ids.push(id);
                k_rows.extend_from_slice(&self.k_rows[i * self.width..(i + 1) * self.width]);
                v_rows.extend_from_slice(&self.v_rows[i * self.width..(i + 1) * self.width]);
            }
        }
        self.ids = ids;
        self.k_rows = k_rows;
        self.v_rows = v_rows;
    }

    fn view(&self) -> KvView<'_> {
        KvView {
            ids: &self.ids,
            k_rows: &self.k_rows,
            v_rows: &self.v_rows,
        }
    }
}

// Candidate set of the most recent eviction, kept around (including the
// evicted keys) so the next chunk's attention over it can be measured.
struct Shadow {
    candidate_ids: Vec<u64>,
    key_rows: Vec<f64>,
    retained: Vec<u64>,
}

/// Generate `num_frames` frames chunk-wise under the configured policy.
///
/// Scoring: `salience` uses the salience head when `seh` is given and the
/// dense oracle otherwise; `max`/`avg` use their global reductions; `fifo`
/// and `random` ignore scores for eviction but the oracle scores are still
/// recorded in the trace.
pub fn rollout_infer(
    model: &ToyModel,
    sched: &DenoiseSchedule,
    opts: &RolloutOptions,
    num_frames: usize,
    seed: u64,
    seh: Option<&SehParams>,
) -> Result<RolloutTrace> {
    if num_frames < 1 {
        return Err(Error::Argument("num_frames must be >= 1".into()));
    }
    let cfg = model.config();
    let chunk_tokens = cfg.chunk_tokens();
    if chunk_tokens + opts.sink_count > opts.capacity {
        return Err(Error::Capacity(format!(
            "capacity {} cannot hold a {chunk_tokens}-token chunk plus {} pinned tokens",
            opts.capacity, opts.sink_count
        )));
    }

    let dm = model.d_model();
    let (n, d) = (cfg.heads, cfg.head_dim);
    let width = n * d;
    let layers = model.num_layers();

    let mut cache = KvCache::new(KvCacheConfig {
        capacity: opts.capacity,
        sink_count: opts.sink_count,
        policy: opts.policy,
        order: opts.order,
        heads: n,
        head_dim: d,
        seed,
    })?;
    let mut stores: Vec<LayerStore> = (0..layers.saturating_sub(1))
        .map(|_| LayerStore::new(width))
        .collect();

    let mut trace = RolloutTrace {
        policy: opts.policy.name().to_string(),
        seed,
        frames: num_frames,
        chunk_tokens,
        records: Vec::new(),
        chunk_states: Vec::new(),
        chunk_qkv: Vec::new(),
    };

    let mut shadow: Option<Shadow> = None;
    let mut next_token: u64 = 0;
    let mut frames_done = 0usize;
    let mut chunk_index = 0usize;

    while frames_done < num_frames {
        chunk_index += 1;
        let started = Instant::now();
        let frames_now = cfg.chunk_frames.min(num_frames - frames_done);
        let t_len = frames_now * cfg.frame_tokens;
        let ids: Vec<u64> = (next_token..next_token + t_len as u64).collect();

        let (sel_k, sel_v, sel_ids) = cache.select();
        let final_view = KvView {
            ids: &sel_ids,
            k_rows: sel_k.data(),
            v_rows: sel_v.data(),
        };
        let mut views: Vec<KvView> = stores.iter().map(|s| s.view()).collect();
        views.push(final_view);

        // Initial noise, then denoise toward t_0.
        let mut rng = Rng::derive(seed, &[STREAM_CHUNK_INIT, chunk_index as u64]);
        let mut x: Vec<f64> = (0..t_len * dm).map(|_| rng.next_normal()).collect();
        for step in 0..sched.len().saturating_sub(1) {
            let acts = model.forward_chunk(&x, &ids, &views);
            let (alpha, sigma) = sched.mix(step + 1);
            let mut noise_rng =
                Rng::derive(seed, &[STREAM_RENOISE, chunk_index as u64, step as u64]);
            for (xi, &h) in x.iter_mut().zip(&acts.states) {
                *xi = alpha * h + sigma * noise_rng.next_normal();
            }
        }

        // Final step: emit activations, score the chunk, update the cache.
        let acts = model.forward_chunk(&x, &ids, &views);

        let retained_mass = match (&shadow, opts.track_retained_mass) {
            (Some(sh), true) => Some(shadow_mass(&acts.q, sh, n, d, t_len)?),
            _ => None,
        };

        let scores = score_chunk(&acts.q, &acts.k, &acts.v, t_len, opts, seh, n, d)?;

        let cache_before = cache.len();
        // Pre-eviction candidates for the next chunk's mass measurement.
        let shadow_next = if opts.track_retained_mass {
            let mut candidate_ids = sel_ids.clone();
            candidate_ids.extend(&ids);
            let mut key_rows = sel_k.data().to_vec();
            key_rows.extend_from_slice(&acts.layer_k_rows[layers - 1]);
            Some((candidate_ids, key_rows))
        } else {
            None
        };

        let report = cache.append_chunk(
            &acts.layer_k_rows[layers - 1],
            &acts.layer_v_rows[layers - 1],
            &scores,
        )?;
        for (li, store) in stores.iter_mut().enumerate() {
            store.append(&ids, &acts.layer_k_rows[li], &acts.layer_v_rows[li]);
            store.retain(&report.retained);
        }
        debug_assert_eq!(cache.len(), report.retained.len());

        if let Some((candidate_ids, key_rows)) = shadow_next {
            shadow = Some(Shadow {
                candidate_ids,
                key_rows,
                retained: report.retained.clone(),
            });
        }

        trace.chunk_states.push(x.clone());
        trace.chunk_qkv.push(ChunkQkv {
            q: acts.q.clone(),
            k: acts.k.clone(),
            v: acts.v.clone(),
            t_len,
        });
        trace.records.push(ChunkRecord {
            chunk: chunk_index,
            token_ids: ids,
            cache_before,
            cache_after: cache.len(),
            report,
            predicted: scores,
            teacher: None,
            retained_mass,
            wall_time_ns: started.elapsed().as_nanos(),
        });

        next_token += t_len as u64;
        frames_done += frames_now;
    }

    Ok(trace)
}

#[allow(clippy::too_many_arguments)]
fn score_chunk(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t_len: usize,
    opts: &RolloutOptions,
    seh: Option<&SehParams>,
    n: usize,
    d: usize,
) -> Result<Vec<f64>> {
    let dims = [1, n, t_len, d];
    let batch = AttentionBatch::new(
        Tensor::from_vec(&dims, q.to_vec())?,
        Tensor::from_vec(&dims, k.to_vec())?,
        Tensor::from_vec(&dims, v.to_vec())?,
    )?;
    match (opts.policy, seh) {
        (Policy::Salience, Some(params)) => Ok(seh_forward(&batch, params)?.data().to_vec()),
        (Policy::Max | Policy::Avg, _) => {
            let p = attention_weights(&batch)?;
            let geom = BlockGeometry::new(t_len, opts.block_len)?;
            Ok(set_policy_scores(opts.policy, &p, &geom)?.row(0).to_vec())
        }
        _ => {
            let geom = BlockGeometry::new(t_len, opts.block_len)?;
            let (scores, _) = salience_scores_with(&batch, &geom, opts.head_reduce)?;
            Ok(scores.row(0).to_vec())
        }
    }
}

fn shadow_mass(q: &[f64], shadow: &Shadow, n: usize, d: usize, t_len: usize) -> Result<f64> {
    let m = shadow.candidate_ids.len();
    let nd = n * d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut rows = Vec::with_capacity(n * t_len * m);
    let mut row = vec![0.0; m];
    for ni in 0..n {
        for ti in 0..t_len {
            let q_row = &q[(ni * t_len + ti) * d..(ni * t_len + ti + 1) * d];
            for (mi, slot) in row.iter_mut().enumerate() {
                let k_row = &shadow.key_rows[mi * nd + ni * d..mi * nd + (ni + 1) * d];
                *slot = dot(q_row, k_row) * scale;
            }
            softmax_rows(&mut row, m);
            rows.extend_from_slice(&row);
        }
    }
    retained_attention_mass(&rows, &shadow.candidate_ids, &shadow.retained)
}

/// Salience of every token as the bidirectional teacher sees it: the full
/// sequence of final token states is run through the model without any
/// cache (every token attends to every other), and the final layer's q/k
/// feed the dense scoring path.
pub fn teacher_salience(
    model: &ToyModel,
    full_states: &[f64],
    block_len: usize,
    head_reduce: HeadReduce,
) -> Result<SalienceVector> {
    let dm = model.d_model();
    if full_states.is_empty() || !full_states.len().is_multiple_of(dm) {
        return Err(Error::Shape(format!(
            "full sequence states of {} values do not divide into d_model {dm}",
            full_states.len()
        )));
    }
    let l = full_states.len() / dm;
    let ids: Vec<u64> = (0..l as u64).collect();
    let cfg = model.config();
    let acts = model.forward_chunk(full_states, &ids, &[]);
    let dims = [1, cfg.heads, l, cfg.head_dim];
    let batch = AttentionBatch::from_qk(
        Tensor::from_vec(&dims, acts.q)?,
        Tensor::from_vec(&dims, acts.k)?,
    )?;
    let geom = BlockGeometry::new(l, block_len)?;
    let (scores, _) = salience_scores_with(&batch, &geom, head_reduce)?;
    Ok(scores)
}
