//! Bounded per-token key/value store with a salience list kept in lockstep
//! and top-k retention under several eviction policies.
//!
//! Entries carry the salience recorded when their chunk was scored; history
//! is never re-scored. The default eviction semantics concatenate the
//! incoming chunk with the whole history and keep the `capacity` highest
//! scores (pins first); an alternative ordering that evicts from history
//! before appending is available behind [`EvictionOrder::EvictBeforeAppend`]
//! for comparison.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::salience::{component_maxima, fuse_salience, BlockGeometry, SalienceVector};
use crate::tensor::Tensor;

/// Which tokens to drop at capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Keep the top-capacity tokens by recorded salience score.
    Salience,
    /// Keep the most recent tokens, oldest evicted first.
    Fifo,
    /// Like `Salience` but scores come from a global max reduction.
    Max,
    /// Like `Salience` but scores come from a global average reduction.
    Avg,
    /// Keep a uniformly random subset (seeded control baseline).
    Random,
}

impl Policy {
    pub fn parse(s: &str) -> Result<Policy> {
        match s {
            "salience" => Ok(Policy::Salience),
            "fifo" => Ok(Policy::Fifo),
            "max" => Ok(Policy::Max),
            "avg" => Ok(Policy::Avg),
            "random" => Ok(Policy::Random),
            other => Err(Error::Argument(format!(
                "unknown policy '{other}' (expected salience|fifo|max|avg|random)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Salience => "salience",
            Policy::Fifo => "fifo",
            Policy::Max => "max",
            Policy::Avg => "avg",
            Policy::Random => "random",
        }
    }
}

/// Relative order of eviction and append.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvictionOrder {
    /// Score the concatenation of history and chunk, then keep the top
    /// `capacity` tokens.
    #[default]
    ConcatThenTopK,
    /// Shrink history to `capacity - chunk_len` first, then append the
    /// chunk untouched.
    EvictBeforeAppend,
}

impl EvictionOrder {
    pub fn parse(s: &str) -> Result<EvictionOrder> {
        match s {
            "concat-then-topk" => Ok(EvictionOrder::ConcatThenTopK),
            "evict-before-append" => Ok(EvictionOrder::EvictBeforeAppend),
            other => Err(Error::Argument(format!(
                "unknown eviction order '{other}' (expected concat-then-topk|evict-before-append)"
            ))),
        }
    }
}

/// One cached token.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub token_id: u64,
    /// Key activations, `heads * head_dim` flattened.
    pub key: Vec<f64>,
    /// Value activations, `heads * head_dim` flattened.
    pub value: Vec<f64>,
    /// Score recorded when the token's chunk was scored.
    pub salience: f64,
    pub pinned: bool,
}

/// What an append decided: candidate set partitioned into retained and
/// evicted, with the scores used at decision time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvictionReport {
    pub retained: Vec<u64>,
    pub evicted: Vec<u64>,
    /// (token_id, score) over the full candidate set, ascending token_id.
    pub scores: Vec<(u64, f64)>,
}

impl EvictionReport {
    pub fn evicted_any(&self) -> bool {
        !self.evicted.is_empty()
    }
}

// Lightweight view of a candidate used by the retention decision.
#[derive(Clone, Copy)]
struct Candidate {
    token_id: u64,
    salience: f64,
    pinned: bool,
}

#[derive(Debug, Clone)]
pub struct KvCacheConfig {
    pub capacity: usize,
    pub sink_count: usize,
    pub policy: Policy,
    pub order: EvictionOrder,
    pub heads: usize,
    pub head_dim: usize,
    /// Seed for the random policy's draw stream.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct KvCache {
    entries: Vec<CacheEntry>,
    capacity: usize,
    sink_count: usize,
    policy: Policy,
    order: EvictionOrder,
    heads: usize,
    head_dim: usize,
    next_token_id: u64,
    rng: Rng,
}

impl KvCache {
    pub fn new(cfg: KvCacheConfig) -> Result<Self> {
        if cfg.capacity == 0 {
            return Err(Error::Argument("cache capacity must be >= 1".into()));
        }
        if cfg.sink_count > cfg.capacity {
            return Err(Error::Argument(format!(
                "sink_count {} exceeds capacity {}",
                cfg.sink_count, cfg.capacity
            )));
        }
        Ok(KvCache {
            entries: Vec::new(),
            capacity: cfg.capacity,
            sink_count: cfg.sink_count,
            policy: cfg.policy,
            order: cfg.order,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            next_token_id: 0,
            rng: Rng::derive(cfg.seed, &[0xcac4e]),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn sink_count(&self) -> usize {
        self.sink_count
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    /// Salience scores aligned with `entries`; same length at every
    /// observable point.
    pub fn salience_list(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.salience).collect()
    }

    pub fn token_ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.token_id).collect()
    }

    /// Append a scored chunk and run the policy's eviction if the result
    /// exceeds capacity. `keys` and `values` are `[chunk_len, N, D]`
    /// flattened; `scores` has one entry per chunk token.
    pub fn append_chunk(
        &mut self,
        keys: &[f64],
        values: &[f64],
        scores: &[f64],
    ) -> Result<EvictionReport> {
        let width = self.heads * self.head_dim;
        let chunk_len = scores.len();
        if keys.len() != chunk_len * width || values.len() != chunk_len * width {
            return Err(Error::Shape(format!(
                "chunk keys/values must be {chunk_len} x {width}, got {} and {}",
                keys.len(),
                values.len()
            )));
        }
        if chunk_len + self.sink_count > self.capacity {
            return Err(Error::Capacity(format!(
                "chunk of {chunk_len} tokens cannot fit: capacity {} minus {} pinned leaves {}",
                self.capacity,
                self.sink_count,
                self.capacity - self.sink_count
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("chunk salience scores".into()));
        }

        if self.order == EvictionOrder::EvictBeforeAppend
            && self.entries.len() + chunk_len > self.capacity
        {
            return self.evict_then_append(keys, values, scores, width);
        }

        // Default: concatenate, then retain the top-capacity tokens.
        self.push_chunk(keys, values, scores, width);
        let candidate_scores: Vec<(u64, f64)> = self
            .entries
            .iter()
            .map(|e| (e.token_id, e.salience))
            .collect();

        if self.entries.len() <= self.capacity {
            return Ok(EvictionReport {
                retained: candidate_scores.iter().map(|&(id, _)| id).collect(),
                evicted: Vec::new(),
                scores: candidate_scores,
            });
        }

        let candidates = self.candidates();
        let retained = self.retain_ids(&candidates, self.capacity);
        let evicted: Vec<u64> = candidate_scores
            .iter()
            .map(|&(id, _)| id)
            .filter(|id| retained.binary_search(id).is_err())
            .collect();
        self.apply_retention(&retained);
        Ok(EvictionReport {
            retained,
            evicted,
            scores: candidate_scores,
        })
    }

    fn evict_then_append(
        &mut self,
        keys: &[f64],
        values: &[f64],
        scores: &[f64],
        width: usize,
    ) -> Result<EvictionReport> {
        let keep = self.capacity - scores.len();
        let mut report_scores: Vec<(u64, f64)> = self
            .entries
            .iter()
            .map(|e| (e.token_id, e.salience))
            .collect();
        let candidates = self.candidates();
        let retained_history = self.retain_ids(&candidates, keep);
        let evicted: Vec<u64> = candidates
            .iter()
            .map(|c| c.token_id)
            .filter(|id| retained_history.binary_search(id).is_err())
            .collect();
        self.apply_retention(&retained_history);
        let chunk_ids = self.push_chunk(keys, values, scores, width);
        report_scores.extend(chunk_ids.iter().zip(scores).map(|(&id, &s)| (id, s)));

        let mut retained = retained_history;
        retained.extend(&chunk_ids);
        retained.sort_unstable();
        Ok(EvictionReport {
            retained,
            evicted,
            scores: report_scores,
        })
    }

    fn candidates(&self) -> Vec<Candidate> {
        self.entries
            .iter()
            .map(|e| Candidate {
                token_id: e.token_id,
                salience: e.salience,
                pinned: e.pinned,
            })
            .collect()
    }

    fn push_chunk(
        &mut self,
        keys: &[f64],
        values: &[f64],
        scores: &[f64],
        width: usize,
    ) -> Vec<u64> {
        let mut ids = Vec::with_capacity(scores.len());
        for (t, &score) in scores.iter().enumerate() {
            let token_id = self.next_token_id;
            self.next_token_id += 1;
            ids.push(token_id);
            self.entries.push(CacheEntry {
                token_id,
                key: keys[t * width..(t + 1) * width].to_vec(),
                value: values[t * width..(t + 1) * width].to_vec(),
                salience: score,
                pinned: token_id < self.sink_count as u64,
            });
        }
        ids
    }

    /// Token ids to keep from `candidates`, at most `keep` of them, pinned
    /// entries first, the rest by policy. Returned sorted ascending.
    fn retain_ids(&mut self, candidates: &[Candidate], keep: usize) -> Vec<u64> {
        let mut retained: Vec<u64> = candidates
            .iter()
            .filter(|c| c.pinned)
            .map(|c| c.token_id)
            .collect();
        let slots = keep.saturating_sub(retained.len());
        let unpinned: Vec<Candidate> = candidates.iter().filter(|c| !c.pinned).copied().collect();

        let chosen: Vec<u64> = match self.policy {
            Policy::Fifo => {
                // Oldest evicted first: keep the most recent `slots`.
                let start = unpinned.len().saturating_sub(slots);
                unpinned[start..].iter().map(|c| c.token_id).collect()
            }
            Policy::Random => {
                let mut ids: Vec<u64> = unpinned.iter().map(|c| c.token_id).collect();
                self.rng.shuffle(&mut ids);
                ids.truncate(slots);
                ids
            }
            Policy::Salience | Policy::Max | Policy::Avg => {
                // Descending score, ties toward the higher (newer) token id.
                let mut order = unpinned;
                order.sort_by(|a, b| {
                    b.salience
                        .partial_cmp(&a.salience)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(b.token_id.cmp(&a.token_id))
                });
                order[..slots.min(order.len())]
                    .iter()
                    .map(|c| c.token_id)
                    .collect()
            }
        };
        retained.extend(chosen);
        retained.sort_unstable();
        retained
    }

    fn apply_retention(&mut self, retained: &[u64]) {
        // `retained` is sorted; `retain` keeps relative order, so entries
        // stay ascending by token_id.
        self.entries
            .retain(|e| retained.binary_search(&e.token_id).is_ok());
    }

    /// All currently retained entries in ascending token_id order:
    /// keys `[M, N, D]`, values `[M, N, D]`, token ids.
    pub fn select(&self) -> (Tensor, Tensor, Vec<u64>) {
        let m = self.entries.len();
        let width = self.heads * self.head_dim;
        let mut keys = Vec::with_capacity(m * width);
        let mut values = Vec::with_capacity(m * width);
        let mut ids = Vec::with_capacity(m);
        for e in &self.entries {
            keys.extend_from_slice(&e.key);
            values.extend_from_slice(&e.value);
            ids.push(e.token_id);
        }
        let dims = [m, self.heads, self.head_dim];
        (
            Tensor::from_vec(&dims, keys).expect("entry width is fixed"),
            Tensor::from_vec(&dims, values).expect("entry width is fixed"),
            ids,
        )
    }
}

/// Scores for the score-driven policies, computed from a square attention
/// matrix: `salience` is the block-decomposed fusion, `max` the per-key
/// head-mean of the global query maximum, `avg` the head-mean of the global
/// query average.
pub fn set_policy_scores(
    policy: Policy,
    p: &AttentionWeights,
    geom: &BlockGeometry,
) -> Result<SalienceVector> {
    match policy {
        Policy::Salience => fuse_salience(&component_maxima(p, geom)?, geom),
        Policy::Max | Policy::Avg => {
            let (b, n, l_q, l_k) = (p.batch(), p.heads(), p.q_len(), p.k_len());
            if l_q != l_k {
                return Err(Error::Shape(format!(
                    "policy scores need a square attention matrix, got {l_q} x {l_k}"
                )));
            }
            let pd = p.tensor().data();
            let mut data = Vec::with_capacity(b * l_k);
            for bi in 0..b {
                for j in 0..l_k {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let base = (bi * n + ni) * l_q * l_k;
                        let mut head_val = if policy == Policy::Max {
                            f64::NEG_INFINITY
                        } else {
                            0.0
                        };
                        for i in 0..l_q {
                            let w = pd[base + i * l_k + j];
                            if policy == Policy::Max {
                                head_val = head_val.max(w);
                            } else {
                                head_val += w;
                            }
                        }
                        if policy == Policy::Avg {
                            head_val /= l_q as f64;
                        }
                        acc += head_val;
                    }
                    data.push(acc / n as f64);
                }
            }
            SalienceVector::new(b, l_k, data)
        }
        other => Err(Error::Argument(format!(
            "policy '{}' does not define a score computation",
            other.name()
        ))),
    }
}
