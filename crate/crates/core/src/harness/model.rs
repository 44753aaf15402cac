//! Deterministic toy generator: a stack of attention layers with fixed
//! random projections. Nothing here is trained; the model exists to give
//! the cache policies and the salience head realistic q/k/v streams to
//! work on.

use crate::rng::Rng;
use crate::tensor::{dot, softmax_rows};

#[derive(Debug, Clone)]
pub struct ToyModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub frame_tokens: usize,
    pub chunk_frames: usize,
    pub seed: u64,
}

impl ToyModelConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn chunk_tokens(&self) -> usize {
        self.frame_tokens * self.chunk_frames
    }
}

/// Tokens whose keys are replaced by strong per-anchor basis directions so
/// that every future query attends to them: the ground truth for the
/// planted retention benchmark. Anchor `m` owns coordinate `m % D`; all
/// queries are biased toward the anchor coordinates, so each anchor
/// dominates the rows whose queries align with its coordinate instead of
/// the anchors splitting one direction's mass between them.
#[derive(Debug, Clone)]
pub struct PlantedAnchors {
    pub ids: Vec<u64>,
    /// Magnitude of an anchor key along its own coordinate.
    pub key_boost: f64,
    /// Total bias added to every query, spread over the anchor coordinates.
    pub query_gain: f64,
}

struct LayerWeights {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
}

pub struct ToyModel {
    cfg: ToyModelConfig,
    layers: Vec<LayerWeights>,
    planted: Option<PlantedAnchors>,
}

/// Key/value rows of one layer's cache: `ids.len()` tokens, each row
/// `heads * head_dim` wide, token-major.
#[derive(Clone, Copy)]
pub struct KvView<'a> {
    pub ids: &'a [u64],
    pub k_rows: &'a [f64],
    pub v_rows: &'a [f64],
}

impl<'a> KvView<'a> {
    pub const EMPTY: KvView<'static> = KvView {
        ids: &[],
        k_rows: &[],
        v_rows: &[],
    };

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Everything one forward pass over a chunk produces.
pub struct ChunkActivations {
    /// Token states after all layers, `[T, d_model]`.
    pub states: Vec<f64>,
    /// Per-layer key/value rows in cache-entry layout (`[T, N*D]`).
    pub layer_k_rows: Vec<Vec<f64>>,
    pub layer_v_rows: Vec<Vec<f64>>,
    /// Final-layer projections, head-major `[N, T, D]`.
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

impl ToyModel {
    pub fn new(cfg: ToyModelConfig) -> Self {
        let dm = cfg.d_model();
        let scale = 1.0 / (dm as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for li in 0..cfg.layers {
            let draw = |tag: u64| -> Vec<f64> {
                let mut rng = Rng::derive(cfg.seed, &[0x70d3, li as u64, tag]);
                (0..dm * dm).map(|_| scale * rng.next_normal()).collect()
            };
            layers.push(LayerWeights {
                wq: draw(0),
                wk: draw(1),
                wv: draw(2),
            });
        }
        ToyModel {
            cfg,
            layers,
            planted: None,
        }
    }

    pub fn with_planted(mut self, planted: PlantedAnchors) -> Self {
        self.planted = Some(planted);
        self
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model()
    }

    pub fn chunk_tokens(&self) -> usize {
        self.cfg.chunk_tokens()
    }

    pub fn num_layers(&self) -> usize {
        self.cfg.layers
    }

    /// Run the layer stack over `x` (`[T, d_model]`): per layer, project
    /// q/k/v, attend over the layer's cache followed by the chunk itself,
    /// add the merged-head readout back onto the state. `caches` supplies
    /// one view per layer; pass an empty slice for a cache-free
    /// (bidirectional) pass over the whole sequence.
    pub fn forward_chunk(
        &self,
        x: &[f64],
        token_ids: &[u64],
        caches: &[KvView],
    ) -> ChunkActivations {
        let dm = self.d_model();
        let (n, d) = (self.cfg.heads, self.cfg.head_dim);
        let t_len = token_ids.len();
        debug_assert_eq!(x.len(), t_len * dm);
        debug_assert!(caches.is_empty() || caches.len() == self.layers.len());
        let scale = 1.0 / (d as f64).sqrt();

        let mut state = x.to_vec();
        let mut layer_k_rows = Vec::with_capacity(self.layers.len());
        let mut layer_v_rows = Vec::with_capacity(self.layers.len());
        let mut final_q = Vec::new();
        let mut final_k = Vec::new();
        let mut final_v = Vec::new();

        for (li, layer) in self.layers.iter().enumerate() {
            let q = self.project(&state, &layer.wq, t_len);
            let mut k = self.project(&state, &layer.wk, t_len);
            let v = self.project(&state, &layer.wv, t_len);
            let mut q = q;
            self.apply_planting(&mut q, &mut k, token_ids, t_len);

            let cache = caches.get(li).copied().unwrap_or(KvView::EMPTY);
            let m_len = cache.len();
            let total = m_len + t_len;
            let nd = n * d;

            let mut out = vec![0.0; t_len * dm];
            let mut logits = vec![0.0; total];
            for ni in 0..n {
                for ti in 0..t_len {
                    let q_row = &q[(ni * t_len + ti) * d..(ni * t_len + ti + 1) * d];
                    for (mi, slot) in logits[..m_len].iter_mut().enumerate() {
                        let k_row = &cache.k_rows[mi * nd + ni * d..mi * nd + (ni + 1) * d];
                        *slot = dot(q_row, k_row) * scale;
                    }
                    for tj in 0..t_len {
                        let k_row = &k[(ni * t_len + tj) * d..(ni * t_len + tj + 1) * d];
                        logits[m_len + tj] = dot(q_row, k_row) * scale;
                    }
                    softmax_rows(&mut logits, total);
                    let o_base = ti * dm + ni * d;
                    for (mi, &w) in logits[..m_len].iter().enumerate() {
                        let v_row = &cache.v_rows[mi * nd + ni * d..mi * nd + (ni + 1) * d];
                        for dd in 0..d {
                            out[o_base + dd] += w * v_row[dd];
                        }
                    }
                    for tj in 0..t_len {
                        let w = logits[m_len + tj];
                        let v_row = &v[(ni * t_len + tj) * d..(ni * t_len + tj + 1) * d];
                        for dd in 0..d {
                            out[o_base + dd] += w * v_row[dd];
                        }
                    }
                }
            }

            layer_k_rows.push(head_major_to_rows(&k, n, t_len, d));
            layer_v_rows.push(head_major_to_rows(&v, n, t_len, d));

            for i in 0..state.len() {
                state[i] += out[i];
            }
            if li + 1 == self.layers.len() {
                final_q = q;
                final_k = k;
                final_v = v;
            }
        }

        ChunkActivations {
            states: state,
            layer_k_rows,
            layer_v_rows,
            q: final_q,
            k: final_k,
            v: final_v,
        }
    }

    /// Projection of `[T, d_model]` states into head-major `[N, T, D]`.
    fn project(&self, state: &[f64], w: &[f64], t_len: usize) -> Vec<f64> {
        let dm = self.d_model();
        let (n, d) = (self.cfg.heads, self.cfg.head_dim);
        let mut merged = vec![0.0; t_len * dm];
        for t in 0..t_len {
            let x_row = &state[t * dm..(t + 1) * dm];
            let out_row = &mut merged[t * dm..(t + 1) * dm];
            for (m, &xm) in x_row.iter().enumerate() {
                let w_row = &w[m * dm..(m + 1) * dm];
                for o in 0..dm {
                    out_row[o] += xm * w_row[o];
                }
            }
        }
        // Scatter merged [T, N*D] into head-major [N, T, D].
        let mut head_major = vec![0.0; n * t_len * d];
        for ni in 0..n {
            for t in 0..t_len {
                let src = &merged[t * dm + ni * d..t * dm + (ni + 1) * d];
                head_major[(ni * t_len + t) * d..(ni * t_len + t + 1) * d].copy_from_slice(src);
            }
        }
        head_major
    }

    fn apply_planting(&self, q: &mut [f64], k: &mut [f64], token_ids: &[u64], t_len: usize) {
        let Some(planted) = &self.planted else {
            return;
        };
        let (n, d) = (self.cfg.heads, self.cfg.head_dim);
        let coords: Vec<usize> = (0..planted.ids.len()).map(|m| m % d).collect();
        let mut distinct = coords.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let bias = planted.query_gain / distinct.len() as f64;
        for ni in 0..n {
            for (t, &id) in token_ids.iter().enumerate() {
                let q_row = &mut q[(ni * t_len + t) * d..(ni * t_len + t + 1) * d];
                for &c in &distinct {
                    q_row[c] += bias;
                }
                if let Some(m) = planted.ids.iter().position(|&a| a == id) {
                    let k_row = &mut k[(ni * t_len + t) * d..(ni * t_len + t + 1) * d];
                    k_row.fill(0.0);
                    k_row[coords[m]] = planted.key_boost;
                }
            }
        }
    }
}

/// Head-major `[N, T, D]` to per-token rows `[T, N*D]` (cache layout).
pub fn head_major_to_rows(data: &[f64], n: usize, t_len: usize, d: usize) -> Vec<f64> {
    let mut rows = vec![0.0; t_len * n * d];
    for ni in 0..n {
        for t in 0..t_len {
            let src = &data[(ni * t_len + t) * d..(ni * t_len + t + 1) * d];
            rows[t * n * d + ni * d..t * n * d + (ni + 1) * d].copy_from_slice(src);
        }
    }
    rows
}
