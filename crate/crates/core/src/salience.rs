//! Salience scoring over attention weights.
//!
//! A square attention matrix is decomposed at block granularity into three
//! components per key j: attention arriving from queries in later blocks
//! (`low`), from the key's own block (`diag`), and from earlier blocks
//! (`up`). Each component takes the maximum attention weight over its query
//! set per head, the per-head maxima are averaged across heads, and the
//! per-key score is the mean of whichever components are non-empty. Keys in
//! the first block have no `up` component and keys in the last block have no
//! `low` component; those are held as an explicit empty sentinel and simply
//! excluded from the mean, never counted as zero.
//!
//! Two implementations compute the same scores:
//! - [`salience_scores`]: the dense oracle, materializing the full `L x L`
//!   attention matrix;
//! - [`blockwise_salience`]: a streaming pass over query-row chunks whose
//!   attention working set is `O(chunk_len * L)` instead of `O(L^2)`.

use crate::attention::{attention_weights, AttentionBatch, AttentionWeights};
use crate::error::{Error, Result};
use crate::tensor::{dot, softmax_rows};

/// Block layout of a token sequence. The last block may be partial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGeometry {
    seq_len: usize,
    block_len: usize,
}

impl BlockGeometry {
    pub fn new(seq_len: usize, block_len: usize) -> Result<Self> {
        if seq_len < 1 {
            return Err(Error::Argument("seq_len must be >= 1".into()));
        }
        if block_len < 1 {
            return Err(Error::Argument("block_len must be >= 1".into()));
        }
        Ok(BlockGeometry { seq_len, block_len })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn num_blocks(&self) -> usize {
        self.seq_len.div_ceil(self.block_len)
    }

    #[inline]
    pub fn block_of(&self, i: usize) -> usize {
        i / self.block_len
    }
}

/// Block index and clamped [lower, upper) bounds of the block containing
/// token `i`.
pub fn block_bounds(i: usize, geom: &BlockGeometry) -> Result<(usize, usize, usize)> {
    if i >= geom.seq_len {
        return Err(Error::Index(format!(
            "token index {i} out of sequence length {}",
            geom.seq_len
        )));
    }
    let block = i / geom.block_len;
    let lower = block * geom.block_len;
    let upper = (lower + geom.block_len).min(geom.seq_len);
    Ok((block, lower, upper))
}

/// Order of the head reduction relative to the per-component query maximum.
///
/// `MaxThenMean` takes the max over queries per head and then averages the
/// per-head maxima; `MeanThenMax` averages the heads first and maximizes the
/// head-mean rows. The former is the normative definition; the latter is
/// kept for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadReduce {
    #[default]
    MaxThenMean,
    MeanThenMax,
}

/// Per-key component values of shape `[B, L]` each. `None` marks a key for
/// which the component's query set is empty.
#[derive(Debug, Clone)]
pub struct ComponentMaxima {
    batch: usize,
    seq_len: usize,
    pub low: Vec<Option<f64>>,
    pub diag: Vec<Option<f64>>,
    pub up: Vec<Option<f64>>,
}

impl ComponentMaxima {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    pub fn low_at(&self, b: usize, j: usize) -> Option<f64> {
        self.low[b * self.seq_len + j]
    }

    #[inline]
    pub fn diag_at(&self, b: usize, j: usize) -> Option<f64> {
        self.diag[b * self.seq_len + j]
    }

    #[inline]
    pub fn up_at(&self, b: usize, j: usize) -> Option<f64> {
        self.up[b * self.seq_len + j]
    }
}

/// One scalar salience score per token, shape `[B, L]`, each in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceVector {
    batch: usize,
    seq_len: usize,
    data: Vec<f64>,
}

impl SalienceVector {
    pub fn new(batch: usize, seq_len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * seq_len {
            return Err(Error::Shape(format!(
                "salience data length {} != {batch} x {seq_len}",
                data.len()
            )));
        }
        for (i, &s) in data.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("salience score at index {i}")));
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Argument(format!(
                    "salience score {s} at index {i} out of [0, 1]"
                )));
            }
        }
        Ok(SalienceVector {
            batch,
            seq_len,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.data[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Working-set accounting for the dense/streaming comparison: the largest
/// attention-probability buffer the pass kept alive at once, in elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamStats {
    pub peak_row_elems: usize,
}

// Classification of a (query block, key) pair. Data-independent, so empty
// component sets are structural and identical across heads.
#[inline]
fn component_of(key_block: usize, query_block: usize) -> usize {
    use std::cmp::Ordering::*;
    match key_block.cmp(&query_block) {
        Less => COMP_LOW,    // key before the query's block: j < l(i)
        Equal => COMP_DIAG,  // same block: l(i) <= j < h(i)
        Greater => COMP_UP,  // key after the query's block: j >= h(i)
    }
}

const COMP_LOW: usize = 0;
const COMP_DIAG: usize = 1;
const COMP_UP: usize = 2;

/// Per-component maxima over the query dimension of a dense square
/// attention matrix, head-aggregated per [`HeadReduce::MaxThenMean`].
pub fn component_maxima(p: &AttentionWeights, geom: &BlockGeometry) -> Result<ComponentMaxima> {
    component_maxima_with(p, geom, HeadReduce::MaxThenMean)
}

pub fn component_maxima_with(
    p: &AttentionWeights,
    geom: &BlockGeometry,
    reduce: HeadReduce,
) -> Result<ComponentMaxima> {
    let (b, n, l_q, l_k) = (p.batch(), p.heads(), p.q_len(), p.k_len());
    if l_q != l_k {
        return Err(Error::Shape(format!(
            "component maxima need a square attention matrix, got {l_q} x {l_k}"
        )));
    }
    if l_q != geom.seq_len {
        return Err(Error::Shape(format!(
            "attention length {l_q} != geometry seq_len {}",
            geom.seq_len
        )));
    }
    let l = l_q;
    let pd = p.tensor().data();

    let mut comps = [
        vec![None; b * l],
        vec![None; b * l],
        vec![None; b * l],
    ];

    match reduce {
        HeadReduce::MaxThenMean => {
            // running[c][n * l + j]: per-head max of component c for key j
            for bi in 0..b {
                let mut running = [
                    vec![f64::NEG_INFINITY; n * l],
                    vec![f64::NEG_INFINITY; n * l],
                    vec![f64::NEG_INFINITY; n * l],
                ];
                for ni in 0..n {
                    let base = (bi * n + ni) * l * l;
                    for i in 0..l {
                        let qb = geom.block_of(i);
                        let row = &pd[base + i * l..base + (i + 1) * l];
                        for (j, &w) in row.iter().enumerate() {
                            let c = component_of(geom.block_of(j), qb);
                            let slot = &mut running[c][ni * l + j];
                            if w > *slot {
                                *slot = w;
                            }
                        }
                    }
                }
                finalize_head_mean(&running, n, l, bi, &mut comps);
            }
        }
        HeadReduce::MeanThenMax => {
            // running[c][j]: max over queries of the head-mean row
            for bi in 0..b {
                let mut running = [
                    vec![f64::NEG_INFINITY; l],
                    vec![f64::NEG_INFINITY; l],
                    vec![f64::NEG_INFINITY; l],
                ];
                let mut mean_row = vec![0.0; l];
                for i in 0..l {
                    mean_row.fill(0.0);
                    for ni in 0..n {
                        let base = (bi * n + ni) * l * l + i * l;
                        for j in 0..l {
                            mean_row[j] += pd[base + j];
                        }
                    }
                    let qb = geom.block_of(i);
                    for j in 0..l {
                        let m = mean_row[j] / n as f64;
                        let c = component_of(geom.block_of(j), qb);
                        let slot = &mut running[c][j];
                        if m > *slot {
                            *slot = m;
                        }
                    }
                }
                finalize_plain(&running, l, bi, &mut comps);
            }
        }
    }

    let [low, diag, up] = comps;
    Ok(ComponentMaxima {
        batch: b,
        seq_len: l,
        low,
        diag,
        up,
    })
}

fn finalize_head_mean(
    running: &[Vec<f64>; 3],
    n: usize,
    l: usize,
    bi: usize,
    comps: &mut [Vec<Option<f64>>; 3],
) {
    for c in 0..3 {
        for j in 0..l {
            // Empty sets are structural: head 0 untouched means all untouched.
            if running[c][j] == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for ni in 0..n {
                sum += running[c][ni * l + j];
            }
            comps[c][bi * l + j] = Some(sum / n as f64);
        }
    }
}

fn finalize_plain(running: &[Vec<f64>; 3], l: usize, bi: usize, comps: &mut [Vec<Option<f64>>; 3]) {
    for c in 0..3 {
        for j in 0..l {
            if running[c][j] != f64::NEG_INFINITY {
                comps[c][bi * l + j] = Some(running[c][j]);
            }
        }
    }
}

/// Mean of the non-empty components per key. For a sequence that is a
/// multiple of the block length with at least two blocks this is exactly:
/// first block (diag+low)/2, interior (up+diag+low)/3, last block
/// (diag+up)/2.
pub fn fuse_salience(cm: &ComponentMaxima, geom: &BlockGeometry) -> Result<SalienceVector> {
    if cm.seq_len != geom.seq_len {
        return Err(Error::Shape(format!(
            "component maxima length {} != geometry seq_len {}",
            cm.seq_len, geom.seq_len
        )));
    }
    let (b, l) = (cm.batch, cm.seq_len);
    let mut data = Vec::with_capacity(b * l);
    for bi in 0..b {
        for j in 0..l {
            let mut sum = 0.0;
            let mut count = 0;
            for v in [cm.low_at(bi, j), cm.diag_at(bi, j), cm.up_at(bi, j)]
                .into_iter()
                .flatten()
            {
                sum += v;
                count += 1;
            }
            debug_assert!(count > 0, "diag component can never be empty");
            data.push(sum / count as f64);
        }
    }
    SalienceVector::new(b, l, data)
}

/// Dense salience oracle: full attention weights, component maxima, fusion.
pub fn salience_scores(batch: &AttentionBatch, geom: &BlockGeometry) -> Result<SalienceVector> {
    salience_scores_with(batch, geom, HeadReduce::MaxThenMean).map(|(s, _)| s)
}

pub fn salience_scores_with(
    batch: &AttentionBatch,
    geom: &BlockGeometry,
    reduce: HeadReduce,
) -> Result<(SalienceVector, StreamStats)> {
    if batch.q_len() != batch.k_len() {
        return Err(Error::Shape(format!(
            "salience needs equal query/key lengths, got {} and {}",
            batch.q_len(),
            batch.k_len()
        )));
    }
    if batch.q_len() != geom.seq_len {
        return Err(Error::Shape(format!(
            "sequence length {} != geometry seq_len {}",
            batch.q_len(),
            geom.seq_len
        )));
    }
    let p = attention_weights(batch)?;
    let peak = p.tensor().len();
    let cm = component_maxima_with(&p, geom, reduce)?;
    Ok((fuse_salience(&cm, geom)?, StreamStats { peak_row_elems: peak }))
}

/// Streaming salience: identical scores to [`salience_scores`] computed
/// from query-row chunks of at most `chunk_len` rows. Keys are never
/// chunked, so each row's softmax is exact; a chunk that straddles a block
/// boundary is split internally so every sub-chunk lies in one query block.
pub fn blockwise_salience(
    batch: &AttentionBatch,
    geom: &BlockGeometry,
    chunk_len: usize,
) -> Result<SalienceVector> {
    blockwise_salience_with(batch, geom, chunk_len, HeadReduce::MaxThenMean).map(|(s, _)| s)
}

pub fn blockwise_salience_with(
    batch: &AttentionBatch,
    geom: &BlockGeometry,
    chunk_len: usize,
    reduce: HeadReduce,
) -> Result<(SalienceVector, StreamStats)> {
    if chunk_len < 1 {
        return Err(Error::Argument("chunk_len must be >= 1".into()));
    }
    if batch.q_len() != batch.k_len() {
        return Err(Error::Shape(format!(
            "salience needs equal query/key lengths, got {} and {}",
            batch.q_len(),
            batch.k_len()
        )));
    }
    if batch.q_len() != geom.seq_len {
        return Err(Error::Shape(format!(
            "sequence length {} != geometry seq_len {}",
            batch.q_len(),
            geom.seq_len
        )));
    }

    let (b, n, l, d) = (
        batch.batch(),
        batch.heads(),
        batch.q_len(),
        batch.head_dim(),
    );
    let scale = 1.0 / (d as f64).sqrt();
    let q = batch.q().data();
    let k = batch.k().data();

    let mut comps = [
        vec![None; b * l],
        vec![None; b * l],
        vec![None; b * l],
    ];
    let mut peak = 0usize;
    // Attention rows for one chunk across all heads: n * rows * l.
    let mut buf: Vec<f64> = Vec::new();

    for bi in 0..b {
        let mut run_head: [Vec<f64>; 3];
        let mut run_mean: [Vec<f64>; 3];
        match reduce {
            HeadReduce::MaxThenMean => {
                run_head = [
                    vec![f64::NEG_INFINITY; n * l],
                    vec![f64::NEG_INFINITY; n * l],
                    vec![f64::NEG_INFINITY; n * l],
                ];
                run_mean = [Vec::new(), Vec::new(), Vec::new()];
            }
            HeadReduce::MeanThenMax => {
                run_head = [Vec::new(), Vec::new(), Vec::new()];
                run_mean = [
                    vec![f64::NEG_INFINITY; l],
                    vec![f64::NEG_INFINITY; l],
                    vec![f64::NEG_INFINITY; l],
                ];
            }
        }

        let mut start = 0;
        while start < l {
            let chunk_end = (start + chunk_len).min(l);
            // Split at query-block boundaries.
            let mut s = start;
            while s < chunk_end {
                let qb = geom.block_of(s);
                let block_end = ((qb + 1) * geom.block_len).min(l);
                let e = chunk_end.min(block_end);
                let rows = e - s;

                buf.clear();
                buf.resize(n * rows * l, 0.0);
                peak = peak.max(buf.len());

                for ni in 0..n {
                    let q_base = (bi * n + ni) * l * d;
                    let k_base = (bi * n + ni) * l * d;
                    for (r, i) in (s..e).enumerate() {
                        let q_row = &q[q_base + i * d..q_base + (i + 1) * d];
                        let out = &mut buf[(ni * rows + r) * l..(ni * rows + r + 1) * l];
                        for (j, slot) in out.iter_mut().enumerate() {
                            let k_row = &k[k_base + j * d..k_base + (j + 1) * d];
                            *slot = dot(q_row, k_row) * scale;
                        }
                        softmax_rows(out, l);
                    }
                }

                // All rows of this sub-chunk live in query block qb, so the
                // key axis splits into fixed component ranges.
                let lo = qb * geom.block_len;
                let hi = (lo + geom.block_len).min(l);
                match reduce {
                    HeadReduce::MaxThenMean => {
                        for ni in 0..n {
                            for r in 0..rows {
                                let row = &buf[(ni * rows + r) * l..(ni * rows + r + 1) * l];
                                update_max(&mut run_head[COMP_LOW][ni * l..], &row[..lo], 0);
                                update_max(&mut run_head[COMP_DIAG][ni * l..], &row[lo..hi], lo);
                                update_max(&mut run_head[COMP_UP][ni * l..], &row[hi..], hi);
                            }
                        }
                    }
                    HeadReduce::MeanThenMax => {
                        let mut mean_row = vec![0.0; l];
                        for r in 0..rows {
                            mean_row.fill(0.0);
                            for ni in 0..n {
                                let row = &buf[(ni * rows + r) * l..(ni * rows + r + 1) * l];
                                for j in 0..l {
                                    mean_row[j] += row[j];
                                }
                            }
                            for v in mean_row.iter_mut() {
                                *v /= n as f64;
                            }
                            update_max(&mut run_mean[COMP_LOW], &mean_row[..lo], 0);
                            update_max(&mut run_mean[COMP_DIAG], &mean_row[lo..hi], lo);
                            update_max(&mut run_mean[COMP_UP], &mean_row[hi..], hi);
                        }
                    }
                }

                s = e;
            }
            start = chunk_end;
        }

        match reduce {
            HeadReduce::MaxThenMean => finalize_head_mean(&run_head, n, l, bi, &mut comps),
            HeadReduce::MeanThenMax => finalize_plain(&run_mean, l, bi, &mut comps),
        }
    }

    let [low, diag, up] = comps;
    let cm = ComponentMaxima {
        batch: b,
        seq_len: l,
        low,
        diag,
        up,
    };
    Ok((
        fuse_salience(&cm, geom)?,
        StreamStats {
            peak_row_elems: peak,
        },
    ))
}

#[inline]
fn update_max(running: &mut [f64], values: &[f64], offset: usize) {
    for (j, &v) in values.iter().enumerate() {
        let slot = &mut running[offset + j];
        if v > *slot {
            *slot = v;
        }
    }
}
