//! Diagnostics over attention weights and score vectors: the query-argmax
//! histogram, top-k index overlap, and the attention mass a cache policy
//! preserved.

use std::collections::HashSet;

use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::rank::{argmax_lowest, top_k_indices};

pub const HISTOGRAM_BINS: usize = 7;

/// 7x7 grid of (query bin, key bin) argmax counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix7x7 {
    counts: [[u64; HISTOGRAM_BINS]; HISTOGRAM_BINS],
}

impl CountMatrix7x7 {
    pub fn counts(&self) -> &[[u64; HISTOGRAM_BINS]; HISTOGRAM_BINS] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal_total(&self) -> u64 {
        (0..HISTOGRAM_BINS).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.counts {
            let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// For every (batch, head, query) find the argmax key (ties to the lowest
/// key index) and bin the (query, key) pair into a 7x7 grid by uniform
/// partition of [0, L): bin = floor(7 * idx / L).
pub fn argmax_histogram(p: &AttentionWeights) -> Result<CountMatrix7x7> {
    let (b, n, l_q, l_k) = (p.batch(), p.heads(), p.q_len(), p.k_len());
    if l_q != l_k {
        return Err(Error::Shape(format!(
            "argmax histogram needs a square attention matrix, got {l_q} x {l_k}"
        )));
    }
    let l = l_q;
    if l < HISTOGRAM_BINS {
        return Err(Error::Argument(format!(
            "sequence length {l} is below {HISTOGRAM_BINS}; bins would be empty by construction"
        )));
    }
    let pd = p.tensor().data();
    let mut counts = [[0u64; HISTOGRAM_BINS]; HISTOGRAM_BINS];
    for bi in 0..b {
        for ni in 0..n {
            let base = (bi * n + ni) * l * l;
            for i in 0..l {
                let row = &pd[base + i * l..base + (i + 1) * l];
                let j = argmax_lowest(row);
                let qbin = HISTOGRAM_BINS * i / l;
                let kbin = HISTOGRAM_BINS * j / l;
                counts[qbin][kbin] += 1;
            }
        }
    }
    Ok(CountMatrix7x7 { counts })
}

/// |top-k(a) intersect top-k(b)| / k under the deterministic tie rule.
pub fn topk_overlap(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "score vectors have different lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if k < 1 || k > a.len() {
        return Err(Error::Argument(format!(
            "k = {k} out of range 1..={}",
            a.len()
        )));
    }
    let ta: HashSet<usize> = top_k_indices(a, k).into_iter().collect();
    let tb: HashSet<usize> = top_k_indices(b, k).into_iter().collect();
    Ok(ta.intersection(&tb).count() as f64 / k as f64)
}

/// Fraction of the attention mass in `p_rows` that lands on retained keys.
///
/// `p_rows` are query rows over the pre-eviction candidate key set (row
/// length = candidates.len()), `candidates` names the key column order, and
/// `retained` must be a subset of the candidates.
pub fn retained_attention_mass(
    p_rows: &[f64],
    candidates: &[u64],
    retained: &[u64],
) -> Result<f64> {
    if candidates.is_empty() || !p_rows.len().is_multiple_of(candidates.len()) {
        return Err(Error::Shape(format!(
            "attention rows of {} values do not divide into {} candidate columns",
            p_rows.len(),
            candidates.len()
        )));
    }
    let retained_set: HashSet<u64> = retained.iter().copied().collect();
    for id in &retained_set {
        if !candidates.contains(id) {
            return Err(Error::Argument(format!(
                "retained token {id} is not in the candidate set"
            )));
        }
    }
    let cols = candidates.len();
    let mut total = 0.0;
    let mut kept = 0.0;
    for row in p_rows.chunks(cols) {
        for (j, &w) in row.iter().enumerate() {
            total += w;
            if retained_set.contains(&candidates[j]) {
                kept += w;
            }
        }
    }
    if total == 0.0 {
        return Err(Error::Argument("attention rows carry zero mass".into()));
    }
    Ok(kept / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_attention_fills_histogram_diagonal() {
        let l = 7;
        let mut p = Tensor::zeros(&[1, 1, l, l]);
        for i in 0..l {
            *p.at_mut(&[0, 0, i, i]) = 1.0;
        }
        let p = AttentionWeights::new(p).unwrap();
        let h = argmax_histogram(&p).unwrap();
        for i in 0..HISTOGRAM_BINS {
            for j in 0..HISTOGRAM_BINS {
                assert_eq!(h.counts()[i][j], u64::from(i == j));
            }
        }
        assert_eq!(h.total(), 7);
    }

    #[test]
    fn uniform_attention_ties_to_first_column_bin() {
        let l = 14;
        let mut p = Tensor::zeros(&[1, 1, l, l]);
        p.data_mut().fill(1.0 / l as f64);
        let p = AttentionWeights::new(p).unwrap();
        let h = argmax_histogram(&p).unwrap();
        let col0: u64 = (0..HISTOGRAM_BINS).map(|i| h.counts()[i][0]).sum();
        assert_eq!(col0, h.total());
        assert_eq!(h.total(), l as u64);
    }

    #[test]
    fn histogram_conserves_count() {
        let mut rng = crate::rng::Rng::new(17);
        let q = Tensor::randn(&[2, 3, 10, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[2, 3, 10, 4], 1.0, &mut rng);
        let batch = crate::attention::AttentionBatch::from_qk(q, k).unwrap();
        let p = crate::attention::attention_weights(&batch).unwrap();
        let h = argmax_histogram(&p).unwrap();
        assert_eq!(h.total(), 2 * 3 * 10);
    }

    #[test]
    fn histogram_rejects_short_sequences() {
        let mut p = Tensor::zeros(&[1, 1, 6, 6]);
        for i in 0..6 {
            *p.at_mut(&[0, 0, i, i]) = 1.0;
        }
        let p = AttentionWeights::new(p).unwrap();
        assert!(matches!(argmax_histogram(&p), Err(Error::Argument(_))));
    }

    #[test]
    fn overlap_of_identical_vectors_is_one() {
        let a = [0.1, 0.9, 0.3, 0.7];
        assert_eq!(topk_overlap(&a, &a, 2).unwrap(), 1.0);
    }

    #[test]
    fn overlap_whole_set_is_one_even_when_reversed() {
        let a = [0.1, 0.2, 0.3, 0.4];
        let b = [0.4, 0.3, 0.2, 0.1];
        assert_eq!(topk_overlap(&a, &b, 4).unwrap(), 1.0);
    }

    #[test]
    fn overlap_is_symmetric() {
        let mut rng = crate::rng::Rng::new(23);
        for _ in 0..20 {
            let a: Vec<f64> = (0..20).map(|_| rng.next_f64()).collect();
            let b: Vec<f64> = (0..20).map(|_| rng.next_f64()).collect();
            let k = 1 + rng.next_below(20);
            assert_eq!(
                topk_overlap(&a, &b, k).unwrap(),
                topk_overlap(&b, &a, k).unwrap()
            );
        }
    }

    #[test]
    fn overlap_rejects_bad_k() {
        let a = [0.1, 0.2];
        assert!(matches!(topk_overlap(&a, &a, 0), Err(Error::Argument(_))));
        assert!(matches!(topk_overlap(&a, &a, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn retained_mass_bounds() {
        let candidates = [10u64, 11, 12];
        let rows = [0.2, 0.3, 0.5, 0.6, 0.1, 0.3];
        let all = retained_attention_mass(&rows, &candidates, &candidates).unwrap();
        assert_eq!(all, 1.0);
        let none = retained_attention_mass(&rows, &candidates, &[]).unwrap();
        assert_eq!(none, 0.0);
        let some = retained_attention_mass(&rows, &candidates, &[12]).unwrap();
        assert!(((0.5 + 0.3) / 2.0 - some).abs() < 1e-15);
    }

    #[test]
    fn retained_mass_rejects_unknown_ids() {
        let candidates = [1u64, 2];
        let rows = [0.5, 0.5];
        assert!(matches!(
            retained_attention_mass(&rows, &candidates, &[3]),
            Err(Error::Argument(_))
        ));
    }
}
