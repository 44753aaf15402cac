//! Brute-force oracles for the diagnostics: top-k overlap by full argsort
//! and set intersection, retained mass by a masked double sum, and the
//! constructed block-diagonal histogram case.

use pafu_core::attention::AttentionWeights;
use pafu_core::metrics::{argmax_histogram, retained_attention_mass, topk_overlap};
use pafu_core::rng::Rng;
use pafu_core::tensor::Tensor;

// Full argsort under the tie rule (score desc, index desc), take k, count
// the intersection by scanning.
fn oracle_overlap(a: &[f64], b: &[f64], k: usize) -> f64 {
    let top = |v: &[f64]| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[y].partial_cmp(&v[x]).unwrap().then(y.cmp(&x)));
        idx.truncate(k);
        idx
    };
    let ta = top(a);
    let tb = top(b);
    let mut hits = 0;
    for i in &ta {
        if tb.contains(i) {
            hits += 1;
        }
    }
    hits as f64 / k as f64
}

#[test]
fn overlap_matches_set_intersection_oracle() {
    let mut rng = Rng::new(55);
    for _ in 0..50 {
        let l = 20;
        // Coarse values force ties through the tie rule.
        let a: Vec<f64> = (0..l).map(|_| (rng.next_below(6) as f64) / 6.0).collect();
        let b: Vec<f64> = (0..l).map(|_| (rng.next_below(6) as f64) / 6.0).collect();
        let k = 10;
        assert_eq!(topk_overlap(&a, &b, k).unwrap(), oracle_overlap(&a, &b, k));
    }
}

#[test]
fn retained_mass_matches_masked_sum_oracle() {
    let mut rng = Rng::new(56);
    for _ in 0..20 {
        let m = 3 + rng.next_below(10);
        let rows_n = 1 + rng.next_below(5);
        let candidates: Vec<u64> = (0..m as u64).map(|i| i * 3 + 1).collect();
        let p: Vec<f64> = (0..rows_n * m).map(|_| rng.next_f64()).collect();
        let retained: Vec<u64> = candidates
            .iter()
            .copied()
            .filter(|_| rng.next_f64() < 0.5)
            .collect();

        let mut kept = 0.0;
        let mut total = 0.0;
        for r in 0..rows_n {
            for (j, &id) in candidates.iter().enumerate() {
                let w = p[r * m + j];
                total += w;
                if retained.contains(&id) {
                    kept += w;
                }
            }
        }
        let want = kept / total;
        let got = retained_attention_mass(&p, &candidates, &retained).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn block_diagonal_attention_fills_two_diagonal_bins() {
    // L = 14 with two 7-token blocks: every query's argmax stays in its own
    // block, so all counts land on the two diagonal histogram bins its
    // block spans.
    let l = 14;
    let mut rng = Rng::new(57);
    let mut p = Tensor::zeros(&[1, 1, l, l]);
    for i in 0..l {
        let block = i / 7;
        let peak = block * 7 + rng.next_below(7);
        *p.at_mut(&[0, 0, i, peak]) = 1.0;
    }
    let p = AttentionWeights::new(p).unwrap();
    let hist = argmax_histogram(&p).unwrap();
    assert_eq!(hist.total(), l as u64);
    // Each bin covers exactly 2 indices, so block 0 (indices 0..6) touches
    // bins 0..=3 (bin 3 straddles the boundary) and block 1 (7..13) bins
    // 3..=6. Every count must land inside one of the two diagonal
    // bin-blocks: (0..=3 x 0..=3) union (3..=6 x 3..=6).
    let in_block = |bin: usize, block: usize| -> bool {
        (0..l).any(|idx| idx / 7 == block && 7 * idx / l == bin)
    };
    let counts = hist.counts();
    let mut inside = 0u64;
    for (qb, row) in counts.iter().enumerate() {
        for (kb, &c) in row.iter().enumerate() {
            let diagonal =
                (0..2).any(|block| in_block(qb, block) && in_block(kb, block));
            if diagonal {
                inside += c;
            } else {
                assert_eq!(c, 0, "off-block count at bin ({qb}, {kb})");
            }
        }
    }
    assert_eq!(inside, l as u64);
}
