//! Brute-force oracles for cache retention: after every append the cache's
//! retained set must equal a full sort of all candidate scores under the
//! tie rule, FIFO must equal a list-replay window, and the capacity/sync
//! invariants must hold at every observable point.

use pafu_core::cache::{EvictionOrder, KvCache, KvCacheConfig, Policy};
use pafu_core::rng::Rng;

const WIDTH: usize = 2; // heads * head_dim in these tests

fn new_cache(capacity: usize, sink: usize, policy: Policy) -> KvCache {
    KvCache::new(KvCacheConfig {
        capacity,
        sink_count: sink,
        policy,
        order: EvictionOrder::ConcatThenTopK,
        heads: 1,
        head_dim: WIDTH,
        seed: 0,
    })
    .unwrap()
}

// Replays the same appends on a plain list and keeps, at each step, pins
// plus the top (capacity - pins) unpinned by (score desc, id desc).
struct SortOracle {
    items: Vec<(u64, f64, bool)>,
    capacity: usize,
    sink: usize,
    next_id: u64,
}

impl SortOracle {
    fn new(capacity: usize, sink: usize) -> Self {
        SortOracle {
            items: Vec::new(),
            capacity,
            sink,
            next_id: 0,
        }
    }

    fn append(&mut self, scores: &[f64]) -> Vec<u64> {
        for &s in scores {
            let id = self.next_id;
            self.next_id += 1;
            self.items.push((id, s, id < self.sink as u64));
        }
        if self.items.len() > self.capacity {
            let mut keep: Vec<(u64, f64, bool)> =
                self.items.iter().copied().filter(|x| x.2).collect();
            let mut rest: Vec<(u64, f64, bool)> =
                self.items.iter().copied().filter(|x| !x.2).collect();
            rest.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap()
                    .then(b.0.cmp(&a.0))
            });
            rest.truncate(self.capacity - keep.len());
            keep.extend(rest);
            keep.sort_by_key(|x| x.0);
            self.items = keep;
        }
        self.items.iter().map(|x| x.0).collect()
    }
}

#[test]
fn retained_sets_match_full_sort_oracle() {
    let mut rng = Rng::new(42);
    for case in 0..200 {
        let capacity = 4 + rng.next_below(40);
        let sink = rng.next_below(capacity / 2 + 1);
        let mut cache = new_cache(capacity, sink, Policy::Salience);
        let mut oracle = SortOracle::new(capacity, sink);

        let appends = 2 + rng.next_below(12);
        for _ in 0..appends {
            let max_chunk = capacity - sink;
            let chunk_len = 1 + rng.next_below(max_chunk);
            // Coarse scores so ties actually occur.
            let scores: Vec<f64> = (0..chunk_len)
                .map(|_| (rng.next_below(8) as f64) / 8.0)
                .collect();
            let keys = vec![0.0; chunk_len * WIDTH];
            let report = cache.append_chunk(&keys, &keys, &scores).unwrap();
            let want = oracle.append(&scores);
            assert_eq!(
                cache.token_ids(),
                want,
                "case {case}: capacity {capacity} sink {sink}"
            );
            // Report partition covers the candidate set exactly.
            let mut both = report.retained.clone();
            both.extend(&report.evicted);
            both.sort_unstable();
            let candidate_ids: Vec<u64> = report.scores.iter().map(|&(id, _)| id).collect();
            assert_eq!(both, candidate_ids);
            // Invariants at every observable point.
            assert!(cache.len() <= cache.capacity());
            assert_eq!(cache.salience_list().len(), cache.len());
            let ids = cache.token_ids();
            for w in ids.windows(2) {
                assert!(w[0] < w[1], "token ids must increase");
            }
        }
    }
}

#[test]
fn long_score_vectors_hit_the_oracle_too() {
    // One large case in the spirit of the 10_000-token bound.
    let capacity = 5_000;
    let mut cache = new_cache(capacity, 100, Policy::Salience);
    let mut oracle = SortOracle::new(capacity, 100);
    let mut rng = Rng::new(1234);
    for _ in 0..4 {
        let chunk_len = 2_500;
        let scores: Vec<f64> = (0..chunk_len)
            .map(|_| (rng.next_below(256) as f64) / 256.0)
            .collect();
        let keys = vec![0.0; chunk_len * WIDTH];
        cache.append_chunk(&keys, &keys, &scores).unwrap();
        let want = oracle.append(&scores);
        assert_eq!(cache.token_ids(), want);
    }
    assert_eq!(cache.len(), capacity);
}

#[test]
fn fifo_matches_list_replay() {
    let mut rng = Rng::new(77);
    for _ in 0..50 {
        let capacity = 5 + rng.next_below(20);
        let sink = rng.next_below(3.min(capacity));
        let mut cache = new_cache(capacity, sink, Policy::Fifo);

        let mut all_ids: Vec<u64> = Vec::new();
        let mut next = 0u64;
        for _ in 0..10 {
            let chunk_len = 1 + rng.next_below(capacity - sink);
            let scores = vec![0.5; chunk_len];
            let keys = vec![0.0; chunk_len * WIDTH];
            cache.append_chunk(&keys, &keys, &scores).unwrap();
            for _ in 0..chunk_len {
                all_ids.push(next);
                next += 1;
            }

            // Replay oracle: pins plus the most recent unpinned tokens.
            let pins: Vec<u64> = all_ids.iter().copied().filter(|&i| i < sink as u64).collect();
            let unpinned: Vec<u64> =
                all_ids.iter().copied().filter(|&i| i >= sink as u64).collect();
            let take = cache.capacity() - pins.len();
            let start = unpinned.len().saturating_sub(take);
            let mut want = pins;
            want.extend(&unpinned[start..]);
            want.sort_unstable();
            assert_eq!(cache.token_ids(), want);
        }
    }
}

#[test]
fn determinism_across_identical_append_sequences() {
    let run = |policy: Policy| {
        let mut cache = new_cache(10, 2, policy);
        let mut rng = Rng::new(5);
        for _ in 0..8 {
            let chunk_len = 1 + rng.next_below(6);
            let scores: Vec<f64> = (0..chunk_len).map(|_| rng.next_f64()).collect();
            let keys = vec![0.0; chunk_len * WIDTH];
            cache.append_chunk(&keys, &keys, &scores).unwrap();
        }
        cache.token_ids()
    };
    for policy in [Policy::Salience, Policy::Fifo, Policy::Random] {
        assert_eq!(run(policy), run(policy));
    }
}

#[test]
fn select_agrees_with_eviction_report() {
    let mut cache = new_cache(6, 1, Policy::Salience);
    let mut rng = Rng::new(9);
    let mut last_report = None;
    for _ in 0..5 {
        let scores: Vec<f64> = (0..4).map(|_| rng.next_f64()).collect();
        let keys = vec![0.0; 4 * WIDTH];
        last_report = Some(cache.append_chunk(&keys, &keys, &scores).unwrap());
    }
    let report = last_report.unwrap();
    let (_, _, ids) = cache.select();
    assert_eq!(ids, report.retained);
}

#[test]
fn policy_score_reductions_match_loop_oracles() {
    use pafu_core::attention::{attention_weights, AttentionBatch};
    use pafu_core::cache::set_policy_scores;
    use pafu_core::salience::BlockGeometry;
    use pafu_core::tensor::Tensor;

    let (n, l, d) = (3, 9, 4);
    let mut rng = Rng::new(321);
    let q = Tensor::randn(&[1, n, l, d], 1.0, &mut rng);
    let k = Tensor::randn(&[1, n, l, d], 1.0, &mut rng);
    let p = attention_weights(&AttentionBatch::from_qk(q, k).unwrap()).unwrap();
    let geom = BlockGeometry::new(l, 3).unwrap();

    let max = set_policy_scores(Policy::Max, &p, &geom).unwrap();
    let avg = set_policy_scores(Policy::Avg, &p, &geom).unwrap();
    for j in 0..l {
        let mut max_want = 0.0;
        let mut avg_want = 0.0;
        for ni in 0..n {
            let mut col_max = f64::NEG_INFINITY;
            let mut col_sum = 0.0;
            for i in 0..l {
                let w = p.tensor().at(&[0, ni, i, j]);
                col_max = col_max.max(w);
                col_sum += w;
            }
            max_want += col_max;
            avg_want += col_sum / l as f64;
        }
        max_want /= n as f64;
        avg_want /= n as f64;
        assert!((max.row(0)[j] - max_want).abs() < 1e-12);
        assert!((avg.row(0)[j] - avg_want).abs() < 1e-12);
    }
}

#[test]
fn full_scale_concat_arithmetic_4680() {
    // Full-scale numbers: a 4680-token cache holding a full history takes a
    // 4680-token chunk, scores all 9360 candidates, and retains 4680.
    let chunk = 4680;
    let mut cache = new_cache(chunk, 0, Policy::Salience);
    let mut rng = Rng::new(46);
    let keys = vec![0.0; chunk * WIDTH];
    let s1: Vec<f64> = (0..chunk).map(|_| rng.next_f64()).collect();
    let s2: Vec<f64> = (0..chunk).map(|_| rng.next_f64()).collect();
    cache.append_chunk(&keys, &keys, &s1).unwrap();
    let report = cache.append_chunk(&keys, &keys, &s2).unwrap();
    assert_eq!(report.scores.len(), 9360);
    assert_eq!(report.retained.len(), 4680);
    assert_eq!(report.evicted.len(), 4680);
    assert_eq!(cache.len(), 4680);

    let mut pool: Vec<f64> = s1.iter().chain(&s2).copied().collect();
    pool.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let cutoff = pool[chunk - 1];
    assert!(cache.salience_list().iter().all(|&s| s >= cutoff));
}

#[test]
fn full_scale_ratio_two_chunks_to_one() {
    // Cache capacity equal to one chunk: appending a second full chunk
    // doubles the candidates and retention halves them again.
    let chunk = 192;
    let mut cache = new_cache(chunk, 0, Policy::Salience);
    let mut rng = Rng::new(11);
    let keys = vec![0.0; chunk * WIDTH];
    let s1: Vec<f64> = (0..chunk).map(|_| rng.next_f64()).collect();
    let r1 = cache.append_chunk(&keys, &keys, &s1).unwrap();
    assert!(r1.evicted.is_empty());
    assert_eq!(cache.len(), chunk);

    let s2: Vec<f64> = (0..chunk).map(|_| rng.next_f64()).collect();
    let r2 = cache.append_chunk(&keys, &keys, &s2).unwrap();
    assert_eq!(r2.scores.len(), 2 * chunk, "candidates are the concatenation");
    assert_eq!(cache.len(), chunk, "top-capacity tokens survive");
    assert_eq!(r2.evicted.len(), chunk);

    // The survivors are exactly the top-capacity scores of the pool.
    let mut pool: Vec<f64> = s1.iter().chain(&s2).copied().collect();
    pool.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let cutoff = pool[chunk - 1];
    for score in cache.salience_list() {
        assert!(score >= cutoff);
    }
}
