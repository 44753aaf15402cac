//! Ranking primitives with the crate-wide deterministic tie rules.
//!
//! Two rules are used everywhere scores are ordered:
//! - top-k selection prefers the HIGHER index on equal scores (more recent
//!   token wins),
//! - argmax prefers the LOWER index on equal scores.

/// Indices of the `k` largest values. Ties broken toward the higher index.
///
/// Returned indices are sorted ascending, which callers rely on when the
/// index order mirrors token order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    debug_assert!(k <= values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Descending by value, then descending by index.
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.cmp(&a))
    });
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

/// Index of the largest value; ties broken toward the lower index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    debug_assert!(!values.is_empty());
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_basic() {
        let v = [0.1, 0.9, 0.5, 0.7, 0.3];
        assert_eq!(top_k_indices(&v, 2), vec![1, 3]);
        assert_eq!(top_k_indices(&v, 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(top_k_indices(&v, 0), Vec::<usize>::new());
    }

    #[test]
    fn top_k_prefers_higher_index_on_tie() {
        let v = [0.5, 0.5, 0.5, 0.5];
        assert_eq!(top_k_indices(&v, 2), vec![2, 3]);
    }

    #[test]
    fn argmax_prefers_lower_index_on_tie() {
        let v = [0.25, 0.25, 0.25, 0.25];
        assert_eq!(argmax_lowest(&v), 0);
        let w = [0.1, 0.9, 0.9];
        assert_eq!(argmax_lowest(&w), 1);
    }
}
