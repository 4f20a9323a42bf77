//! Order-independent parallel map-reduce.
//!
//! Floating-point sums depend on association order, so results are combined
//! along a tree whose shape depends only on the input length. The work is
//! spread over rayon, but the bits of the result do not depend on the number
//! of threads.

const LEAF: usize = 8;

/// Map `0..n` in parallel and fold pairwise along a fixed binary tree.
/// Returns `None` for `n == 0`.
pub fn tree_map_reduce<T, M, R>(n: usize, map: M, combine: R) -> Option<T>
where
    T: Send,
    M: Fn(usize) -> T + Sync,
    R: Fn(T, T) -> T + Sync,
{
    if n == 0 {
        return None;
    }
    Some(node(0, n, &map, &combine))
}

fn node<T, M, R>(lo: usize, hi: usize, map: &M, combine: &R) -> T
where
    T: Send,
    M: Fn(usize) -> T + Sync,
    R: Fn(T, T) -> T + Sync,
{
    if hi - lo <= LEAF {
        let mut acc = map(lo);
        for i in lo + 1..hi {
            acc = combine(acc, map(i));
        }
        return acc;
    }
    let mid = lo + (hi - lo) / 2;
    let (a, b) = rayon::join(|| node(lo, mid, map, combine), || node(mid, hi, map, combine));
    combine(a, b)
}

/// Parallel map collected in index order.
pub fn ordered_map<T, M>(n: usize, map: M) -> Vec<T>
where
    T: Send,
    M: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(map).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_sum_is_bitwise_stable_across_pools() {
        let f = |i: usize| ((i as f64) * 0.731).sin() * 1e-3 + 1.0 / (i as f64 + 1.0);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| tree_map_reduce(1013, f, |a, b| a + b).unwrap())
        };
        let a = run(1);
        assert_eq!(a.to_bits(), run(3).to_bits());
        assert_eq!(a.to_bits(), run(8).to_bits());
        let serial: f64 = (0..1013).map(f).sum();
        assert!((a - serial).abs() < 1e-12);
    }

    #[test]
    fn empty_input() {
        assert!(tree_map_reduce(0, |i| i, |a, b| a + b).is_none());
        assert_eq!(tree_map_reduce(1, |i| i + 5, |a, b| a + b), Some(5));
    }
}
