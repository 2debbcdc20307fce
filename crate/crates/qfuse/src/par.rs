//! Data-parallel map helpers. With the `parallel` feature the indexed maps
//! run on the rayon pool; otherwise they fall back to sequential loops with
//! identical output order. Reductions over the results must happen in index
//! order so runs stay bit-reproducible regardless of thread count.

/// Map `f` over `0..n`, preserving index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, preserving index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    (0..n).map(f).collect()
}

/// Sequential twin of [`map_indexed`], always available so benchmarks can
/// compare the two paths directly.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Half-open index ranges of at most `chunk` elements covering `0..n`.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    assert!(chunk > 0);
    (0..n.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let p = map_indexed(100, |i| i * i);
        let s = map_indexed_seq(100, |i| i * i);
        assert_eq!(p, s);
    }

    #[test]
    fn chunks_cover_range_exactly() {
        let ranges = chunk_ranges(10, 3);
        assert_eq!(ranges, vec![0..3, 3..6, 6..9, 9..10]);
        let flat: Vec<usize> = ranges.into_iter().flatten().collect();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
    }
}
