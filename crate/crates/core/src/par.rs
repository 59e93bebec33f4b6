//! Sequential / rayon switch for the data-parallel loops.
//!
//! Every helper preserves input order, so reductions performed by the caller
//! over the returned vectors are deterministic regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Whether the crate was built with rayon support.
pub const PARALLEL: bool = cfg!(feature = "parallel");

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Order-preserving map over fixed-size chunks of a slice.
///
/// Chunk boundaries depend only on `chunk`, never on the thread pool.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        items.par_chunks(chunk).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.chunks(chunk).map(f).collect()
    }
}

/// Order-preserving map over an index range.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_keep_order() {
        let xs: Vec<u32> = (0..103).collect();
        let sums = map_chunks(&xs, 10, |c| c.iter().sum::<u32>());
        assert_eq!(sums.len(), 11);
        assert_eq!(sums[0], 45);
        assert_eq!(sums[10], 100 + 101 + 102);
        assert_eq!(map(&xs, |x| x * 2)[50], 100);
        assert_eq!(map_range(4, |i| i * i), vec![0, 1, 4, 9]);
    }
}
