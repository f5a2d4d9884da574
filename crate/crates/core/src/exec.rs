//! Execution-mode knob: data-parallel maps with a sequential fallback.
//!
//! Per-class work (experience computation, kernel queries, ensemble runs) is
//! expressed as an order-preserving indexed map so that both modes produce
//! bitwise-identical results; the only difference is which threads do the
//! arithmetic.

/// How per-class and per-run work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    /// Plain loops on the calling thread.
    Sequential,
    /// Work-stealing thread pool.
    #[cfg(feature = "parallel")]
    Rayon,
}

impl Default for Parallelism {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Parallelism::Rayon
        }
        #[cfg(not(feature = "parallel"))]
        {
            Parallelism::Sequential
        }
    }
}

impl Parallelism {
    /// Maps `f` over `0..len`, collecting results in index order.
    pub fn map_indexed<T, F>(self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Send + Sync,
    {
        match self {
            Parallelism::Sequential => (0..len).map(f).collect(),
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                (0..len).into_par_iter().map(f).collect()
            }
        }
    }

    /// Maps `f` over the items of a mutable slice, collecting results in
    /// index order. Items are handed to `f` one at a time, so `f` may mutate
    /// its item freely in either mode.
    pub fn zip_map<S, T, F>(self, items: &mut [S], f: F) -> Vec<T>
    where
        S: Send,
        T: Send,
        F: Fn(usize, &mut S) -> T + Send + Sync,
    {
        match self {
            Parallelism::Sequential => items
                .iter_mut()
                .enumerate()
                .map(|(i, item)| f(i, item))
                .collect(),
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                items
                    .par_iter_mut()
                    .enumerate()
                    .map(|(i, item)| f(i, item))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let out = Parallelism::Sequential.map_indexed(5, |i| i * 2);
        assert_eq!(out, vec![0, 2, 4, 6, 8]);
        #[cfg(feature = "parallel")]
        {
            let par = Parallelism::Rayon.map_indexed(5, |i| i * 2);
            assert_eq!(par, out);
        }
    }

    #[test]
    fn zip_map_mutates_every_item() {
        let mut items = vec![1u64, 2, 3];
        let out = Parallelism::Sequential.zip_map(&mut items, |i, item| {
            *item += 10;
            *item + i as u64
        });
        assert_eq!(items, vec![11, 12, 13]);
        assert_eq!(out, vec![11, 13, 15]);
        #[cfg(feature = "parallel")]
        {
            let mut par_items = vec![1u64, 2, 3];
            let par_out = Parallelism::Rayon.zip_map(&mut par_items, |i, item| {
                *item += 10;
                *item + i as u64
            });
            assert_eq!(par_items, items);
            assert_eq!(par_out, out);
        }
    }
}
