//! Execution policy for the data-parallel loops.
//!
//! Every hot loop in the crate goes through the helpers here so that the
//! same code runs either on the rayon pool or sequentially. Results are
//! bit-identical between the two modes: work is split into fixed chunks and
//! reductions combine chunk results in index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How data-parallel loops are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise falls
    /// back to sequential execution.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Applies `f(chunk_index, chunk)` to consecutive chunks of `data`.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(c, s)| f(c, s));
            return;
        }
        data.chunks_mut(chunk).enumerate().for_each(|(c, s)| f(c, s));
    }

    /// Fills `out[i] = f(i)`.
    pub fn fill<T, F>(self, out: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        const CHUNK: usize = 512;
        self.for_each_chunk_mut(out, CHUNK, |c, s| {
            let base = c * CHUNK;
            for (k, v) in s.iter_mut().enumerate() {
                *v = f(base + k);
            }
        });
    }

    /// Maps `0..n` through `f`, preserving order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Deterministic chunked sum of `f(i)` over `0..n`.
    pub fn sum<F>(self, n: usize, f: F) -> f64
    where
        F: Fn(usize) -> f64 + Sync + Send,
    {
        const CHUNK: usize = 1024;
        let chunks = n.div_ceil(CHUNK);
        let partial = self.map(chunks, |c| {
            let hi = ((c + 1) * CHUNK).min(n);
            (c * CHUNK..hi).map(&f).sum::<f64>()
        });
        partial.into_iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_bitwise() {
        let f = |i: usize| ((i as f64) * 0.37).sin() / (1.0 + i as f64);
        let a = Exec::Sequential.sum(100_003, f);
        let b = Exec::Parallel.sum(100_003, f);
        assert_eq!(a.to_bits(), b.to_bits());

        let mut x = vec![0.0; 5000];
        let mut y = vec![0.0; 5000];
        Exec::Sequential.fill(&mut x, f);
        Exec::Parallel.fill(&mut y, f);
        assert_eq!(x, y);
        assert_eq!(Exec::Parallel.map(7, |i| i * i), vec![0, 1, 4, 9, 16, 25, 36]);
    }
}
