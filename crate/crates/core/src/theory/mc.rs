//! Chunked Monte Carlo sums that do not depend on the worker count.

use rayon::prelude::*;

use crate::rng::{substream_indexed, StreamRng};

/// Samples per chunk. Each chunk draws from its own substream.
pub const CHUNK: usize = 4096;

/// Sums `k`-dimensional per-sample values over `n` samples. `sample` writes one
/// sample's values into its output slice. Chunks run in parallel and their sums
/// are combined pairwise in fixed order, so the result is bitwise identical for
/// any thread count.
pub fn mc_sum<F>(seed: u64, label: &str, n: usize, k: usize, sample: F) -> Vec<f64>
where
    F: Fn(&mut StreamRng, &mut [f64]) + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let sums: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream_indexed(seed, label, c as u64);
            let count = CHUNK.min(n - c * CHUNK);
            let mut acc = vec![0.0; k];
            let mut out = vec![0.0; k];
            for _ in 0..count {
                sample(&mut rng, &mut out);
                for (a, o) in acc.iter_mut().zip(&out) {
                    *a += o;
                }
            }
            acc
        })
        .collect();
    pairwise(sums, k)
}

/// Per-sample values of `n` draws, generated chunkwise in the same way as [`mc_sum`].
pub fn mc_collect<F>(seed: u64, label: &str, n: usize, sample: F) -> Vec<f64>
where
    F: Fn(&mut StreamRng) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream_indexed(seed, label, c as u64);
            (0..CHUNK.min(n - c * CHUNK)).map(|_| sample(&mut rng)).collect()
        })
        .collect();
    parts.concat()
}

fn pairwise(mut parts: Vec<Vec<f64>>, k: usize) -> Vec<f64> {
    if parts.is_empty() {
        return vec![0.0; k];
    }
    while parts.len() > 1 {
        parts = parts
            .chunks(2)
            .map(|pair| match pair {
                [a, b] => a.iter().zip(b).map(|(x, y)| x + y).collect(),
                [a] => a.clone(),
                _ => unreachable!(),
            })
            .collect();
    }
    parts.pop().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal;

    #[test]
    fn sums_are_independent_of_thread_count() {
        let f = |rng: &mut StreamRng, out: &mut [f64]| {
            let x = normal(rng);
            out[0] = x;
            out[1] = x * x;
        };
        let a = mc_sum(1, "t", 50_000, 2, f);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| mc_sum(1, "t", 50_000, 2, f));
        assert_eq!(a, b);
        assert!((a[1] / 50_000.0 - 1.0).abs() < 0.03);
        let c = mc_collect(1, "t", 10_000, |rng| normal(rng));
        assert_eq!(c.len(), 10_000);
        assert_eq!(c, pool.install(|| mc_collect(1, "t", 10_000, |rng| normal(rng))));
    }
}
