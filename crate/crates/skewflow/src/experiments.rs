//! Named experiment runners shared by the CLI and the acceptance suite,
//! plus the deterministic replica-batch helpers they are built on.
//!
//! Replica batches are split into fixed-size chunks; chunks run in parallel
//! and their partial results are folded in chunk order, so outputs are
//! bit-identical for a fixed master seed regardless of the worker count.

use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::seed::replica_rng;
use crate::stats::{CiMethod, Estimate};

const CHUNK: usize = 1024;

/// Count replicas for which `f` returns true.
pub(crate) fn parallel_count(
    replicas: usize,
    seed: u64,
    label: &str,
    f: impl Fn(&mut ChaCha8Rng) -> bool + Sync,
) -> usize {
    let n_chunks = replicas.div_ceil(CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(replicas);
            let mut count = 0usize;
            for i in lo..hi {
                let mut rng = replica_rng(seed, label, i as u64);
                if f(&mut rng) {
                    count += 1;
                }
            }
            count
        })
        .sum()
}

/// One scalar sample per replica, in replica order.
pub(crate) fn parallel_samples(
    replicas: usize,
    seed: u64,
    label: &str,
    f: impl Fn(&mut ChaCha8Rng) -> f64 + Sync,
) -> Vec<f64> {
    (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut rng = replica_rng(seed, label, i as u64);
            f(&mut rng)
        })
        .collect()
}

/// First and second moments of a vector-valued replica statistic.
pub(crate) struct Moments {
    pub n: usize,
    pub sum: Vec<f64>,
    pub sumsq: Vec<f64>,
}

impl Moments {
    pub fn mean(&self, idx: usize) -> f64 {
        self.sum[idx] / self.n as f64
    }

    pub fn variance(&self, idx: usize) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let m = self.mean(idx);
        ((self.sumsq[idx] - n * m * m) / (n - 1.0)).max(0.0)
    }

    pub fn interval(&self, idx: usize, z: f64) -> Estimate {
        let mean = self.mean(idx);
        let se = (self.variance(idx) / self.n as f64).sqrt();
        Estimate {
            mean,
            ci_lo: mean - z * se,
            ci_hi: mean + z * se,
            n: self.n,
            method: CiMethod::Normal,
        }
    }
}

/// Accumulate per-replica statistics of dimension `dim`; `f` fills the
/// scratch slice (zeroed beforehand) for its replica.
pub(crate) fn parallel_moments(
    replicas: usize,
    seed: u64,
    label: &str,
    dim: usize,
    f: impl Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
) -> Moments {
    let n_chunks = replicas.div_ceil(CHUNK);
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(replicas);
            let mut sum = vec![0.0; dim];
            let mut sumsq = vec![0.0; dim];
            let mut scratch = vec![0.0; dim];
            for i in lo..hi {
                let mut rng = replica_rng(seed, label, i as u64);
                scratch.iter_mut().for_each(|x| *x = 0.0);
                f(&mut rng, &mut scratch);
                for (k, &x) in scratch.iter().enumerate() {
                    sum[k] += x;
                    sumsq[k] += x * x;
                }
            }
            (sum, sumsq)
        })
        .collect();
    let mut sum = vec![0.0; dim];
    let mut sumsq = vec![0.0; dim];
    for (s, q) in partials {
        for k in 0..dim {
            sum[k] += s[k];
            sumsq[k] += q[k];
        }
    }
    Moments {
        n: replicas,
        sum,
        sumsq,
    }
}

mod runners;
pub use runners::*;
