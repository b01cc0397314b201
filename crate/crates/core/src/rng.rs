//! Deterministic, derivable random streams.
//!
//! A stream is identified by a root seed plus an ordered derivation path of
//! `(label, index)` pairs. The generator state is seeded from a SHA-256 hash
//! of that identity, so `derive` never consumes parent state: the same
//! `(seed, path)` yields the same sequence no matter when or where it is
//! derived. Protocol code derives one stream per (round, client, ...) and the
//! result is independent of scheduling order.
//!
//! All samplers are implemented here on top of the raw u64 stream to keep the
//! draw sequence pinned by this crate rather than by an external crate's
//! sampler internals.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    path: Vec<(String, u64)>,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let path = Vec::new();
        let rng = ChaCha8Rng::from_seed(key_for(seed, &path));
        RngStream { seed, path, rng }
    }

    /// Child stream for `(label, index)`. Does not disturb `self`.
    pub fn derive(&self, label: &str, index: u64) -> Self {
        assert!(!label.is_empty(), "derivation label must be non-empty");
        let mut path = self.path.clone();
        path.push((label.to_string(), index));
        let rng = ChaCha8Rng::from_seed(key_for(self.seed, &path));
        RngStream {
            seed: self.seed,
            path,
            rng,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n), rejection-sampled to stay unbiased.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < limit {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64], mean: f64, std: f64) {
        for x in out.iter_mut() {
            *x = mean + std * self.normal();
        }
    }

    /// Normal truncated to [-2, 2] standard deviations, resampled.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// log of a Gamma(shape, 1) draw. Works for very small shapes where the
    /// draw itself would underflow to zero.
    pub fn log_gamma(&mut self, shape: f64) -> f64 {
        assert!(shape > 0.0 && shape.is_finite());
        if shape < 1.0 {
            // Gamma(a) = Gamma(a+1) * U^(1/a), kept in log space.
            let boost = loop {
                let u = self.next_f64();
                if u > 0.0 {
                    break u.ln() / shape;
                }
            };
            return self.log_gamma(shape + 1.0) + boost;
        }
        // Marsaglia-Tsang squeeze for shape >= 1.
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v3 = v * v * v;
            let u = self.next_f64();
            if u == 0.0 {
                continue;
            }
            if u.ln() < 0.5 * x * x + d - d * v3 + d * v3.ln() {
                return (d * v3).ln();
            }
        }
    }

    /// Dirichlet(alpha * 1_k) draw, robust to tiny alpha.
    pub fn dirichlet(&mut self, alpha: f64, k: usize) -> Vec<f64> {
        assert!(k > 0);
        let logs: Vec<f64> = (0..k).map(|_| self.log_gamma(alpha)).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= sum);
        w
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Random permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// k distinct values from 0..n, in draw order.
    pub fn choose_k(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

fn key_for(seed: u64, path: &[(String, u64)]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for (label, idx) in path {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update(idx.to_le_bytes());
    }
    h.finalize().into()
}
