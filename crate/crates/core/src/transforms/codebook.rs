//! Vector-quantization codebook learned online with minibatch k-means.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::diffcore::{Reader, Tensor, Writer};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"WBCB";
pub const CODEBOOK_VERSION: u32 = 1;
/// Consecutive updates without an assignment before a centroid is re-seeded.
pub const DEFAULT_DEAD_AFTER: u64 = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    centroids: Vec<f64>,
    counts: Vec<u64>,
    last_used: Vec<u64>,
    updates: u64,
    dead_after: u64,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn from_centroids(dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || centroids.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} centroid values do not form rows of width {dim}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite centroid".into()));
        }
        let k = centroids.len() / dim;
        Ok(Self {
            dim,
            centroids,
            counts: vec![0; k],
            last_used: vec![0; k],
            updates: 0,
            dead_after: DEFAULT_DEAD_AFTER,
        })
    }

    /// Seeds `k` centroids from distinct rows of `states`. With fewer
    /// distinct rows than `k`, the remaining centroids repeat earlier ones;
    /// ties in assignment go to the lowest index, so repeats stay unused until
    /// they are re-seeded. `plus_plus` spreads the picks with k-means++.
    pub fn init(states: &Tensor, k: usize, seed: u64, plus_plus: bool) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("codebook size must be positive".into()));
        }
        let dim = states.cols();
        let mut rng = seeded(seed);
        let mut seen = HashSet::new();
        let mut distinct = Vec::new();
        for r in 0..states.rows() {
            let key: Vec<u64> = states.row_slice(r).iter().map(|v| v.to_bits()).collect();
            if seen.insert(key) {
                distinct.push(r);
            }
        }
        let picked: Vec<usize> = if distinct.len() <= k {
            distinct
        } else if plus_plus {
            kmeans_pp(states, &distinct, k, &mut rng)
        } else {
            distinct.shuffle(&mut rng);
            distinct.truncate(k);
            distinct
        };
        let mut centroids = Vec::with_capacity(k * dim);
        for i in 0..k {
            centroids.extend_from_slice(states.row_slice(picked[i % picked.len()]));
        }
        Self::from_centroids(dim, centroids)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, idx: usize) -> &[f64] {
        &self.centroids[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn set_dead_after(&mut self, n: u64) {
        self.dead_after = n;
    }

    /// Nearest centroid by Euclidean distance; ties go to the lowest index.
    pub fn assign(&self, s: &[f64]) -> (usize, &[f64]) {
        debug_assert_eq!(s.len(), self.dim);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(s, c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        (best, self.centroid(best))
    }

    pub fn quantize(&self, s: &[f64]) -> Vec<f64> {
        self.assign(s).1.to_vec()
    }

    /// The k-means objective: summed squared distance to the nearest centroid.
    pub fn objective(&self, data: &Tensor) -> f64 {
        (0..data.rows())
            .map(|r| {
                let s = data.row_slice(r);
                sq_dist(s, self.assign(s).1)
            })
            .sum()
    }

    /// One minibatch k-means step with per-centroid rate `1 / count`.
    /// Returns the batch objective measured before the move.
    pub fn kmeans_update(&mut self, batch: &Tensor, rng: &mut Rng) -> Result<f64> {
        if batch.rows() == 0 {
            return Err(Error::Contract("empty k-means batch".into()));
        }
        if batch.cols() != self.dim {
            return Err(Error::Shape(format!(
                "batch width {} vs codebook dim {}",
                batch.cols(),
                self.dim
            )));
        }
        let k = self.k();
        let mut sums = vec![0.0; k * self.dim];
        let mut n = vec![0u64; k];
        let mut objective = 0.0;
        for r in 0..batch.rows() {
            let s = batch.row_slice(r);
            let (idx, c) = self.assign(s);
            objective += sq_dist(s, c);
            n[idx] += 1;
            for (acc, v) in sums[idx * self.dim..(idx + 1) * self.dim].iter_mut().zip(s) {
                *acc += v;
            }
        }
        self.updates += 1;
        for i in 0..k {
            if n[i] == 0 {
                continue;
            }
            self.counts[i] += n[i];
            self.last_used[i] = self.updates;
            let rate = n[i] as f64 / self.counts[i] as f64;
            let inv = 1.0 / n[i] as f64;
            for d in 0..self.dim {
                let mean = sums[i * self.dim + d] * inv;
                let c = &mut self.centroids[i * self.dim + d];
                *c += rate * (mean - *c);
            }
        }
        for i in 0..k {
            if self.updates - self.last_used[i] >= self.dead_after {
                let r = rng.gen_range(0..batch.rows());
                self.centroids[i * self.dim..(i + 1) * self.dim]
                    .copy_from_slice(batch.row_slice(r));
                self.counts[i] = 0;
                self.last_used[i] = self.updates;
            }
        }
        Ok(objective)
    }

    /// Full-batch Lloyd iteration; empty clusters keep their centroid.
    /// Returns the objective after the move.
    pub fn lloyd_step(&mut self, data: &Tensor) -> f64 {
        let k = self.k();
        let mut sums = vec![0.0; k * self.dim];
        let mut n = vec![0usize; k];
        for r in 0..data.rows() {
            let s = data.row_slice(r);
            let idx = self.assign(s).0;
            n[idx] += 1;
            for (acc, v) in sums[idx * self.dim..(idx + 1) * self.dim].iter_mut().zip(s) {
                *acc += v;
            }
        }
        for i in 0..k {
            if n[i] > 0 {
                for d in 0..self.dim {
                    self.centroids[i * self.dim + d] = sums[i * self.dim + d] / n[i] as f64;
                }
            }
        }
        self.objective(data)
    }

    /// `K, dim, centroids (f64 LE), counts (u64 LE)` behind a magic and version.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(CODEBOOK_MAGIC);
        w.u32(CODEBOOK_VERSION);
        w.u32(self.k() as u32);
        w.u32(self.dim as u32);
        w.f64s(&self.centroids);
        for &c in &self.counts {
            w.u64(c);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(4)? != CODEBOOK_MAGIC {
            return Err(Error::Format("not a codebook".into()));
        }
        let version = r.u32()?;
        if version != CODEBOOK_VERSION {
            return Err(Error::Format(format!("unsupported codebook version {version}")));
        }
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let centroids = r.f64s(k * dim)?;
        let counts = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let mut cb = Self::from_centroids(dim, centroids)?;
        cb.counts = counts;
        Ok(cb)
    }
}

fn kmeans_pp(states: &Tensor, candidates: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut picked = vec![candidates[rng.gen_range(0..candidates.len())]];
    let mut d2: Vec<f64> = candidates
        .iter()
        .map(|&r| sq_dist(states.row_slice(r), states.row_slice(picked[0])))
        .collect();
    while picked.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = candidates.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..candidates.len())
        };
        let row = candidates[next];
        picked.push(row);
        for (d, &r) in d2.iter_mut().zip(candidates) {
            *d = d.min(sq_dist(states.row_slice(r), states.row_slice(row)));
        }
    }
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn col(values: &[f64]) -> Tensor {
        Tensor::matrix(values.len(), 1, values.to_vec())
    }

    #[test]
    fn nearer_centroid_and_tie_rule() {
        let cb = Codebook::from_centroids(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(cb.assign(&[0.2, 0.1]).0, 0);
        assert_eq!(cb.assign(&[0.5, 0.5]).0, 0);
        assert_eq!(cb.assign(&[0.9, 0.6]).0, 1);
    }

    #[test]
    fn empty_codebook_is_rejected() {
        assert!(Codebook::from_centroids(2, vec![]).is_err());
        assert!(Codebook::init(&col(&[1.0]), 0, 0, false).is_err());
    }

    #[test]
    fn assignment_matches_linear_scan() {
        let mut rng = seeded(9);
        let cb = Codebook::from_centroids(3, (0..3 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        for _ in 0..1000 {
            let s: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
            // oracle: explicit sqrt distances, first minimum wins
            let dists: Vec<f64> = (0..cb.k())
                .map(|i| {
                    cb.centroid(i)
                        .iter()
                        .zip(&s)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let oracle = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(cb.assign(&s).0, oracle);
        }
    }

    #[test]
    fn centroids_at_the_data_are_a_fixed_point() {
        let data = col(&[0.0, 2.0]);
        let mut cb = Codebook::init(&data, 2, 0, false).unwrap();
        let before = cb.centroids().to_vec();
        let mut rng = seeded(0);
        assert_eq!(cb.objective(&data), 0.0);
        cb.kmeans_update(&data, &mut rng).unwrap();
        assert_eq!(cb.centroids(), &before[..]);
        assert_eq!(cb.objective(&data), 0.0);
    }

    #[test]
    fn single_centroid_moves_to_the_mean() {
        let data = col(&[0.0, 2.0]);
        let mut cb = Codebook::from_centroids(1, vec![0.0]).unwrap();
        let mut rng = seeded(0);
        for _ in 0..10 {
            cb.kmeans_update(&data, &mut rng).unwrap();
        }
        assert!((cb.centroid(0)[0] - 1.0).abs() < 1e-12);
        assert!((cb.objective(&data) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn init_with_spare_capacity_covers_every_state() {
        let data = col(&[0.0, 1.0, 1.0, 3.0]);
        let cb = Codebook::init(&data, 8, 4, false).unwrap();
        assert_eq!(cb.k(), 8);
        assert_eq!(cb.objective(&data), 0.0);
        assert_eq!(cb, Codebook::init(&data, 8, 4, false).unwrap());
    }

    #[test]
    fn data_init_beats_all_zero_init() {
        let mut rng = seeded(2);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|i| {
                let c = if i % 2 == 0 { 2.0 } else { -1.0 };
                vec![c + noise.sample(&mut rng), 1.0 + noise.sample(&mut rng)]
            })
            .collect();
        let data = Tensor::from_rows(&rows);
        let seeded_cb = Codebook::init(&data, 8, 3, false).unwrap();
        let zeros = Codebook::from_centroids(2, vec![0.0; 16]).unwrap();
        assert!(seeded_cb.objective(&data) <= zeros.objective(&data));
    }

    #[test]
    fn quantized_output_is_a_centroid_and_idempotent() {
        let mut rng = seeded(5);
        let cb = Codebook::from_centroids(2, (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        for _ in 0..200 {
            let s = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let q = cb.quantize(&s);
            assert!((0..cb.k()).any(|i| cb.centroid(i) == &q[..]));
            assert_eq!(cb.quantize(&q), q);
        }
    }

    #[test]
    fn unused_centroids_are_reseeded() {
        let mut cb = Codebook::from_centroids(1, vec![0.0, 100.0]).unwrap();
        cb.set_dead_after(3);
        let data = col(&[0.1, -0.1]);
        let mut rng = seeded(0);
        for _ in 0..3 {
            cb.kmeans_update(&data, &mut rng).unwrap();
        }
        assert!(cb.centroid(1)[0].abs() <= 0.1 + 1e-12);
    }

    #[test]
    fn serialization_round_trip() {
        let data = col(&[0.0, 1.0, 5.0]);
        let mut cb = Codebook::init(&data, 2, 1, false).unwrap();
        cb.kmeans_update(&data, &mut seeded(0)).unwrap();
        let back = Codebook::from_bytes(&cb.to_bytes()).unwrap();
        assert_eq!(back.centroids(), cb.centroids());
        assert_eq!(back.counts(), cb.counts());
        assert!(Codebook::from_bytes(&cb.to_bytes()[..10]).is_err());
    }
}
