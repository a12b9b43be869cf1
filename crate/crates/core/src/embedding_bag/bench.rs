//! Throughput harness for forward + backward over synthetic index profiles.

use super::reference::scatter_add;
use super::{bag_backward, bag_forward, BagBatch, SparseGrad, Strategy};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::time::Instant;

pub const CSV_HEADER: &str = "strategy,N_v,n,B,k,workers,repeat,elapsed_ns,bytes,gbps,checksum";

/// Relative tolerance between a run's checksum and the sequential oracle's.
pub const CHECKSUM_RTOL: f64 = 1e-4;

/// How batch indices are distributed over value rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexProfile {
    /// Independent uniform rows.
    Uniform,
    /// Zipf-distributed rows with the given exponent (row 0 hottest).
    Zipf(f64),
    /// A fraction of positions hit one shared row; the rest are pairwise distinct.
    Collision(f64),
}

impl fmt::Display for IndexProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndexProfile::Uniform => write!(f, "uniform"),
            IndexProfile::Zipf(s) => write!(f, "zipf{s}"),
            IndexProfile::Collision(c) => write!(f, "collision{c}"),
        }
    }
}

/// Random batch with non-negative weights drawn from `[0, 1)`.
pub fn synthetic_batch<T: Scalar>(
    num_rows: usize,
    bags: usize,
    bag_size: usize,
    profile: IndexProfile,
    rng: &mut impl Rng,
) -> Result<BagBatch<T>> {
    let positions = bags * bag_size;
    let indices: Vec<usize> = match profile {
        IndexProfile::Uniform => (0..positions).map(|_| rng.gen_range(0..num_rows)).collect(),
        IndexProfile::Zipf(s) => {
            let z = Zipf::new(num_rows as u64, s).map_err(|e| Error::config(format!("zipf: {e}")))?;
            (0..positions)
                .map(|_| (z.sample(rng) as usize).clamp(1, num_rows) - 1)
                .collect()
        }
        IndexProfile::Collision(frac) => {
            if !(0.0..=1.0).contains(&frac) {
                return Err(Error::config(format!("collision fraction {frac} outside [0, 1]")));
            }
            if positions >= num_rows {
                return Err(Error::config(format!(
                    "{positions} distinct positions need more than {num_rows} rows"
                )));
            }
            // row 0 is the shared row; distinct rows come from 1..num_rows
            let mut idx: Vec<usize> = sample(rng, num_rows - 1, positions)
                .into_iter()
                .map(|r| r + 1)
                .collect();
            let hot = (frac * positions as f64).round() as usize;
            for p in sample(rng, positions, hot) {
                idx[p] = 0;
            }
            idx
        }
    };
    let weights = (0..positions).map(|_| T::from_f64(rng.gen_range(0.0..1.0))).collect();
    BagBatch::new(indices, weights, bag_size)
}

/// Bytes touched by one forward + backward: value-row reads, output writes,
/// gradient-row reads for every position, gradient-row writes for every
/// position, plus the index/weight stream. Each access counts once.
pub fn bytes_moved(bags: usize, bag_size: usize, dim: usize, elem: usize) -> u64 {
    let pos = (bags * bag_size) as u64;
    let (b, n, e) = (bags as u64, dim as u64, elem as u64);
    e * (pos * n + b * n + pos * n + pos * n) + pos * (8 + e)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchSpec {
    pub strategy: Strategy,
    pub num_rows: usize,
    pub dim: usize,
    pub bags: usize,
    pub bag_size: usize,
    pub workers: usize,
    pub repeats: usize,
    pub profile: IndexProfile,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub num_rows: usize,
    pub dim: usize,
    pub bags: usize,
    pub bag_size: usize,
    pub workers: usize,
    pub repeat: usize,
    pub elapsed_ns: u128,
    pub bytes: u64,
    pub gbps: f64,
    pub checksum: f64,
    pub oracle_checksum: f64,
}

impl BenchRow {
    pub fn checksum_ok(&self) -> bool {
        let scale = self.oracle_checksum.abs().max(1e-12);
        (self.checksum - self.oracle_checksum).abs() <= CHECKSUM_RTOL * scale
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{:.9e}",
            self.strategy,
            self.num_rows,
            self.dim,
            self.bags,
            self.bag_size,
            self.workers,
            self.repeat,
            self.elapsed_ns,
            self.bytes,
            self.gbps,
            self.checksum
        )
    }
}

/// Times forward + the chosen backward `repeats` times after one warm-up.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.repeats == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let values = Tensor::<f32>::from_fn(&[spec.num_rows, spec.dim], |_| rng.gen_range(0.0..1.0));
    let batch = synthetic_batch::<f32>(spec.num_rows, spec.bags, spec.bag_size, spec.profile, &mut rng)?;
    let grad_out = Tensor::<f32>::from_fn(&[spec.bags, spec.dim], |_| rng.gen_range(0.0..1.0));
    let oracle_checksum = scatter_add(&grad_out, &batch).checksum();
    let bytes = bytes_moved(spec.bags, spec.bag_size, spec.dim, f32::BYTES);

    let step = || -> Result<(Tensor<f32>, SparseGrad<f32>)> {
        let out = bag_forward(&values, &batch, spec.workers)?;
        let g = bag_backward(spec.strategy, &grad_out, &batch, spec.workers)?;
        Ok((out, g))
    };
    step()?;
    let mut rows = Vec::with_capacity(spec.repeats);
    for repeat in 0..spec.repeats {
        let start = Instant::now();
        let (out, grad) = step()?;
        let elapsed_ns = start.elapsed().as_nanos().max(1);
        std::hint::black_box(&out);
        rows.push(BenchRow {
            strategy: spec.strategy,
            num_rows: spec.num_rows,
            dim: spec.dim,
            bags: spec.bags,
            bag_size: spec.bag_size,
            workers: spec.workers,
            repeat,
            elapsed_ns,
            bytes,
            gbps: bytes as f64 / elapsed_ns as f64,
            checksum: grad.checksum(),
            oracle_checksum,
        });
    }
    Ok(rows)
}

/// Strategy with the lowest median time for each `(dim, workers)` cell.
pub fn rank_strategies(rows: &[BenchRow]) -> Vec<(usize, usize, Strategy, f64)> {
    let mut cells: Vec<(usize, usize)> = rows.iter().map(|r| (r.dim, r.workers)).collect();
    cells.sort_unstable();
    cells.dedup();
    let mut out = Vec::new();
    for (dim, workers) in cells {
        let best = Strategy::ALL
            .into_iter()
            .filter_map(|s| {
                let mut t: Vec<u128> = rows
                    .iter()
                    .filter(|r| r.dim == dim && r.workers == workers && r.strategy == s)
                    .map(|r| r.elapsed_ns)
                    .collect();
                if t.is_empty() {
                    return None;
                }
                t.sort_unstable();
                Some((s, t[t.len() / 2] as f64))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((s, median)) = best {
            out.push((dim, workers, s, median));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(strategy: Strategy, repeats: usize) -> BenchSpec {
        BenchSpec {
            strategy,
            num_rows: 512,
            dim: 16,
            bags: 32,
            bag_size: 4,
            workers: 2,
            repeats,
            profile: IndexProfile::Zipf(1.1),
            seed: 3,
        }
    }

    #[test]
    fn rows_report_consistent_throughput() {
        for s in Strategy::ALL {
            let rows = run_bench(&spec(s, 2)).unwrap();
            assert_eq!(rows.len(), 2);
            for r in &rows {
                assert!(r.checksum_ok(), "{s}: {} vs {}", r.checksum, r.oracle_checksum);
                assert!((r.gbps - r.bytes as f64 / r.elapsed_ns as f64).abs() < 1e-9);
                assert_eq!(r.csv_line().split(',').count(), CSV_HEADER.split(',').count());
            }
        }
    }

    #[test]
    fn zero_repeats_is_empty() {
        assert!(run_bench(&spec(Strategy::Lock, 0)).unwrap().is_empty());
    }

    #[test]
    fn collision_profiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = synthetic_batch::<f32>(1000, 10, 5, IndexProfile::Collision(0.0), &mut rng).unwrap();
        assert_eq!(b.distinct_rows().len(), 50);
        let b = synthetic_batch::<f32>(1000, 10, 5, IndexProfile::Collision(0.5), &mut rng).unwrap();
        assert_eq!(b.indices.iter().filter(|&&i| i == 0).count(), 25);
        let b = synthetic_batch::<f32>(1000, 10, 5, IndexProfile::Collision(1.0), &mut rng).unwrap();
        assert_eq!(b.distinct_rows(), vec![0]);
    }
}
