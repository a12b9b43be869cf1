//! Exhaustive checks shared by the CLI and the acceptance tests.

use crate::embedding_bag::{bag_backward, bag_forward, BagBatch, SparseGrad, Strategy};
use crate::error::{Error, Result};
use crate::pk_index::{oracle::brute_force_topk, PkIndex};
use crate::sharded_memory::{sharded_backward, sharded_bag, shard_values, Fault, ShardReport};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopkSweep {
    pub half_ns: Vec<usize>,
    pub ks: Vec<usize>,
    pub seeds: u64,
    pub key_dim: usize,
    pub qk_norm: bool,
}

impl Default for TopkSweep {
    fn default() -> Self {
        Self {
            half_ns: vec![4, 16, 64],
            ks: vec![1, 4, 16],
            seeds: 200,
            key_dim: 16,
            qk_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopkMismatch {
    pub half_n: usize,
    pub k: usize,
    pub seed: u64,
    pub expected: Vec<usize>,
    pub got: Vec<usize>,
    pub expected_scores: Vec<f64>,
    pub got_scores: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopkReport {
    pub cases: usize,
    /// `(half_n, k)` pairs with `k > half_n`, which are not valid configurations.
    pub skipped: Vec<(usize, usize)>,
    pub mismatches: Vec<TopkMismatch>,
    pub elapsed_s: f64,
}

impl TopkReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty() && self.cases > 0
    }
}

/// Product-key top-k against the brute-force oracle on fresh random keys per seed.
///
/// `corrupt` replaces the last returned index of that case number, which the
/// comparison must then report.
pub fn verify_topk<T: Scalar>(sweep: &TopkSweep, corrupt: Option<usize>) -> Result<TopkReport> {
    if sweep.key_dim == 0 || sweep.key_dim % 2 != 0 {
        return Err(Error::Config(format!("key_dim {} must be positive and even", sweep.key_dim)));
    }
    let start = Instant::now();
    let mut report = TopkReport::default();
    for &half_n in &sweep.half_ns {
        for &k in &sweep.ks {
            if k == 0 || k > half_n {
                report.skipped.push((half_n, k));
                continue;
            }
            for seed in 0..sweep.seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((half_n as u64) << 32) ^ ((k as u64) << 48));
                let index = PkIndex::<T>::new(half_n, sweep.key_dim / 2, sweep.qk_norm, &mut rng)?;
                let q: Vec<T> = (0..sweep.key_dim).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect();
                let mut got = index.topk(&q, k)?;
                if corrupt == Some(report.cases) {
                    let bad = (0..index.num_keys()).find(|i| !got.indices.contains(i)).unwrap_or(0);
                    *got.indices.last_mut().expect("k ≥ 1") = bad;
                }
                let expected = brute_force_topk(&index, &q, k)?;
                if got.indices != expected.indices || got.scores != expected.scores {
                    report.mismatches.push(TopkMismatch {
                        half_n,
                        k,
                        seed,
                        expected: expected.indices,
                        got: got.indices,
                        expected_scores: expected.scores.iter().map(|s| s.as_f64()).collect(),
                        got_scores: got.scores.iter().map(|s| s.as_f64()).collect(),
                    });
                }
                report.cases += 1;
            }
        }
    }
    report.elapsed_s = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardCheck {
    pub group_size: usize,
    pub forward_bit_exact: bool,
    pub backward_bit_exact: bool,
    /// `phase3_bytes == total_rows·n·elem_size`.
    pub phase3_bytes_ok: bool,
    /// No worker held full-width rows beyond its own bags.
    pub no_full_output: bool,
    pub total_rows: usize,
    pub forward: ShardReport,
    pub backward: ShardReport,
}

impl ShardCheck {
    pub fn ok(&self) -> bool {
        self.forward_bit_exact && self.backward_bit_exact && self.phase3_bytes_ok && self.no_full_output
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardSetup {
    pub num_rows: usize,
    pub dim: usize,
    pub bags_per_worker: usize,
    pub bag_size: usize,
    pub seed: u64,
}

impl Default for ShardSetup {
    fn default() -> Self {
        Self {
            num_rows: 4096,
            dim: 64,
            bags_per_worker: 32,
            bag_size: 8,
            seed: 0,
        }
    }
}

fn concat<T: Scalar>(batches: &[BagBatch<T>], bag_size: usize) -> Result<BagBatch<T>> {
    let mut all = BagBatch::empty(bag_size);
    for b in batches {
        all.extend(b)?;
    }
    Ok(all)
}

/// Sharded lookup and gradient routing for a group of `g` against one device.
pub fn shard_check<T: Scalar>(setup: &ShardSetup, g: usize, fault: Option<Fault>) -> Result<ShardCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let values = Tensor::<T>::uniform(&[setup.num_rows, setup.dim], 1.0, &mut rng);
    let batches = (0..g)
        .map(|_| {
            let n = setup.bags_per_worker * setup.bag_size;
            let idx = (0..n).map(|_| rng.gen_range(0..setup.num_rows)).collect();
            let w = (0..n).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect();
            BagBatch::new(idx, w, setup.bag_size)
        })
        .collect::<Result<Vec<_>>>()?;
    let grad_outs: Vec<Tensor<T>> = batches
        .iter()
        .map(|b| Tensor::uniform(&[b.len(), setup.dim], 1.0, &mut rng))
        .collect();

    let mut group = shard_values(&values, g)?;
    group.inject(fault);
    let fwd = sharded_bag(&group, &batches)?;
    let back = sharded_backward(&group, &fwd, &grad_outs, Strategy::ReverseIndices)?;

    let mut forward_bit_exact = true;
    for (w, out) in fwd.outputs.iter().enumerate() {
        forward_bit_exact &= out.data() == bag_forward(&values, &batches[w], 1)?.data();
    }
    let all = concat(&batches, setup.bag_size)?;
    let flat: Vec<T> = grad_outs.iter().flat_map(|t| t.data().to_vec()).collect();
    let full: SparseGrad<T> = bag_backward(
        Strategy::ReverseIndices,
        &Tensor::new(&[all.len(), setup.dim], flat)?,
        &all,
        1,
    )?;
    let backward_bit_exact = back
        .grads
        .iter()
        .enumerate()
        .all(|(s, gr)| {
            let r = group.range(s);
            *gr == full.slice_dims(r.start, r.end)
        });
    let total_rows = all.len();
    let phase3_bytes_ok = fwd.report.phase3_bytes == (total_rows * setup.dim * T::BYTES) as u64;
    let no_full_output = fwd
        .report
        .full_rows
        .iter()
        .zip(&batches)
        .all(|(&rows, b)| rows <= b.len());
    Ok(ShardCheck {
        group_size: g,
        forward_bit_exact,
        backward_bit_exact,
        phase3_bytes_ok,
        no_full_output,
        total_rows,
        forward: fwd.report,
        backward: back.report,
    })
}
