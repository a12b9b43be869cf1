//! Weighted bag-of-rows lookup `out[b] = Σⱼ w[b,j]·V[idx[b,j]]` and its sparse
//! backward.
//!
//! The backward has to scatter `B·k` weighted gradient rows into possibly
//! colliding value rows. Three accumulation disciplines are provided:
//!
//! * [`Strategy::Atomics`]: workers own contiguous position blocks and add every
//!   element with a compare-and-swap.
//! * [`Strategy::Lock`]: workers own position blocks and take a row lock once per
//!   position, adding the whole row under it.
//! * [`Strategy::ReverseIndices`]: positions are first grouped by row
//!   ([`ReverseIndex`]); workers own row blocks and sum each row sequentially,
//!   so the result is bit-identical for any worker count.

pub mod bench;
pub mod reference;

use crate::error::{Error, Result};
use crate::parallel::{for_each_block, for_each_row_block};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Atomics,
    Lock,
    ReverseIndices,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Atomics, Strategy::Lock, Strategy::ReverseIndices];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Atomics => "atomics",
            Strategy::Lock => "lock",
            Strategy::ReverseIndices => "reverse_indices",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy {s:?}")))
    }
}

/// `B` bags of `k` weighted row references, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BagBatch<T: Scalar = f32> {
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
    pub bag_size: usize,
}

impl<T: Scalar> BagBatch<T> {
    pub fn new(indices: Vec<usize>, weights: Vec<T>, bag_size: usize) -> Result<Self> {
        if bag_size == 0 {
            return Err(Error::config("bag size must be positive"));
        }
        if indices.len() != weights.len() || indices.len() % bag_size != 0 {
            return Err(Error::dim(format!(
                "{} indices and {} weights do not form bags of {bag_size}",
                indices.len(),
                weights.len()
            )));
        }
        Ok(Self {
            indices,
            weights,
            bag_size,
        })
    }

    pub fn empty(bag_size: usize) -> Self {
        Self {
            indices: Vec::new(),
            weights: Vec::new(),
            bag_size,
        }
    }

    /// Number of bags `B`.
    pub fn len(&self) -> usize {
        self.indices.len() / self.bag_size
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn positions(&self) -> usize {
        self.indices.len()
    }

    pub fn validate(&self, num_rows: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= num_rows) {
            Some(&index) => Err(Error::Index {
                index,
                bound: num_rows,
            }),
            None => Ok(()),
        }
    }

    /// Sorted distinct row indices.
    pub fn distinct_rows(&self) -> Vec<usize> {
        let mut rows = self.indices.clone();
        rows.sort_unstable();
        rows.dedup();
        rows
    }

    /// Appends `other`'s bags after this batch's.
    pub fn extend(&mut self, other: &BagBatch<T>) -> Result<()> {
        if other.bag_size != self.bag_size {
            return Err(Error::dim("bag sizes differ"));
        }
        self.indices.extend_from_slice(&other.indices);
        self.weights.extend_from_slice(&other.weights);
        Ok(())
    }
}

/// Gradient restricted to touched value rows; `rows` is strictly ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrad<T: Scalar = f32> {
    pub rows: Vec<usize>,
    /// `[rows.len() × dim]`, row-major.
    pub grads: Vec<T>,
    pub dim: usize,
}

impl<T: Scalar> SparseGrad<T> {
    pub fn empty(dim: usize) -> Self {
        Self {
            rows: Vec::new(),
            grads: Vec::new(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.grads[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, row: usize) -> Option<&[T]> {
        self.rows.binary_search(&row).ok().map(|i| self.row(i))
    }

    pub fn to_dense(&self, num_rows: usize) -> Vec<T> {
        let mut out = vec![T::zero(); num_rows * self.dim];
        for (i, &r) in self.rows.iter().enumerate() {
            out[r * self.dim..(r + 1) * self.dim].copy_from_slice(self.row(i));
        }
        out
    }

    /// Row-wise sum of two sparse gradients of equal width.
    pub fn merge(&self, other: &SparseGrad<T>) -> Result<SparseGrad<T>> {
        if self.dim != other.dim {
            return Err(Error::dim(format!("merging widths {} and {}", self.dim, other.dim)));
        }
        let d = self.dim;
        let mut out = SparseGrad::empty(d);
        let (mut i, mut j) = (0, 0);
        while i < self.rows.len() || j < other.rows.len() {
            let take_left = j >= other.rows.len() || (i < self.rows.len() && self.rows[i] <= other.rows[j]);
            let take_right = i >= self.rows.len() || (j < other.rows.len() && other.rows[j] <= self.rows[i]);
            if take_left && take_right {
                out.rows.push(self.rows[i]);
                out.grads
                    .extend(self.row(i).iter().zip(other.row(j)).map(|(&a, &b)| a + b));
                i += 1;
                j += 1;
            } else if take_left {
                out.rows.push(self.rows[i]);
                out.grads.extend_from_slice(self.row(i));
                i += 1;
            } else {
                out.rows.push(other.rows[j]);
                out.grads.extend_from_slice(other.row(j));
                j += 1;
            }
        }
        Ok(out)
    }

    /// Columns `[start, end)` of every row.
    pub fn slice_dims(&self, start: usize, end: usize) -> SparseGrad<T> {
        let mut grads = Vec::with_capacity(self.rows.len() * (end - start));
        for i in 0..self.rows.len() {
            grads.extend_from_slice(&self.row(i)[start..end]);
        }
        SparseGrad {
            rows: self.rows.clone(),
            grads,
            dim: end - start,
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.as_f64() * g.as_f64()).sum()
    }

    pub fn scale(&mut self, s: T) {
        self.grads.iter_mut().for_each(|g| *g *= s);
    }

    /// Order-insensitive digest: `Σ g · (1 + row mod 7)`, in f64.
    pub fn checksum(&self) -> f64 {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let w = 1.0 + (r % 7) as f64;
                self.row(i).iter().map(|g| g.as_f64()).sum::<f64>() * w
            })
            .sum()
    }
}

/// Positions grouped by the value row they reference.
///
/// Row `rows[i]` is referenced by flat positions
/// `positions[offsets[i]..offsets[i+1]]`, in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReverseIndex {
    pub rows: Vec<usize>,
    pub offsets: Vec<usize>,
    pub positions: Vec<usize>,
    pub bag_size: usize,
}

impl ReverseIndex {
    pub fn total_positions(&self) -> usize {
        self.positions.len()
    }

    /// `(bag, slot)` pairs referencing the `i`-th touched row.
    pub fn group(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positions[self.offsets[i]..self.offsets[i + 1]]
            .iter()
            .map(|&p| (p / self.bag_size, p % self.bag_size))
    }
}

pub fn build_reverse_index<T: Scalar>(batch: &BagBatch<T>) -> ReverseIndex {
    let mut order: Vec<usize> = (0..batch.positions()).collect();
    // stable: equal rows keep ascending position order
    order.sort_by_key(|&p| batch.indices[p]);
    let mut rows = Vec::new();
    let mut offsets = vec![0];
    for (i, &p) in order.iter().enumerate() {
        let r = batch.indices[p];
        if rows.last() != Some(&r) {
            if !rows.is_empty() {
                offsets.push(i);
            }
            rows.push(r);
        }
    }
    offsets.push(order.len());
    if rows.is_empty() {
        offsets.truncate(1);
    }
    ReverseIndex {
        rows,
        offsets,
        positions: order,
        bag_size: batch.bag_size,
    }
}

fn check_value_table<T: Scalar>(values: &Tensor<T>) -> Result<()> {
    if values.shape().len() != 2 {
        return Err(Error::dim(format!("value table must be 2-d, got {:?}", values.shape())));
    }
    Ok(())
}

/// `out[b] = Σⱼ w[b,j]·V[idx[b,j]]`, parallel over bags.
pub fn bag_forward<T: Scalar>(values: &Tensor<T>, batch: &BagBatch<T>, workers: usize) -> Result<Tensor<T>> {
    check_value_table(values)?;
    batch.validate(values.rows())?;
    let n = values.cols();
    let k = batch.bag_size;
    let mut out = vec![T::zero(); batch.len() * n];
    for_each_row_block(&mut out, n, workers, |first, rows| {
        for (i, dst) in rows.chunks_mut(n).enumerate() {
            let b = first + i;
            for j in 0..k {
                let p = b * k + j;
                let w = batch.weights[p];
                for (o, &v) in dst.iter_mut().zip(values.row(batch.indices[p])) {
                    *o += w * v;
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![batch.len(), n], out))
}

fn check_grad_out<T: Scalar>(grad_out: &Tensor<T>, batch: &BagBatch<T>) -> Result<usize> {
    if grad_out.rows() != batch.len() && !(batch.is_empty() && grad_out.is_empty()) {
        return Err(Error::dim(format!(
            "grad_out has {} rows for {} bags",
            grad_out.rows(),
            batch.len()
        )));
    }
    Ok(grad_out.cols())
}

/// Slot of each position within the sorted distinct-row list.
fn slots<T: Scalar>(batch: &BagBatch<T>, rows: &[usize]) -> Vec<usize> {
    batch
        .indices
        .iter()
        .map(|r| rows.binary_search(r).expect("row listed"))
        .collect()
}

pub fn backward_atomics<T: Scalar>(grad_out: &Tensor<T>, batch: &BagBatch<T>, workers: usize) -> Result<SparseGrad<T>> {
    let n = check_grad_out(grad_out, batch)?;
    let rows = batch.distinct_rows();
    let slot = slots(batch, &rows);
    let cells: Vec<T::Atomic> = (0..rows.len() * n).map(|_| T::atomic_zero()).collect();
    let k = batch.bag_size;
    let g = grad_out.data();
    for_each_block(batch.positions(), workers, |range| {
        for p in range {
            let w = batch.weights[p];
            let src = &g[(p / k) * n..(p / k + 1) * n];
            let dst = &cells[slot[p] * n..(slot[p] + 1) * n];
            for (c, &v) in dst.iter().zip(src) {
                T::atomic_add(c, w * v);
            }
        }
    });
    Ok(SparseGrad {
        rows,
        grads: cells.iter().map(T::atomic_load).collect(),
        dim: n,
    })
}

pub fn backward_lock<T: Scalar>(grad_out: &Tensor<T>, batch: &BagBatch<T>, workers: usize) -> Result<SparseGrad<T>> {
    let n = check_grad_out(grad_out, batch)?;
    let rows = batch.distinct_rows();
    let slot = slots(batch, &rows);
    let locked: Vec<Mutex<Vec<T>>> = (0..rows.len()).map(|_| Mutex::new(vec![T::zero(); n])).collect();
    let k = batch.bag_size;
    let g = grad_out.data();
    for_each_block(batch.positions(), workers, |range| {
        for p in range {
            let w = batch.weights[p];
            let src = &g[(p / k) * n..(p / k + 1) * n];
            let mut row = locked[slot[p]].lock().expect("row lock poisoned");
            for (c, &v) in row.iter_mut().zip(src) {
                *c += w * v;
            }
        }
    });
    let mut grads = Vec::with_capacity(rows.len() * n);
    for m in locked {
        grads.extend(m.into_inner().expect("row lock poisoned"));
    }
    Ok(SparseGrad { rows, grads, dim: n })
}

pub fn backward_reverse_indices<T: Scalar>(
    grad_out: &Tensor<T>,
    batch: &BagBatch<T>,
    rev: &ReverseIndex,
    workers: usize,
) -> Result<SparseGrad<T>> {
    let n = check_grad_out(grad_out, batch)?;
    if rev.total_positions() != batch.positions() || rev.bag_size != batch.bag_size {
        return Err(Error::Consistency(format!(
            "reverse index covers {} positions (bag size {}), batch has {} (bag size {})",
            rev.total_positions(),
            rev.bag_size,
            batch.positions(),
            batch.bag_size
        )));
    }
    let k = batch.bag_size;
    let g = grad_out.data();
    let mut grads = vec![T::zero(); rev.rows.len() * n];
    for_each_row_block(&mut grads, n, workers, |first, block| {
        for (i, dst) in block.chunks_mut(n).enumerate() {
            let r = first + i;
            for &p in &rev.positions[rev.offsets[r]..rev.offsets[r + 1]] {
                let w = batch.weights[p];
                for (c, &v) in dst.iter_mut().zip(&g[(p / k) * n..(p / k + 1) * n]) {
                    *c += w * v;
                }
            }
        }
    });
    Ok(SparseGrad {
        rows: rev.rows.clone(),
        grads,
        dim: n,
    })
}

/// Dispatches to the chosen strategy, building the reverse index when needed.
pub fn bag_backward<T: Scalar>(
    strategy: Strategy,
    grad_out: &Tensor<T>,
    batch: &BagBatch<T>,
    workers: usize,
) -> Result<SparseGrad<T>> {
    match strategy {
        Strategy::Atomics => backward_atomics(grad_out, batch, workers),
        Strategy::Lock => backward_lock(grad_out, batch, workers),
        Strategy::ReverseIndices => {
            let rev = build_reverse_index(batch);
            backward_reverse_indices(grad_out, batch, &rev, workers)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::reference::{scatter_add, sequential_forward};
    use super::{Strategy, *};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, b: usize, k: usize) -> BagBatch<f64> {
        let indices = (0..b * k).map(|_| rng.gen_range(0..rows)).collect();
        let weights = (0..b * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        BagBatch::new(indices, weights, k).unwrap()
    }

    #[test]
    fn forward_selection_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Tensor::<f64>::uniform(&[10, 4], 1.0, &mut rng);
        let batch = BagBatch::new(vec![7, 2], vec![1.0, 1.0], 1).unwrap();
        let out = bag_forward(&v, &batch, 1).unwrap();
        assert_eq!(out.row(0), v.row(7));
        assert_eq!(out.row(1), v.row(2));

        let batch = BagBatch::new(vec![1, 2, 3], vec![0.0; 3], 3).unwrap();
        assert!(bag_forward(&v, &batch, 2).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_matches_sequential_and_rejects_bad_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Tensor::<f64>::uniform(&[20, 6], 1.0, &mut rng);
        let batch = random_batch(&mut rng, 20, 3, 4);
        let want = sequential_forward(&v, &batch);
        for w in [1, 2, 8] {
            assert_eq!(bag_forward(&v, &batch, w).unwrap().data(), want.as_slice());
        }
        let bad = BagBatch::new(vec![20], vec![1.0], 1).unwrap();
        assert!(matches!(bag_forward(&v, &bad, 1), Err(Error::Index { index: 20, bound: 20 })));
    }

    #[test]
    fn reverse_index_hand_case() {
        let batch = BagBatch::<f32>::new(vec![2, 2, 5, 2], vec![1.0; 4], 2).unwrap();
        let rev = build_reverse_index(&batch);
        assert_eq!(rev.rows, vec![2, 5]);
        assert_eq!(rev.group(0).collect::<Vec<_>>(), vec![(0, 0), (0, 1), (1, 1)]);
        assert_eq!(rev.group(1).collect::<Vec<_>>(), vec![(1, 0)]);
    }

    #[test]
    fn reverse_index_distinct_rows() {
        let batch = BagBatch::<f32>::new(vec![4, 1, 3, 0], vec![1.0; 4], 2).unwrap();
        let rev = build_reverse_index(&batch);
        assert_eq!(rev.rows, vec![0, 1, 3, 4]);
        assert!((0..4).all(|i| rev.group(i).count() == 1));
    }

    #[test]
    fn empty_batch_gives_empty_grad() {
        let batch = BagBatch::<f64>::empty(3);
        let g = Tensor::<f64>::from_parts(vec![0, 4], vec![]);
        for s in Strategy::ALL {
            let sg = bag_backward(s, &g, &batch, 4).unwrap();
            assert!(sg.is_empty());
        }
    }

    #[test]
    fn stale_reverse_index_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_batch(&mut rng, 10, 2, 3);
        let b = random_batch(&mut rng, 10, 3, 3);
        let rev = build_reverse_index(&a);
        let g = Tensor::<f64>::zeros(&[3, 4]);
        assert!(matches!(
            backward_reverse_indices(&g, &b, &rev, 1),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn collision_free_is_exact_for_every_strategy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let indices: Vec<usize> = (0..12).map(|i| i * 3).collect();
        let weights = (0..12).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let batch = BagBatch::new(indices, weights, 4).unwrap();
        let g = Tensor::<f32>::uniform(&[3, 5], 1.0, &mut rng);
        let want = scatter_add(&g, &batch);
        for s in Strategy::ALL {
            assert_eq!(bag_backward(s, &g, &batch, 3).unwrap(), want, "{s}");
        }
    }

    #[test]
    fn single_hot_row_accumulates_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = BagBatch::new(vec![9; 40], (0..40).map(|_| rng.gen_range(0.0..1.0)).collect(), 4).unwrap();
        let g = Tensor::<f32>::uniform(&[10, 8], 1.0, &mut rng);
        let want = scatter_add(&g, &batch);
        assert_eq!(want.rows, vec![9]);
        for s in Strategy::ALL {
            let got = bag_backward(s, &g, &batch, 4).unwrap();
            assert_eq!(got.rows, vec![9]);
            for (a, b) in got.grads.iter().zip(&want.grads) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn merge_and_slice() {
        let a = SparseGrad::<f64> {
            rows: vec![1, 4],
            grads: vec![1.0, 2.0, 3.0, 4.0],
            dim: 2,
        };
        let b = SparseGrad::<f64> {
            rows: vec![0, 4],
            grads: vec![5.0, 6.0, 7.0, 8.0],
            dim: 2,
        };
        let m = a.merge(&b).unwrap();
        assert_eq!(m.rows, vec![0, 1, 4]);
        assert_eq!(m.grads, vec![5.0, 6.0, 1.0, 2.0, 10.0, 12.0]);
        assert_eq!(m.slice_dims(1, 2).grads, vec![6.0, 2.0, 12.0]);
        assert_eq!(m.get(4), Some(&[10.0, 12.0][..]));
        assert_eq!(m.get(2), None);
    }

    proptest! {
        #[test]
        fn strategies_agree_with_scatter_add(seed in 0u64..5000, b in 0usize..12, k in 1usize..6, rows in 1usize..30, workers in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = random_batch(&mut rng, rows, b, k);
            let g = Tensor::<f64>::from_fn(&[b, 3], |_| rng.gen_range(-1.0..1.0));
            let want = scatter_add(&g, &batch);
            prop_assert_eq!(&want.rows, &batch.distinct_rows());
            let rev = build_reverse_index(&batch);
            let mut flat = rev.positions.clone();
            flat.sort_unstable();
            prop_assert_eq!(flat, (0..b * k).collect::<Vec<_>>());
            prop_assert_eq!(&backward_reverse_indices(&g, &batch, &rev, workers).unwrap(), &want);
            for s in [Strategy::Atomics, Strategy::Lock] {
                let got = bag_backward(s, &g, &batch, workers).unwrap();
                prop_assert_eq!(&got.rows, &want.rows);
                for (x, y) in got.grads.iter().zip(&want.grads) {
                    prop_assert!((x - y).abs() <= 1e-10 * y.abs().max(1e-6));
                }
            }
        }
    }
}
