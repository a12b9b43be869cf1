//! Exact top-k maximum-inner-product search over product keys.
//!
//! A [`PkIndex`] holds two half-key tables `K1, K2` of shape `[half_n × half_dim]`.
//! The virtual key set is their Cartesian product: key `i = i1·half_n + i2` is
//! `concat(K1[i1], K2[i2])`, so `half_n²` keys are searchable while only
//! `2·half_n` half-keys are ever scored. Because the score of a virtual key is
//! the sum of its two half scores, the best `k` full keys always come from the
//! best `k` rows of each half (under the tie-break below), which makes the
//! search exact.
//!
//! Ordering everywhere is score descending, ties by ascending index.

use crate::error::{Error, Result};
use crate::tensor::{ops, Scalar, Tensor};
use rand::Rng;
use std::cmp::Ordering;

#[derive(Clone, Debug, PartialEq)]
pub struct TopkResult<T: Scalar = f32> {
    /// Flat indices into the virtual key set.
    pub indices: Vec<usize>,
    /// Scores, descending.
    pub scores: Vec<T>,
}

impl<T: Scalar> TopkResult<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Operation counts of a lookup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LookupStats {
    /// Multiply-adds spent scoring half-keys.
    pub half_key_macs: u64,
    /// Candidate pairs evaluated when combining the two halves.
    pub combine_candidates: u64,
}

impl LookupStats {
    pub fn score_ops(&self) -> u64 {
        self.half_key_macs + self.combine_candidates
    }
}

#[derive(Clone, Debug)]
pub struct PkIndex<T: Scalar = f32> {
    half_n: usize,
    half_dim: usize,
    k1: Tensor<T>,
    k2: Tensor<T>,
    qk_norm: bool,
}

/// Descending by score, then ascending by index.
fn rank<T: Scalar>(a: (T, usize), b: (T, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Streams `(score, index)` pairs into a bounded, sorted top-`k` buffer.
struct TopBuffer<T: Scalar> {
    k: usize,
    items: Vec<(T, usize)>,
}

impl<T: Scalar> TopBuffer<T> {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, item: (T, usize)) {
        if self.items.len() == self.k {
            match self.items.last() {
                Some(&worst) if rank(item, worst) == Ordering::Less => {}
                _ => return,
            }
        }
        let pos = self
            .items
            .partition_point(|&it| rank(it, item) == Ordering::Less);
        self.items.insert(pos, item);
        self.items.truncate(self.k);
    }

    fn finish(self) -> (Vec<usize>, Vec<T>) {
        self.items.into_iter().map(|(s, i)| (i, s)).unzip()
    }
}

/// Splits a query into its two halves.
pub fn split_query<T: Scalar>(q: &[T]) -> Result<(&[T], &[T])> {
    if q.is_empty() || q.len() % 2 != 0 {
        return Err(Error::dim(format!("query length {} is not even", q.len())));
    }
    Ok(q.split_at(q.len() / 2))
}

/// The `k` largest inner products `q_half · keys[i]`.
pub fn half_topk<T: Scalar>(keys: &Tensor<T>, q_half: &[T], k: usize) -> Result<(Vec<usize>, Vec<T>)> {
    let rows = keys.rows();
    if k == 0 || k > rows {
        return Err(Error::config(format!("k = {k} must lie in 1..={rows}")));
    }
    if keys.cols() != q_half.len() {
        return Err(Error::dim(format!(
            "half query of length {} against keys of width {}",
            q_half.len(),
            keys.cols()
        )));
    }
    let mut buf = TopBuffer::new(k);
    for i in 0..rows {
        let s: T = keys.row(i).iter().zip(q_half).map(|(&a, &b)| a * b).sum();
        buf.offer((s, i));
    }
    Ok(buf.finish())
}

/// Selects the best `k` of the `|I1|·|I2|` candidate pairs by `s1[a] + s2[b]`.
///
/// `i1`/`s1` and `i2`/`s2` are per-half results; flat indices use `half_n` as the
/// row stride.
pub fn combine_topk<T: Scalar>(
    i1: &[usize],
    s1: &[T],
    i2: &[usize],
    s2: &[T],
    half_n: usize,
    k: usize,
) -> TopkResult<T> {
    debug_assert_eq!(i1.len(), s1.len());
    debug_assert_eq!(i2.len(), s2.len());
    let mut buf = TopBuffer::new(k.min(i1.len() * i2.len()));
    for (&a, &sa) in i1.iter().zip(s1) {
        for (&b, &sb) in i2.iter().zip(s2) {
            buf.offer((sa + sb, a * half_n + b));
        }
    }
    let (indices, scores) = buf.finish();
    TopkResult { indices, scores }
}

impl<T: Scalar> PkIndex<T> {
    /// Random half-keys, uniform in `±1/√half_dim`.
    pub fn new(half_n: usize, half_dim: usize, qk_norm: bool, rng: &mut impl Rng) -> Result<Self> {
        if half_n == 0 || half_dim == 0 {
            return Err(Error::config("half_n and half_dim must be positive"));
        }
        let bound = 1.0 / (half_dim as f64).sqrt();
        let k1 = Tensor::uniform(&[half_n, half_dim], bound, rng);
        let k2 = Tensor::uniform(&[half_n, half_dim], bound, rng);
        Self::from_keys(k1, k2, qk_norm)
    }

    pub fn from_keys(k1: Tensor<T>, k2: Tensor<T>, qk_norm: bool) -> Result<Self> {
        if k1.shape() != k2.shape() || k1.shape().len() != 2 {
            return Err(Error::dim(format!(
                "half-key tables must be equal 2-d shapes, got {:?} and {:?}",
                k1.shape(),
                k2.shape()
            )));
        }
        Ok(Self {
            half_n: k1.rows(),
            half_dim: k1.cols(),
            k1,
            k2,
            qk_norm,
        })
    }

    pub fn half_n(&self) -> usize {
        self.half_n
    }

    pub fn half_dim(&self) -> usize {
        self.half_dim
    }

    /// Query width `n`.
    pub fn dim(&self) -> usize {
        2 * self.half_dim
    }

    pub fn num_keys(&self) -> usize {
        self.half_n * self.half_n
    }

    pub fn qk_norm(&self) -> bool {
        self.qk_norm
    }

    pub fn set_qk_norm(&mut self, on: bool) {
        self.qk_norm = on;
    }

    pub fn k1(&self) -> &Tensor<T> {
        &self.k1
    }

    pub fn k2(&self) -> &Tensor<T> {
        &self.k2
    }

    pub fn keys_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.k1, &mut self.k2)
    }

    /// Splits a flat index into its half-key rows.
    pub fn unflatten(&self, flat: usize) -> (usize, usize) {
        (flat / self.half_n, flat % self.half_n)
    }

    pub fn topk(&self, q: &[T], k: usize) -> Result<TopkResult<T>> {
        self.topk_counted(q, k, &mut LookupStats::default())
    }

    /// [`topk`](Self::topk) that also adds its operation counts to `stats`.
    pub fn topk_counted(&self, q: &[T], k: usize, stats: &mut LookupStats) -> Result<TopkResult<T>> {
        if q.len() != self.dim() {
            return Err(Error::dim(format!(
                "query of length {} for keys of width {}",
                q.len(),
                self.dim()
            )));
        }
        let queries = Tensor::from_parts(vec![1, q.len()], q.to_vec());
        let batch = search_batch(&self.k1, &self.k2, self.qk_norm, &queries, k, 1, stats)?;
        Ok(TopkResult {
            indices: batch.indices,
            scores: batch.scores,
        })
    }
}

/// Top-`k` results for a batch of queries, flattened `[queries × k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTopk<T: Scalar = f32> {
    pub indices: Vec<usize>,
    pub scores: Vec<T>,
    pub k: usize,
}

impl<T: Scalar> BatchTopk<T> {
    pub fn query(&self, t: usize) -> TopkResult<T> {
        TopkResult {
            indices: self.indices[t * self.k..(t + 1) * self.k].to_vec(),
            scores: self.scores[t * self.k..(t + 1) * self.k].to_vec(),
        }
    }
}

pub(crate) fn normalized_rows<T: Scalar>(keys: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(keys.shape());
    for r in 0..keys.rows() {
        ops::l2_normalize_into(keys.row(r), out.row_mut(r));
    }
    out
}

/// Product-key search of every row of `queries` against half-key tables `k1`, `k2`.
///
/// With `qk_norm`, query halves and key rows are L2-normalised before scoring.
/// Normalised key tables are built once per call (`2·half_n` rows, never `N`).
/// Queries are split across `workers`.
pub fn search_batch<T: Scalar>(
    k1: &Tensor<T>,
    k2: &Tensor<T>,
    qk_norm: bool,
    queries: &Tensor<T>,
    k: usize,
    workers: usize,
    stats: &mut LookupStats,
) -> Result<BatchTopk<T>> {
    let (half_n, h) = (k1.rows(), k1.cols());
    if k2.shape() != k1.shape() {
        return Err(Error::dim("half-key tables differ in shape"));
    }
    if queries.cols() != 2 * h {
        return Err(Error::dim(format!(
            "query of length {} for keys of width {}",
            queries.cols(),
            2 * h
        )));
    }
    if k == 0 || k > half_n {
        return Err(Error::config(format!("k = {k} must lie in 1..={half_n}")));
    }
    if !queries.all_finite() {
        return Err(Error::Numeric("non-finite query".into()));
    }
    let normed;
    let (t1, t2) = if qk_norm {
        normed = (normalized_rows(k1), normalized_rows(k2));
        (&normed.0, &normed.1)
    } else {
        (k1, k2)
    };
    let nq = queries.rows();
    let mut slots: Vec<(usize, T)> = vec![(0, T::zero()); nq * k];
    crate::parallel::for_each_row_block(&mut slots, k, workers, |first, block| {
        let mut qn = vec![T::zero(); 2 * h];
        for (i, dst) in block.chunks_mut(k).enumerate() {
            let q = queries.row(first + i);
            let (q1, q2) = if qk_norm {
                let (a, b) = qn.split_at_mut(h);
                ops::l2_normalize_into(&q[..h], a);
                ops::l2_normalize_into(&q[h..], b);
                (&qn[..h], &qn[h..])
            } else {
                (&q[..h], &q[h..])
            };
            // shapes and k were validated above, so the half searches cannot fail
            let (i1, s1) = half_topk(t1, q1, k).expect("validated half search");
            let (i2, s2) = half_topk(t2, q2, k).expect("validated half search");
            let r = combine_topk(&i1, &s1, &i2, &s2, half_n, k);
            for (d, (idx, sc)) in dst.iter_mut().zip(r.indices.into_iter().zip(r.scores)) {
                *d = (idx, sc);
            }
        }
    });
    stats.half_key_macs += (nq * 2 * half_n * h) as u64;
    stats.combine_candidates += (nq * k * k) as u64;
    let (indices, scores) = slots.into_iter().unzip();
    Ok(BatchTopk { indices, scores, k })
}

/// Reference search that materialises every virtual key.
pub mod oracle {
    use super::*;

    /// Largest virtual key set the oracle agrees to build.
    pub const MAX_KEYS: usize = 1 << 20;

    /// Scores all `half_n²` concatenated keys and fully sorts them.
    pub fn brute_force_topk<T: Scalar>(index: &PkIndex<T>, q: &[T], k: usize) -> Result<TopkResult<T>> {
        let n_keys = index.num_keys();
        if n_keys > MAX_KEYS {
            return Err(Error::config(format!(
                "oracle guard: {n_keys} keys exceeds {MAX_KEYS}"
            )));
        }
        let h = index.half_dim();
        if q.len() != 2 * h {
            return Err(Error::dim("query width"));
        }
        let mut query = q.to_vec();
        if index.qk_norm() {
            let (a, b) = q.split_at(h);
            ops::l2_normalize_into(a, &mut query[..h]);
            ops::l2_normalize_into(b, &mut query[h..]);
        }
        let mut keys = vec![T::zero(); n_keys * 2 * h];
        for (i, row) in keys.chunks_mut(2 * h).enumerate() {
            let (a, b) = (i / index.half_n(), i % index.half_n());
            let (left, right) = row.split_at_mut(h);
            if index.qk_norm() {
                ops::l2_normalize_into(index.k1().row(a), left);
                ops::l2_normalize_into(index.k2().row(b), right);
            } else {
                left.copy_from_slice(index.k1().row(a));
                right.copy_from_slice(index.k2().row(b));
            }
        }
        let dot = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
        let mut all: Vec<(T, usize)> = keys
            .chunks(2 * h)
            .enumerate()
            // summed per half so that rounding matches the factored search exactly
            .map(|(i, row)| (dot(&query[..h], &row[..h]) + dot(&query[h..], &row[h..]), i))
            .collect();
        all.sort_by(|&a, &b| rank(a, b));
        all.truncate(k);
        let (indices, scores) = all.into_iter().map(|(s, i)| (i, s)).unzip();
        Ok(TopkResult { indices, scores })
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::brute_force_topk;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_cases() {
        let q = [1.0f32, 2.0, 3.0, 4.0];
        assert_eq!(split_query(&q).unwrap(), (&q[..2], &q[2..]));
        let q = [5.0f32, 6.0];
        assert_eq!(split_query(&q).unwrap(), (&[5.0f32][..], &[6.0f32][..]));
        assert!(matches!(split_query(&[1.0f32, 2.0, 3.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn half_topk_identity_rows() {
        let eye = Tensor::<f64>::from_rows(&[
            &[1.0, 0.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 0.0],
            &[0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let (i, s) = half_topk(&eye, &[0.0, 0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!((i, s), (vec![2], vec![1.0]));

        let flat = Tensor::<f64>::from_rows(&[&[1.0], &[1.0], &[1.0]]).unwrap();
        let (i, _) = half_topk(&flat, &[2.0], 2).unwrap();
        assert_eq!(i, vec![0, 1]);

        assert!(matches!(half_topk(&eye, &[0.0; 4], 5), Err(Error::Config(_))));
    }

    #[test]
    fn half_topk_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let keys = Tensor::<f64>::uniform(&[16, 4], 1.0, &mut rng);
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut all: Vec<(f64, usize)> = (0..16)
                .map(|i| (keys.row(i).iter().zip(&q).map(|(a, b)| a * b).sum(), i))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let (i, s) = half_topk(&keys, &q, 5).unwrap();
            assert_eq!(i, all[..5].iter().map(|x| x.1).collect::<Vec<_>>());
            assert_eq!(s, all[..5].iter().map(|x| x.0).collect::<Vec<_>>());
        }
    }

    #[test]
    fn combine_cases() {
        let r = combine_topk(&[7], &[1.5f64], &[3], &[2.0], 10, 1);
        assert_eq!(r.indices, vec![73]);
        assert_eq!(r.scores, vec![3.5]);

        // s1 = [3, 1], s2 = [2, 0]: best pairs are (0,0) = 5 and (0,1) = 3; (1,0) ties
        // at 3 but has the larger flat index.
        let r = combine_topk(&[0, 1], &[3.0f64, 1.0], &[0, 1], &[2.0, 0.0], 2, 2);
        assert_eq!(r.indices, vec![0, 1]);
        assert_eq!(r.scores, vec![5.0, 3.0]);
    }

    #[test]
    fn tiny_enumerable_index() {
        // half_n = 2 and half_dim = 1: four virtual keys (1,1), (1,-1), (-1,1), (-1,-1).
        let k1 = Tensor::<f64>::from_rows(&[&[1.0], &[-1.0]]).unwrap();
        let k2 = Tensor::<f64>::from_rows(&[&[1.0], &[-1.0]]).unwrap();
        let idx = PkIndex::from_keys(k1, k2, false).unwrap();
        let r = idx.topk(&[2.0, -1.0], 2).unwrap();
        assert_eq!(r.indices, vec![1, 0]);
        assert_eq!(r.scores, vec![3.0, 1.0]);
    }

    #[test]
    fn duplicate_rows_give_distinct_indices() {
        let k1 = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let k2 = Tensor::<f64>::from_rows(&[&[0.5, 0.5], &[0.0, 0.0], &[0.1, 0.9]]).unwrap();
        let idx = PkIndex::from_keys(k1, k2, false).unwrap();
        let q = [1.0, 0.0, 1.0, 1.0];
        let r = idx.topk(&q, 3).unwrap();
        assert_eq!(r, brute_force_topk(&idx, &q, 3).unwrap());
        let mut seen = r.indices.clone();
        seen.dedup();
        assert_eq!(seen.len(), 3);
        assert_eq!(r.indices, vec![0, 2, 3]);
    }

    #[test]
    fn oracle_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let idx = PkIndex::<f64>::new(4, 2, false, &mut rng).unwrap();
        let q = [0.3, -0.2, 0.9, 0.1];
        let all = brute_force_topk(&idx, &q, 16).unwrap();
        assert_eq!(all.len(), 16);
        assert!(all.scores.windows(2).all(|w| w[0] >= w[1]));

        let zero = brute_force_topk(&idx, &[0.0; 4], 3).unwrap();
        assert_eq!(zero.indices, vec![0, 1, 2]);
        assert_eq!(idx.topk(&[0.0; 4], 3).unwrap(), zero);
    }

    #[test]
    fn oracle_guard() {
        let idx = PkIndex::<f32>::from_keys(Tensor::zeros(&[1025, 1]), Tensor::zeros(&[1025, 1]), false).unwrap();
        assert!(matches!(brute_force_topk(&idx, &[0.0, 0.0], 1), Err(Error::Config(_))));
    }

    #[test]
    fn random_instances_match_oracle() {
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = PkIndex::<f32>::new(16, 4, seed % 2 == 0, &mut rng).unwrap();
            let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert_eq!(idx.topk(&q, 4).unwrap(), brute_force_topk(&idx, &q, 4).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn batch_search_matches_single_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for qk in [false, true] {
            let idx = PkIndex::<f32>::new(16, 4, qk, &mut rng).unwrap();
            let qs = Tensor::<f32>::uniform(&[9, 8], 1.0, &mut rng);
            for workers in [1, 4] {
                let mut stats = LookupStats::default();
                let b = search_batch(idx.k1(), idx.k2(), qk, &qs, 3, workers, &mut stats).unwrap();
                for t in 0..9 {
                    assert_eq!(b.query(t), idx.topk(qs.row(t), 3).unwrap());
                }
            }
        }
    }

    #[test]
    fn cost_is_sublinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let idx = PkIndex::<f32>::new(64, 8, false, &mut rng).unwrap();
        let q: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut stats = LookupStats::default();
        idx.topk_counted(&q, 16, &mut stats).unwrap();
        assert!(stats.score_ops() <= (2 * 64 * 8 + 16 * 16) as u64);
        assert!(stats.score_ops() < (64 * 64 * 16) as u64);
    }

    #[test]
    fn qk_norm_bounds_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let idx = PkIndex::<f64>::new(16, 4, true, &mut rng).unwrap();
        let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let r = idx.topk(&q, 16).unwrap();
        // each combined score is the sum of two half scores in [-1, 1]
        assert!(r.scores.iter().all(|s| s.abs() <= 2.0 + 1e-9));
        let (a, b) = split_query(&q).unwrap();
        let mut na = vec![0.0; 4];
        let mut nb = vec![0.0; 4];
        ops::l2_normalize_into(a, &mut na);
        ops::l2_normalize_into(b, &mut nb);
        let (_, s1) = half_topk(&normalized_rows(idx.k1()), &na, 16).unwrap();
        let (_, s2) = half_topk(&normalized_rows(idx.k2()), &nb, 16).unwrap();
        assert!(s1.iter().chain(&s2).all(|s| s.abs() <= 1.0 + 1e-9));
    }

    proptest! {
        #[test]
        fn topk_is_deterministic_and_exact(seed in 0u64..10_000, half_n in prop::sample::select(vec![4usize, 16, 64]), k in 1usize..=16) {
            let k = k.min(half_n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = PkIndex::<f32>::new(half_n, 3, false, &mut rng).unwrap();
            let q: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = idx.topk(&q, k).unwrap();
            prop_assert_eq!(&a, &idx.topk(&q, k).unwrap());
            prop_assert_eq!(a, brute_force_topk(&idx, &q, k).unwrap());
        }
    }
}
