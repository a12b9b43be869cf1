//! Sequential reference implementations used as oracles by tests, the
//! benchmark checksums and the sharding checks.

use super::{BagBatch, SparseGrad};
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

/// Two nested loops over bags and slots.
pub fn sequential_forward<T: Scalar>(values: &Tensor<T>, batch: &BagBatch<T>) -> Vec<T> {
    let n = values.cols();
    let mut out = vec![T::zero(); batch.len() * n];
    for b in 0..batch.len() {
        for j in 0..batch.bag_size {
            let p = b * batch.bag_size + j;
            for d in 0..n {
                out[b * n + d] += batch.weights[p] * values.row(batch.indices[p])[d];
            }
        }
    }
    out
}

/// Scatter-add in ascending position order.
pub fn scatter_add<T: Scalar>(grad_out: &Tensor<T>, batch: &BagBatch<T>) -> SparseGrad<T> {
    let n = grad_out.cols();
    let mut acc: BTreeMap<usize, Vec<T>> = BTreeMap::new();
    for p in 0..batch.positions() {
        let b = p / batch.bag_size;
        let row = acc.entry(batch.indices[p]).or_insert_with(|| vec![T::zero(); n]);
        for d in 0..n {
            row[d] += batch.weights[p] * grad_out.row(b)[d];
        }
    }
    let mut out = SparseGrad::empty(n);
    for (r, g) in acc {
        out.rows.push(r);
        out.grads.extend(g);
    }
    out
}
