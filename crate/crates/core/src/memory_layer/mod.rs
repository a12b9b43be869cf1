//! Product-key memory layers over a shared value pool.
//!
//! A lookup scores the query against the product keys, keeps the best `k`,
//! softmaxes their scores and returns the weighted sum of the matching value
//! rows. The gated variant multiplies that sum by `silu(x·W1)` and projects it
//! back with `W2`. Keys and values live in a [`MemoryPool`] that any number of
//! layers can share; each layer owns its projections.

use crate::embedding_bag::{bag_backward, bag_forward, BagBatch, SparseGrad, Strategy};
use crate::error::{Error, Result};
use crate::pk_index::{normalized_rows, search_batch, BatchTopk, LookupStats, PkIndex, TopkResult};
use crate::tensor::{ops, CustomOp, Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::any::Any;

pub mod gradcheck;

#[derive(Clone, Debug)]
pub struct MemoryPool<T: Scalar = f32> {
    index: PkIndex<T>,
    values: Tensor<T>,
    ref_count: usize,
}

impl<T: Scalar> MemoryPool<T> {
    /// Random pool with `half_n²` value rows of width `v_dim`.
    ///
    /// Keys and values are drawn uniformly from `±1/√(key_dim/2)`.
    pub fn new(half_n: usize, key_dim: usize, v_dim: usize, qk_norm: bool, rng: &mut impl Rng) -> Result<Self> {
        if key_dim == 0 || key_dim % 2 != 0 {
            return Err(Error::config(format!("key_dim {key_dim} must be positive and even")));
        }
        if v_dim == 0 {
            return Err(Error::config("v_dim must be positive"));
        }
        let index = PkIndex::new(half_n, key_dim / 2, qk_norm, rng)?;
        let bound = 1.0 / ((key_dim / 2) as f64).sqrt();
        let values = Tensor::uniform(&[half_n * half_n, v_dim], bound, rng);
        Ok(Self {
            index,
            values,
            ref_count: 0,
        })
    }

    pub fn from_parts(index: PkIndex<T>, values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != index.num_keys() {
            return Err(Error::dim(format!(
                "value table {:?} does not have {} rows",
                values.shape(),
                index.num_keys()
            )));
        }
        Ok(Self {
            index,
            values,
            ref_count: 0,
        })
    }

    pub fn index(&self) -> &PkIndex<T> {
        &self.index
    }

    pub fn index_mut(&mut self) -> &mut PkIndex<T> {
        &mut self.index
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor<T> {
        &mut self.values
    }

    pub fn num_values(&self) -> usize {
        self.values.rows()
    }

    pub fn v_dim(&self) -> usize {
        self.values.cols()
    }

    pub fn key_dim(&self) -> usize {
        self.index.dim()
    }

    pub fn ref_count(&self) -> usize {
        self.ref_count
    }

    /// Keys plus values; the same however many layers are attached.
    pub fn param_count(&self) -> usize {
        2 * self.index.half_n() * self.index.half_dim() + self.values.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    /// Width of the layer input and output.
    pub model_dim: usize,
    pub k: usize,
    pub use_swilu: bool,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_strategy() -> Strategy {
    Strategy::ReverseIndices
}

fn default_workers() -> usize {
    1
}

impl LayerConfig {
    pub fn new(model_dim: usize, k: usize, use_swilu: bool) -> Self {
        Self {
            model_dim,
            k,
            use_swilu,
            strategy: default_strategy(),
            workers: default_workers(),
        }
    }
}

/// One memory layer: lookup configuration and its private projections.
#[derive(Clone, Debug)]
pub struct MemoryLayer<T: Scalar = f32> {
    pub config: LayerConfig,
    /// `[n × v_dim]`, gated variant only.
    pub w1: Option<Tensor<T>>,
    /// `[v_dim × n]`, gated variant only.
    pub w2: Option<Tensor<T>>,
    /// `[v_dim × n]`, ungated variant with `v_dim ≠ n`.
    pub value_proj: Option<Tensor<T>>,
    /// `[n × key_dim]`, present when the pool's key width differs from `n`.
    pub query_proj: Option<Tensor<T>>,
}

/// Work done by one forward call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryStats {
    pub tokens: u64,
    /// Value rows gathered (`tokens·k`).
    pub rows_read: u64,
    pub lookup: LookupStats,
    pub flops: u64,
}

/// Forward state needed by backward.
#[derive(Clone, Debug)]
pub struct MemoryCache<T: Scalar = f32> {
    x: Tensor<T>,
    q: Tensor<T>,
    topk: BatchTopk<T>,
    /// Softmax weights, `[tokens × k]`.
    weights: Vec<T>,
    /// Selected value rows, `[tokens·k × v_dim]`.
    gathered: Vec<T>,
    y: Tensor<T>,
    /// `x·W1` and `silu(x·W1)` for the gated variant.
    pre_gate: Option<Tensor<T>>,
    gate: Option<Tensor<T>>,
    pub stats: MemoryStats,
}

impl<T: Scalar> MemoryCache<T> {
    pub fn topk(&self) -> &BatchTopk<T> {
        &self.topk
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// The weighted value sum before gating or projection.
    pub fn lookup_output(&self) -> &Tensor<T> {
        &self.y
    }
}

#[derive(Clone, Debug)]
pub struct MemoryGrads<T: Scalar = f32> {
    pub x: Tensor<T>,
    pub k1: Tensor<T>,
    pub k2: Tensor<T>,
    pub values: SparseGrad<T>,
    pub w1: Option<Tensor<T>>,
    pub w2: Option<Tensor<T>>,
    pub value_proj: Option<Tensor<T>>,
    pub query_proj: Option<Tensor<T>>,
}

/// Borrowed parameters a forward or backward pass runs against.
struct Params<'a, T: Scalar> {
    k1: &'a Tensor<T>,
    k2: &'a Tensor<T>,
    qk_norm: bool,
    w1: Option<&'a Tensor<T>>,
    w2: Option<&'a Tensor<T>>,
    value_proj: Option<&'a Tensor<T>>,
    query_proj: Option<&'a Tensor<T>>,
}

fn check_shape<T: Scalar>(t: &Tensor<T>, shape: [usize; 2], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::dim(format!("{what} is {:?}, expected {shape:?}", t.shape())));
    }
    Ok(())
}

impl<T: Scalar> MemoryLayer<T> {
    /// Fresh layer for `pool`; projections drawn from `±1/√fan_in`.
    pub fn new(config: LayerConfig, pool: &MemoryPool<T>, rng: &mut impl Rng) -> Result<Self> {
        let n = config.model_dim;
        let v = pool.v_dim();
        let kd = pool.key_dim();
        if n == 0 {
            return Err(Error::config("model_dim must be positive"));
        }
        if config.k == 0 || config.k > pool.index().half_n() {
            return Err(Error::config(format!(
                "k = {} must lie in 1..={}",
                config.k,
                pool.index().half_n()
            )));
        }
        if config.workers == 0 {
            return Err(Error::config("workers must be positive"));
        }
        let mut init = |rows: usize, cols: usize| Tensor::uniform(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng);
        let (w1, w2) = if config.use_swilu {
            (Some(init(n, v)), Some(init(v, n)))
        } else {
            (None, None)
        };
        let value_proj = (!config.use_swilu && v != n).then(|| init(v, n));
        let query_proj = (kd != n).then(|| init(n, kd));
        Ok(Self {
            config,
            w1,
            w2,
            value_proj,
            query_proj,
        })
    }

    pub fn param_count(&self) -> usize {
        [&self.w1, &self.w2, &self.value_proj, &self.query_proj]
            .iter()
            .filter_map(|t| t.as_ref().map(Tensor::len))
            .sum()
    }

    /// Analytic forward cost of one token.
    pub fn flops_per_token(&self, pool: &MemoryPool<T>) -> u64 {
        self.flops_from(&self.params(pool), pool.v_dim())
    }

    fn params<'a>(&'a self, pool: &'a MemoryPool<T>) -> Params<'a, T> {
        Params {
            k1: pool.index().k1(),
            k2: pool.index().k2(),
            qk_norm: pool.index().qk_norm(),
            w1: self.w1.as_ref(),
            w2: self.w2.as_ref(),
            value_proj: self.value_proj.as_ref(),
            query_proj: self.query_proj.as_ref(),
        }
    }

    fn check(&self, p: &Params<'_, T>, v_dim: usize) -> Result<()> {
        let n = self.config.model_dim;
        let kd = 2 * p.k1.cols();
        if let Some(w) = p.w1 {
            check_shape(w, [n, v_dim], "W1")?;
        }
        if let Some(w) = p.w2 {
            check_shape(w, [v_dim, n], "W2")?;
        }
        if let Some(w) = p.value_proj {
            check_shape(w, [v_dim, n], "value projection")?;
        }
        if let Some(w) = p.query_proj {
            check_shape(w, [n, kd], "query projection")?;
        } else if kd != n {
            return Err(Error::dim(format!("keys of width {kd} need a query projection from {n}")));
        }
        if self.config.use_swilu != (p.w1.is_some() && p.w2.is_some()) {
            return Err(Error::State("gating weights do not match use_swilu".into()));
        }
        if !self.config.use_swilu && p.value_proj.is_none() && v_dim != n {
            return Err(Error::dim(format!("v_dim {v_dim} ≠ n {n} without a value projection")));
        }
        Ok(())
    }

    /// Batched forward over the rows of `x` (`[tokens × n]`).
    pub fn forward(&self, pool: &MemoryPool<T>, x: &Tensor<T>) -> Result<(Tensor<T>, MemoryCache<T>)> {
        let p = self.params(pool);
        self.forward_with(&p, pool.values(), x)
    }

    fn forward_with(&self, p: &Params<'_, T>, values: &Tensor<T>, x: &Tensor<T>) -> Result<(Tensor<T>, MemoryCache<T>)> {
        let cfg = &self.config;
        let n = cfg.model_dim;
        let v_dim = values.cols();
        self.check(p, v_dim)?;
        if x.cols() != n {
            return Err(Error::dim(format!("input width {} ≠ {n}", x.cols())));
        }
        let tokens = x.rows();
        let x2 = Tensor::from_parts(vec![tokens, n], x.data().to_vec());
        let q = match p.query_proj {
            Some(w) => ops::matmul(&x2, w)?,
            None => x2.clone(),
        };
        let mut lookup = LookupStats::default();
        let topk = search_batch(p.k1, p.k2, p.qk_norm, &q, cfg.k, cfg.workers, &mut lookup)?;
        let k = cfg.k;
        let mut weights = vec![T::zero(); tokens * k];
        for (s, w) in topk.scores.chunks(k).zip(weights.chunks_mut(k)) {
            ops::softmax_row(s, w);
        }
        let batch = BagBatch::new(topk.indices.clone(), weights.clone(), k)?;
        let y = bag_forward(values, &batch, cfg.workers)?;
        let mut gathered = Vec::with_capacity(tokens * k * v_dim);
        for &i in &topk.indices {
            gathered.extend_from_slice(values.row(i));
        }
        let (out, pre_gate, gate) = match (p.w1, p.w2) {
            (Some(w1), Some(w2)) => {
                let u = ops::matmul(&x2, w1)?;
                let g = ops::silu(&u);
                let h = Tensor::from_parts(
                    vec![tokens, v_dim],
                    y.data().iter().zip(g.data()).map(|(&a, &b)| a * b).collect(),
                );
                (ops::matmul(&h, w2)?, Some(u), Some(g))
            }
            _ => match p.value_proj {
                Some(wp) => (ops::matmul(&y, wp)?, None, None),
                None => (y.clone(), None, None),
            },
        };
        let stats = MemoryStats {
            tokens: tokens as u64,
            rows_read: (tokens * k) as u64,
            lookup,
            flops: 0,
        };
        let mut cache = MemoryCache {
            x: x2,
            q,
            topk,
            weights,
            gathered,
            y,
            pre_gate,
            gate,
            stats,
        };
        cache.stats.flops = tokens as u64 * self.flops_from(p, v_dim);
        Ok((out, cache))
    }

    fn flops_from(&self, p: &Params<'_, T>, v_dim: usize) -> u64 {
        let n = self.config.model_dim as u64;
        let k = self.config.k as u64;
        let v = v_dim as u64;
        let kd = 2 * p.k1.cols() as u64;
        let mut f = 2 * p.k1.rows() as u64 * kd + k * k + 4 * k + 2 * k * v;
        if p.query_proj.is_some() {
            f += 2 * n * kd;
        }
        if p.qk_norm {
            f += 3 * kd;
        }
        if p.w1.is_some() {
            f += 2 * n * v + 5 * v + 2 * v * n;
        } else if p.value_proj.is_some() {
            f += 2 * v * n;
        }
        f
    }

    /// Gradients of every parameter group given `grad_out` (`[tokens × n]`).
    pub fn backward(
        &self,
        pool: &MemoryPool<T>,
        cache: Option<&MemoryCache<T>>,
        grad_out: &Tensor<T>,
    ) -> Result<MemoryGrads<T>> {
        let cache = cache.ok_or_else(|| Error::State("memory backward without a cached forward".into()))?;
        let p = self.params(pool);
        self.backward_with(&p, cache, grad_out.data())
    }

    fn backward_with(&self, p: &Params<'_, T>, c: &MemoryCache<T>, g: &[T]) -> Result<MemoryGrads<T>> {
        let cfg = &self.config;
        let n = cfg.model_dim;
        let k = cfg.k;
        let tokens = c.x.rows();
        let v_dim = c.y.cols();
        let h = p.k1.cols();
        let half_n = p.k1.rows();
        if g.len() != tokens * n {
            return Err(Error::dim(format!("grad_out has {} values, expected {}", g.len(), tokens * n)));
        }
        let mut dx = vec![T::zero(); tokens * n];
        let mut dw1 = None;
        let mut dw2 = None;
        let mut dwp = None;
        let dy: Vec<T> = match (p.w1, p.w2, &c.pre_gate, &c.gate) {
            (Some(w1), Some(w2), Some(u), Some(gate)) => {
                let hidden: Vec<T> = c.y.data().iter().zip(gate.data()).map(|(&a, &b)| a * b).collect();
                let mut d = vec![T::zero(); v_dim * n];
                ops::gemm_into(&hidden, true, g, false, &mut d, v_dim, tokens, n, T::zero());
                dw2 = Some(Tensor::from_parts(vec![v_dim, n], d));
                let mut dh = vec![T::zero(); tokens * v_dim];
                ops::gemm_into(g, false, w2.data(), true, &mut dh, tokens, n, v_dim, T::zero());
                let mut du = vec![T::zero(); tokens * v_dim];
                let mut dy = vec![T::zero(); tokens * v_dim];
                for i in 0..tokens * v_dim {
                    dy[i] = dh[i] * gate.data()[i];
                    du[i] = dh[i] * c.y.data()[i] * ops::silu_grad_scalar(u.data()[i]);
                }
                let mut d = vec![T::zero(); n * v_dim];
                ops::gemm_into(c.x.data(), true, &du, false, &mut d, n, tokens, v_dim, T::zero());
                dw1 = Some(Tensor::from_parts(vec![n, v_dim], d));
                ops::gemm_into(&du, false, w1.data(), true, &mut dx, tokens, v_dim, n, T::one());
                dy
            }
            (None, None, _, _) => match p.value_proj {
                Some(wp) => {
                    let mut d = vec![T::zero(); v_dim * n];
                    ops::gemm_into(c.y.data(), true, g, false, &mut d, v_dim, tokens, n, T::zero());
                    dwp = Some(Tensor::from_parts(vec![v_dim, n], d));
                    let mut dy = vec![T::zero(); tokens * v_dim];
                    ops::gemm_into(g, false, wp.data(), true, &mut dy, tokens, n, v_dim, T::zero());
                    dy
                }
                None => g.to_vec(),
            },
            _ => return Err(Error::State("cached forward does not match the layer's gating".into())),
        };

        let dy_t = Tensor::from_parts(vec![tokens, v_dim], dy);
        let batch = BagBatch::new(c.topk.indices.clone(), c.weights.clone(), k)?;
        let dv = bag_backward(cfg.strategy, &dy_t, &batch, cfg.workers)?;

        // score gradients through the softmax over the selected keys
        let mut dscore = vec![T::zero(); tokens * k];
        let mut dweight = vec![T::zero(); k];
        for t in 0..tokens {
            let dyr = dy_t.row(t);
            for j in 0..k {
                let row = &c.gathered[(t * k + j) * v_dim..(t * k + j + 1) * v_dim];
                dweight[j] = row.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
            }
            ops::softmax_row_backward(&c.weights[t * k..(t + 1) * k], &dweight, &mut dscore[t * k..(t + 1) * k]);
        }

        let (t1, t2) = if p.qk_norm {
            (normalized_rows(p.k1), normalized_rows(p.k2))
        } else {
            (p.k1.clone(), p.k2.clone())
        };
        let mut dk1 = vec![T::zero(); half_n * h];
        let mut dk2 = vec![T::zero(); half_n * h];
        let kd = 2 * h;
        let mut dq = vec![T::zero(); tokens * kd];
        let mut qn = vec![T::zero(); kd];
        let mut radius = [T::zero(); 2];
        for t in 0..tokens {
            let q = c.q.row(t);
            if p.qk_norm {
                radius[0] = ops::l2_normalize_into(&q[..h], &mut qn[..h]);
                radius[1] = ops::l2_normalize_into(&q[h..], &mut qn[h..]);
            } else {
                qn.copy_from_slice(q);
            }
            let mut dqn = vec![T::zero(); kd];
            for j in 0..k {
                let ds = dscore[t * k + j];
                let flat = c.topk.indices[t * k + j];
                let (i1, i2) = (flat / half_n, flat % half_n);
                for d in 0..h {
                    dk1[i1 * h + d] += ds * qn[d];
                    dk2[i2 * h + d] += ds * qn[h + d];
                    dqn[d] += ds * t1.row(i1)[d];
                    dqn[h + d] += ds * t2.row(i2)[d];
                }
            }
            let dqt = &mut dq[t * kd..(t + 1) * kd];
            if p.qk_norm {
                let (a, b) = dqt.split_at_mut(h);
                ops::l2_normalize_backward(&q[..h], radius[0], &dqn[..h], a);
                ops::l2_normalize_backward(&q[h..], radius[1], &dqn[h..], b);
            } else {
                dqt.copy_from_slice(&dqn);
            }
        }
        let (dk1, dk2) = if p.qk_norm {
            (raw_key_grad(p.k1, &dk1), raw_key_grad(p.k2, &dk2))
        } else {
            (dk1, dk2)
        };

        let mut dwq = None;
        match p.query_proj {
            Some(wq) => {
                let mut d = vec![T::zero(); n * kd];
                ops::gemm_into(c.x.data(), true, &dq, false, &mut d, n, tokens, kd, T::zero());
                dwq = Some(Tensor::from_parts(vec![n, kd], d));
                ops::gemm_into(&dq, false, wq.data(), true, &mut dx, tokens, kd, n, T::one());
            }
            None => dx.iter_mut().zip(&dq).for_each(|(a, &b)| *a += b),
        }

        Ok(MemoryGrads {
            x: Tensor::from_parts(vec![tokens, n], dx),
            k1: Tensor::from_parts(vec![half_n, h], dk1),
            k2: Tensor::from_parts(vec![half_n, h], dk2),
            values: dv,
            w1: dw1,
            w2: dw2,
            value_proj: dwp,
            query_proj: dwq,
        })
    }

    /// Records the layer on `graph`; `keys` are the pool's half-key tables as graph values.
    ///
    /// Value-table gradients never enter the graph. After backward they are on
    /// the returned node's [`MemoryOp`], see [`Graph::custom_op`].
    pub fn record(
        &self,
        graph: &mut Graph<T>,
        values: &Tensor<T>,
        qk_norm: bool,
        keys: (Var, Var),
        vars: &LayerVars,
        x: Var,
    ) -> Result<Var> {
        let mut inputs = vec![x, keys.0, keys.1];
        let slots = [vars.w1, vars.w2, vars.value_proj, vars.query_proj];
        inputs.extend(slots.iter().flatten());
        let (out, cache) = {
            let p = params_from(graph, &inputs, qk_norm, vars.layout());
            self.forward_with(&p, values, graph.value(x))?
        };
        let flops = cache.stats.flops;
        let op = MemoryOp {
            layer: self.clone(),
            qk_norm,
            layout: vars.layout(),
            cache,
            value_grad: None,
        };
        Ok(graph.custom(&inputs, out, Box::new(op), flops))
    }
}

/// Graph handles of a layer's projections.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerVars {
    pub w1: Option<Var>,
    pub w2: Option<Var>,
    pub value_proj: Option<Var>,
    pub query_proj: Option<Var>,
}

impl LayerVars {
    fn layout(&self) -> [bool; 4] {
        [
            self.w1.is_some(),
            self.w2.is_some(),
            self.value_proj.is_some(),
            self.query_proj.is_some(),
        ]
    }
}

fn params_from<'a, T: Scalar>(graph: &'a Graph<T>, inputs: &[Var], qk_norm: bool, layout: [bool; 4]) -> Params<'a, T> {
    let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| graph.value(v)).collect();
    params_from_slice(&vals, qk_norm, layout)
}

fn params_from_slice<'a, T: Scalar>(vals: &[&'a Tensor<T>], qk_norm: bool, layout: [bool; 4]) -> Params<'a, T> {
    let mut rest = vals[3..].iter();
    let mut next = |on: bool| if on { rest.next().copied() } else { None };
    let w1 = next(layout[0]);
    let w2 = next(layout[1]);
    let value_proj = next(layout[2]);
    let query_proj = next(layout[3]);
    Params {
        k1: vals[1],
        k2: vals[2],
        qk_norm,
        w1,
        w2,
        value_proj,
        query_proj,
    }
}

/// Maps gradients w.r.t. normalised key rows back to the raw rows.
fn raw_key_grad<T: Scalar>(keys: &Tensor<T>, d_unit: &[T]) -> Vec<T> {
    let h = keys.cols();
    let mut out = vec![T::zero(); keys.len()];
    let mut scratch = vec![T::zero(); h];
    for r in 0..keys.rows() {
        let du = &d_unit[r * h..(r + 1) * h];
        if du.iter().all(|v| v.is_zero()) {
            continue;
        }
        let radius = ops::l2_normalize_into(keys.row(r), &mut scratch);
        ops::l2_normalize_backward(keys.row(r), radius, du, &mut out[r * h..(r + 1) * h]);
    }
    out
}

/// Tape node for a memory layer. Holds its forward cache and, after backward,
/// the sparse value-table gradient.
pub struct MemoryOp<T: Scalar> {
    layer: MemoryLayer<T>,
    qk_norm: bool,
    layout: [bool; 4],
    cache: MemoryCache<T>,
    value_grad: Option<SparseGrad<T>>,
}

impl<T: Scalar> MemoryOp<T> {
    pub fn value_grad(&self) -> Option<&SparseGrad<T>> {
        self.value_grad.as_ref()
    }

    pub fn cache(&self) -> &MemoryCache<T> {
        &self.cache
    }
}

impl<T: Scalar> CustomOp<T> for MemoryOp<T> {
    fn name(&self) -> &'static str {
        "memory"
    }

    fn backward(&mut self, inputs: &[&Tensor<T>], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let p = params_from_slice(inputs, self.qk_norm, self.layout);
        let g = self.layer.backward_with(&p, &self.cache, grad_out)?;
        self.value_grad = Some(g.values);
        let mut out = vec![Some(g.x.into_data()), Some(g.k1.into_data()), Some(g.k2.into_data())];
        let optional = [g.w1, g.w2, g.value_proj, g.query_proj];
        for (on, t) in self.layout.iter().zip(optional) {
            if *on {
                out.push(t.map(Tensor::into_data));
            }
        }
        Ok(out)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Single-token lookup: the weighted value sum and the selected keys.
pub fn memory_lookup<T: Scalar>(layer: &MemoryLayer<T>, pool: &MemoryPool<T>, x: &[T]) -> Result<(Vec<T>, TopkResult<T>)> {
    let (_, cache) = layer.forward(pool, &token(layer, x)?)?;
    Ok((cache.y.into_data(), cache.topk.query(0)))
}

/// Single-token layer output (gated when `use_swilu`, otherwise projected or raw lookup).
pub fn memory_plus_forward<T: Scalar>(layer: &MemoryLayer<T>, pool: &MemoryPool<T>, x: &[T]) -> Result<Vec<T>> {
    Ok(layer.forward(pool, &token(layer, x)?)?.0.into_data())
}

pub fn memory_backward<T: Scalar>(
    layer: &MemoryLayer<T>,
    pool: &MemoryPool<T>,
    cache: Option<&MemoryCache<T>>,
    grad_output: &Tensor<T>,
) -> Result<MemoryGrads<T>> {
    layer.backward(pool, cache, grad_output)
}

fn token<T: Scalar>(layer: &MemoryLayer<T>, x: &[T]) -> Result<Tensor<T>> {
    if x.len() != layer.config.model_dim {
        return Err(Error::dim(format!(
            "input of length {} for model_dim {}",
            x.len(),
            layer.config.model_dim
        )));
    }
    Ok(Tensor::from_parts(vec![1, x.len()], x.to_vec()))
}

/// Creates `count` layers sharing `pool`.
///
/// `configs` holds either one config for every layer or exactly `count`.
pub fn attach_layers<T: Scalar>(
    pool: &mut MemoryPool<T>,
    count: usize,
    configs: &[LayerConfig],
    rng: &mut impl Rng,
) -> Result<Vec<MemoryLayer<T>>> {
    if count == 0 {
        return Err(Error::config("need at least one memory layer"));
    }
    if configs.len() != 1 && configs.len() != count {
        return Err(Error::config(format!("{} configs for {count} layers", configs.len())));
    }
    let layers = (0..count)
        .map(|i| MemoryLayer::new(configs[i.min(configs.len() - 1)].clone(), pool, rng))
        .collect::<Result<Vec<_>>>()?;
    pool.ref_count += count;
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(
        half_n: usize,
        key_dim: usize,
        v_dim: usize,
        n: usize,
        k: usize,
        swilu: bool,
        qk: bool,
        seed: u64,
    ) -> (MemoryPool<f64>, MemoryLayer<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = MemoryPool::new(half_n, key_dim, v_dim, qk, &mut rng).unwrap();
        let layer = attach_layers(&mut pool, 1, &[LayerConfig::new(n, k, swilu)], &mut rng)
            .unwrap()
            .remove(0);
        (pool, layer)
    }

    /// Scores every materialised key, sorts, softmaxes, sums: the lookup written out longhand.
    fn dense_lookup(pool: &MemoryPool<f64>, q: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
        let idx = pool.index();
        let h = idx.half_dim();
        let unit = |v: &[f64]| -> Vec<f64> {
            let r = 1.0 / (v.iter().map(|a| a * a).sum::<f64>() + 1e-6).sqrt();
            v.iter().map(|a| a * r).collect()
        };
        let (q1, q2) = if idx.qk_norm() {
            (unit(&q[..h]), unit(&q[h..]))
        } else {
            (q[..h].to_vec(), q[h..].to_vec())
        };
        let mut scored: Vec<(f64, usize)> = (0..idx.num_keys())
            .map(|i| {
                let (a, b) = idx.unflatten(i);
                let (r1, r2) = if idx.qk_norm() {
                    (unit(idx.k1().row(a)), unit(idx.k2().row(b)))
                } else {
                    (idx.k1().row(a).to_vec(), idx.k2().row(b).to_vec())
                };
                let s1: f64 = r1.iter().zip(&q1).map(|(x, y)| x * y).sum();
                let s2: f64 = r2.iter().zip(&q2).map(|(x, y)| x * y).sum();
                (s1 + s2, i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top = &scored[..k];
        let m = top[0].0;
        let z: f64 = top.iter().map(|s| (s.0 - m).exp()).sum();
        let mut y = vec![0.0; pool.v_dim()];
        for &(s, i) in top {
            for (o, v) in y.iter_mut().zip(pool.values().row(i)) {
                *o += (s - m).exp() / z * v;
            }
        }
        (top.iter().map(|t| t.1).collect(), y)
    }

    #[test]
    fn lookup_matches_dense_oracle() {
        for seed in 0..40 {
            for (half_n, k, qk) in [(4, 2, false), (4, 2, true), (4, 4, false), (8, 3, true), (8, 1, false)] {
                let (pool, layer) = setup(half_n, 8, 8, 8, k, false, qk, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let (y, top) = memory_lookup(&layer, &pool, &x).unwrap();
                let (oi, oy) = dense_lookup(&pool, &x, k);
                assert_eq!(top.indices, oi, "seed {seed}");
                let err = y.iter().zip(&oy).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-6, "seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn single_key_returns_its_row() {
        let (pool, layer) = setup(8, 8, 8, 8, 1, false, false, 3);
        let x = vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.7, 0.2, -0.1];
        let (y, top) = memory_lookup(&layer, &pool, &x).unwrap();
        assert_eq!(y, pool.values().row(top.indices[0]));
    }

    #[test]
    fn tied_keys_average() {
        let (pool, layer) = setup(4, 8, 8, 8, 2, false, false, 5);
        let (y, top) = memory_lookup(&layer, &pool, &[0.0; 8]).unwrap();
        assert_eq!(top.indices, vec![0, 1]);
        for d in 0..8 {
            let avg = 0.5 * (pool.values().row(0)[d] + pool.values().row(1)[d]);
            assert!((y[d] - avg).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_closes_the_gate() {
        let (pool, layer) = setup(4, 8, 8, 8, 2, true, false, 2);
        assert!(memory_plus_forward(&layer, &pool, &[0.0; 8]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_gate_passes_lookup_through() {
        let (pool, mut layer) = setup(4, 8, 8, 8, 2, true, false, 4);
        let eye = Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        layer.w1 = Some(eye.clone());
        layer.w2 = Some(eye);
        // silu(a) = 1 by bisection
        let (mut lo, mut hi) = (0.0f64, 3.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ops::silu_scalar(mid) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = vec![lo; 8];
        let out = memory_plus_forward(&layer, &pool, &x).unwrap();
        let (y, _) = memory_lookup(&layer, &pool, &x).unwrap();
        for (a, b) in out.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_output_matches_longhand() {
        for seed in 0..10 {
            let (pool, layer) = setup(8, 8, 6, 8, 3, true, seed % 2 == 0, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = memory_plus_forward(&layer, &pool, &x).unwrap();
            let (_, y) = dense_lookup(&pool, &x, 3);
            let (w1, w2) = (layer.w1.as_ref().unwrap(), layer.w2.as_ref().unwrap());
            let mut expect = vec![0.0; 8];
            for j in 0..6 {
                let u: f64 = (0..8).map(|i| x[i] * w1.row(i)[j]).sum();
                let h = y[j] * u / (1.0 + (-u).exp());
                for (o, w) in expect.iter_mut().zip(w2.row(j)) {
                    *o += h * w;
                }
            }
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "seed {seed}");
            }
        }
    }

    #[test]
    fn rows_read_and_weights() {
        let (pool, layer) = setup(8, 8, 8, 8, 4, true, true, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[5, 8], 1.0, &mut rng);
        let (_, cache) = layer.forward(&pool, &x).unwrap();
        assert_eq!(cache.stats.rows_read, 5 * 4);
        for w in cache.weights().chunks(4) {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(cache.stats.flops, 5 * layer.flops_per_token(&pool));
    }

    #[test]
    fn flops_grow_only_through_half_key_scoring() {
        let (small, layer_s) = setup(8, 8, 8, 8, 4, true, false, 1);
        let (big, layer_b) = setup(16, 8, 8, 8, 4, true, false, 1);
        let diff = layer_b.flops_per_token(&big) - layer_s.flops_per_token(&small);
        assert_eq!(diff, 2 * (16 - 8) * 8);
        assert_eq!(big.num_values(), 4 * small.num_values());
    }

    #[test]
    fn shared_pool_counts_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pool = MemoryPool::<f32>::new(8, 8, 8, false, &mut rng).unwrap();
        let before = pool.param_count();
        let layers = attach_layers(&mut pool, 3, &[LayerConfig::new(8, 2, true)], &mut rng).unwrap();
        assert_eq!(pool.ref_count(), 3);
        assert_eq!(pool.param_count(), before);
        assert_eq!(before, 2 * 8 * 4 + 64 * 8);
        assert!(layers.iter().all(|l| l.param_count() == 2 * 8 * 8));
        assert!(attach_layers(&mut pool, 0, &[LayerConfig::new(8, 2, true)], &mut rng).is_err());
        assert!(attach_layers(&mut pool, 2, &[LayerConfig::new(8, 9, true)], &mut rng).is_err());
    }

    #[test]
    fn backward_needs_cache() {
        let (pool, layer) = setup(4, 8, 8, 8, 2, true, false, 1);
        let g = Tensor::<f64>::zeros(&[1, 8]);
        assert!(matches!(memory_backward(&layer, &pool, None, &g), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (pool, layer) = setup(4, 8, 6, 8, 2, true, true, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(&[3, 8], 1.0, &mut rng);
        let (_, cache) = layer.forward(&pool, &x).unwrap();
        let g = memory_backward(&layer, &pool, Some(&cache), &Tensor::zeros(&[3, 8])).unwrap();
        for t in [&g.x, &g.k1, &g.k2, g.w1.as_ref().unwrap(), g.w2.as_ref().unwrap()] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        assert!(g.values.grads.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_key_has_no_key_gradient() {
        let (pool, layer) = setup(4, 8, 8, 8, 1, true, false, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[1, 8], 1.0, &mut rng);
        let go = Tensor::<f64>::uniform(&[1, 8], 1.0, &mut rng);
        let (_, cache) = layer.forward(&pool, &x).unwrap();
        let g = layer.backward(&pool, Some(&cache), &go).unwrap();
        assert!(g.k1.data().iter().chain(g.k2.data()).all(|&v| v == 0.0));
        let gate = ops::silu(&ops::matmul(&x, layer.w1.as_ref().unwrap()).unwrap());
        let back = ops::matmul(&go, &transpose(layer.w2.as_ref().unwrap())).unwrap();
        assert_eq!(g.values.rows, cache.topk().indices);
        for d in 0..8 {
            assert!((g.values.row(0)[d] - gate.data()[d] * back.data()[d]).abs() < 1e-14);
        }
    }

    fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
        let (r, c) = (t.rows(), t.cols());
        Tensor::from_fn(&[c, r], |i| t.row(i % r)[i / r])
    }

    #[test]
    fn graph_node_matches_direct_backward() {
        for swilu in [false, true] {
            let (pool, layer) = setup(4, 6, 6, 8, 2, swilu, true, 11);
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let x = Tensor::<f64>::uniform(&[4, 8], 1.0, &mut rng);
            let go = Tensor::<f64>::uniform(&[4, 8], 1.0, &mut rng);
            let (_, cache) = layer.forward(&pool, &x).unwrap();
            let direct = layer.backward(&pool, Some(&cache), &go).unwrap();

            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let k1 = g.param(pool.index().k1().clone());
            let k2 = g.param(pool.index().k2().clone());
            let mut vars = LayerVars::default();
            vars.w1 = layer.w1.clone().map(|t| g.param(t));
            vars.w2 = layer.w2.clone().map(|t| g.param(t));
            vars.value_proj = layer.value_proj.clone().map(|t| g.param(t));
            vars.query_proj = layer.query_proj.clone().map(|t| g.param(t));
            let out = layer.record(&mut g, pool.values(), true, (k1, k2), &vars, xv).unwrap();
            let c = g.constant(go.clone());
            let prod = g.mul(out, c).unwrap();
            let loss = g.sum(prod);
            g.backward(loss).unwrap();
            assert_eq!(g.grad(xv).unwrap(), direct.x.data());
            assert_eq!(g.grad(k1).unwrap(), direct.k1.data());
            assert_eq!(g.grad(k2).unwrap(), direct.k2.data());
            assert_eq!(g.grad(vars.query_proj.unwrap()).unwrap(), direct.query_proj.as_ref().unwrap().data());
            if swilu {
                assert_eq!(g.grad(vars.w1.unwrap()).unwrap(), direct.w1.as_ref().unwrap().data());
            }
            let op = g.custom_op::<MemoryOp<f64>>(out).unwrap();
            assert_eq!(op.value_grad().unwrap(), &direct.values);
            assert_eq!(g.flops(), cache.stats.flops + 2 * 32);
        }
    }

    #[test]
    fn strategies_agree() {
        let (pool, mut layer) = setup(4, 8, 8, 8, 3, true, false, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::<f64>::uniform(&[16, 8], 1.0, &mut rng);
        let go = Tensor::<f64>::uniform(&[16, 8], 1.0, &mut rng);
        let mut grads = Vec::new();
        for s in Strategy::ALL {
            layer.config.strategy = s;
            layer.config.workers = 3;
            let (_, cache) = layer.forward(&pool, &x).unwrap();
            grads.push(layer.backward(&pool, Some(&cache), &go).unwrap().values);
        }
        for g in &grads[1..] {
            assert_eq!(g.rows, grads[0].rows);
            let err = g.grads.iter().zip(&grads[0].grads).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12);
        }
    }
}
