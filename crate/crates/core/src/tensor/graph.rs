use super::ops;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::any::Any;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written backward, recorded by [`Graph::custom`].
///
/// `backward` receives the forward input values (in the order given at record
/// time) and the gradient of the output, and returns one optional gradient per
/// input. Anything else the op wants to expose after backward (for instance a
/// sparse parameter gradient) is kept on `self` and read back through
/// [`Graph::custom_op`].
pub trait CustomOp<T: Scalar>: Any {
    fn name(&self) -> &'static str;
    fn backward(&mut self, inputs: &[&Tensor<T>], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>>;
    fn as_any(&self) -> &dyn Any;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in execution order, so the
/// tape is topologically sorted by construction.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    flops: u64,
    visits: usize,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

type Contribution<T> = Vec<(Var, Vec<T>)>;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flops: 0,
            visits: 0,
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward FLOPs recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Nodes visited by the last [`backward`](Self::backward).
    pub fn visits(&self) -> usize {
        self.visits
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    /// Downcasts the custom op recorded at `v`.
    pub fn custom_op<C: CustomOp<T>>(&self, v: Var) -> Option<&C> {
        match &self.nodes[v.0].op {
            Op::Custom { op, .. } => op.as_any().downcast_ref::<C>(),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn add_flops(&mut self, n: u64) {
        self.flops += n;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        self.flops += 2 * (m * k * out.cols()) as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.flops += out.len() as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.flops += out.len() as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| x * c).collect());
        self.flops += out.len() as u64;
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, c), needs)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = ops::silu(self.value(a));
        self.flops += 4 * out.len() as u64;
        let needs = self.needs(a);
        self.push(out, Op::Silu(a), needs)
    }

    pub fn rms_norm(&mut self, x: Var, w: Var) -> Result<Var> {
        let (out, inv_rms) = ops::rms_norm(self.value(x), self.value(w))?;
        self.flops += 4 * out.len() as u64;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::RmsNorm { x, w, inv_rms }, needs))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax(self.value(x))?;
        self.flops += 4 * out.len() as u64;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), needs))
    }

    /// Mean cross-entropy of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), targets)?;
        if !loss.is_finite() {
            return Err(Error::Numeric("cross-entropy is not finite".into()));
        }
        self.flops += 4 * self.value(logits).len() as u64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Row lookup `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= rows {
                return Err(Error::Index { index: i, bound: rows });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![ids.len(), c], data);
        let needs = self.needs(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Index { index: r, bound: n });
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::from_parts(vec![rows.len(), c], data);
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    /// Causal multi-head self-attention; `q`, `k`, `v` are `[batch·seq × d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let d = self.value(q).cols();
        let rows = self.value(q).rows();
        if heads == 0 || d % heads != 0 || seq == 0 || rows % seq != 0 {
            return Err(Error::dim(format!(
                "attention: {rows} rows of width {d} with seq {seq}, heads {heads}"
            )));
        }
        let batch = rows / seq;
        let (out, probs) = ops::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            batch,
            seq,
            heads,
            d,
        );
        self.flops += ops::attention_flops(batch, seq, heads, d);
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], out),
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.flops += self.value(a).len() as u64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Records a custom op whose forward `output` the caller already computed.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
        flops: u64,
    ) -> Var {
        self.flops += flops;
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        )
    }

    /// Reverse pass from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward needs a scalar loss"));
        }
        self.backward_done = true;
        self.visits = 0;
        self.nodes[loss.0].value.accumulate_grad(&[T::one()]);
        for i in (0..=loss.0).rev() {
            self.visits += 1;
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = node.value.grad() else {
                continue;
            };
            let contributions = node_backward(before, &node.value, &mut node.op, grad)?;
            for (v, g) in contributions {
                let target = &mut before[v.0];
                if target.needs_grad {
                    target.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}

fn node_backward<T: Scalar>(
    nodes: &[Node<T>],
    out: &Tensor<T>,
    op: &mut Op<T>,
    g: &[T],
) -> Result<Contribution<T>> {
    let val = |v: &Var| &nodes[v.0].value;
    let needs = |v: &Var| nodes[v.0].needs_grad;
    let mut c: Contribution<T> = Vec::new();
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (m, k) = (va.rows(), va.cols());
            let p = vb.cols();
            if needs(a) {
                let mut da = vec![T::zero(); m * k];
                ops::gemm_into(g, false, vb.data(), true, &mut da, m, p, k, T::zero());
                c.push((*a, da));
            }
            if needs(b) {
                let mut db = vec![T::zero(); k * p];
                ops::gemm_into(va.data(), true, g, false, &mut db, k, m, p, T::zero());
                c.push((*b, db));
            }
        }
        Op::Add(a, b) => {
            c.push((*a, g.to_vec()));
            c.push((*b, g.to_vec()));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            if needs(a) {
                c.push((*a, g.iter().zip(vb.data()).map(|(&x, &y)| x * y).collect()));
            }
            if needs(b) {
                c.push((*b, g.iter().zip(va.data()).map(|(&x, &y)| x * y).collect()));
            }
        }
        Op::Scale(a, s) => c.push((*a, g.iter().map(|&x| x * *s).collect())),
        Op::Silu(a) => c.push((
            *a,
            g.iter()
                .zip(val(a).data())
                .map(|(&gi, &x)| gi * ops::silu_grad_scalar(x))
                .collect(),
        )),
        Op::RmsNorm { x, w, inv_rms } => {
            let (vx, vw) = (val(x), val(w));
            let d = vx.cols();
            let mut dx = vec![T::zero(); vx.len()];
            let mut dw = vec![T::zero(); d];
            for (r, &ir) in inv_rms.iter().enumerate() {
                ops::rms_norm_row_backward(
                    vx.row(r),
                    vw.data(),
                    ir,
                    &g[r * d..(r + 1) * d],
                    &mut dx[r * d..(r + 1) * d],
                    Some(&mut dw),
                );
            }
            c.push((*x, dx));
            c.push((*w, dw));
        }
        Op::Softmax(x) => {
            let d = out.cols();
            let mut dx = vec![T::zero(); out.len()];
            for ((y, dy), dst) in out.data().chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                ops::softmax_row_backward(y, dy, dst);
            }
            c.push((*x, dx));
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let v = val(logits).cols();
            let b = targets.len().max(1);
            let scale = g[0] / T::from_f64(b as f64);
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                d[r * v + t] -= scale;
            }
            c.push((*logits, d));
        }
        Op::Gather { table, ids } => {
            let t = val(table);
            let w = t.cols();
            let mut d = vec![T::zero(); t.len()];
            for (r, &i) in ids.iter().enumerate() {
                for (dst, &src) in d[i * w..(i + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                    *dst += src;
                }
            }
            c.push((*table, d));
        }
        Op::SelectRows { x, rows } => {
            let t = val(x);
            let w = t.cols();
            let mut d = vec![T::zero(); t.len()];
            for (r, &i) in rows.iter().enumerate() {
                for (dst, &src) in d[i * w..(i + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                    *dst += src;
                }
            }
            c.push((*x, d));
        }
        Op::Attention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs,
        } => {
            let d = val(q).cols();
            let (dq, dk, dv) = ops::attention_backward(
                val(q).data(),
                val(k).data(),
                val(v).data(),
                probs,
                g,
                *batch,
                *seq,
                *heads,
                d,
            );
            c.push((*q, dq));
            c.push((*k, dk));
            c.push((*v, dv));
        }
        Op::Sum(a) => c.push((*a, vec![g[0]; val(a).len()])),
        Op::Custom { inputs, op } => {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| val(v)).collect();
            let grads = op.backward(&vals, g)?;
            if grads.len() != inputs.len() {
                return Err(Error::State(format!(
                    "custom op {} returned {} grads for {} inputs",
                    op.name(),
                    grads.len(),
                    inputs.len()
                )));
            }
            for (v, gr) in inputs.iter().zip(grads) {
                if let Some(gr) = gr {
                    if gr.len() != val(v).len() {
                        return Err(Error::dim(format!(
                            "custom op {} grad length {} for input of {}",
                            op.name(),
                            gr.len(),
                            val(v).len()
                        )));
                    }
                    c.push((*v, gr));
                }
            }
        }
    }
    Ok(c)
}
