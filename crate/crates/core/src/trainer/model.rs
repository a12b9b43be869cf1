//! Toy pre-norm transformer whose feed-forward blocks can be memory layers.

use super::config::ModelConfig;
use super::data::FACT_LEN;
use crate::embedding_bag::SparseGrad;
use crate::error::{Error, Result};
use crate::memory_layer::{attach_layers, LayerConfig, LayerVars, MemoryLayer, MemoryOp, MemoryPool};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub enum Ffn<T: Scalar> {
    /// `(silu(x·gate) ⊙ x·up)·down`
    Dense {
        gate: Tensor<T>,
        up: Tensor<T>,
        down: Tensor<T>,
    },
    Memory(MemoryLayer<T>),
}

#[derive(Clone, Debug)]
pub struct Block<T: Scalar> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub ffn: Ffn<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
    pub pool: Option<MemoryPool<T>>,
}

/// Parameter counts with the shared pool (keys + values) kept apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub dense: usize,
    pub memory: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.dense + self.memory
    }
}

/// A recorded forward pass.
pub struct ForwardPass<T: Scalar> {
    pub graph: Graph<T>,
    pub loss: Var,
    pub logits: Var,
    /// One node per dense tensor, in [`Model::tensors`] order.
    pub params: Vec<Var>,
    pub memory_nodes: Vec<Var>,
}

/// Gradients of one step: dense tensors in [`Model::tensors`] order plus the value table.
#[derive(Clone, Debug)]
pub struct ModelGrads<T: Scalar> {
    pub dense: Vec<Vec<T>>,
    pub values: Option<SparseGrad<T>>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn sq_norm(&self) -> f64 {
        let dense: f64 = self.dense.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum();
        dense + self.values.as_ref().map_or(0.0, SparseGrad::sq_norm)
    }

    pub fn scale(&mut self, s: T) {
        self.dense.iter_mut().flatten().for_each(|g| *g *= s);
        if let Some(v) = &mut self.values {
            v.scale(s);
        }
    }
}

fn matrix<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::uniform(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

fn ones<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n], |_| T::one())
}

/// Builds a model with weights drawn from `config.seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.model_dim;
    let tok_emb = Tensor::uniform(&[config.vocab, n], 1.0, &mut rng);
    let pos_emb = Tensor::uniform(&[FACT_LEN, n], 1.0, &mut rng);
    let mut pool = if config.memory_placement.is_empty() {
        None
    } else {
        Some(MemoryPool::new(config.half_n, config.key_dim, config.v_dim, config.qk_norm, &mut rng)?)
    };
    let layer_cfg = LayerConfig {
        model_dim: n,
        k: config.k,
        use_swilu: config.use_swilu,
        strategy: config.strategy,
        workers: config.workers,
    };
    let mut blocks = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let attn_norm = ones(n);
        let wq = matrix(n, n, &mut rng);
        let wk = matrix(n, n, &mut rng);
        let wv = matrix(n, n, &mut rng);
        let wo = matrix(n, n, &mut rng);
        let ffn = match (&mut pool, config.memory_placement.contains(&l)) {
            (Some(p), true) => Ffn::Memory(attach_layers(p, 1, std::slice::from_ref(&layer_cfg), &mut rng)?.remove(0)),
            _ => Ffn::Dense {
                gate: matrix(n, config.ffn_hidden, &mut rng),
                up: matrix(n, config.ffn_hidden, &mut rng),
                down: matrix(config.ffn_hidden, n, &mut rng),
            },
        };
        blocks.push(Block {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            ffn_norm: ones(n),
            ffn,
        });
    }
    let head = matrix(n, config.vocab, &mut rng);
    Ok(Model {
        config: config.clone(),
        tok_emb,
        pos_emb,
        blocks,
        final_norm: ones(n),
        head,
        pool,
    })
}

impl<T: Scalar> Model<T> {
    /// Every dense tensor (pool keys last), named. The value table is not included.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            let named = [
                ("attn_norm", &b.attn_norm),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ffn_norm", &b.ffn_norm),
            ];
            out.extend(named.into_iter().map(|(s, t)| (format!("blocks.{i}.{s}"), t)));
            match &b.ffn {
                Ffn::Dense { gate, up, down } => {
                    for (s, t) in [("gate", gate), ("up", up), ("down", down)] {
                        out.push((format!("blocks.{i}.ffn.{s}"), t));
                    }
                }
                Ffn::Memory(l) => {
                    let named = [
                        ("w1", &l.w1),
                        ("w2", &l.w2),
                        ("value_proj", &l.value_proj),
                        ("query_proj", &l.query_proj),
                    ];
                    for (s, t) in named {
                        if let Some(t) = t {
                            out.push((format!("blocks.{i}.memory.{s}"), t));
                        }
                    }
                }
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        if let Some(p) = &self.pool {
            out.push(("memory.k1".to_string(), p.index().k1()));
            out.push(("memory.k2".to_string(), p.index().k2()));
        }
        out
    }

    /// Mutable view in [`tensors`](Self::tensors) order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([&mut b.attn_norm, &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.ffn_norm]);
            match &mut b.ffn {
                Ffn::Dense { gate, up, down } => out.extend([gate, up, down]),
                Ffn::Memory(l) => out.extend(
                    [&mut l.w1, &mut l.w2, &mut l.value_proj, &mut l.query_proj]
                        .into_iter()
                        .flatten(),
                ),
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        if let Some(p) = &mut self.pool {
            let (k1, k2) = p.index_mut().keys_mut();
            out.push(k1);
            out.push(k2);
        }
        out
    }

    pub fn values(&self) -> Option<&Tensor<T>> {
        self.pool.as_ref().map(MemoryPool::values)
    }

    pub fn values_mut(&mut self) -> Option<&mut Tensor<T>> {
        self.pool.as_mut().map(MemoryPool::values_mut)
    }

    pub fn param_counts(&self) -> ParamCounts {
        let all: usize = self.tensors().iter().map(|(_, t)| t.len()).sum();
        let memory = self.pool.as_ref().map_or(0, MemoryPool::param_count);
        let keys = self.pool.as_ref().map_or(0, |p| p.index().k1().len() + p.index().k2().len());
        ParamCounts {
            dense: all - keys,
            memory,
        }
    }

    /// Records the forward pass for `tokens` (`[batch·FACT_LEN]`) and object `targets`.
    ///
    /// With `train == false` parameters are recorded as constants and no
    /// gradient storage is allocated.
    pub fn forward(&self, tokens: &[usize], targets: &[usize], train: bool) -> Result<ForwardPass<T>> {
        let batch = targets.len();
        if tokens.len() != batch * FACT_LEN || batch == 0 {
            return Err(Error::dim(format!(
                "{} tokens for {batch} prompts of length {FACT_LEN}",
                tokens.len()
            )));
        }
        let mut g = Graph::new();
        let params: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|(_, t)| if train { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let keys = self.pool.as_ref().map(|_| (params[params.len() - 2], params[params.len() - 1]));
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter order matches tensors()");
        let heads = self.config.heads;

        let tok = take();
        let pos = take();
        let emb = g.gather(tok, tokens)?;
        let pos_ids: Vec<usize> = (0..tokens.len()).map(|i| i % FACT_LEN).collect();
        let pe = g.gather(pos, &pos_ids)?;
        let mut x = g.add(emb, pe)?;
        let mut memory_nodes = Vec::new();
        for b in &self.blocks {
            let (an, wq, wk, wv, wo, fnorm) = (take(), take(), take(), take(), take(), take());
            let h = g.rms_norm(x, an)?;
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let a = g.attention(q, k, v, FACT_LEN, heads)?;
            let o = g.matmul(a, wo)?;
            x = g.add(x, o)?;
            let h = g.rms_norm(x, fnorm)?;
            let f = match &b.ffn {
                Ffn::Dense { .. } => {
                    let (gate, up, down) = (take(), take(), take());
                    let a = g.matmul(h, gate)?;
                    let a = g.silu(a);
                    let u = g.matmul(h, up)?;
                    let m = g.mul(a, u)?;
                    g.matmul(m, down)?
                }
                Ffn::Memory(layer) => {
                    let vars = LayerVars {
                        w1: layer.w1.as_ref().map(|_| take()),
                        w2: layer.w2.as_ref().map(|_| take()),
                        value_proj: layer.value_proj.as_ref().map(|_| take()),
                        query_proj: layer.query_proj.as_ref().map(|_| take()),
                    };
                    let pool = self.pool.as_ref().expect("memory block implies a pool");
                    let keys = keys.expect("memory block implies keys");
                    let out = layer.record(&mut g, pool.values(), pool.index().qk_norm(), keys, &vars, h)?;
                    memory_nodes.push(out);
                    out
                }
            };
            x = g.add(x, f)?;
        }
        let (fnorm, head) = (take(), take());
        let last: Vec<usize> = (0..batch).map(|i| i * FACT_LEN + FACT_LEN - 1).collect();
        let xl = g.select_rows(x, &last)?;
        let h = g.rms_norm(xl, fnorm)?;
        let logits = g.matmul(h, head)?;
        let loss = g.cross_entropy(logits, targets)?;
        Ok(ForwardPass {
            graph: g,
            loss,
            logits,
            params,
            memory_nodes,
        })
    }

    /// Runs backward on a training pass and collects every gradient.
    pub fn gradients(&self, mut pass: ForwardPass<T>) -> Result<(T, ModelGrads<T>)> {
        let loss = pass.graph.value(pass.loss).data()[0];
        pass.graph.backward(pass.loss)?;
        let sizes: Vec<usize> = self.tensors().iter().map(|(_, t)| t.len()).collect();
        let dense = pass
            .params
            .iter()
            .zip(sizes)
            .map(|(&v, len)| pass.graph.take_grad(v).unwrap_or_else(|| vec![T::zero(); len]))
            .collect();
        let mut values: Option<SparseGrad<T>> = None;
        for &node in &pass.memory_nodes {
            let op = pass
                .graph
                .custom_op::<MemoryOp<T>>(node)
                .ok_or_else(|| Error::State("memory node lost its op".into()))?;
            if let Some(gv) = op.value_grad() {
                values = Some(match values {
                    Some(acc) => acc.merge(gv)?,
                    None => gv.clone(),
                });
            }
        }
        Ok((loss, ModelGrads { dense, values }))
    }

    /// Forward FLOPs per token, read from the op counters of one recorded pass.
    pub fn flops_per_token(&self) -> Result<f64> {
        let tokens = vec![0; FACT_LEN];
        let pass = self.forward(&tokens, &[0], false)?;
        Ok(pass.graph.flops() as f64 / FACT_LEN as f64)
    }

    /// Mean NLL of the targets and fraction whose arg-max logit is the target.
    pub fn score(&self, tokens: &[usize], targets: &[usize]) -> Result<(f64, usize)> {
        let pass = self.forward(tokens, targets, false)?;
        let loss = pass.graph.value(pass.loss).data()[0].as_f64();
        let logits = pass.graph.value(pass.logits);
        let hits = (0..targets.len())
            .filter(|&i| {
                let row = logits.row(i);
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
                best == targets[i]
            })
            .count();
        Ok((loss * targets.len() as f64, hits))
    }
}
