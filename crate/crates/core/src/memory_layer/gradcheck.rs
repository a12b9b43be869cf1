//! Finite-difference checks of memory layers against their analytic backward.
//!
//! A check stacks one or more layers on a shared pool with residual
//! connections, takes the loss `Σ c ⊙ h_out` for a random `c`, and compares
//! every gradient group (input, both key tables, values, projections) with
//! central differences in `f64`.

use super::{attach_layers, LayerConfig, MemoryLayer, MemoryPool};
use crate::embedding_bag::SparseGrad;
use crate::error::Result;
use crate::tensor::{finite_diff_check, Coords, GradCheckReport, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub half_n: usize,
    pub key_dim: usize,
    pub v_dim: usize,
    pub model_dim: usize,
    pub k: usize,
    pub use_swilu: bool,
    pub qk_norm: bool,
    /// Layers attached to the one pool.
    pub layers: usize,
    pub tokens: usize,
}

impl GradCase {
    pub fn tiny(use_swilu: bool, qk_norm: bool, layers: usize) -> Self {
        Self {
            half_n: 4,
            key_dim: 8,
            v_dim: if use_swilu { 6 } else { 8 },
            model_dim: 8,
            k: 3,
            use_swilu,
            qk_norm,
            layers,
            tokens: 3,
        }
    }
}

/// The named configurations the `gradcheck` suite runs.
pub fn standard_cases() -> Vec<(&'static str, GradCase)> {
    let mut out = Vec::new();
    for qk in [false, true] {
        let tag = |a: &'static str, b: &'static str| if qk { b } else { a };
        out.push((tag("vanilla", "vanilla+qk_norm"), GradCase::tiny(false, qk, 1)));
        out.push((
            tag("vanilla+value_proj", "vanilla+value_proj+qk_norm"),
            GradCase {
                v_dim: 6,
                ..GradCase::tiny(false, qk, 1)
            },
        ));
        out.push((tag("swilu", "swilu+qk_norm"), GradCase::tiny(true, qk, 1)));
        out.push((
            tag("swilu+query_proj", "swilu+query_proj+qk_norm"),
            GradCase {
                key_dim: 6,
                ..GradCase::tiny(true, qk, 1)
            },
        ));
        out.push((tag("shared_2_layers", "shared_2_layers+qk_norm"), GradCase::tiny(true, qk, 2)));
    }
    out
}

/// Offsets of each parameter group inside the flat vector.
struct Flat {
    sizes: Vec<usize>,
}

impl Flat {
    fn pack(pool: &MemoryPool<f64>, layers: &[MemoryLayer<f64>], x: &Tensor<f64>) -> (Self, Vec<f64>) {
        let mut parts: Vec<&[f64]> = vec![
            x.data(),
            pool.index().k1().data(),
            pool.index().k2().data(),
            pool.values().data(),
        ];
        for l in layers {
            for t in [&l.w1, &l.w2, &l.value_proj, &l.query_proj].into_iter().flatten() {
                parts.push(t.data());
            }
        }
        let sizes = parts.iter().map(|p| p.len()).collect();
        (Self { sizes }, parts.concat())
    }

    fn unpack(&self, flat: &[f64], pool: &mut MemoryPool<f64>, layers: &mut [MemoryLayer<f64>], x: &mut Tensor<f64>) {
        let mut off = 0;
        let mut chunks = self.sizes.iter().map(|&s| {
            off += s;
            &flat[off - s..off]
        });
        let mut next = || chunks.next().expect("layout matches pack");
        x.data_mut().copy_from_slice(next());
        let (k1, k2) = pool.index_mut().keys_mut();
        k1.data_mut().copy_from_slice(next());
        k2.data_mut().copy_from_slice(next());
        pool.values_mut().data_mut().copy_from_slice(next());
        for l in layers.iter_mut() {
            for t in [&mut l.w1, &mut l.w2, &mut l.value_proj, &mut l.query_proj].into_iter().flatten() {
                t.data_mut().copy_from_slice(next());
            }
        }
    }
}

fn residual(h: &Tensor<f64>, o: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(h.shape(), |i| h.data()[i] + o.data()[i])
}

fn stack_loss(pool: &MemoryPool<f64>, layers: &[MemoryLayer<f64>], x: &Tensor<f64>, c: &[f64]) -> Result<f64> {
    let mut h = x.clone();
    for l in layers {
        let (o, _) = l.forward(pool, &h)?;
        h = residual(&h, &o);
    }
    Ok(h.data().iter().zip(c).map(|(a, b)| a * b).sum())
}

fn stack_grad(pool: &MemoryPool<f64>, layers: &[MemoryLayer<f64>], x: &Tensor<f64>, c: &[f64]) -> Result<Vec<f64>> {
    let mut h = x.clone();
    let mut caches = Vec::new();
    for l in layers {
        let (o, cache) = l.forward(pool, &h)?;
        h = residual(&h, &o);
        caches.push(cache);
    }
    let mut g = Tensor::new(x.shape(), c.to_vec())?;
    let mut dk1 = vec![0.0; pool.index().k1().len()];
    let mut dk2 = vec![0.0; pool.index().k2().len()];
    let mut dv = SparseGrad::empty(pool.v_dim());
    let mut per_layer = Vec::new();
    for (l, cache) in layers.iter().zip(&caches).rev() {
        let gr = l.backward(pool, Some(cache), &g)?;
        dk1.iter_mut().zip(gr.k1.data()).for_each(|(a, b)| *a += b);
        dk2.iter_mut().zip(gr.k2.data()).for_each(|(a, b)| *a += b);
        dv = dv.merge(&gr.values)?;
        g = residual(&g, &gr.x);
        let own: Vec<f64> = [gr.w1, gr.w2, gr.value_proj, gr.query_proj]
            .into_iter()
            .flatten()
            .flat_map(Tensor::into_data)
            .collect();
        per_layer.push(own);
    }
    per_layer.reverse();
    let mut out = g.into_data();
    out.extend(dk1);
    out.extend(dk2);
    out.extend(dv.to_dense(pool.num_values()));
    out.extend(per_layer.into_iter().flatten());
    Ok(out)
}

/// Builds `case` from `seed` and compares analytic and numeric gradients.
pub fn check_case(case: &GradCase, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = MemoryPool::<f64>::new(case.half_n, case.key_dim, case.v_dim, case.qk_norm, &mut rng)?;
    let cfg = LayerConfig::new(case.model_dim, case.k, case.use_swilu);
    let mut layers = attach_layers(&mut pool, case.layers, &[cfg], &mut rng)?;
    let mut x = Tensor::<f64>::uniform(&[case.tokens, case.model_dim], 1.0, &mut rng);
    let c: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let analytic = stack_grad(&pool, &layers, &x, &c)?;
    let (flat, mut params) = Flat::pack(&pool, &layers, &x);
    finite_diff_check(&mut params, &analytic, 1e-6, Coords::All, |p| {
        flat.unpack(p, &mut pool, &mut layers, &mut x);
        stack_loss(&pool, &layers, &x, &c)
    })
}
