use super::config::ModelConfig;
use super::data::FACT_LEN;
use super::model::{build_model, Model};
use crate::embedding_bag::Strategy;
use crate::error::Result;
use crate::tensor::{finite_diff_check, Coords, GradCheckReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest model with two blocks, one of them a gated memory layer with qk-norm.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab: 12,
        model_dim: 8,
        layers: 2,
        heads: 2,
        ffn_hidden: 8,
        memory_placement: vec![1],
        half_n: 4,
        v_dim: 6,
        k: 3,
        key_dim: 8,
        use_swilu: true,
        qk_norm: true,
        seed,
        strategy: Strategy::ReverseIndices,
        workers: 1,
    }
}

fn flat(model: &Model<f64>) -> Vec<f64> {
    let mut out: Vec<f64> = model.tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    if let Some(v) = model.values() {
        out.extend_from_slice(v.data());
    }
    out
}

fn set_flat(model: &mut Model<f64>, x: &[f64]) {
    let mut at = 0;
    for t in model.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&x[at..at + n]);
        at += n;
    }
    if let Some(v) = model.values_mut() {
        v.data_mut().copy_from_slice(&x[at..]);
    }
}

/// Finite differences over every parameter (value table included) of a tiny model.
pub fn check_model(config: &ModelConfig, batch: usize, seed: u64) -> Result<GradCheckReport> {
    let mut model = build_model::<f64>(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..batch * FACT_LEN).map(|_| rng.gen_range(0..config.vocab)).collect();
    let targets: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..config.vocab)).collect();

    let pass = model.forward(&tokens, &targets, true)?;
    let (_, grads) = model.gradients(pass)?;
    let mut analytic: Vec<f64> = grads.dense.into_iter().flatten().collect();
    if let Some(v) = model.values() {
        let dense = grads.values.map_or_else(|| vec![0.0; v.len()], |g| g.to_dense(v.rows()));
        analytic.extend(dense);
    }

    let mut x0 = flat(&model);
    finite_diff_check(&mut x0, &analytic, 1e-6, Coords::All, |x| {
        set_flat(&mut model, x);
        let pass = model.forward(&tokens, &targets, false)?;
        Ok(pass.graph.value(pass.loss).data()[0])
    })
}
