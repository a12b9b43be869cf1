//! AdamW for dense tensors, lazily allocated Adam for value-table rows.

use super::config::TrainConfig;
use crate::embedding_bag::SparseGrad;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// One bias-corrected Adam update in place; `t` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    p: &mut [T],
    g: &[T],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    hp: &AdamParams,
    decay: bool,
) {
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    let wd = if decay { hp.weight_decay } else { 0.0 };
    for i in 0..p.len() {
        let gi = g[i].as_f64();
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
        let step = (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
        let pi = p[i].as_f64();
        p[i] = T::from_f64(pi - lr * (step + wd * pi));
    }
}

/// Moments of one value row and how many updates it has received.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub dense_m: Vec<Vec<f64>>,
    pub dense_v: Vec<Vec<f64>>,
    /// Only rows that have been looked up at least once.
    pub rows: BTreeMap<usize, RowState>,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            dense_m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            dense_v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            rows: BTreeMap::new(),
        }
    }

    /// Updates every dense tensor; decay applies to matrices only.
    pub fn step_dense<T: Scalar>(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Vec<T>],
        lr: f64,
        hp: &AdamParams,
    ) -> Result<()> {
        if params.len() != self.dense_m.len() || grads.len() != params.len() {
            return Err(Error::State(format!(
                "{} tensors, {} gradients, optimizer holds {}",
                params.len(),
                grads.len(),
                self.dense_m.len()
            )));
        }
        self.step += 1;
        for (i, p) in params.iter_mut().enumerate() {
            if grads[i].len() != p.len() || self.dense_m[i].len() != p.len() {
                return Err(Error::dim(format!("tensor {i}: size changed")));
            }
            let decay = p.shape().len() > 1;
            adam_update(p.data_mut(), &grads[i], &mut self.dense_m[i], &mut self.dense_v[i], self.step, lr, hp, decay);
        }
        Ok(())
    }

    /// Updates only the rows present in `grad`, each with its own step count.
    pub fn step_rows<T: Scalar>(
        &mut self,
        values: &mut Tensor<T>,
        grad: &SparseGrad<T>,
        lr: f64,
        hp: &AdamParams,
    ) -> Result<()> {
        let dim = values.cols();
        if grad.dim != dim {
            return Err(Error::dim(format!("row gradient width {} for table width {dim}", grad.dim)));
        }
        let hp = AdamParams {
            weight_decay: 0.0,
            ..*hp
        };
        for (i, &r) in grad.rows.iter().enumerate() {
            if r >= values.rows() {
                return Err(Error::Index {
                    index: r,
                    bound: values.rows(),
                });
            }
            let st = self.rows.entry(r).or_insert_with(|| RowState {
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                steps: 0,
            });
            st.steps += 1;
            adam_update(values.row_mut(r), grad.row(i), &mut st.m, &mut st.v, st.steps, lr, &hp, false);
        }
        Ok(())
    }
}

/// Linear warmup then cosine decay to `min_lr_ratio·lr`; `step` counts from 0.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hp() -> AdamParams {
        AdamParams {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    fn sparse(rows: Vec<usize>, grads: Vec<f64>, dim: usize) -> SparseGrad<f64> {
        SparseGrad { rows, grads, dim }
    }

    #[test]
    fn single_step_matches_closed_form() {
        // after one step mhat = g, vhat = g², so the move is lr·g/(|g|+eps)
        let mut p = [1.0f64, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut p, &[0.5, -3.0], &mut m, &mut v, 1, 0.1, &hp(), false);
        assert!((p[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn untouched_rows_never_move() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut values = Tensor::<f64>::uniform(&[10, 4], 1.0, &mut rng);
        let before = values.clone();
        let mut st = OptimizerState::new(&[]);
        for s in 0..5 {
            let rows = vec![s % 3, 7];
            let g = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            st.step_rows(&mut values, &sparse(rows, g, 4), 0.01, &hp()).unwrap();
        }
        for r in [3, 4, 5, 6, 8, 9] {
            assert_eq!(values.row(r), before.row(r));
        }
        assert_ne!(values.row(7), before.row(7));
        assert_eq!(st.rows[&7].steps, 5);
        assert_eq!(st.rows[&0].steps, 2);
        assert_eq!(st.rows.len(), 4);
    }

    #[test]
    fn every_row_every_step_equals_dense_adam() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sparse_t = Tensor::<f64>::uniform(&[6, 3], 1.0, &mut rng);
        let mut dense_t = sparse_t.clone();
        let mut st = OptimizerState::new(&[]);
        let (mut m, mut v) = (vec![0.0; 18], vec![0.0; 18]);
        for t in 1..=20 {
            let g: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
            st.step_rows(&mut sparse_t, &sparse((0..6).collect(), g.clone(), 3), 0.05, &hp()).unwrap();
            adam_update(dense_t.data_mut(), &g, &mut m, &mut v, t, 0.05, &hp(), false);
        }
        assert_eq!(sparse_t.data(), dense_t.data());
    }

    #[test]
    fn dense_decay_skips_vectors() {
        let mut w = Tensor::<f64>::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let mut b = Tensor::<f64>::new(&[2], vec![1.0, 1.0]).unwrap();
        let mut st = OptimizerState::new(&[2, 2]);
        let h = AdamParams {
            weight_decay: 0.5,
            ..hp()
        };
        let zero = vec![vec![0.0; 2], vec![0.0; 2]];
        st.step_dense(&mut [&mut w, &mut b], &zero, 0.1, &h).unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(b.data(), &[1.0, 1.0]);
        assert!(st.step_dense(&mut [&mut w], &zero[..1], 0.1, &h).is_err());
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 10,
            steps: 110,
            min_lr_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert!((lr_at(&cfg, 0) - 0.1).abs() < 1e-12);
        assert!((lr_at(&cfg, 9) - 1.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 10) - 1.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 60) - 0.55).abs() < 1e-12);
        assert!((lr_at(&cfg, 110) - 0.1).abs() < 1e-12);
        assert!((lr_at(&cfg, 500) - 0.1).abs() < 1e-12);
        let flat = TrainConfig { warmup_steps: 0, ..cfg };
        assert!((lr_at(&flat, 0) - 1.0).abs() < 1e-12);
    }
}
