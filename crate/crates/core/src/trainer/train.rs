use super::config::TrainConfig;
use super::data::{gen_facts, FactDataset};
use super::model::{build_model, Model, ParamCounts};
use super::optim::{lr_at, AdamParams, OptimizerState};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

const EVAL_CHUNK: usize = 256;
const BATCH_STREAM: u64 = 0xba7c;

/// One evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub eval_nll: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsLog {
    pub config_hash: String,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub params: ParamCounts,
    pub flops_per_token: f64,
    pub elapsed_s: f64,
}

impl MetricsLog {
    /// First evaluated step whose recall reaches `threshold`.
    pub fn steps_to_recall(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.recall >= threshold).map(|r| r.step)
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn header(&self) -> String {
        format!(
            "# pkmem {} train config={} seed={}",
            env!("CARGO_PKG_VERSION"),
            self.config_hash,
            self.seed
        )
    }

    /// Header line followed by one JSON object per record.
    pub fn to_jsonl(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    /// `step,loss,recall` for plotting.
    pub fn to_plot_csv(&self) -> String {
        let mut out = self.header();
        out.push_str("\nstep,loss,recall\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.step, r.eval_nll, r.recall);
        }
        out
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub params: Vec<Vec<f64>>,
    pub values: Option<Vec<f64>>,
    pub optimizer: OptimizerState,
    pub records: Vec<MetricsRecord>,
    pub loss_sum: f64,
    pub loss_count: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, bincode::serialize(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(bincode::deserialize(&std::fs::read(path)?)?)
    }
}

pub struct Trainer<T: Scalar = f32> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub data: FactDataset,
    pub optimizer: OptimizerState,
    pub step: usize,
    pub records: Vec<MetricsRecord>,
    loss_sum: f64,
    loss_count: usize,
    elapsed_s: f64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = gen_facts(config.num_facts, config.vocab, config.num_relations, config.seed)?
            .with_eval(config.eval_size);
        let model = build_model::<T>(&config.model())?;
        let sizes: Vec<usize> = model.tensors().iter().map(|(_, t)| t.len()).collect();
        Ok(Self {
            optimizer: OptimizerState::new(&sizes),
            config,
            model,
            data,
            step: 0,
            records: Vec::new(),
            loss_sum: 0.0,
            loss_count: 0,
            elapsed_s: 0.0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.config)?;
        let tensors = t.model.tensors_mut();
        if tensors.len() != ckpt.params.len() {
            return Err(Error::State(format!(
                "checkpoint has {} tensors, model {}",
                ckpt.params.len(),
                tensors.len()
            )));
        }
        for (dst, src) in tensors.into_iter().zip(&ckpt.params) {
            load_into(dst, src)?;
        }
        match (t.model.values_mut(), &ckpt.values) {
            (Some(dst), Some(src)) => load_into(dst, src)?,
            (None, None) => {}
            _ => return Err(Error::State("checkpoint and config disagree on memory".into())),
        }
        t.optimizer = ckpt.optimizer;
        t.step = ckpt.step;
        t.records = ckpt.records;
        t.loss_sum = ckpt.loss_sum;
        t.loss_count = ckpt.loss_count;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.model.tensors().iter().map(|(_, t)| t.to_f64_vec()).collect(),
            values: self.model.values().map(Tensor::to_f64_vec),
            optimizer: self.optimizer.clone(),
            records: self.records.clone(),
            loss_sum: self.loss_sum,
            loss_count: self.loss_count,
        }
    }

    /// Batch ids of `step`, independent of any earlier step.
    pub fn batch_ids(&self, step: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ BATCH_STREAM);
        rng.set_stream(step as u64);
        (0..self.config.batch_size).map(|_| rng.gen_range(0..self.data.len())).collect()
    }

    /// One optimizer step; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let (tokens, targets) = self.data.batch(&self.batch_ids(self.step));
        let pass = self.model.forward(&tokens, &targets, true)?;
        let (loss, mut grads) = self.model.gradients(pass)?;
        let loss = loss.as_f64();
        let norm = grads.sq_norm().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm {norm} at step {}", self.step)));
        }
        if norm > self.config.clip_norm {
            grads.scale(T::from_f64(self.config.clip_norm / norm));
        }
        let lr = lr_at(&self.config, self.step);
        let hp = AdamParams::from(&self.config);
        self.optimizer.step_dense(&mut self.model.tensors_mut(), &grads.dense, lr, &hp)?;
        if let (Some(values), Some(g)) = (self.model.pool.as_mut().map(|p| p.values_mut()), &grads.values) {
            self.optimizer.step_rows(values, g, lr * self.config.memory_lr_mult, &hp)?;
        }
        self.step += 1;
        self.loss_sum += loss;
        self.loss_count += 1;
        Ok(loss)
    }

    /// `(mean NLL, recall)` over the evaluation facts.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let (mut nll, mut hits) = (0.0, 0);
        for chunk in self.data.eval.chunks(EVAL_CHUNK) {
            let (tokens, targets) = self.data.batch(chunk);
            let (l, h) = self.model.score(&tokens, &targets)?;
            nll += l;
            hits += h;
        }
        let n = self.data.eval.len() as f64;
        Ok((nll / n, hits as f64 / n))
    }

    fn record(&mut self) -> Result<()> {
        let (eval_nll, recall) = self.evaluate()?;
        self.records.push(MetricsRecord {
            step: self.step,
            train_loss: self.loss_sum / self.loss_count.max(1) as f64,
            eval_nll,
            recall,
        });
        self.loss_sum = 0.0;
        self.loss_count = 0;
        Ok(())
    }

    /// Trains up to `config.steps`, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self) -> Result<()>) -> Result<MetricsLog> {
        let start = Instant::now();
        while self.step < self.config.steps {
            self.train_step()?;
            if self.step % self.config.eval_interval == 0 || self.step == self.config.steps {
                self.record()?;
            }
            on_step(self)?;
        }
        self.elapsed_s += start.elapsed().as_secs_f64();
        self.log()
    }

    pub fn log(&self) -> Result<MetricsLog> {
        Ok(MetricsLog {
            config_hash: self.config.hash(),
            seed: self.config.seed,
            records: self.records.clone(),
            params: self.model.param_counts(),
            flops_per_token: self.model.flops_per_token()?,
            elapsed_s: self.elapsed_s,
        })
    }
}

fn load_into<T: Scalar>(dst: &mut Tensor<T>, src: &[f64]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::State(format!("checkpoint tensor of {} for {} slots", src.len(), dst.len())));
    }
    dst.data_mut().iter_mut().zip(src).for_each(|(d, &s)| *d = T::from_f64(s));
    Ok(())
}

/// Trains `config` to completion.
pub fn train<T: Scalar>(config: &TrainConfig) -> Result<MetricsLog> {
    Trainer::<T>::new(config.clone())?.run(|_| Ok(()))
}

/// The memory run and its dense baseline on the same data and seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairedRun {
    pub memory: MetricsLog,
    pub dense: MetricsLog,
}

pub fn train_paired<T: Scalar>(config: &TrainConfig) -> Result<PairedRun> {
    if config.memory_placement.is_empty() {
        return Err(Error::config("paired run needs a memory placement"));
    }
    Ok(PairedRun {
        memory: train::<T>(config)?,
        dense: train::<T>(&config.dense_baseline())?,
    })
}
