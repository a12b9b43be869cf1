use crate::embedding_bag::Strategy;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Shape of the toy transformer and its memory pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Blocks whose feed-forward is replaced by a memory layer; empty = dense.
    pub memory_placement: Vec<usize>,
    pub half_n: usize,
    pub v_dim: usize,
    pub k: usize,
    pub key_dim: usize,
    pub use_swilu: bool,
    pub qk_norm: bool,
    pub seed: u64,
    pub strategy: Strategy,
    pub workers: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("model_dim", self.model_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("workers", self.workers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        let mut seen = vec![false; self.layers];
        for &p in &self.memory_placement {
            if p >= self.layers {
                return Err(Error::config(format!("memory placement {p} ≥ layers {}", self.layers)));
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::config(format!("memory placement {p} listed twice")));
            }
        }
        if !self.memory_placement.is_empty() {
            if self.key_dim == 0 || self.key_dim % 2 != 0 {
                return Err(Error::config(format!("key_dim {} must be positive and even", self.key_dim)));
            }
            if self.k == 0 || self.k > self.half_n {
                return Err(Error::config(format!("k = {} must lie in 1..={}", self.k, self.half_n)));
            }
            if self.v_dim == 0 {
                return Err(Error::config("v_dim must be positive"));
            }
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.half_n * self.half_n
    }
}

/// Everything a training run reads: model, optimizer, task and execution fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub vocab: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub memory_placement: Vec<usize>,
    pub half_n: usize,
    pub v_dim: usize,
    pub k: usize,
    pub key_dim: usize,
    pub use_swilu: bool,
    pub qk_norm: bool,
    pub seed: u64,

    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the value table relative to `lr`.
    pub memory_lr_mult: f64,
    pub warmup_steps: usize,
    /// Cosine decay floor as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,

    pub num_facts: usize,
    pub num_relations: usize,
    pub eval_interval: usize,
    pub eval_size: usize,

    pub workers: usize,
    pub strategy: Strategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vocab: 512,
            model_dim: 32,
            layers: 4,
            heads: 4,
            ffn_hidden: 32,
            memory_placement: vec![2],
            half_n: 32,
            v_dim: 48,
            k: 8,
            key_dim: 32,
            use_swilu: true,
            qk_norm: true,
            seed: 0,
            steps: 400,
            batch_size: 64,
            lr: 5e-3,
            memory_lr_mult: 30.0,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip_norm: 1.0,
            num_facts: 1000,
            num_relations: 8,
            eval_interval: 5,
            eval_size: 1000,
            workers: 1,
            strategy: Strategy::ReverseIndices,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab,
            model_dim: self.model_dim,
            layers: self.layers,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            memory_placement: self.memory_placement.clone(),
            half_n: self.half_n,
            v_dim: self.v_dim,
            k: self.k,
            key_dim: self.key_dim,
            use_swilu: self.use_swilu,
            qk_norm: self.qk_norm,
            seed: self.seed,
            strategy: self.strategy,
            workers: self.workers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.memory_lr_mult >= 0.0) {
            return Err(Error::config("learning rates must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::config("need 0 ≤ beta < 1 and eps > 0"));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }

    /// Same run without memory layers.
    pub fn dense_baseline(&self) -> Self {
        Self {
            memory_placement: Vec::new(),
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON form (first 16 digits).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// `count` memory blocks spread evenly over `layers`, centred with a stride.
pub fn centered_placement(layers: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > layers {
        return Err(Error::config(format!("cannot place {count} memory layers in {layers}")));
    }
    let stride = layers / count;
    let start = stride / 2;
    Ok((0..count).map(|i| start + i * stride).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_are_rejected_with_location() {
        let err = TrainConfig::from_json("{\n  \"lr\": 0.1,\n  \"bogus\": 3\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = TrainConfig::from_json("{\"steps\": 7, \"memory_placement\": []}").unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.model_dim, TrainConfig::default().model_dim);
        assert!(cfg.memory_placement.is_empty());
    }

    #[test]
    fn placement_checks() {
        let mut cfg = TrainConfig {
            memory_placement: vec![4],
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.memory_placement = vec![1, 1];
        assert!(cfg.validate().is_err());
        cfg.memory_placement = vec![1, 3];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn centred_placements() {
        assert_eq!(centered_placement(24, 3).unwrap(), vec![4, 12, 20]);
        assert_eq!(centered_placement(4, 1).unwrap(), vec![2]);
        assert_eq!(centered_placement(8, 2).unwrap(), vec![2, 6]);
        assert_eq!(centered_placement(4, 3).unwrap(), vec![0, 1, 2]);
        assert!(centered_placement(2, 3).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), TrainConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
