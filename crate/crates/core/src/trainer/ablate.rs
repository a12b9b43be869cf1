use super::config::{centered_placement, TrainConfig};
use super::train::train;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const ABLATION_HEADER: &str =
    "axis,value,final_train_nll,final_eval_nll,recall,steps_to_90,dense_params,memory_params,flops_per_token";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Memory block indices joined by `+`, e.g. `1+3`.
    Placement,
    /// Number of memory blocks, centred over the depth.
    NumMemoryLayers,
    KeyDim,
    /// Value width with `half_n²·v_dim` held near the base size.
    VDim,
    /// Number of values; must be a perfect square.
    MemorySize,
}

impl Axis {
    pub const ALL: [Axis; 5] = [
        Axis::Placement,
        Axis::NumMemoryLayers,
        Axis::KeyDim,
        Axis::VDim,
        Axis::MemorySize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Placement => "placement",
            Axis::NumMemoryLayers => "num_memory_layers",
            Axis::KeyDim => "key_dim",
            Axis::VDim => "v_dim",
            Axis::MemorySize => "memory_size",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

fn number(value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{value}` is not a non-negative integer")))
}

/// `base` with one axis set to `value`.
pub fn apply_axis(base: &TrainConfig, axis: Axis, value: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match axis {
        Axis::Placement => {
            cfg.memory_placement = value.split('+').map(number).collect::<Result<_>>()?;
        }
        Axis::NumMemoryLayers => cfg.memory_placement = centered_placement(base.layers, number(value)?)?,
        Axis::KeyDim => cfg.key_dim = number(value)?,
        Axis::VDim => {
            let v = number(value)?;
            if v == 0 {
                return Err(Error::config("v_dim must be positive"));
            }
            let ratio = base.v_dim as f64 / v as f64;
            cfg.half_n = ((base.half_n as f64 * ratio.sqrt()).round() as usize).max(base.k);
            cfg.v_dim = v;
        }
        Axis::MemorySize => {
            let n_v = number(value)?;
            let half = (n_v as f64).sqrt().round() as usize;
            if half * half != n_v {
                return Err(Error::Config(format!("memory size {n_v} is not a perfect square")));
            }
            cfg.half_n = half;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: Axis,
    pub value: String,
    pub final_train_nll: f64,
    pub final_eval_nll: f64,
    pub recall: f64,
    pub steps_to_90: Option<usize>,
    pub dense_params: usize,
    pub memory_params: usize,
    pub flops_per_token: f64,
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.axis,
            self.value,
            self.final_train_nll,
            self.final_eval_nll,
            self.recall,
            self.steps_to_90.map_or(String::new(), |s| s.to_string()),
            self.dense_params,
            self.memory_params,
            self.flops_per_token
        )
    }
}

/// Trains one model per value of `axis`.
pub fn ablate(base: &TrainConfig, axis: Axis, values: &[String]) -> Result<Vec<AblationRow>> {
    let configs = values
        .iter()
        .map(|v| apply_axis(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    configs
        .iter()
        .zip(values)
        .map(|(cfg, value)| {
            let log = train::<f32>(cfg)?;
            let last = log
                .last()
                .ok_or_else(|| Error::config("ablation run recorded no evaluation"))?;
            Ok(AblationRow {
                axis,
                value: value.clone(),
                final_train_nll: last.train_loss,
                final_eval_nll: last.eval_nll,
                recall: last.recall,
                steps_to_90: log.steps_to_recall(0.9),
                dense_params: log.params.dense,
                memory_params: log.params.memory,
                flops_per_token: log.flops_per_token,
            })
        })
        .collect()
}

/// Default sweep values for each axis.
pub fn default_values(axis: Axis, base: &TrainConfig) -> Vec<String> {
    let strs = |v: &[usize]| v.iter().map(usize::to_string).collect();
    match axis {
        Axis::Placement => (0..base.layers).map(|l| l.to_string()).collect(),
        Axis::NumMemoryLayers => strs(&(1..=base.layers.min(3)).collect::<Vec<_>>()),
        Axis::KeyDim => strs(&[base.model_dim / 2, base.model_dim, base.model_dim * 2]),
        Axis::VDim => strs(&[base.v_dim / 2, base.v_dim, base.v_dim * 2]),
        Axis::MemorySize => {
            let h = base.half_n;
            strs(&[(h / 2) * (h / 2), h * h, (2 * h) * (2 * h)])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in Axis::ALL {
            assert_eq!(a.name().parse::<Axis>().unwrap(), a);
        }
        assert!("depth".parse::<Axis>().is_err());
    }

    #[test]
    fn axes_edit_the_right_fields() {
        let base = TrainConfig::default();
        assert_eq!(apply_axis(&base, Axis::Placement, "1+3").unwrap().memory_placement, vec![1, 3]);
        assert_eq!(apply_axis(&base, Axis::NumMemoryLayers, "2").unwrap().memory_placement, vec![1, 3]);
        assert_eq!(apply_axis(&base, Axis::KeyDim, "32").unwrap().key_dim, 32);
        assert_eq!(apply_axis(&base, Axis::MemorySize, "1024").unwrap().half_n, 32);
        assert!(apply_axis(&base, Axis::MemorySize, "1000").is_err());
        assert!(apply_axis(&base, Axis::KeyDim, "31").is_err());
    }

    #[test]
    fn v_dim_axis_holds_memory_size() {
        let base = TrainConfig::default();
        let size = |c: &TrainConfig| (c.half_n * c.half_n * c.v_dim) as f64;
        for v in default_values(Axis::VDim, &base) {
            let cfg = apply_axis(&base, Axis::VDim, &v).unwrap();
            let rel = (size(&cfg) - size(&base)).abs() / size(&base);
            assert!(rel < 0.05, "v_dim {v}: {rel}");
        }
    }
}
