use serde::{Deserialize, Serialize};

use crate::blocks::{Activation, BlockKind, InitScales, ParamGroup};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockName {
    Mlp,
    MatrixPre,
    MatrixPost,
    Attention,
}

/// Training setup. Serialized as a flat JSON object whose keys are the field
/// names below.
///
/// Learning rates follow the pre-multiplied convention: a unit parameter in
/// group `g` moves by `-(L M lr_g / alpha^2)` times its gradient of the mean
/// training loss. `lr_u` drives the input-side group, `lr_v` the output side
/// (see [`ParamGroup`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub depth: usize,
    pub width: usize,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default = "default_block")]
    pub block: BlockName,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_tokens")]
    pub tokens: usize,
    #[serde(default = "default_key_dim")]
    pub key_dim: usize,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub lr_u: f64,
    pub lr_v: f64,
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub data_seed: u64,
    /// Iterations at which full parameters are kept. `0` and `steps` are
    /// always kept.
    #[serde(default)]
    pub snapshots: Vec<usize>,
    /// Give unit 1 of every layer the same initial draw.
    #[serde(default)]
    pub tie_first_unit: bool,
}

fn default_block() -> BlockName {
    BlockName::Mlp
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_tokens() -> usize {
    1
}
fn default_key_dim() -> usize {
    4
}
fn default_samples() -> usize {
    10
}

impl TrainConfig {
    /// The desk-scale complete-regime setup: tanh 2LP blocks,
    /// `sigma_u = sigma_v = sqrt(D)`, `(lr_u, lr_v) = (D, D)`, `n = 10`.
    pub fn complete_mlp(dim: usize, depth: usize, width: usize, steps: usize, seed: u64) -> Self {
        let d = dim as f64;
        Self {
            dim,
            depth,
            width,
            alpha: 1.0,
            steps,
            block: BlockName::Mlp,
            activation: Activation::Tanh,
            tokens: 1,
            key_dim: default_key_dim(),
            sigma_u: d.sqrt(),
            sigma_v: d.sqrt(),
            lr_u: d,
            lr_v: d,
            seed,
            samples: 10,
            data_seed: 0,
            snapshots: Vec::new(),
            tie_first_unit: false,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kind(&self) -> BlockKind {
        match self.block {
            BlockName::Mlp => BlockKind::Mlp(self.activation),
            BlockName::MatrixPre => BlockKind::MatrixPre(self.activation),
            BlockName::MatrixPost => BlockKind::MatrixPost(self.activation),
            BlockName::Attention => BlockKind::Attention {
                key_dim: self.key_dim,
            },
        }
    }

    pub fn scales(&self) -> InitScales {
        InitScales {
            input: self.sigma_u,
            output: self.sigma_v,
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Input => self.lr_u,
            ParamGroup::Output => self.lr_v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("dim", self.dim), ("depth", self.depth), ("width", self.width)];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.tokens == 0 {
            return Err(Error::config("tokens", "must be at least 1"));
        }
        if self.samples == 0 {
            return Err(Error::config("samples", "must be at least 1"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("alpha", "must be a positive finite number"));
        }
        for (key, v) in [
            ("sigma_u", self.sigma_u),
            ("sigma_v", self.sigma_v),
            ("lr_u", self.lr_u),
            ("lr_v", self.lr_v),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be a nonnegative finite number"));
            }
        }
        if self.block == BlockName::Attention && self.key_dim == 0 {
            return Err(Error::config("key_dim", "must be at least 1"));
        }
        if let Some(&k) = self.snapshots.iter().find(|&&k| k > self.steps) {
            return Err(Error::config(
                "snapshots",
                format!("iteration {k} is past the last step {}", self.steps),
            ));
        }
        Ok(())
    }

    /// Snapshot iterations, sorted, always containing `0` and `steps`.
    pub fn snapshot_schedule(&self) -> Vec<usize> {
        let mut s = self.snapshots.clone();
        s.push(0);
        s.push(self.steps);
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Deserializes JSON, reporting failures against the offending key path.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(path_error)
}

fn path_error(e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = e.path().to_string();
    let inner = e.into_inner();
    let msg = inner.to_string();
    // missing/unknown fields are reported against the parent; pull the name out
    let key = if path == "." || path.is_empty() {
        msg.split('`').nth(1).unwrap_or(".").to_string()
    } else {
        path
    };
    Error::Config { key, reason: msg }
}
