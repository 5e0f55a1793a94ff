use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_cut::{AffinityConfig, AffinityMode};
use crate::metrics::NmiNormalization;
use crate::network::Architecture;
use crate::optim::WeightDecayMode;

/// Hyperparameters for one training run. Defaults follow the CIFAR-10
/// setting (`lr 1e-4, wd 5e-4, d 128, 10+10 epochs, n 512, γ 70, ε 0.5,
/// s 10`); only `k` has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: String,
    pub warmup_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub eps: f64,
    pub sparsity: usize,
    pub affinity: String,
    pub sigma: f64,
    pub self_loops: bool,
    pub symmetrize: bool,
    pub seed: u64,
    pub eval_every: usize,
    /// Spectral clustering on the embeddings is skipped above this many points.
    pub sc_max_points: usize,
    pub nmi_normalization: NmiNormalization,
    /// Fraction of batches that may be skipped on degenerate graphs.
    pub max_skip_fraction: f64,
}

impl TrainConfig {
    pub fn new(k: usize) -> Self {
        TrainConfig {
            k,
            embed_dim: 128,
            hidden: 4096,
            depth: 1,
            tau: 1.0,
            lr: 1e-4,
            weight_decay: 5e-4,
            weight_decay_mode: "decoupled".into(),
            warmup_epochs: 10,
            finetune_epochs: 10,
            batch_size: 512,
            gamma: 70.0,
            eps: 0.5,
            sparsity: 10,
            affinity: "cosine".into(),
            sigma: 1.0,
            self_loops: true,
            symmetrize: true,
            seed: 0,
            eval_every: 1,
            sc_max_points: 4000,
            nmi_normalization: NmiNormalization::Sqrt,
            max_skip_fraction: 0.01,
        }
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden,
            depth: self.depth,
            embed_dim: self.embed_dim,
            clusters: self.k,
            tau: self.tau,
        }
    }

    pub fn affinity_config(&self) -> Result<AffinityConfig> {
        let mode = match self.affinity.as_str() {
            "cosine" => AffinityMode::Cosine,
            "gaussian" => AffinityMode::Gaussian { sigma: self.sigma },
            other => return Err(Error::Config(format!("unknown affinity `{other}` (cosine|gaussian)"))),
        };
        Ok(AffinityConfig {
            sparsity: self.sparsity,
            mode,
            self_loops: self.self_loops,
            symmetrize: self.symmetrize,
        })
    }

    pub fn decay_mode(&self) -> Result<WeightDecayMode> {
        match self.weight_decay_mode.as_str() {
            "decoupled" => Ok(WeightDecayMode::Decoupled),
            "l2" => Ok(WeightDecayMode::L2),
            other => Err(Error::Config(format!("unknown weight_decay_mode `{other}` (decoupled|l2)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("sparsity", self.sparsity),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.sparsity > self.batch_size {
            return bad(format!(
                "sparsity {} exceeds batch_size {}",
                self.sparsity, self.batch_size
            ));
        }
        for (name, v) in [("tau", self.tau), ("eps", self.eps), ("lr", self.lr), ("sigma", self.sigma)] {
            if !v.is_finite() || v <= 0.0 {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("weight_decay", self.weight_decay), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return bad(format!("max_skip_fraction must lie in [0, 1], got {}", self.max_skip_fraction));
        }
        self.affinity_config()?;
        self.decay_mode()?;
        Ok(())
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value `{value}` for `{key}`")))
}

/// Long name for a short config alias.
fn canonical_key(key: &str) -> &str {
    match key {
        "d" => "embed_dim",
        "wd" => "weight_decay",
        "T1" => "warmup_epochs",
        "T2" => "finetune_epochs",
        "n" => "batch_size",
        "s" => "sparsity",
        other => other,
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::new(0);
    let mut seen_k = false;
    let mut seen = std::collections::HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`, got `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(canonical_key(key)) {
            return Err(Error::Config(format!("line {line}: duplicate key `{key}`")));
        }
        match key {
            "k" => {
                cfg.k = parse_value(key, value, line)?;
                seen_k = true;
            }
            "embed_dim" | "d" => cfg.embed_dim = parse_value(key, value, line)?,
            "hidden" => cfg.hidden = parse_value(key, value, line)?,
            "depth" => cfg.depth = parse_value(key, value, line)?,
            "tau" => cfg.tau = parse_value(key, value, line)?,
            "lr" => cfg.lr = parse_value(key, value, line)?,
            "weight_decay" | "wd" => cfg.weight_decay = parse_value(key, value, line)?,
            "weight_decay_mode" => cfg.weight_decay_mode = value.to_string(),
            "warmup_epochs" | "T1" => cfg.warmup_epochs = parse_value(key, value, line)?,
            "finetune_epochs" | "T2" => cfg.finetune_epochs = parse_value(key, value, line)?,
            "batch_size" | "n" => cfg.batch_size = parse_value(key, value, line)?,
            "gamma" => cfg.gamma = parse_value(key, value, line)?,
            "eps" => cfg.eps = parse_value(key, value, line)?,
            "sparsity" | "s" => cfg.sparsity = parse_value(key, value, line)?,
            "affinity" => cfg.affinity = value.to_string(),
            "sigma" => cfg.sigma = parse_value(key, value, line)?,
            "self_loops" => cfg.self_loops = parse_value(key, value, line)?,
            "symmetrize" => cfg.symmetrize = parse_value(key, value, line)?,
            "seed" => cfg.seed = parse_value(key, value, line)?,
            "eval_every" => cfg.eval_every = parse_value(key, value, line)?,
            "sc_max_points" => cfg.sc_max_points = parse_value(key, value, line)?,
            "nmi_normalization" => cfg.nmi_normalization = parse_value(key, value, line)?,
            "max_skip_fraction" => cfg.max_skip_fraction = parse_value(key, value, line)?,
            other => return Err(Error::Config(format!("line {line}: unknown key `{other}`"))),
        }
    }
    if !seen_k {
        return Err(Error::Config("missing required key `k`".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
