//! Run configuration: a flat `key = value` text file gathering every knob
//! the CLI commands need. Desk-scale defaults keep the full-scale ratios
//! (capacity and block length sized in whole chunks, sink sized to one
//! frame); `full_scale` carries the full-scale numbers.

use crate::cache::{EvictionOrder, Policy};
use crate::error::{Error, Result};
use crate::salience::HeadReduce;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub heads: usize,
    pub head_dim: usize,
    pub frame_tokens: usize,
    pub chunk_frames: usize,
    /// Cache capacity in tokens.
    pub capacity: usize,
    /// Block length for salience scoring.
    pub block_len: usize,
    pub policy: Policy,
    pub sink_count: usize,
    /// Number of denoising timesteps per chunk.
    pub timesteps: usize,
    pub layers: usize,
    pub seh_hidden: usize,
    pub seh_out: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub smooth_l1_beta: f64,
    /// Rollout length, in chunks, of each training step.
    pub train_chunks: usize,
    pub eviction_order: EvictionOrder,
    pub head_reduce: HeadReduce,
    /// Optional salience-head checkpoint; when set, the salience policy
    /// scores chunks with the head instead of the dense oracle.
    pub seh_checkpoint: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            heads: 4,
            head_dim: 16,
            frame_tokens: 64,
            chunk_frames: 3,
            capacity: 576,
            block_len: 192,
            policy: Policy::Salience,
            sink_count: 64,
            timesteps: 4,
            layers: 2,
            seh_hidden: 64,
            seh_out: 12,
            lr: 1e-5,
            beta1: 0.0,
            beta2: 0.999,
            weight_decay: 0.01,
            epsilon: 1e-8,
            smooth_l1_beta: 1.0,
            train_chunks: 3,
            eviction_order: EvictionOrder::ConcatThenTopK,
            head_reduce: HeadReduce::MaxThenMean,
            seh_checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Full-scale settings: 12 heads of dimension 128, 1560 tokens per
    /// frame, 3-frame chunks, a 4680-token cache, and the 4608/1024/12
    /// salience head.
    pub fn full_scale() -> Self {
        RunConfig {
            heads: 12,
            head_dim: 128,
            frame_tokens: 1560,
            chunk_frames: 3,
            capacity: 4680,
            block_len: 4680,
            sink_count: 1560,
            seh_hidden: 1024,
            seh_out: 12,
            ..RunConfig::default()
        }
    }

    pub fn chunk_tokens(&self) -> usize {
        self.frame_tokens * self.chunk_frames
    }

    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn seh_d_in(&self) -> usize {
        3 * self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 9] = [
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("frame_tokens", self.frame_tokens),
            ("chunk_frames", self.chunk_frames),
            ("block_len", self.block_len),
            ("timesteps", self.timesteps),
            ("layers", self.layers),
            ("seh_hidden", self.seh_hidden),
            ("seh_out", self.seh_out),
        ];
        for (name, value) in positive {
            if value < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.train_chunks < 1 {
            return Err(Error::Config("train_chunks must be >= 1".into()));
        }
        if self.capacity < self.chunk_tokens() {
            return Err(Error::Config(format!(
                "capacity {} is below the chunk token count {} ({} frame_tokens x {} chunk_frames); \
                 one chunk must fit in the cache",
                self.capacity,
                self.chunk_tokens(),
                self.frame_tokens,
                self.chunk_frames
            )));
        }
        if self.sink_count > self.capacity {
            return Err(Error::Config(format!(
                "sink_count {} exceeds capacity {}",
                self.sink_count, self.capacity
            )));
        }
        if self.smooth_l1_beta <= 0.0 {
            return Err(Error::Config("smooth_l1_beta must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1/beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Parse a flat `key = value` file over the defaults. `#` starts a
    /// comment; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value).map_err(|e| {
                Error::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn int(key: &str, value: &str) -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: '{value}' is not an integer")))
        }
        fn float(key: &str, value: &str) -> Result<f64> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: '{value}' is not a number")))
        }
        match key {
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("seed: '{value}' is not an integer")))?
            }
            "heads" => self.heads = int(key, value)?,
            "head_dim" => self.head_dim = int(key, value)?,
            "frame_tokens" => self.frame_tokens = int(key, value)?,
            "chunk_frames" => self.chunk_frames = int(key, value)?,
            "capacity" => self.capacity = int(key, value)?,
            "block_len" => self.block_len = int(key, value)?,
            "policy" => self.policy = Policy::parse(value)?,
            "sink_count" => self.sink_count = int(key, value)?,
            "timesteps" => self.timesteps = int(key, value)?,
            "layers" => self.layers = int(key, value)?,
            "seh_hidden" => self.seh_hidden = int(key, value)?,
            "seh_out" => self.seh_out = int(key, value)?,
            "lr" => self.lr = float(key, value)?,
            "beta1" => self.beta1 = float(key, value)?,
            "beta2" => self.beta2 = float(key, value)?,
            "weight_decay" => self.weight_decay = float(key, value)?,
            "epsilon" => self.epsilon = float(key, value)?,
            "smooth_l1_beta" => self.smooth_l1_beta = float(key, value)?,
            "train_chunks" => self.train_chunks = int(key, value)?,
            "eviction_order" => self.eviction_order = EvictionOrder::parse(value)?,
            "head_reduce" => {
                self.head_reduce = match value {
                    "max-mean" => HeadReduce::MaxThenMean,
                    "mean-max" => HeadReduce::MeanThenMax,
                    other => {
                        return Err(Error::Config(format!(
                            "head_reduce: '{other}' (expected max-mean|mean-max)"
                        )))
                    }
                }
            }
            "seh_checkpoint" => self.seh_checkpoint = Some(value.to_string()),
            other => {
                return Err(Error::Config(format!("unknown key '{other}'")));
            }
        }
        Ok(())
    }

    /// Render as the same flat key-value format `parse` accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("seed", self.seed.to_string());
        push("heads", self.heads.to_string());
        push("head_dim", self.head_dim.to_string());
        push("frame_tokens", self.frame_tokens.to_string());
        push("chunk_frames", self.chunk_frames.to_string());
        push("capacity", self.capacity.to_string());
        push("block_len", self.block_len.to_string());
        push("policy", self.policy.name().to_string());
        push("sink_count", self.sink_count.to_string());
        push("timesteps", self.timesteps.to_string());
        push("layers", self.layers.to_string());
        push("seh_hidden", self.seh_hidden.to_string());
        push("seh_out", self.seh_out.to_string());
        push("lr", format!("{:e}", self.lr));
        push("beta1", self.beta1.to_string());
        push("beta2", self.beta2.to_string());
        push("weight_decay", self.weight_decay.to_string());
        push("epsilon", format!("{:e}", self.epsilon));
        push("smooth_l1_beta", self.smooth_l1_beta.to_string());
        push("train_chunks", self.train_chunks.to_string());
        push(
            "eviction_order",
            match self.eviction_order {
                EvictionOrder::ConcatThenTopK => "concat-then-topk".to_string(),
                EvictionOrder::EvictBeforeAppend => "evict-before-append".to_string(),
            },
        );
        push(
            "head_reduce",
            match self.head_reduce {
                HeadReduce::MaxThenMean => "max-mean".to_string(),
                HeadReduce::MeanThenMax => "mean-max".to_string(),
            },
        );
        if let Some(ckpt) = &self.seh_checkpoint {
            push("seh_checkpoint", ckpt.clone());
        }
        out
    }
}
