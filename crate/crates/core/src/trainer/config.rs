use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TopologyConfig;

/// Optimization settings plus the topology being trained.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub topology: TopologyConfig,
    /// Weight of the speaker-ID cross-entropy.
    pub alpha: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Training crop length in seconds.
    pub segment_s: f64,
    /// Adaptation crop length in seconds; 0 keeps whole utterances.
    pub adapt_s: f64,
    /// Validate every this many epochs.
    pub eval_every: usize,
    /// Evaluations without improvement before the learning rate is cut;
    /// 0 keeps it constant.
    pub lr_patience: usize,
    pub lr_decay: f64,
    pub sample_rate: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            topology: TopologyConfig::desk(),
            alpha: 10.0,
            lr: 1e-3,
            max_epochs: 50,
            batch_size: 8,
            clip_norm: 5.0,
            seed: 0,
            segment_s: 1.0,
            adapt_s: 0.0,
            eval_every: 1,
            lr_patience: 3,
            lr_decay: 0.5,
            sample_rate: crate::dsp::DEFAULT_SAMPLE_RATE,
        }
    }
}

const KEYS: &[&str] = &[
    "preset", "mode", "ipd", "n", "l", "b", "h", "p", "x", "r", "ipd_frame", "ipd_hop", "alpha",
    "lr", "max_epochs", "batch_size", "clip_norm", "seed", "segment_s", "adapt_s", "eval_every",
    "lr_patience", "lr_decay",
];

impl TrainConfig {
    pub fn segment_samples(&self) -> usize {
        (self.segment_s * self.sample_rate as f64).round() as usize
    }

    pub fn adapt_samples(&self) -> usize {
        (self.adapt_s * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr={} must be > 0", self.lr));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha={} must be >= 0", self.alpha));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive".into());
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!("clip_norm={} must be >= 0", self.clip_norm));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay={} must be in (0, 1]", self.lr_decay));
        }
        if self.segment_samples() < self.topology.l {
            return bad(format!(
                "segment_s={} gives {} samples, fewer than L={}",
                self.segment_s,
                self.segment_samples(),
                self.topology.l
            ));
        }
        if !(self.adapt_s >= 0.0) || (self.adapt_s > 0.0 && self.adapt_samples() < self.topology.l) {
            return bad(format!("adapt_s={} too short", self.adapt_s));
        }
        self.topology.validate()
    }

    /// Parses `key=value` lines; `#` starts a comment. A `preset` line
    /// resets the topology wherever it appears, so it should come first.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: line_no, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|e| match e {
                Error::Config { .. } => e,
                other => err(other.to_string()),
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    /// Sets one key as the config file would.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse `{v}`")))
        }
        let t = &mut self.topology;
        match key {
            "preset" => {
                let (kind, ipd, speakers) = (t.kind, t.ipd_mode, t.num_speakers);
                *t = match value {
                    "paper" => TopologyConfig::paper(),
                    "desk" => TopologyConfig::desk(),
                    "miniature" => TopologyConfig::miniature(),
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "preset `{value}` (expected paper|desk|miniature)"
                        )))
                    }
                };
                t.kind = kind;
                t.ipd_mode = ipd;
                t.num_speakers = speakers;
            }
            "mode" => t.kind = value.parse()?,
            "ipd" => t.ipd_mode = value.parse()?,
            "n" => t.n = num(key, value)?,
            "l" => t.l = num(key, value)?,
            "b" => t.b = num(key, value)?,
            "h" => t.h = num(key, value)?,
            "p" => t.p = num(key, value)?,
            "x" => t.x = num(key, value)?,
            "r" => t.r = num(key, value)?,
            "ipd_frame" => t.ipd_frame = num(key, value)?,
            "ipd_hop" => t.ipd_hop = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "segment_s" => self.segment_s = num(key, value)?,
            "adapt_s" => self.adapt_s = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "lr_patience" => self.lr_patience = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown key `{key}` (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Config-file text that parses back to `self` (speaker count aside,
    /// which comes from the data).
    pub fn to_text(&self) -> String {
        let t = &self.topology;
        let pairs: Vec<(&str, String)> = vec![
            ("mode", t.kind.to_string()),
            ("ipd", t.ipd_mode.to_string()),
            ("n", t.n.to_string()),
            ("l", t.l.to_string()),
            ("b", t.b.to_string()),
            ("h", t.h.to_string()),
            ("p", t.p.to_string()),
            ("x", t.x.to_string()),
            ("r", t.r.to_string()),
            ("ipd_frame", t.ipd_frame.to_string()),
            ("ipd_hop", t.ipd_hop.to_string()),
            ("alpha", self.alpha.to_string()),
            ("lr", self.lr.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("seed", self.seed.to_string()),
            ("segment_s", self.segment_s.to_string()),
            ("adapt_s", self.adapt_s.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("lr_patience", self.lr_patience.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
