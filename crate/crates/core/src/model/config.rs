use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IpdMode {
    None,
    /// IPD merged with the bottleneck output, before the first block.
    Input,
    /// IPD merged right after the adaptation layer.
    Internal,
}

impl IpdMode {
    pub fn name(self) -> &'static str {
        match self {
            IpdMode::None => "none",
            IpdMode::Input => "input",
            IpdMode::Internal => "internal",
        }
    }
}

impl fmt::Display for IpdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IpdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(IpdMode::None),
            "input" => Ok(IpdMode::Input),
            "internal" => Ok(IpdMode::Internal),
            _ => Err(Error::InvalidArgument(format!(
                "ipd mode `{s}` (expected none|input|internal)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Target speaker extraction: one output, conditioned on an
    /// adaptation utterance.
    SpeakerBeam,
    /// Two-output separation baseline.
    TasNet,
    /// Returns the mixture unchanged. Reference point for evaluation.
    Passthrough,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SpeakerBeam => "td-spkbeam",
            ModelKind::TasNet => "tasnet",
            ModelKind::Passthrough => "passthrough",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "td-spkbeam" => Ok(ModelKind::SpeakerBeam),
            "tasnet" => Ok(ModelKind::TasNet),
            "passthrough" => Ok(ModelKind::Passthrough),
            _ => Err(Error::InvalidArgument(format!(
                "mode `{s}` (expected td-spkbeam|tasnet|passthrough)"
            ))),
        }
    }
}

/// Network shape, in Conv-TasNet notation.
#[derive(Clone, Debug, PartialEq)]
pub struct TopologyConfig {
    /// Encoder filters.
    pub n: usize,
    /// Encoder window in samples (hop is `l / 2`).
    pub l: usize,
    /// Bottleneck channels; also the embedding size.
    pub b: usize,
    /// Hidden channels inside a conv block.
    pub h: usize,
    /// Depthwise kernel size.
    pub p: usize,
    /// Blocks per repeat; dilations run 1, 2, ..., 2^(x-1).
    pub x: usize,
    /// Repeats.
    pub r: usize,
    pub kind: ModelKind,
    pub ipd_mode: IpdMode,
    /// Rows of the speaker-ID projection (training speakers).
    pub num_speakers: usize,
    /// STFT frame and hop for IPD features, in samples.
    pub ipd_frame: usize,
    pub ipd_hop: usize,
}

impl TopologyConfig {
    /// The full-size configuration (N=256, L=20, B=256, H=512, P=3, X=8, R=4).
    pub fn paper() -> Self {
        TopologyConfig {
            n: 256,
            l: 20,
            b: 256,
            h: 512,
            p: 3,
            x: 8,
            r: 4,
            kind: ModelKind::SpeakerBeam,
            ipd_mode: IpdMode::None,
            num_speakers: 1,
            ipd_frame: 256,
            ipd_hop: 128,
        }
    }

    /// Single-core default.
    pub fn desk() -> Self {
        TopologyConfig {
            n: 64,
            l: 16,
            b: 32,
            h: 64,
            p: 3,
            x: 4,
            r: 2,
            ..TopologyConfig::paper()
        }
    }

    /// Tiny network for gradient checks and overfitting runs.
    pub fn miniature() -> Self {
        TopologyConfig {
            n: 8,
            l: 4,
            b: 8,
            h: 12,
            p: 3,
            x: 2,
            r: 1,
            ipd_frame: 16,
            ipd_hop: 8,
            ..TopologyConfig::paper()
        }
    }

    pub fn with_kind(mut self, kind: ModelKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_ipd(mut self, mode: IpdMode) -> Self {
        self.ipd_mode = mode;
        self
    }

    pub fn with_speakers(mut self, n: usize) -> Self {
        self.num_speakers = n;
        self
    }

    pub fn num_outputs(&self) -> usize {
        match self.kind {
            ModelKind::TasNet => 2,
            _ => 1,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.b
    }

    pub fn num_blocks(&self) -> usize {
        self.r * self.x
    }

    /// IPD feature rows per frame (`2F`).
    pub fn ipd_dim(&self) -> usize {
        2 * (self.ipd_frame / 2 + 1)
    }

    /// Microphones the model consumes.
    pub fn channels(&self) -> usize {
        if self.ipd_mode == IpdMode::None {
            1
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.kind == ModelKind::Passthrough {
            return Ok(());
        }
        let dims = [self.n, self.b, self.h, self.p, self.x, self.r, self.num_speakers];
        if dims.contains(&0) {
            return bad(format!("all of N, B, H, P, X, R, speakers must be positive: {self:?}"));
        }
        if self.l < 2 || self.l % 2 != 0 {
            return bad(format!("L={} must be even and >= 2", self.l));
        }
        if self.p % 2 == 0 {
            return bad(format!("P={} must be odd for same padding", self.p));
        }
        if self.ipd_mode != IpdMode::None
            && (self.ipd_frame < 2 || self.ipd_frame % 2 != 0 || self.ipd_hop == 0 || self.ipd_hop > self.ipd_frame)
        {
            return bad(format!(
                "IPD STFT frame {} / hop {} invalid",
                self.ipd_frame, self.ipd_hop
            ));
        }
        if self.kind == ModelKind::TasNet && self.ipd_mode == IpdMode::Internal {
            return Err(Error::Unsupported(
                "tasnet with internal IPD combination".into(),
            ));
        }
        Ok(())
    }

    /// `key=value` lines, stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("kind", self.kind.to_string()),
            ("ipd_mode", self.ipd_mode.to_string()),
            ("n", self.n.to_string()),
            ("l", self.l.to_string()),
            ("b", self.b.to_string()),
            ("h", self.h.to_string()),
            ("p", self.p.to_string()),
            ("x", self.x.to_string()),
            ("r", self.r.to_string()),
            ("num_speakers", self.num_speakers.to_string()),
            ("ipd_frame", self.ipd_frame.to_string()),
            ("ipd_hop", self.ipd_hop.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("topology.{k}"), v))
        .collect()
    }

    pub fn from_pairs<'a>(mut get: impl FnMut(&str) -> Option<&'a str>) -> Result<Self> {
        let mut need = |k: &str| {
            get(&format!("topology.{k}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing topology.{k}")))
        };
        let num = |s: &str, k: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("topology.{k}: bad integer `{s}`")))
        };
        let kind = need("kind")?.parse()?;
        let ipd_mode = need("ipd_mode")?.parse()?;
        let mut n = |k: &str| -> Result<usize> { num(need(k)?, k) };
        Ok(TopologyConfig {
            kind,
            ipd_mode,
            n: n("n")?,
            l: n("l")?,
            b: n("b")?,
            h: n("h")?,
            p: n("p")?,
            x: n("x")?,
            r: n("r")?,
            num_speakers: n("num_speakers")?,
            ipd_frame: n("ipd_frame")?,
            ipd_hop: n("ipd_hop")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [TopologyConfig::paper(), TopologyConfig::desk(), TopologyConfig::miniature()] {
            cfg.validate().unwrap();
            assert_eq!(cfg.embedding_dim(), cfg.b);
        }
        assert_eq!(TopologyConfig::paper().ipd_dim(), 258);
    }

    #[test]
    fn tasnet_internal_rejected() {
        let cfg = TopologyConfig::miniature()
            .with_kind(ModelKind::TasNet)
            .with_ipd(IpdMode::Internal);
        assert!(matches!(cfg.validate(), Err(Error::Unsupported(_))));
        assert_eq!(cfg.num_outputs(), 2);
    }

    #[test]
    fn pairs_round_trip() {
        let cfg = TopologyConfig::desk().with_ipd(IpdMode::Internal).with_speakers(12);
        let pairs = cfg.to_pairs();
        let back = TopologyConfig::from_pairs(|k| {
            pairs.iter().find(|(a, _)| a == k).map(|(_, v)| v.as_str())
        })
        .unwrap();
        assert_eq!(back, cfg);
    }
}
