use super::config::{IpdMode, ModelKind, TopologyConfig};
use crate::autodiff::{Graph, Tensor, Var};
use crate::dsp::{self, upsample_indices, AudioSignal};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv1d, ConvBlock, ConvBlockConfig, Decoder, Encoder, Init, ParamId, ParamStore};

/// Target speaker embedding, one value per bottleneck channel.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity; `-1` when either vector has zero norm.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let (na, nb) = (self.norm(), other.norm());
        if na == 0.0 || nb == 0.0 {
            return -1.0;
        }
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum::<f64>() / (na * nb)
    }
}

/// Steps of the extraction trunk, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encode,
    Bottleneck,
    InputIpdMerge,
    Block(usize),
    Adapt,
    InternalIpdMerge,
    Mask,
    Decode,
}

/// Auxiliary network: encoder, bottleneck, one conv block, time average.
#[derive(Clone, Debug)]
struct AuxNet {
    encoder: Encoder,
    bottleneck: Conv1d,
    block: ConvBlock,
}

#[derive(Clone, Debug)]
struct IpdBranch {
    project: Conv1d,
    block: Option<ConvBlock>,
    merge: Conv1d,
}

#[derive(Clone, Debug)]
struct Trunk {
    encoder: Encoder,
    bottleneck: Conv1d,
    ipd: Option<IpdBranch>,
    blocks: Vec<ConvBlock>,
    mask: Conv1d,
    decoder: Decoder,
}

/// A trainable network for one [`TopologyConfig`].
#[derive(Clone, Debug)]
pub struct Model {
    cfg: TopologyConfig,
    params: ParamStore,
    trunk: Option<Trunk>,
    aux: Option<AuxNet>,
    speaker_proj: Option<ParamId>,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// One `[1, len]` waveform per model output.
    pub outputs: Vec<Var>,
    /// `[B, 1]` speaker embedding (extraction models only).
    pub embedding: Option<Var>,
    /// Sigmoid mask(s), `[outputs * N, T_enc]`.
    pub mask: Option<Var>,
}

/// `out[c, t] = h[c, t] * e[c]`.
pub fn adaptation_layer(g: &mut Graph, h: Var, e: Var) -> Result<Var> {
    let (hs, es) = (g.shape(h).to_vec(), g.shape(e).to_vec());
    if hs.len() != 2 || g.value(e).numel() != hs[0] {
        return Err(Error::ShapeMismatch {
            op: "adaptation_layer",
            lhs: hs,
            rhs: es,
        });
    }
    let e = g.reshape(e, &[hs[0], 1])?;
    g.mul(h, e)
}

impl Model {
    pub fn new(cfg: TopologyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        if cfg.kind == ModelKind::Passthrough {
            return Ok(Model {
                cfg,
                params,
                trunk: None,
                aux: None,
                speaker_proj: None,
            });
        }
        let mut init = Init::new(seed);
        let (n, l, b, h, p) = (cfg.n, cfg.l, cfg.b, cfg.h, cfg.p);
        let block_cfg = |dilation| ConvBlockConfig {
            in_channels: b,
            hidden_channels: h,
            kernel: p,
            dilation,
        };
        let encoder = Encoder::new(&mut params, &mut init, "encoder", n, l);
        let bottleneck = Conv1d::pointwise(&mut params, &mut init, "bottleneck", n, b);
        let ipd = (cfg.ipd_mode != IpdMode::None).then(|| {
            let project = Conv1d::pointwise(&mut params, &mut init, "ipd.project", cfg.ipd_dim(), b);
            let block = (cfg.ipd_mode == IpdMode::Internal)
                .then(|| ConvBlock::new(&mut params, &mut init, "ipd.block", block_cfg(1)));
            let merge = Conv1d::pointwise(&mut params, &mut init, "ipd.merge", 2 * b, b);
            IpdBranch {
                project,
                block,
                merge,
            }
        });
        let blocks = (0..cfg.num_blocks())
            .map(|i| {
                ConvBlock::new(
                    &mut params,
                    &mut init,
                    &format!("blocks.{i}"),
                    block_cfg(1 << (i % cfg.x)),
                )
            })
            .collect();
        let mask = Conv1d::pointwise(&mut params, &mut init, "mask", b, n * cfg.num_outputs());
        let decoder = Decoder::new(&mut params, &mut init, "decoder", n, l);
        let (aux, speaker_proj) = if cfg.kind == ModelKind::SpeakerBeam {
            let aux = AuxNet {
                encoder: Encoder::new(&mut params, &mut init, "aux.encoder", n, l),
                bottleneck: Conv1d::pointwise(&mut params, &mut init, "aux.bottleneck", n, b),
                block: ConvBlock::new(&mut params, &mut init, "aux.block", block_cfg(1)),
            };
            let w = params.add(
                "speaker_proj.weight",
                init.uniform(&[cfg.num_speakers, b], b),
            );
            (Some(aux), Some(w))
        } else {
            (None, None)
        };
        Ok(Model {
            cfg,
            params,
            trunk: Some(Trunk {
                encoder,
                bottleneck,
                ipd,
                blocks,
                mask,
                decoder,
            }),
            aux,
            speaker_proj,
        })
    }

    pub fn config(&self) -> &TopologyConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn speaker_projection(&self) -> Option<ParamId> {
        self.speaker_proj
    }

    /// The trunk's stage sequence for this topology.
    pub fn plan(&self) -> Vec<Stage> {
        if self.trunk.is_none() {
            return Vec::new();
        }
        let mut plan = vec![Stage::Encode, Stage::Bottleneck];
        if self.cfg.ipd_mode == IpdMode::Input {
            plan.push(Stage::InputIpdMerge);
        }
        for i in 0..self.cfg.num_blocks() {
            plan.push(Stage::Block(i));
            if i == 0 && self.cfg.kind == ModelKind::SpeakerBeam {
                plan.push(Stage::Adapt);
                if self.cfg.ipd_mode == IpdMode::Internal {
                    plan.push(Stage::InternalIpdMerge);
                }
            }
        }
        plan.push(Stage::Mask);
        plan.push(Stage::Decode);
        plan
    }

    /// Embedding of an adaptation utterance as a `[B, 1]` var.
    pub fn aux_embed_var(&self, g: &mut Graph, p: &Bound, adaptation: &[f64]) -> Result<Var> {
        let aux = self
            .aux
            .as_ref()
            .ok_or_else(|| Error::Unsupported(format!("{} has no auxiliary network", self.cfg.kind)))?;
        if adaptation.len() < self.cfg.l {
            return Err(Error::TooShort {
                what: "adaptation utterance",
                len: adaptation.len(),
                min: self.cfg.l,
            });
        }
        let a = g.constant(Tensor::from_parts(vec![1, adaptation.len()], adaptation.to_vec()));
        let z = aux.encoder.forward(g, p, a)?;
        let z = aux.bottleneck.forward(g, p, z)?;
        let z = aux.block.forward(g, p, z)?;
        g.mean(z, Some(1))
    }

    /// `[T_stft x 2F]` IPD features of a two-channel mixture, or `None` for
    /// models without spatial input.
    pub fn ipd_features(&self, mixture: &AudioSignal) -> Result<Option<Vec<Vec<f64>>>> {
        if self.cfg.ipd_mode == IpdMode::None || self.trunk.is_none() {
            return Ok(None);
        }
        if mixture.num_channels() != 2 {
            return Err(Error::ChannelCount {
                what: "IPD model input",
                expected: 2,
                got: mixture.num_channels(),
            });
        }
        let spec = dsp::stft(mixture, self.cfg.ipd_frame, self.cfg.ipd_hop)?;
        dsp::ipd_features(&spec).map(Some)
    }

    fn ipd_tensor(&self, ipd: &[Vec<f64>]) -> Result<Tensor> {
        let rows = ipd.len();
        let dim = self.cfg.ipd_dim();
        if rows == 0 {
            return Err(Error::EmptyInput("IPD features"));
        }
        if let Some(bad) = ipd.iter().find(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch {
                op: "ipd features",
                lhs: vec![rows, bad.len()],
                rhs: vec![rows, dim],
            });
        }
        let mut data = vec![0.0; dim * rows];
        for (t, row) in ipd.iter().enumerate() {
            for (d, &v) in row.iter().enumerate() {
                data[d * rows + t] = v;
            }
        }
        Ok(Tensor::from_parts(vec![dim, rows], data))
    }

    /// Records the full network on `g`.
    ///
    /// `adaptation` is required by extraction models and rejected by the
    /// baseline; `ipd` is required exactly when the topology uses IPD.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        mixture: &[f64],
        adaptation: Option<&[f64]>,
        ipd: Option<&[Vec<f64>]>,
    ) -> Result<ForwardOutput> {
        let Some(trunk) = &self.trunk else {
            let y = g.constant(Tensor::from_parts(vec![1, mixture.len()], mixture.to_vec()));
            return Ok(ForwardOutput {
                outputs: vec![y],
                embedding: None,
                mask: None,
            });
        };
        let ipd = match (self.cfg.ipd_mode, ipd) {
            (IpdMode::None, Some(_)) => {
                return Err(Error::Unsupported(
                    "IPD features supplied to a model with ipd_mode=none".into(),
                ))
            }
            (IpdMode::None, None) => None,
            (mode, None) => return Err(Error::MissingIpd(mode.name())),
            (_, Some(f)) => Some(self.ipd_tensor(f)?),
        };
        let embedding = match (self.cfg.kind, adaptation) {
            (ModelKind::SpeakerBeam, Some(a)) => Some(self.aux_embed_var(g, p, a)?),
            (ModelKind::SpeakerBeam, None) => {
                return Err(Error::InvalidArgument(
                    "extraction needs an adaptation utterance".into(),
                ))
            }
            (_, Some(_)) => {
                return Err(Error::Unsupported(
                    "the separation baseline takes no adaptation utterance".into(),
                ))
            }
            (_, None) => None,
        };

        let len = mixture.len();
        let y = g.constant(Tensor::from_parts(vec![1, len], mixture.to_vec()));
        let mut enc = None;
        let mut h = y;
        let mut mask = None;
        let mut outputs = Vec::new();
        let ipd_branch = |g: &mut Graph, frames: usize| -> Result<Var> {
            let branch = trunk.ipd.as_ref().expect("ipd branch exists for ipd modes");
            let feat = g.constant(ipd.clone().expect("checked above"));
            let z = branch.project.forward(g, p, feat)?;
            let idx = upsample_indices(g.shape(z)[1], frames);
            let z = g.gather(z, &idx)?;
            match &branch.block {
                Some(block) => block.forward(g, p, z),
                None => Ok(z),
            }
        };
        for stage in self.plan() {
            match stage {
                Stage::Encode => {
                    let e = trunk.encoder.forward(g, p, y)?;
                    enc = Some(e);
                    h = e;
                }
                Stage::Bottleneck => h = trunk.bottleneck.forward(g, p, h)?,
                Stage::InputIpdMerge | Stage::InternalIpdMerge => {
                    let frames = g.shape(h)[1];
                    let z = ipd_branch(g, frames)?;
                    let cat = g.concat(&[h, z], 0)?;
                    let merge = &trunk.ipd.as_ref().expect("ipd branch").merge;
                    h = merge.forward(g, p, cat)?;
                }
                Stage::Block(i) => h = trunk.blocks[i].forward(g, p, h)?,
                Stage::Adapt => {
                    h = adaptation_layer(g, h, embedding.expect("extraction has an embedding"))?
                }
                Stage::Mask => {
                    let m = trunk.mask.forward(g, p, h)?;
                    mask = Some(g.sigmoid(m));
                }
                Stage::Decode => {
                    let (m, e) = (mask.expect("mask precedes decode"), enc.expect("encoded"));
                    for k in 0..self.cfg.num_outputs() {
                        let mk = if self.cfg.num_outputs() == 1 {
                            m
                        } else {
                            g.slice(m, 0, k * self.cfg.n, (k + 1) * self.cfg.n)?
                        };
                        let masked = g.mul(mk, e)?;
                        let wave = trunk.decoder.forward(g, p, masked)?;
                        outputs.push(fit_length(g, wave, len)?);
                    }
                }
            }
        }
        Ok(ForwardOutput {
            outputs,
            embedding,
            mask,
        })
    }

    fn reference_channel(mixture: &AudioSignal) -> &[f64] {
        mixture.channel(0)
    }

    fn run(&self, mixture: &AudioSignal, adaptation: Option<&[f64]>) -> Result<Vec<Vec<f64>>> {
        let ipd = self.ipd_features(mixture)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(
            &mut g,
            &p,
            Self::reference_channel(mixture),
            adaptation,
            ipd.as_deref(),
        )?;
        Ok(out
            .outputs
            .iter()
            .map(|&v| g.value(v).data().to_vec())
            .collect())
    }

    /// Target speech estimate, same length as the mixture.
    pub fn extract(&self, mixture: &AudioSignal, adaptation: &[f64]) -> Result<Vec<f64>> {
        match self.cfg.kind {
            ModelKind::Passthrough => Ok(Self::reference_channel(mixture).to_vec()),
            ModelKind::SpeakerBeam => Ok(self.run(mixture, Some(adaptation))?.remove(0)),
            ModelKind::TasNet => Err(Error::Unsupported(
                "tasnet separates; use separate() and a selector".into(),
            )),
        }
    }

    /// Both baseline outputs.
    pub fn separate(&self, mixture: &AudioSignal) -> Result<[Vec<f64>; 2]> {
        if self.cfg.kind != ModelKind::TasNet {
            return Err(Error::Unsupported(format!("{} is not a separator", self.cfg.kind)));
        }
        let mut out = self.run(mixture, None)?;
        let second = out.pop().expect("two outputs");
        let first = out.pop().expect("two outputs");
        Ok([first, second])
    }

    pub fn embed(&self, adaptation: &[f64]) -> Result<EmbeddingVector> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let e = self.aux_embed_var(&mut g, &p, adaptation)?;
        Ok(EmbeddingVector(g.value(e).data().to_vec()))
    }

    /// Speaker-ID logits `W e` for an embedding.
    pub fn speaker_logits(&self, e: &EmbeddingVector) -> Result<Vec<f64>> {
        let w = self
            .speaker_proj
            .ok_or_else(|| Error::Unsupported("model has no speaker projection".into()))?;
        let w = self.params.get(w);
        let dim = e.0.len();
        Ok(w.data()
            .chunks(dim)
            .map(|row| row.iter().zip(&e.0).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Trims or zero-pads a `[1, n]` waveform var to `len` samples.
fn fit_length(g: &mut Graph, wave: Var, len: usize) -> Result<Var> {
    let n = g.shape(wave)[1];
    if n == len {
        Ok(wave)
    } else if n > len {
        g.slice(wave, 1, 0, len)
    } else {
        let pad = g.constant(Tensor::zeros(&[1, len - n]));
        g.concat(&[wave, pad], 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    fn mixture(len: usize, channels: usize) -> AudioSignal {
        AudioSignal::new((0..channels).map(|c| noise(len, 7 + c as u64)).collect(), 8000).unwrap()
    }

    fn topology(kind: ModelKind, ipd: IpdMode) -> TopologyConfig {
        // L=20 so the short lengths exercise trimming and padding
        TopologyConfig {
            l: 20,
            ..TopologyConfig::miniature()
        }
        .with_kind(kind)
        .with_ipd(ipd)
        .with_speakers(3)
    }

    #[test]
    fn output_length_matches_input() {
        let adapt = noise(90, 3);
        for (kind, ipd) in [
            (ModelKind::SpeakerBeam, IpdMode::None),
            (ModelKind::SpeakerBeam, IpdMode::Input),
            (ModelKind::SpeakerBeam, IpdMode::Internal),
            (ModelKind::TasNet, IpdMode::None),
            (ModelKind::TasNet, IpdMode::Input),
            (ModelKind::Passthrough, IpdMode::None),
        ] {
            let model = Model::new(topology(kind, ipd), 1).unwrap();
            let channels = model.config().channels();
            for len in [40, 100, 163] {
                let y = mixture(len, channels);
                if kind == ModelKind::TasNet {
                    let [a, b] = model.separate(&y).unwrap();
                    assert_eq!((a.len(), b.len()), (len, len));
                } else {
                    assert_eq!(model.extract(&y, &adapt).unwrap().len(), len, "{kind} {ipd} {len}");
                }
            }
        }
    }

    #[test]
    fn mask_in_open_unit_interval() {
        let model = Model::new(topology(ModelKind::SpeakerBeam, IpdMode::Internal), 2).unwrap();
        let y = mixture(163, 2);
        let ipd = model.ipd_features(&y).unwrap().unwrap();
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let out = model.forward(&mut g, &p, y.channel(0), Some(&noise(80, 1)), Some(&ipd)).unwrap();
        let mask = g.value(out.mask.unwrap());
        assert!(mask.data().iter().all(|&m| m > 0.0 && m < 1.0));
    }

    #[test]
    fn symmetric_head_gives_identical_outputs() {
        let mut model = Model::new(TopologyConfig::miniature().with_kind(ModelKind::TasNet), 3).unwrap();
        let n = model.config().n;
        let id = model.params().id("mask.weight").unwrap();
        let w = model.params_mut().get_mut(id);
        let half = w.data().len() / 2;
        assert_eq!(w.shape()[0], 2 * n);
        let (first, second) = w.data_mut().split_at_mut(half);
        second.copy_from_slice(first);
        let [a, b] = model.separate(&mixture(100, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn merges_sit_where_the_mode_says() {
        let plan = |kind, ipd| Model::new(topology(kind, ipd), 0).unwrap().plan();
        let input = plan(ModelKind::SpeakerBeam, IpdMode::Input);
        assert_eq!(&input[..5], &[Stage::Encode, Stage::Bottleneck, Stage::InputIpdMerge, Stage::Block(0), Stage::Adapt]);
        let internal = plan(ModelKind::SpeakerBeam, IpdMode::Internal);
        assert_eq!(
            &internal[..5],
            &[Stage::Encode, Stage::Bottleneck, Stage::Block(0), Stage::Adapt, Stage::InternalIpdMerge]
        );
        let sep = plan(ModelKind::TasNet, IpdMode::Input);
        assert!(!sep.contains(&Stage::Adapt));
        assert_eq!(sep[2], Stage::InputIpdMerge);
        assert_eq!(sep.iter().filter(|s| matches!(s, Stage::Block(_))).count(), 2);
        assert!(plan(ModelKind::Passthrough, IpdMode::None).is_empty());
    }

    #[test]
    fn adaptation_layer_examples() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 4.0, -1.5, 3.0]).unwrap());
        let ones = g.constant(Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap());
        let zeros = g.constant(Tensor::new(vec![3, 1], vec![0.0; 3]).unwrap());
        let e = g.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let e3 = g.constant(Tensor::new(vec![3], vec![1.5, -3.0, 6.0]).unwrap());
        let same = adaptation_layer(&mut g, h, ones).unwrap();
        assert_eq!(g.value(same).data(), g.value(h).data());
        let zero = adaptation_layer(&mut g, h, zeros).unwrap();
        assert!(g.value(zero).data().iter().all(|&v| v == 0.0));
        let a = adaptation_layer(&mut g, h, e).unwrap();
        assert_eq!(g.value(a).data(), &[0.5, -1.0, -0.5, -4.0, -3.0, 6.0]);
        let b = adaptation_layer(&mut g, h, e3).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((3.0 * x - y).abs() < 1e-12);
        }
        let short = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        assert!(matches!(adaptation_layer(&mut g, h, short), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_embedding_makes_the_mask_input_independent() {
        // no encoder bias and zero-initialized biases: silence embeds to e = 0
        let model = Model::new(TopologyConfig::miniature(), 4).unwrap();
        let adapt = vec![0.0; 40];
        let e = model.embed(&adapt).unwrap();
        assert!(e.values().iter().all(|v| *v == 0.0), "{e:?}");
        let mask_of = |y: &[f64]| {
            let mut g = Graph::new();
            let p = model.params().bind(&mut g, false);
            let out = model.forward(&mut g, &p, y, Some(&adapt), None).unwrap();
            g.value(out.mask.unwrap()).data().to_vec()
        };
        let (m1, m2) = (mask_of(&noise(60, 1)), mask_of(&noise(60, 2)));
        let first = m1[0];
        assert!(m1.iter().chain(&m2).all(|&v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn embedding_shape_and_silence() {
        let model = Model::new(topology(ModelKind::SpeakerBeam, IpdMode::None), 5).unwrap();
        let b = model.config().b;
        for len in [20, 57, 300] {
            assert_eq!(model.embed(&noise(len, len as u64)).unwrap().values().len(), b);
        }
        let z1 = model.embed(&vec![0.0; 100]).unwrap();
        assert!(z1.values().iter().all(|v| v.is_finite()));
        assert_eq!(z1, model.embed(&vec![0.0; 100]).unwrap());
        assert!(matches!(model.embed(&noise(19, 1)), Err(Error::TooShort { .. })));
    }

    #[test]
    fn ipd_argument_must_match_the_mode() {
        let plain = Model::new(TopologyConfig::miniature(), 0).unwrap();
        let mut g = Graph::new();
        let p = plain.params().bind(&mut g, false);
        let fake = vec![vec![0.0; plain.config().ipd_dim()]; 3];
        let y = noise(60, 0);
        let adapt = noise(40, 1);
        assert!(matches!(
            plain.forward(&mut g, &p, &y, Some(&adapt), Some(&fake)),
            Err(Error::Unsupported(_))
        ));
        let spatial = Model::new(TopologyConfig::miniature().with_ipd(IpdMode::Input), 0).unwrap();
        let p = spatial.params().bind(&mut g, false);
        assert!(spatial.forward(&mut g, &p, &y, Some(&adapt), None).is_err());
        assert!(matches!(
            spatial.extract(&mixture(60, 1), &adapt),
            Err(Error::ChannelCount { .. })
        ));
    }

    #[test]
    fn passthrough_returns_the_first_channel() {
        let model = Model::new(TopologyConfig::miniature().with_kind(ModelKind::Passthrough), 0).unwrap();
        let y = mixture(77, 2);
        assert_eq!(model.extract(&y, &[]).unwrap(), y.channel(0));
        assert!(model.params().is_empty());
    }
}
