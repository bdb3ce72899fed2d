//! Adam training on random crops, best-checkpoint retention and
//! bit-exact resumption.

mod adam;
mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{clip_global_norm, Adam, ADAM_EPS, BETA1, BETA2};
pub use config::TrainConfig;

use crate::autodiff::{Graph, Tensor};
use crate::corpus::{LoadedMixture, Manifest};
use crate::dsp::AudioSignal;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Selector};
use crate::loss::{multitask_loss, pit_loss, reference_var, sisnr, LossReport};
use crate::model::{Checkpoint, Model, ModelKind};
use crate::nn::ParamStore;

/// Means over one epoch's training examples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub sisnr: f64,
    pub ce: f64,
    /// Validation metric (lower is better) if this epoch was evaluated.
    pub valid: Option<f64>,
    pub lr: f64,
}

/// One `epoch\tloss\tsisnr\tce` line per epoch.
pub fn metrics_log(history: &[EpochMetrics]) -> String {
    let mut s = String::new();
    for m in history {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", m.epoch, m.loss, m.sisnr, m.ce);
    }
    s
}

/// Sorted distinct target speakers; a speaker's label is its position.
pub fn speaker_labels(data: &[LoadedMixture]) -> Vec<String> {
    let mut v: Vec<String> = data.iter().map(|m| m.record.target_spk.clone()).collect();
    v.sort();
    v.dedup();
    v
}

fn loss_for(
    model: &Model,
    g: &mut Graph,
    p: &crate::nn::Bound,
    mixture: &AudioSignal,
    sources: [&[f64]; 2],
    adaptation: &[f64],
    label: usize,
    alpha: f64,
) -> Result<(crate::autodiff::Var, LossReport)> {
    let ipd = model.ipd_features(mixture)?;
    match model.config().kind {
        ModelKind::SpeakerBeam => {
            let out = model.forward(g, p, mixture.channel(0), Some(adaptation), ipd.as_deref())?;
            let r = reference_var(g, sources[0]);
            let w = p.var(model.speaker_projection().expect("extraction model"));
            let e = out.embedding.expect("extraction model");
            multitask_loss(g, r, out.outputs[0], e, w, label, alpha)
        }
        ModelKind::TasNet => {
            let out = model.forward(g, p, mixture.channel(0), None, ipd.as_deref())?;
            let r = [reference_var(g, sources[0]), reference_var(g, sources[1])];
            pit_loss(g, r, [out.outputs[0], out.outputs[1]])
        }
        ModelKind::Passthrough => Err(Error::Unsupported("passthrough has nothing to train".into())),
    }
}

/// Full training state; everything needed to resume bit-exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub speakers: Vec<String>,
    rng: ChaCha8Rng,
    /// Epochs completed.
    pub epoch: usize,
    pub lr: f64,
    pub best_metric: f64,
    pub best_epoch: usize,
    best_params: ParamStore,
    bad_evals: usize,
    pub history: Vec<EpochMetrics>,
}

/// What a finished run hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best-scoring epoch.
    pub best: Checkpoint,
    /// Resumable state after the last epoch.
    pub last: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok())
        .collect()
}

impl Trainer {
    /// Fresh state. `speakers` fixes the label set for the ID loss.
    pub fn new(cfg: TrainConfig, speakers: Vec<String>) -> Result<Self> {
        let mut cfg = cfg;
        cfg.topology.num_speakers = speakers.len().max(1);
        cfg.validate()?;
        let model = Model::new(cfg.topology.clone(), cfg.seed)?;
        let adam = Adam::new(model.params());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
        Ok(Trainer {
            lr: cfg.lr,
            best_params: model.params().clone(),
            cfg,
            model,
            adam,
            speakers,
            rng,
            epoch: 0,
            best_metric: f64::INFINITY,
            best_epoch: 0,
            bad_evals: 0,
            history: Vec::new(),
        })
    }

    fn label(&self, spk: &str) -> Result<usize> {
        match self.cfg.topology.kind {
            ModelKind::SpeakerBeam => self
                .speakers
                .binary_search_by(|s| s.as_str().cmp(spk))
                .map_err(|_| Error::InvalidArgument(format!("speaker `{spk}` not in the label set"))),
            _ => Ok(0),
        }
    }

    fn crop(&mut self, m: &LoadedMixture) -> (AudioSignal, [Vec<f64>; 2], Vec<f64>) {
        let seg = self.cfg.segment_samples();
        let len = m.mixture.len();
        let (start, n) = if len > seg {
            (self.rng.random_range(0..=len - seg), seg)
        } else {
            (0, len)
        };
        let mix = m.mixture.crop(start, n);
        let src = [m.sources[0][start..start + n].to_vec(), m.sources[1][start..start + n].to_vec()];
        let a_len = self.cfg.adapt_samples();
        let adapt = if a_len > 0 && m.adaptation.len() > a_len {
            let s = self.rng.random_range(0..=m.adaptation.len() - a_len);
            m.adaptation[s..s + a_len].to_vec()
        } else {
            m.adaptation.clone()
        };
        (mix, src, adapt)
    }

    /// One pass over `data` in shuffled minibatches.
    pub fn run_epoch(&mut self, data: &[LoadedMixture]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut snr_sum, mut ce_sum) = (0.0, 0.0, 0.0);
        let alpha = self.cfg.alpha;
        for batch in order.chunks(self.cfg.batch_size) {
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for &i in batch {
                let m = &data[i];
                let label = self.label(&m.record.target_spk)?;
                let (mix, src, adapt) = self.crop(m);
                let mut g = Graph::new();
                let p = self.model.params().bind(&mut g, true);
                let (loss, report) =
                    loss_for(&self.model, &mut g, &p, &mix, [&src[0], &src[1]], &adapt, label, alpha)?;
                if !report.total.is_finite() {
                    return Err(Error::NanLoss {
                        mixture_id: m.record.mixture_id.clone(),
                    });
                }
                g.backward(loss)?;
                let grads = self.model.params().grads(&g, &p);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            x.iter_mut().zip(y).for_each(|(u, v)| *u += v);
                        }
                    }
                }
                loss_sum += report.total;
                snr_sum += report.sisnr;
                ce_sum += report.ce;
            }
            let mut grads = acc.expect("nonempty batch");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= inv);
            clip_global_norm(&mut grads, self.cfg.clip_norm);
            self.adam.update(self.model.params_mut(), &grads, self.lr);
            if !self.model.params().all_finite() {
                return Err(Error::NanLoss {
                    mixture_id: data[batch[0]].record.mixture_id.clone(),
                });
            }
        }
        self.epoch += 1;
        let n = data.len() as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            loss: loss_sum / n,
            sisnr: snr_sum / n,
            ce: ce_sum / n,
            valid: None,
            lr: self.lr,
        })
    }

    /// Negative mean SiSNR on whole validation mixtures (lower is better).
    pub fn validation_metric(&self, data: &[LoadedMixture]) -> Result<f64> {
        let mut total = 0.0;
        for m in data {
            let s = match self.cfg.topology.kind {
                ModelKind::TasNet => {
                    let [a, b] = self.model.separate(&m.mixture)?;
                    let direct = sisnr(&m.sources[0], &a)? + sisnr(&m.sources[1], &b)?;
                    let swapped = sisnr(&m.sources[1], &a)? + sisnr(&m.sources[0], &b)?;
                    direct.max(swapped) / 2.0
                }
                _ => sisnr(m.target(), &self.model.extract(&m.mixture, &m.adaptation)?)?,
            };
            total += s;
        }
        Ok(-total / data.len() as f64)
    }

    /// Trains until `max_epochs`, validating every `eval_every` epochs.
    /// Without validation data the training loss picks the best epoch.
    pub fn fit(
        &mut self,
        train: &[LoadedMixture],
        valid: &[LoadedMixture],
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<()> {
        let want = self.cfg.topology.channels();
        for m in train.iter().chain(valid) {
            if m.mixture.num_channels() != want {
                return Err(Error::ChannelCount {
                    what: "training mixture",
                    expected: want,
                    got: m.mixture.num_channels(),
                });
            }
        }
        while self.epoch < self.cfg.max_epochs {
            let mut metrics = self.run_epoch(train)?;
            if metrics.epoch % self.cfg.eval_every == 0 || metrics.epoch == self.cfg.max_epochs {
                let v = if valid.is_empty() {
                    metrics.loss
                } else {
                    self.validation_metric(valid)?
                };
                metrics.valid = Some(v);
                if v < self.best_metric {
                    self.best_metric = v;
                    self.best_epoch = metrics.epoch;
                    self.best_params = self.model.params().clone();
                    self.bad_evals = 0;
                } else {
                    self.bad_evals += 1;
                    if self.cfg.lr_patience > 0 && self.bad_evals >= self.cfg.lr_patience {
                        self.lr *= self.cfg.lr_decay;
                        self.bad_evals = 0;
                    }
                }
            }
            on_epoch(&metrics);
            self.history.push(metrics);
        }
        Ok(())
    }

    fn base_meta(&self, ck: &mut Checkpoint) {
        ck.set_meta("mode", self.cfg.topology.kind);
        ck.set_meta("ipd", self.cfg.topology.ipd_mode);
        ck.set_meta("alpha", self.cfg.alpha);
        ck.set_meta("speakers", self.speakers.join(","));
    }

    /// Model with the best parameters seen so far.
    pub fn best_checkpoint(&self) -> Result<Checkpoint> {
        let mut model = self.model.clone();
        *model.params_mut() = self.best_params.clone();
        let mut ck = Checkpoint::new(model);
        self.base_meta(&mut ck);
        ck.set_meta("epoch", self.best_epoch);
        ck.set_meta("valid_metric", self.best_metric);
        Ok(ck)
    }

    /// Current parameters plus optimizer, schedule and RNG state.
    pub fn last_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone());
        self.base_meta(&mut ck);
        ck.set_meta("epoch", self.epoch);
        ck.set_meta("train.config", self.cfg.to_text().trim_end().replace('\n', ";"));
        ck.set_meta("train.step", self.adam.step);
        ck.set_meta("train.lr", self.lr);
        ck.set_meta("train.best_metric", self.best_metric);
        ck.set_meta("train.best_epoch", self.best_epoch);
        ck.set_meta("train.bad_evals", self.bad_evals);
        ck.set_meta("rng.seed", hex(&self.rng.get_seed()));
        ck.set_meta("rng.stream", self.rng.get_stream());
        ck.set_meta("rng.word_pos", self.rng.get_word_pos());
        ck.extra = self.adam.to_tensors(self.model.params());
        for (name, t) in self.best_params.iter() {
            ck.extra.push((format!("best.{name}"), t.clone()));
        }
        let hist: Vec<f64> = self
            .history
            .iter()
            .flat_map(|m| [m.epoch as f64, m.loss, m.sisnr, m.ce, m.valid.unwrap_or(f64::NAN), m.lr])
            .collect();
        if !hist.is_empty() {
            let rows = hist.len() / 6;
            ck.extra.push(("train.history".into(), Tensor::new(vec![rows, 6], hist).expect("rows x 6")));
        }
        ck
    }

    /// Rebuilds the state stored by [`Trainer::last_checkpoint`].
    /// `cfg.max_epochs` may exceed the original value to train longer.
    pub fn resume(ck: &Checkpoint, max_epochs: Option<usize>) -> Result<Self> {
        let need = |k: &str| {
            ck.meta(k)
                .ok_or_else(|| Error::Checkpoint(format!("not resumable: missing `{k}`")))
        };
        let parse_f = |k: &str| -> Result<f64> {
            need(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}`")))
        };
        let parse_u = |k: &str| -> Result<u64> {
            need(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}`")))
        };
        let mut cfg = TrainConfig::parse(&need("train.config")?.replace(';', "\n"))?;
        cfg.topology = ck.model.config().clone();
        if let Some(e) = max_epochs {
            cfg.max_epochs = e;
        }
        let speakers: Vec<String> = match need("speakers")? {
            "" => Vec::new(),
            s => s.split(',').map(str::to_string).collect(),
        };
        let model = ck.model.clone();
        let params = model.params();
        let moment = |prefix: &str| -> Result<Vec<Vec<f64>>> {
            params
                .iter()
                .map(|(name, _)| {
                    ck.extra(&format!("{prefix}{name}"))
                        .map(|t| t.data().to_vec())
                        .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}{name}")))
                })
                .collect()
        };
        let adam = Adam {
            step: parse_u("train.step")?,
            m: moment("adam.m.")?,
            v: moment("adam.v.")?,
        };
        let mut best_params = params.clone();
        for (name, _) in params.iter() {
            let t = ck
                .extra(&format!("best.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing best.{name}")))?;
            best_params.set(name, t.clone())?;
        }
        let seed: [u8; 32] = unhex(need("rng.seed")?)
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| Error::Checkpoint("bad rng.seed".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(parse_u("rng.stream")?);
        rng.set_word_pos(
            need("rng.word_pos")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad rng.word_pos".into()))?,
        );
        let history = match ck.extra("train.history") {
            Some(t) => t
                .data()
                .chunks(6)
                .map(|r| EpochMetrics {
                    epoch: r[0] as usize,
                    loss: r[1],
                    sisnr: r[2],
                    ce: r[3],
                    valid: (!r[4].is_nan()).then_some(r[4]),
                    lr: r[5],
                })
                .collect(),
            None => Vec::new(),
        };
        Ok(Trainer {
            cfg,
            model,
            adam,
            speakers,
            rng,
            epoch: parse_u("epoch")? as usize,
            lr: parse_f("train.lr")?,
            best_metric: parse_f("train.best_metric")?,
            best_epoch: parse_u("train.best_epoch")? as usize,
            best_params,
            bad_evals: parse_u("train.bad_evals")? as usize,
            history,
        })
    }

    pub fn outcome(&self) -> Result<TrainOutcome> {
        Ok(TrainOutcome {
            best: self.best_checkpoint()?,
            last: self.last_checkpoint(),
            history: self.history.clone(),
        })
    }
}

/// Trains on in-memory data.
pub fn train_on(
    train: &[LoadedMixture],
    valid: &[LoadedMixture],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training manifest"));
    }
    let mut t = Trainer::new(cfg.clone(), speaker_labels(train))?;
    t.fit(train, valid, on_epoch)?;
    t.outcome()
}

/// Loads a manifest and trains on it.
pub fn train(manifest: impl AsRef<Path>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = Manifest::read(manifest)?.load_all()?;
    train_on(&data, &[], cfg, |_| {})
}

pub fn write_metrics(path: impl AsRef<Path>, history: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_log(history)).map_err(|e| Error::io(path, e))
}

/// Evaluates a checkpoint on a manifest (oracle selection for the
/// separation baseline).
pub fn evaluate_checkpoint(ck: &Checkpoint, manifest: impl AsRef<Path>) -> Result<EvalReport> {
    let data = Manifest::read(manifest)?.load_all()?;
    evaluate(&ck.model, &data, Selector::Oracle)
}

/// Fraction of adaptation utterances whose speaker-ID logits pick the
/// right training speaker.
pub fn speaker_accuracy(model: &Model, data: &[LoadedMixture], speakers: &[String]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("accuracy set"));
    }
    let mut hits = 0;
    for m in data {
        let logits = model.speaker_logits(&model.embed(&m.adaptation)?)?;
        let best = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if speakers.get(best).is_some_and(|s| *s == m.record.target_spk) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
