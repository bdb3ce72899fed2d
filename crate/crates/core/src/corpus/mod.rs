//! Deterministic synthetic two-speaker corpus.
//!
//! Voices come in two fundamental-frequency families (`A` low, `B` high),
//! so results can be broken down by pair type (`AA`, `BB`, `AB`). Train
//! and test speakers are disjoint; a validation split reuses training
//! speakers with fresh mixtures.

mod manifest;
mod speaker;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use manifest::{
    manifest_to_string, parse_manifest, write_manifest, LoadedMixture, Manifest, MixtureRecord,
    MANIFEST_FIELDS,
};
use speaker::stream_seed;
pub use speaker::{
    synth_utterance, synth_utterance_quantized, Family, Formant, PairType, SyntheticSpeaker,
    MAX_DRIFT, UTTERANCE_RMS,
};

use crate::dsp::{mix_at_snr, quantize, snr_db, wav_write, AudioSignal};
use crate::error::{Error, Result};

pub const MIN_SPEAKERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Everything that determines a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub train_speakers: usize,
    pub test_speakers: usize,
    pub train_mixtures: usize,
    pub valid_mixtures: usize,
    pub test_mixtures: usize,
    /// 1, or 2 for a simulated microphone pair with per-source delays.
    pub channels: usize,
    pub seed: u64,
    pub utterances_per_speaker: usize,
    /// Utterance duration range in seconds.
    pub duration: (f64, f64),
    /// Largest inter-microphone delay in samples.
    pub max_delay: usize,
}

impl CorpusSpec {
    /// Splits `n_speakers` about 3:1 into train and test (at least one
    /// test speaker per family); `n_mixtures` training mixtures plus a
    /// quarter as many test and an eighth as many validation mixtures.
    pub fn new(n_speakers: usize, n_mixtures: usize, seed: u64) -> Result<Self> {
        if n_speakers < MIN_SPEAKERS {
            return Err(Error::InsufficientSpeakers {
                got: n_speakers,
                min: MIN_SPEAKERS,
            });
        }
        let test = (n_speakers / 4).max(2);
        Ok(CorpusSpec {
            train_speakers: n_speakers - test,
            test_speakers: test,
            train_mixtures: n_mixtures,
            valid_mixtures: n_mixtures / 8,
            test_mixtures: (n_mixtures / 4).max(1),
            channels: 1,
            seed,
            utterances_per_speaker: 12,
            duration: (1.0, 2.0),
            max_delay: 4,
        })
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_speakers < 2 || self.test_speakers < 2 {
            return Err(Error::InsufficientSpeakers {
                got: self.train_speakers.min(self.test_speakers),
                min: 2,
            });
        }
        if !(1..=2).contains(&self.channels) {
            return Err(Error::InvalidArgument(format!("channels={} (expected 1 or 2)", self.channels)));
        }
        if self.utterances_per_speaker < 2 {
            return Err(Error::InvalidArgument("need at least 2 utterances per speaker".into()));
        }
        let (lo, hi) = self.duration;
        if !(0.5 <= lo && lo <= hi && hi <= 4.0) {
            return Err(Error::InvalidArgument(format!("duration range {lo}..{hi} s")));
        }
        if self.channels == 2 && self.max_delay == 0 {
            return Err(Error::InvalidArgument("2-channel corpus needs max_delay >= 1".into()));
        }
        Ok(())
    }

    pub fn speakers(&self, split: Split) -> Vec<SyntheticSpeaker> {
        let (prefix, n) = match split {
            Split::Test => ("tst", self.test_speakers),
            _ => ("spk", self.train_speakers),
        };
        (0..n)
            .map(|i| {
                let family = if i % 2 == 0 { Family::A } else { Family::B };
                SyntheticSpeaker::generate(&format!("{prefix}{i:03}"), family, self.seed)
            })
            .collect()
    }

    fn mixture_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_mixtures,
            Split::Valid => self.valid_mixtures,
            Split::Test => self.test_mixtures,
        }
    }

    fn utterance_duration(&self, spk: &str, u: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[
            b"duration",
            &self.seed.to_le_bytes(),
            spk.as_bytes(),
            &(u as u64).to_le_bytes(),
        ]));
        let (lo, hi) = self.duration;
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    }
}

/// A generated record with its audio.
pub type GeneratedMixture = LoadedMixture;

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train_speakers: Vec<SyntheticSpeaker>,
    pub test_speakers: Vec<SyntheticSpeaker>,
    pub train: Vec<GeneratedMixture>,
    pub valid: Vec<GeneratedMixture>,
    pub test: Vec<GeneratedMixture>,
    /// Every utterance referenced by some record, keyed by its path.
    utterances: Vec<(PathBuf, Vec<f64>)>,
}

struct UtteranceCache<'a> {
    spec: &'a CorpusSpec,
    seen: HashMap<(String, usize), Vec<f64>>,
}

impl UtteranceCache<'_> {
    fn get(&mut self, spk: &SyntheticSpeaker, u: usize) -> Result<Vec<f64>> {
        let key = (spk.id.clone(), u);
        if let Some(v) = self.seen.get(&key) {
            return Ok(v.clone());
        }
        let dur = self.spec.utterance_duration(&spk.id, u);
        let seed = stream_seed(&[&self.spec.seed.to_le_bytes(), &(u as u64).to_le_bytes()]);
        let x = synth_utterance_quantized(spk, seed, dur)?.into_channels().swap_remove(0);
        self.seen.insert(key, x.clone());
        Ok(x)
    }
}

pub fn utterance_path(spk: &str, u: usize) -> PathBuf {
    PathBuf::from(format!("wav/utt/{spk}_{u:02}.wav"))
}

fn available_pair_types(speakers: &[SyntheticSpeaker]) -> Vec<PairType> {
    let count = |f| speakers.iter().filter(|s| s.family == f).count();
    let (a, b) = (count(Family::A), count(Family::B));
    PairType::ALL
        .into_iter()
        .filter(|t| match t {
            PairType::AA => a >= 2,
            PairType::BB => b >= 2,
            PairType::AB => a >= 1 && b >= 1,
        })
        .collect()
}

fn delayed(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if d < x.len() {
        out[d..].copy_from_slice(&x[..x.len() - d]);
    }
    out
}

fn generate_split(
    spec: &CorpusSpec,
    split: Split,
    speakers: &[SyntheticSpeaker],
    cache: &mut UtteranceCache,
) -> Result<Vec<GeneratedMixture>> {
    // Test mixtures depend only on the test speakers and seed, so the test
    // set is the same whatever the training-speaker count.
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[
        b"mixtures",
        &spec.seed.to_le_bytes(),
        split.name().as_bytes(),
        &(spec.channels as u64).to_le_bytes(),
    ]));
    let types = available_pair_types(speakers);
    let by_family = |f: Family| -> Vec<&SyntheticSpeaker> {
        speakers.iter().filter(|s| s.family == f).collect()
    };
    let (fam_a, fam_b) = (by_family(Family::A), by_family(Family::B));
    let n_utt = spec.utterances_per_speaker;
    let mut out = Vec::with_capacity(spec.mixture_count(split));
    for i in 0..spec.mixture_count(split) {
        // round-robin over pair types keeps the groups balanced
        let pair = types[i % types.len()];
        let (target, interferer) = match pair {
            PairType::AA | PairType::BB => {
                let pool = if pair == PairType::AA { &fam_a } else { &fam_b };
                let t = rng.random_range(0..pool.len());
                let mut j = rng.random_range(0..pool.len() - 1);
                if j >= t {
                    j += 1;
                }
                (pool[t], pool[j])
            }
            PairType::AB => {
                let a = fam_a[rng.random_range(0..fam_a.len())];
                let b = fam_b[rng.random_range(0..fam_b.len())];
                if rng.random::<bool>() {
                    (a, b)
                } else {
                    (b, a)
                }
            }
        };
        let u_mix = rng.random_range(0..n_utt);
        let mut u_adapt = rng.random_range(0..n_utt - 1);
        if u_adapt >= u_mix {
            u_adapt += 1;
        }
        let u_int = rng.random_range(0..n_utt);
        let snr = rng.random_range(-5.0..=5.0);
        let delays = if spec.channels == 2 {
            let d1 = rng.random_range(0..=spec.max_delay);
            let mut d2 = rng.random_range(0..spec.max_delay);
            if d2 >= d1 {
                d2 += 1;
            }
            [d1, d2]
        } else {
            [0, 0]
        };

        let sr = crate::dsp::DEFAULT_SAMPLE_RATE;
        let s1 = AudioSignal::mono(cache.get(target, u_mix)?, sr)?;
        let s2 = AudioSignal::mono(cache.get(interferer, u_int)?, sr)?;
        let mixed = mix_at_snr(&s1, &s2, snr, None)?;
        // Everything lives on the 16-bit grid so files and memory agree;
        // the mixture is rebuilt from the quantized references.
        let [r1, r2] = mixed.sources.map(|s| s.iter().map(|&v| quantize(v)).collect::<Vec<f64>>());
        let mut channels = vec![r1.iter().zip(&r2).map(|(a, b)| a + b).collect::<Vec<f64>>()];
        if spec.channels == 2 {
            let (a, b) = (delayed(&r1, delays[0]), delayed(&r2, delays[1]));
            channels.push(a.iter().zip(&b).map(|(x, y)| x + y).collect());
        }
        let id = format!("{}_{i:05}", split.name());
        let dir = format!("wav/{}", split.name());
        let record = MixtureRecord {
            mixture_id: id.clone(),
            mixture_path: format!("{dir}/mix/{id}.wav").into(),
            src1_path: format!("{dir}/s1/{id}.wav").into(),
            src2_path: format!("{dir}/s2/{id}.wav").into(),
            adapt_path: utterance_path(&target.id, u_adapt),
            target_spk: target.id.clone(),
            interferer_spk: interferer.id.clone(),
            snr_db: snr_db(&r1, &r2),
            pair_type: PairType::of(target.family, interferer.family),
            delays,
        };
        out.push(GeneratedMixture {
            record,
            mixture: AudioSignal::new(channels, sr)?,
            sources: [r1, r2],
            adaptation: cache.get(target, u_adapt)?,
        });
    }
    Ok(out)
}

/// Generates the whole corpus in memory. Pure in `spec`.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let train_speakers = spec.speakers(Split::Train);
    let test_speakers = spec.speakers(Split::Test);
    let mut cache = UtteranceCache {
        spec,
        seen: HashMap::new(),
    };
    let train = generate_split(spec, Split::Train, &train_speakers, &mut cache)?;
    let valid = generate_split(spec, Split::Valid, &train_speakers, &mut cache)?;
    let test = generate_split(spec, Split::Test, &test_speakers, &mut cache)?;
    let mut utterances: Vec<(PathBuf, Vec<f64>)> = train
        .iter()
        .chain(&valid)
        .chain(&test)
        .map(|m| (m.record.adapt_path.clone(), m.adaptation.clone()))
        .collect();
    utterances.sort_by(|a, b| a.0.cmp(&b.0));
    utterances.dedup_by(|a, b| a.0 == b.0);
    Ok(Corpus {
        spec: spec.clone(),
        train_speakers,
        test_speakers,
        train,
        valid,
        test,
        utterances,
    })
}

/// `generate` plus writing the tree under `dir`.
pub fn build_corpus(n_speakers: usize, n_mixtures: usize, split_seed: u64, dir: impl AsRef<Path>) -> Result<Corpus> {
    let corpus = generate(&CorpusSpec::new(n_speakers, n_mixtures, split_seed)?)?;
    corpus.write(dir)?;
    Ok(corpus)
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[GeneratedMixture] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn manifest_path(dir: impl AsRef<Path>, split: Split) -> PathBuf {
        dir.as_ref().join(format!("{}.tsv", split.name()))
    }

    /// Writes wavs and one manifest per split (`train.tsv`, `valid.tsv`,
    /// `test.tsv`). Empty splits get no manifest.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let sr = crate::dsp::DEFAULT_SAMPLE_RATE;
        let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mkdir(&dir.join("wav/utt"))?;
        for (path, x) in &self.utterances {
            wav_write(dir.join(path), &AudioSignal::mono(x.clone(), sr)?)?;
        }
        for split in Split::ALL {
            let items = self.split(split);
            if items.is_empty() {
                continue;
            }
            for sub in ["mix", "s1", "s2"] {
                mkdir(&dir.join(format!("wav/{}/{sub}", split.name())))?;
            }
            for m in items {
                wav_write(dir.join(&m.record.mixture_path), &m.mixture)?;
                wav_write(dir.join(&m.record.src1_path), &AudioSignal::mono(m.sources[0].clone(), sr)?)?;
                wav_write(dir.join(&m.record.src2_path), &AudioSignal::mono(m.sources[1].clone(), sr)?)?;
            }
            let records: Vec<MixtureRecord> = items.iter().map(|m| m.record.clone()).collect();
            write_manifest(Corpus::manifest_path(dir, split), &records)?;
        }
        Ok(())
    }

    /// Per-split speaker and pair-type counts.
    pub fn summary(&self) -> String {
        let mut s = String::from("split\tspk_A\tspk_B\tmixtures\tAA\tBB\tAB\n");
        for split in Split::ALL {
            let spk = if split == Split::Test {
                &self.test_speakers
            } else {
                &self.train_speakers
            };
            let fam = |f| spk.iter().filter(|s| s.family == f).count();
            let items = self.split(split);
            let pt = |t| items.iter().filter(|m| m.record.pair_type == t).count();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                split.name(),
                fam(Family::A),
                fam(Family::B),
                items.len(),
                pt(PairType::AA),
                pt(PairType::BB),
                pt(PairType::AB)
            );
        }
        s
    }
}
