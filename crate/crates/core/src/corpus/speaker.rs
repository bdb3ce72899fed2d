use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{quantize, rms, AudioSignal, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Utterances are normalized to this RMS level.
pub const UTTERANCE_RMS: f64 = 0.05;

/// Low (`A`) or high (`B`) fundamental-frequency family; stands in for
/// speaker gender.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    A,
    B,
}

impl Family {
    pub fn f0_range(self) -> (f64, f64) {
        match self {
            Family::A => (90.0, 140.0),
            Family::B => (170.0, 250.0),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::A => "A",
            Family::B => "B",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PairType {
    AA,
    BB,
    AB,
}

impl PairType {
    pub const ALL: [PairType; 3] = [PairType::AA, PairType::BB, PairType::AB];

    pub fn of(a: Family, b: Family) -> PairType {
        match (a, b) {
            (Family::A, Family::A) => PairType::AA,
            (Family::B, Family::B) => PairType::BB,
            _ => PairType::AB,
        }
    }

    pub fn same_family(self) -> bool {
        self != PairType::AB
    }

    pub fn name(self) -> &'static str {
        match self {
            PairType::AA => "AA",
            PairType::BB => "BB",
            PairType::AB => "AB",
        }
    }
}

impl fmt::Display for PairType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PairType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AA" => Ok(PairType::AA),
            "BB" => Ok(PairType::BB),
            "AB" | "BA" => Ok(PairType::AB),
            _ => Err(Error::InvalidArgument(format!("pair type `{s}`"))),
        }
    }
}

/// FNV-1a over the parts, for deriving independent RNG streams from names.
pub(crate) fn stream_seed(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Formant {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub gain: f64,
}

/// Parametric voice: a harmonic source shaped by three resonances.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpeaker {
    pub id: String,
    pub family: Family,
    pub f0_hz: f64,
    pub formants: [Formant; 3],
    pub vibrato_rate_hz: f64,
    pub vibrato_depth: f64,
    /// Spectral tilt exponent: harmonic `k` has base amplitude `k^-tilt`.
    pub tilt: f64,
}

impl SyntheticSpeaker {
    /// Profile drawn from `(corpus_seed, id)`; the same pair always gives
    /// the same voice.
    pub fn generate(id: &str, family: Family, corpus_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[
            b"speaker",
            &corpus_seed.to_le_bytes(),
            id.as_bytes(),
        ]));
        let (lo, hi) = family.f0_range();
        let f0_hz = rng.random_range(lo..hi);
        let mut formant = |lo: f64, hi: f64, gain: f64| Formant {
            center_hz: rng.random_range(lo..hi),
            bandwidth_hz: rng.random_range(80.0..250.0),
            gain,
        };
        let formants = [
            formant(300.0, 850.0, 1.0),
            formant(900.0, 2300.0, 0.7),
            formant(2400.0, 3500.0, 0.4),
        ];
        SyntheticSpeaker {
            id: id.to_string(),
            family,
            f0_hz,
            formants,
            vibrato_rate_hz: rng.random_range(4.0..7.0),
            vibrato_depth: rng.random_range(0.002..0.01),
            tilt: rng.random_range(1.2..2.2),
        }
    }

    /// Largest fundamental the voice can reach (drift plus vibrato).
    pub fn max_f0(&self) -> f64 {
        self.f0_hz * (1.0 + MAX_DRIFT + self.vibrato_depth)
    }

    pub fn min_f0(&self) -> f64 {
        self.f0_hz * (1.0 - MAX_DRIFT - self.vibrato_depth)
    }

    fn harmonic_gain(&self, freq: f64, vowel: &[f64; 3]) -> f64 {
        let resonance: f64 = self
            .formants
            .iter()
            .zip(vowel)
            .map(|(f, shift)| {
                let d = (freq - f.center_hz * shift) / f.bandwidth_hz;
                f.gain / (1.0 + d * d)
            })
            .sum();
        1.0 + resonance
    }
}

/// Pitch drift bound within a voiced segment, as a fraction of f0.
pub const MAX_DRIFT: f64 = 0.03;
const HARMONIC_CEILING_HZ: f64 = 3800.0;

/// Synthesizes `duration_s` seconds (0.5 to 4) of speech-like audio:
/// 3 to 8 voiced segments separated by short pauses, RMS normalized to
/// [`UTTERANCE_RMS`]. Deterministic in `(speaker, seed)`.
pub fn synth_utterance(spk: &SyntheticSpeaker, seed: u64, duration_s: f64) -> Result<AudioSignal> {
    if !(0.5..=4.0).contains(&duration_s) {
        return Err(Error::InvalidArgument(format!(
            "utterance duration {duration_s} s outside [0.5, 4]"
        )));
    }
    let fs = DEFAULT_SAMPLE_RATE as f64;
    let total = (duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[
        b"utterance",
        spk.id.as_bytes(),
        &seed.to_le_bytes(),
    ]));
    let segments = rng.random_range(3..=8usize);
    let pauses: Vec<usize> = (0..segments + 1)
        .map(|_| (rng.random_range(0.02..0.08) * fs) as usize)
        .collect();
    let pause_total: usize = pauses.iter().sum();
    let voiced_total = total.saturating_sub(pause_total).max(segments);
    let weights: Vec<f64> = (0..segments).map(|_| rng.random_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();

    let mut out = vec![0.0; total];
    let mut pos = pauses[0];
    for (s, w) in weights.iter().enumerate() {
        let len = ((w / wsum) * voiced_total as f64) as usize;
        let end = (pos + len).min(total);
        let drift_start = rng.random_range(-MAX_DRIFT..MAX_DRIFT);
        let drift_end = rng.random_range(-MAX_DRIFT..MAX_DRIFT);
        let vowel = [
            rng.random_range(0.95..1.05),
            rng.random_range(0.95..1.05),
            rng.random_range(0.98..1.02),
        ];
        let vib_phase = rng.random_range(0.0..2.0 * PI);
        let harmonics = (HARMONIC_CEILING_HZ / spk.min_f0()) as usize;
        let offsets: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let gains: Vec<f64> = (1..=harmonics)
            .map(|k| (k as f64).powf(-spk.tilt) * spk.harmonic_gain(k as f64 * spk.f0_hz, &vowel))
            .collect();
        let seg_len = end.saturating_sub(pos);
        let ramp = ((0.02 * fs) as usize).min(seg_len / 2).max(1);
        let mut phase = 0.0;
        for n in pos..end {
            let i = n - pos;
            let frac = i as f64 / seg_len.max(1) as f64;
            let drift = drift_start + (drift_end - drift_start) * frac;
            let vib = spk.vibrato_depth * (2.0 * PI * spk.vibrato_rate_hz * n as f64 / fs + vib_phase).sin();
            let f0 = spk.f0_hz * (1.0 + drift + vib);
            phase += 2.0 * PI * f0 / fs;
            let env_edge = if i < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
            } else if seg_len - i <= ramp {
                0.5 - 0.5 * (PI * (seg_len - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let mut v = 0.0;
            for (k, (&g, &off)) in gains.iter().zip(&offsets).enumerate() {
                if (k + 1) as f64 * f0 >= HARMONIC_CEILING_HZ {
                    break;
                }
                v += g * ((k + 1) as f64 * phase + off).sin();
            }
            out[n] = v * env_edge;
        }
        pos = end + pauses[s + 1];
        if pos >= total {
            break;
        }
    }
    let level = rms(&out);
    let scale = UTTERANCE_RMS / level;
    out.iter_mut().for_each(|v| *v *= scale);
    AudioSignal::mono(out, DEFAULT_SAMPLE_RATE)
}

/// [`synth_utterance`] rounded to the 16-bit grid, i.e. exactly what a WAV
/// round trip returns.
pub fn synth_utterance_quantized(spk: &SyntheticSpeaker, seed: u64, duration_s: f64) -> Result<AudioSignal> {
    let x = synth_utterance(spk, seed, duration_s)?;
    AudioSignal::mono(x.channel(0).iter().map(|&v| quantize(v)).collect(), x.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalized() {
        let spk = SyntheticSpeaker::generate("spk001", Family::A, 7);
        assert_eq!(spk, SyntheticSpeaker::generate("spk001", Family::A, 7));
        let a = synth_utterance(&spk, 3, 1.2).unwrap();
        let b = synth_utterance(&spk, 3, 1.2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 9600);
        assert!((rms(a.channel(0)) - UTTERANCE_RMS).abs() < 1e-9);
        assert_ne!(a, synth_utterance(&spk, 4, 1.2).unwrap());
    }

    #[test]
    fn family_f0_ranges() {
        for i in 0..20 {
            let a = SyntheticSpeaker::generate(&format!("s{i}"), Family::A, 1);
            let b = SyntheticSpeaker::generate(&format!("s{i}"), Family::B, 1);
            assert!((90.0..=140.0).contains(&a.f0_hz));
            assert!((170.0..=250.0).contains(&b.f0_hz));
            assert!(a.max_f0() < b.min_f0());
        }
    }

    #[test]
    fn duration_bounds() {
        let spk = SyntheticSpeaker::generate("x", Family::B, 1);
        assert!(synth_utterance(&spk, 0, 0.4).is_err());
        assert!(synth_utterance(&spk, 0, 4.5).is_err());
    }
}
