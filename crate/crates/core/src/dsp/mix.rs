//! SNR-controlled two-source mixing with an optional two-microphone layout.

use super::signal::{peak, power, AudioSignal};
use crate::error::{Error, Result};

/// Mixtures are scaled so the largest magnitude among the mixture and both
/// references equals this value.
pub const PEAK_LEVEL: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct Mixture {
    /// One channel, or two when per-source delays were given.
    pub mixture: AudioSignal,
    /// Scaled sources as seen at the first microphone.
    pub sources: [Vec<f64>; 2],
    /// Amplitude factor applied to the second source before normalization.
    pub interferer_gain: f64,
    /// Peak normalization factor applied to everything.
    pub normalization: f64,
}

fn delayed(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if d < x.len() {
        out[d..].copy_from_slice(&x[..x.len() - d]);
    }
    out
}

/// `10 log10(P(a) / P(b))`.
pub fn snr_db(a: &[f64], b: &[f64]) -> f64 {
    10.0 * (power(a) / power(b)).log10()
}

/// Mixes the first channels of `s1` and `s2` so that `s1` sits `snr_db` dB
/// above the scaled `s2`. Both are cut to the shorter length.
///
/// With `delays = Some([d1, d2])` a second microphone is simulated: it
/// receives source `i` delayed by `d_i` samples relative to the first.
pub fn mix_at_snr(
    s1: &AudioSignal,
    s2: &AudioSignal,
    snr_db: f64,
    delays: Option<[usize; 2]>,
) -> Result<Mixture> {
    if s1.sample_rate() != s2.sample_rate() {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            s1.sample_rate(),
            s2.sample_rate()
        )));
    }
    let len = s1.len().min(s2.len());
    let a = &s1.channel(0)[..len];
    let b = &s2.channel(0)[..len];
    let (pa, pb) = (power(a), power(b));
    if pa == 0.0 {
        return Err(Error::SilentSource("source 1"));
    }
    if pb == 0.0 {
        return Err(Error::SilentSource("source 2"));
    }
    let gain = (pa / (pb * 10f64.powf(snr_db / 10.0))).sqrt();
    let b: Vec<f64> = b.iter().map(|v| v * gain).collect();
    let mut channels = vec![a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<f64>>()];
    if let Some([d1, d2]) = delays {
        let (a2, b2) = (delayed(a, d1), delayed(&b, d2));
        channels.push(a2.iter().zip(&b2).map(|(x, y)| x + y).collect());
    }
    let loudest = channels
        .iter()
        .map(|c| peak(c))
        .chain([peak(a), peak(&b)])
        .fold(0.0, f64::max);
    let norm = PEAK_LEVEL / loudest;
    let scale = |v: &[f64]| v.iter().map(|x| x * norm).collect::<Vec<f64>>();
    Ok(Mixture {
        mixture: AudioSignal::new(channels.iter().map(|c| scale(c)).collect(), s1.sample_rate())?,
        sources: [scale(a), scale(&b)],
        interferer_gain: gain,
        normalization: norm,
    })
}
