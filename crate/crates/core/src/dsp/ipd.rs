//! Inter-microphone phase difference features and frame-rate matching.

use super::stft::Spectrogram;
use crate::error::{Error, Result};

/// Below this magnitude the second channel carries no usable phase and the
/// phase difference is taken as zero.
pub const IPD_GUARD: f64 = 1e-12;

/// One row per STFT frame: `[cos(phi_1..phi_F), sin(phi_1..phi_F)]` with
/// `phi = angle(Y1 / Y2)`.
pub fn ipd_features(spec: &Spectrogram) -> Result<Vec<Vec<f64>>> {
    if spec.num_channels() != 2 {
        return Err(Error::ChannelCount {
            what: "IPD features",
            expected: 2,
            got: spec.num_channels(),
        });
    }
    let bins = spec.num_bins();
    Ok(spec.coeffs[0]
        .iter()
        .zip(&spec.coeffs[1])
        .map(|(y1, y2)| {
            let mut row = vec![0.0; 2 * bins];
            for f in 0..bins {
                let phi = if y2[f].norm() < IPD_GUARD {
                    0.0
                } else {
                    (y1[f] * y2[f].conj()).arg()
                };
                row[f] = phi.cos();
                row[bins + f] = phi.sin();
            }
            row
        })
        .collect())
}

/// Nearest-neighbour source frame for each of `target` output frames.
pub fn upsample_indices(source: usize, target: usize) -> Vec<usize> {
    (0..target)
        .map(|k| ((k * source) / target).min(source - 1))
        .collect()
}

/// Repeats rows of a `[T_stft x D]` feature matrix to `target` rows.
pub fn upsample_frames(feat: &[Vec<f64>], target: usize) -> Result<Vec<Vec<f64>>> {
    if feat.is_empty() {
        return Err(Error::EmptyInput("upsample_frames"));
    }
    Ok(upsample_indices(feat.len(), target)
        .into_iter()
        .map(|i| feat[i].clone())
        .collect())
}
