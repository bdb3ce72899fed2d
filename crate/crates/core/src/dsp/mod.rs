//! Waveform I/O, STFT, spatial features and mixture synthesis.

mod ipd;
mod mix;
mod signal;
mod stft;
mod wav;

pub use ipd::{ipd_features, upsample_frames, upsample_indices, IPD_GUARD};
pub use mix::{mix_at_snr, snr_db, Mixture, PEAK_LEVEL};
pub use signal::{peak, power, rms, AudioSignal, DEFAULT_SAMPLE_RATE};
pub use stft::{hann, istft, num_frames, stft, Spectrogram};
pub use wav::{decode_wav, encode_wav, quantize, wav_read, wav_write};
