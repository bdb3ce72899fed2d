//! 16-bit PCM RIFF/WAVE files with one or two channels.

use std::fs;
use std::path::Path;

use super::signal::AudioSignal;
use crate::error::{Error, Result};

const PCM_FORMAT: u16 = 1;
const FULL_SCALE: f64 = 32768.0;

/// Nearest value on the 16-bit grid that [`wav_write`] stores.
pub fn quantize(v: f64) -> f64 {
    to_i16(v) as f64 / FULL_SCALE
}

fn to_i16(v: f64) -> i16 {
    (v.clamp(-1.0, 1.0) * FULL_SCALE)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioSignal> {
    if bytes.len() < 12 {
        return Err(Error::MalformedWav(format!(
            "file is {} bytes, shorter than the RIFF header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::MalformedWav("chunk id is not `RIFF`".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedWav("format is not `WAVE`".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u32)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::MalformedWav(format!(
                "chunk `{}` size {size} overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::MalformedWav(format!("fmt chunk size {size} < 16")));
                }
                let tag = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let block_align = u16_at(bytes, body + 12);
                let bits = u16_at(bytes, body + 14);
                if tag != PCM_FORMAT {
                    return Err(Error::UnsupportedWav(format!("audio_format {tag} (only PCM=1)")));
                }
                if bits != 16 {
                    return Err(Error::UnsupportedWav(format!("bits_per_sample {bits} (only 16)")));
                }
                if channels == 0 || channels > 2 {
                    return Err(Error::UnsupportedWav(format!("num_channels {channels} (1 or 2)")));
                }
                if rate == 0 {
                    return Err(Error::MalformedWav("sample_rate is 0".into()));
                }
                if block_align != channels * 2 {
                    return Err(Error::MalformedWav(format!(
                        "block_align {block_align} != num_channels * 2"
                    )));
                }
                fmt = Some((channels, rate));
            }
            b"data" => {
                let (channels, rate) = fmt.ok_or_else(|| {
                    Error::MalformedWav("data chunk precedes fmt chunk".into())
                })?;
                let nch = channels as usize;
                if size % (2 * nch) != 0 {
                    return Err(Error::MalformedWav(format!(
                        "data size {size} is not a whole number of frames"
                    )));
                }
                let frames = size / (2 * nch);
                let mut out = vec![Vec::with_capacity(frames); nch];
                for (k, pair) in bytes[body..body + size].chunks_exact(2).enumerate() {
                    let v = i16::from_le_bytes([pair[0], pair[1]]);
                    out[k % nch].push(v as f64 / FULL_SCALE);
                }
                return AudioSignal::new(out, rate);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(Error::MalformedWav(if fmt.is_none() {
        "missing fmt chunk".into()
    } else {
        "missing data chunk".into()
    }))
}

pub fn encode_wav(x: &AudioSignal) -> Vec<u8> {
    let nch = x.num_channels();
    let data_len = x.len() * nch * 2;
    let mut b = Vec::with_capacity(44 + data_len);
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    b.extend_from_slice(b"WAVE");
    b.extend_from_slice(b"fmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    b.extend_from_slice(&(nch as u16).to_le_bytes());
    b.extend_from_slice(&x.sample_rate().to_le_bytes());
    b.extend_from_slice(&(x.sample_rate() * nch as u32 * 2).to_le_bytes());
    b.extend_from_slice(&((nch * 2) as u16).to_le_bytes());
    b.extend_from_slice(&16u16.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&(data_len as u32).to_le_bytes());
    for n in 0..x.len() {
        for c in 0..nch {
            b.extend_from_slice(&to_i16(x.channel(c)[n]).to_le_bytes());
        }
    }
    b
}

pub fn wav_read(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|e| match e {
        Error::MalformedWav(m) => Error::MalformedWav(format!("{}: {m}", path.display())),
        Error::UnsupportedWav(m) => Error::UnsupportedWav(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes `x` as 16-bit PCM; samples are clipped to `[-1, 1]`.
pub fn wav_write(path: impl AsRef<Path>, x: &AudioSignal) -> Result<()> {
    let path = path.as_ref();
    if x.num_channels() > 2 {
        return Err(Error::UnsupportedWav(format!(
            "num_channels {} (1 or 2)",
            x.num_channels()
        )));
    }
    fs::write(path, encode_wav(x)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ramp.wav");
        let x = AudioSignal::mono(vec![0.0, 0.5, -0.5], 8000).unwrap();
        wav_write(&p, &x).unwrap();
        let y = wav_read(&p).unwrap();
        assert_eq!(y.sample_rate(), 8000);
        for (a, b) in x.channel(0).iter().zip(y.channel(0)) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn clips_out_of_range() {
        let x = AudioSignal::mono(vec![1.7, -3.0], 8000).unwrap();
        let y = decode_wav(&encode_wav(&x)).unwrap();
        assert_eq!(y.channel(0), &[32767.0 / 32768.0, -1.0]);
    }

    #[test]
    fn empty_file_is_malformed() {
        assert!(matches!(decode_wav(&[]), Err(Error::MalformedWav(_))));
    }

    #[test]
    fn hand_built_stereo() {
        // 2 frames x 2 channels = 8 payload bytes: L0=1, R0=-1, L1=16384, R1=-32768
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36u32 + 8).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes());
        b.extend_from_slice(&16000u32.to_le_bytes());
        b.extend_from_slice(&64000u32.to_le_bytes());
        b.extend_from_slice(&4u16.to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&8u32.to_le_bytes());
        for v in [1i16, -1, 16384, -32768] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let x = decode_wav(&b).unwrap();
        assert_eq!(x.num_channels(), 2);
        assert_eq!(x.sample_rate(), 16000);
        assert_eq!(x.channel(0), &[1.0 / 32768.0, 0.5]);
        assert_eq!(x.channel(1), &[-1.0 / 32768.0, -1.0]);
    }

    #[test]
    fn rejects_float_encoding() {
        let x = AudioSignal::mono(vec![0.0; 4], 8000).unwrap();
        let mut b = encode_wav(&x);
        b[20] = 3; // IEEE float tag
        let err = decode_wav(&b).unwrap_err();
        assert!(matches!(&err, Error::UnsupportedWav(m) if m.contains("audio_format")), "{err}");
        let mut b = encode_wav(&x);
        b[34] = 24;
        let err = decode_wav(&b).unwrap_err();
        assert!(err.to_string().contains("bits_per_sample"), "{err}");
    }

    #[test]
    fn quantize_matches_stored_value() {
        for v in [0.1234567, -0.9, 0.0, 0.99999] {
            let x = AudioSignal::mono(vec![v], 8000).unwrap();
            assert_eq!(decode_wav(&encode_wav(&x)).unwrap().channel(0)[0], quantize(v));
        }
    }
}
