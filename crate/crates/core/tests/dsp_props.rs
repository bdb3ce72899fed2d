use proptest::prelude::*;

use spkbeam::dsp::{
    decode_wav, encode_wav, ipd_features, istft, mix_at_snr, quantize, snr_db, stft, wav_read, wav_write,
    AudioSignal, IPD_GUARD,
};

fn signal(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn two_channel(a: Vec<f64>, b: Vec<f64>) -> AudioSignal {
    let n = a.len().min(b.len());
    AudioSignal::new(vec![a[..n].to_vec(), b[..n].to_vec()], 8000).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ipd_on_unit_circle_and_antisymmetric(a in signal(64..300), b in signal(64..300)) {
        let x = two_channel(a, b);
        let swapped = AudioSignal::new(vec![x.channel(1).to_vec(), x.channel(0).to_vec()], 8000).unwrap();
        let f = ipd_features(&stft(&x, 32, 16).unwrap()).unwrap();
        let g = ipd_features(&stft(&swapped, 32, 16).unwrap()).unwrap();
        let bins = 17;
        for (r, s) in f.iter().zip(&g) {
            for k in 0..bins {
                prop_assert!((r[k] * r[k] + r[bins + k] * r[bins + k] - 1.0).abs() < 1e-12);
                prop_assert!((r[k] - s[k]).abs() < 1e-12);
                prop_assert!((r[bins + k] + s[bins + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ipd_ignores_a_common_gain(a in signal(64..200), b in signal(64..200), gain in 1e-3f64..1e3) {
        let x = two_channel(a, b);
        let scaled = AudioSignal::new(
            x.channels().iter().map(|c| c.iter().map(|v| v * gain).collect()).collect(),
            8000,
        )
        .unwrap();
        let spec = stft(&x, 32, 16).unwrap();
        let f = ipd_features(&spec).unwrap();
        let g = ipd_features(&stft(&scaled, 32, 16).unwrap()).unwrap();
        for (t, (r, s)) in f.iter().zip(&g).enumerate() {
            for k in 0..17 {
                let guarded = spec.coeffs[1][t][k].norm() < 1e3 * IPD_GUARD;
                if !guarded {
                    prop_assert!((r[k] - s[k]).abs() < 1e-9 && (r[17 + k] - s[17 + k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn mix_hits_the_requested_snr(a in signal(32..200), b in signal(32..200), snr in -10.0f64..10.0,
                                  d1 in 0usize..5, d2 in 0usize..5) {
        let s1 = AudioSignal::mono(a, 8000).unwrap();
        let s2 = AudioSignal::mono(b, 8000).unwrap();
        let m = mix_at_snr(&s1, &s2, snr, Some([d1, d2])).unwrap();
        prop_assert!((snr_db(&m.sources[0], &m.sources[1]) - snr).abs() < 1e-9);
        prop_assert_eq!(m.mixture.num_channels(), 2);
        for (i, v) in m.mixture.channel(0).iter().enumerate() {
            prop_assert!((v - m.sources[0][i] - m.sources[1][i]).abs() < 1e-12);
        }
    }

    #[test]
    fn wav_round_trip_is_exact_on_the_grid(a in signal(1..400), stereo in any::<bool>()) {
        let a: Vec<f64> = a.into_iter().map(quantize).collect();
        let channels = if stereo { vec![a.clone(), a.iter().map(|v| quantize(-v * 0.5)).collect()] } else { vec![a] };
        let x = AudioSignal::new(channels, 8000).unwrap();
        let bytes = encode_wav(&x);
        prop_assert_eq!(decode_wav(&bytes).unwrap(), x.clone());
        prop_assert_eq!(encode_wav(&decode_wav(&bytes).unwrap()), bytes);
    }

    #[test]
    fn stft_inverts_on_covered_samples(a in signal(64..400)) {
        let x = AudioSignal::mono(a.clone(), 8000).unwrap();
        let y = istft(&stft(&x, 32, 16).unwrap(), 0);
        // the first and last half frames carry a single window tail
        for i in 16..y.len().saturating_sub(16) {
            prop_assert!((y[i] - a[i]).abs() < 1e-9, "sample {i}: {} vs {}", y[i], a[i]);
        }
    }
}

#[test]
fn wav_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.wav");
    let x = AudioSignal::new(vec![vec![0.5, -0.25, 0.0, 1.0 - 1.0 / 32768.0], vec![-1.0, 0.125, 0.75, 0.0]], 8000).unwrap();
    wav_write(&path, &x).unwrap();
    assert_eq!(wav_read(&path).unwrap(), x);
}
