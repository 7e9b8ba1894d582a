use std::f64::consts::PI;

use qsep::dsp::{
    analyze, crop, hann, istft, mag_phase, read_wav, recombine, reconstruct, stft, write_wav, DspError, NetShape,
    WavFormat, Waveform,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Waveform {
    Waveform::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000)
}

fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let s: f64 = reference.iter().map(|v| v * v).sum();
    let e: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
    10.0 * (s / e.max(1e-300)).log10()
}

fn sine(freq: f64, n: usize, sr: u32) -> Waveform {
    Waveform::new((0..n).map(|i| (2.0 * PI * freq * i as f64 / f64::from(sr)).sin()).collect(), sr)
}

#[test]
fn zeros_give_zero_spectrogram_and_back() {
    let s = stft(&Waveform::silence(1024, 8000), 128).unwrap();
    assert!(s.bins.iter().all(|c| c.norm() == 0.0));
    let w = istft(&s).unwrap();
    assert!(w.samples.iter().all(|&v| v == 0.0));
}

#[test]
fn bin_aligned_sine_concentrates_in_main_lobe() {
    let (window, k, sr) = (256usize, 10usize, 8000u32);
    let w = sine(k as f64 * f64::from(sr) / window as f64, 4096, sr);
    let s = stft(&w, window).unwrap();
    let l = s.layout;
    // A frame fully inside the signal.
    let t = l.n_frames / 2;
    let total: f64 = (0..l.n_bins).map(|b| s.at(b, t).norm_sqr()).sum();
    let lobe: f64 = (k - 1..=k + 1).map(|b| s.at(b, t).norm_sqr()).sum();
    assert!(lobe / total > 0.9, "{}", lobe / total);
    let peak = (0..l.n_bins).max_by(|&a, &b| s.at(a, t).norm().total_cmp(&s.at(b, t).norm())).unwrap();
    assert_eq!(peak, k);
}

#[test]
fn stft_and_istft_are_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (a, b) = (noise(&mut rng, 1000), noise(&mut rng, 1000));
    let sa = stft(&a, 128).unwrap();
    let sb = stft(&b, 128).unwrap();
    let sab = stft(&a.add(&b), 128).unwrap();
    for i in 0..sab.bins.len() {
        assert!((sab.bins[i] - sa.bins[i] - sb.bins[i]).norm() < 1e-10);
    }
    let once = istft(&sa).unwrap();
    let twice = istft(&sa.scaled(2.0)).unwrap();
    for (x, y) in once.samples.iter().zip(&twice.samples) {
        assert!((2.0 * x - y).abs() < 1e-10);
    }
}

#[test]
fn round_trip_snr_over_random_signals() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..100 {
        let n = 3072 + 37 * i;
        let window = [128, 256, 1024][i % 3];
        let x = noise(&mut rng, n);
        let y = istft(&stft(&x, window).unwrap()).unwrap();
        assert_eq!(y.len(), n);
        let interior = window..n - window;
        let snr = snr_db(&x.samples[interior.clone()], &y.samples[interior]);
        assert!(snr >= 60.0, "signal {i}: {snr} dB");
    }
}

#[test]
fn squared_hann_sums_to_constant_at_75_percent_overlap() {
    for n in [128, 256, 1024] {
        let w = hann(n);
        let hop = n / 4;
        let mut acc = vec![0.0; 8 * n];
        for start in (0..acc.len() - n).step_by(hop) {
            for i in 0..n {
                acc[start + i] += w[i] * w[i];
            }
        }
        let interior = &acc[n..acc.len() - 2 * n];
        let c = interior[0];
        assert!((c - 1.5).abs() < 1e-12);
        for v in interior {
            assert!((v - c).abs() <= 1e-10 * c);
        }
    }
}

#[test]
fn spectrogram_energy_tracks_windowed_signal_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = noise(&mut rng, 2000);
    let window = 256;
    let s = stft(&x, window).unwrap();
    let w = hann(window);
    // Direct framing oracle, independent of the FFT.
    let mut direct = 0.0;
    for t in 0..s.layout.n_frames {
        let start = (t * s.layout.hop) as isize - (window / 2) as isize;
        for (i, wi) in w.iter().enumerate() {
            let idx = start + i as isize;
            if idx >= 0 && (idx as usize) < x.len() {
                direct += (x.samples[idx as usize] * wi).powi(2);
            }
        }
    }
    let rel = (s.energy() - direct).abs() / direct;
    assert!(rel < 1e-6, "{rel}");
}

#[test]
fn mag_phase_recombination_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let s = stft(&noise(&mut rng, 700), 64).unwrap();
    let (m, p) = mag_phase(&s);
    assert!(m.values.iter().all(|&v| v >= 0.0));
    assert!(p.values.iter().all(|&v| v > -PI && v <= PI));
    let back = recombine(&m, &p).unwrap();
    for (a, b) in back.bins.iter().zip(&s.bins) {
        assert!((a - b).norm() < 1e-10);
    }
}

#[test]
fn reconstruct_with_identity_zero_and_half_masks() {
    let sr = 8000;
    // Band-limited mixture: nothing near Nyquist, so the crop only removes
    // the final frame.
    let mix = sine(440.0, 4096, sr).add(&sine(1250.0, 4096, sr).scaled(0.3));
    let window = 256;
    let (mag, phase) = analyze(&mix, window, 16).unwrap();
    let same = reconstruct(&mag, &phase).unwrap();
    let interior = window..mix.len() - 2 * window;
    let snr = snr_db(&mix.samples[interior.clone()], &same.samples[interior.clone()]);
    assert!(snr >= 60.0, "{snr}");

    let silent = reconstruct(&mag.with_values(vec![0.0; mag.values.len()]).unwrap(), &phase).unwrap();
    assert!(silent.samples.iter().all(|&v| v == 0.0));

    let tone = sine(500.0, 4096, sr);
    let (tm, tp) = analyze(&tone, window, 16).unwrap();
    let half = tm.with_values(tm.values.iter().map(|v| v * 0.5).collect()).unwrap();
    let out = reconstruct(&half, &tp).unwrap();
    let target: Vec<f64> = tone.samples.iter().map(|v| v * 0.5).collect();
    assert!(snr_db(&target[interior.clone()], &out.samples[interior]) >= 60.0);

    let (other, _) = analyze(&sine(500.0, 4100, sr), window, 16).unwrap();
    assert!(matches!(reconstruct(&other, &phase), Err(DspError::Layout(_) | DspError::ShapeMismatch(..))));
    let small = crop(&tm, NetShape { bins: 8, frames: 16 });
    assert!(matches!(reconstruct(&small, &tp), Err(DspError::ShapeMismatch(..))));
}

#[test]
fn wav_round_trips_and_rejects_wrong_rate() {
    let dir = tempfile::tempdir().unwrap();
    let w = Waveform::new(vec![0.0, 0.25, -0.5, 0.999, -1.0], 8000);
    let fpath = dir.path().join("f.wav");
    write_wav(&fpath, &w, WavFormat::Float32).unwrap();
    let back = read_wav(&fpath, 8000).unwrap();
    for (a, b) in back.samples.iter().zip(&w.samples) {
        assert_eq!(*a, f64::from(*b as f32));
    }
    let ipath = dir.path().join("i.wav");
    write_wav(&ipath, &w, WavFormat::Pcm16).unwrap();
    let back = read_wav(&ipath, 8000).unwrap();
    for (a, b) in back.samples.iter().zip(&w.samples) {
        assert!((a - b).abs() < 1.0 / 16384.0);
    }
    assert!(matches!(
        read_wav(&ipath, 22050),
        Err(DspError::SampleRateMismatch {
            expected: 22050,
            found: 8000
        })
    ));
    assert!(read_wav(&dir.path().join("missing.wav"), 8000).is_err());
}
