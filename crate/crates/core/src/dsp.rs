//! STFT analysis/synthesis and magnitude/phase handling.
//!
//! Frames are Hann-windowed with hop = window/4 and the signal is zero-padded
//! by window/2 on both sides before framing, so every original sample is
//! covered by four frames. Synthesis is weighted overlap-add normalized by
//! the summed squared window, which is constant (3/2) at 75% overlap.
//!
//! The networks see a cropped magnitude: the Nyquist bin is dropped and the
//! frame count is cut to a power-of-two multiple (see [`NetShape`]).
//! Reconstruction puts zeros back in the cropped positions.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("signal of {len} samples is shorter than one window ({window})")]
    SignalTooShort { len: usize, window: usize },
    #[error("window length {0} must be a positive multiple of 4")]
    BadWindow(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("inconsistent spectrogram layout: {0}")]
    Layout(String),
    #[error("sample rate {found} Hz does not match the configured {expected} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },
    #[error("expected mono audio, found {0} channels")]
    NotMono(u16),
    #[error("unsupported WAV encoding: {0}")]
    Unsupported(String),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono time-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn is_silent(&self) -> bool {
        self.samples.iter().all(|&v| v == 0.0)
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform::new(self.samples.iter().map(|v| v * gain).collect(), self.sample_rate)
    }

    /// Sample-wise sum; the shorter signal is treated as zero-padded.
    pub fn add(&self, other: &Waveform) -> Waveform {
        let n = self.len().max(other.len());
        let samples = (0..n)
            .map(|i| self.samples.get(i).copied().unwrap_or(0.0) + other.samples.get(i).copied().unwrap_or(0.0))
            .collect();
        Waveform::new(samples, self.sample_rate)
    }

    /// Copy of `len` samples starting at `start`, zero-padded past the end.
    pub fn window(&self, start: usize, len: usize) -> Waveform {
        let samples = (start..start + len).map(|i| self.samples.get(i).copied().unwrap_or(0.0)).collect();
        Waveform::new(samples, self.sample_rate)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.samples.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(DspError::NonFinite(i)),
            None => Ok(()),
        }
    }
}

/// Frame parameters shared by a spectrogram and everything derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecLayout {
    pub window: usize,
    pub hop: usize,
    /// `window / 2 + 1`.
    pub n_bins: usize,
    pub n_frames: usize,
    pub signal_len: usize,
    pub sample_rate: u32,
}

impl SpecLayout {
    pub fn for_signal(len: usize, window: usize, sample_rate: u32) -> Result<Self> {
        if window == 0 || !window.is_multiple_of(4) {
            return Err(DspError::BadWindow(window));
        }
        if len < window {
            return Err(DspError::SignalTooShort { len, window });
        }
        let hop = window / 4;
        Ok(Self {
            window,
            hop,
            n_bins: window / 2 + 1,
            n_frames: 1 + len / hop,
            signal_len: len,
            sample_rate,
        })
    }
}

/// Complex STFT, stored bin-major: entry `(k, t)` is at `k * n_frames + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub layout: SpecLayout,
    pub bins: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(layout: SpecLayout) -> Self {
        Self {
            layout,
            bins: vec![Complex64::new(0.0, 0.0); layout.n_bins * layout.n_frames],
        }
    }

    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.bins[bin * self.layout.n_frames + frame]
    }

    pub fn scaled(&self, gain: f64) -> Spectrogram {
        Spectrogram {
            layout: self.layout,
            bins: self.bins.iter().map(|c| c * gain).collect(),
        }
    }

    /// Frame energy with one-sided bins weighted to account for the
    /// mirrored half of the spectrum.
    pub fn energy(&self) -> f64 {
        let l = self.layout;
        let mut e = 0.0;
        for k in 0..l.n_bins {
            let w = if k == 0 || k == l.n_bins - 1 { 1.0 } else { 2.0 };
            for t in 0..l.n_frames {
                e += w * self.at(k, t).norm_sqr();
            }
        }
        e / l.window as f64
    }
}

/// Real-valued time–frequency array (magnitude or phase), bin-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TfArray {
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
    /// Layout of the full spectrogram this array was taken from.
    pub layout: SpecLayout,
}

pub type MagSpec = TfArray;
pub type PhaseSpec = TfArray;

impl TfArray {
    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.bins, self.frames)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<TfArray> {
        if values.len() != self.values.len() {
            return Err(DspError::ShapeMismatch((values.len(), 1), (self.values.len(), 1)));
        }
        Ok(TfArray { values, ..self.clone() })
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Short-time Fourier transform with hop = window/4.
pub fn stft(w: &Waveform, window: usize) -> Result<Spectrogram> {
    w.check_finite()?;
    let layout = SpecLayout::for_signal(w.len(), window, w.sample_rate)?;
    let win = hann(window);
    let half = window / 2;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window);
    let mut spec = Spectrogram::zeros(layout);
    let mut buf = vec![Complex64::new(0.0, 0.0); window];
    for t in 0..layout.n_frames {
        let start = (t * layout.hop) as isize - half as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            let s = if idx >= 0 && (idx as usize) < w.len() {
                w.samples[idx as usize]
            } else {
                0.0
            };
            *b = Complex64::new(s * win[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..layout.n_bins {
            spec.bins[k * layout.n_frames + t] = buf[k];
        }
    }
    Ok(spec)
}

/// Inverse of [`stft`] by window-weighted overlap-add.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let l = s.layout;
    if l.window == 0 || !l.window.is_multiple_of(4) || l.hop != l.window / 4 || l.n_bins != l.window / 2 + 1 {
        return Err(DspError::Layout(format!("{l:?}")));
    }
    if s.bins.len() != l.n_bins * l.n_frames || l.n_frames != 1 + l.signal_len / l.hop {
        return Err(DspError::Layout(format!("{} bins for {l:?}", s.bins.len())));
    }
    let n = l.window;
    let half = n / 2;
    let win = hann(n);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let padded = l.signal_len + n;
    let mut acc = vec![0.0; padded];
    let mut norm = vec![0.0; padded];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..l.n_frames {
        for k in 0..l.n_bins {
            buf[k] = s.at(k, t);
        }
        buf[0].im = 0.0;
        buf[half].im = 0.0;
        for k in 1..half {
            buf[n - k] = buf[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * l.hop;
        for i in 0..n {
            acc[start + i] += buf[i].re / n as f64 * win[i];
            norm[start + i] += win[i] * win[i];
        }
    }
    let samples = (0..l.signal_len)
        .map(|i| {
            let j = i + half;
            if norm[j] > 1e-10 {
                acc[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform::new(samples, l.sample_rate))
}

/// Polar decomposition; phases lie in (−π, π].
pub fn mag_phase(s: &Spectrogram) -> (MagSpec, PhaseSpec) {
    let l = s.layout;
    let mag = s.bins.iter().map(|c| c.norm()).collect();
    let phase = s
        .bins
        .iter()
        .map(|c| {
            let p = c.im.atan2(c.re);
            if p <= -PI {
                PI
            } else {
                p
            }
        })
        .collect();
    let wrap = |values| TfArray {
        bins: l.n_bins,
        frames: l.n_frames,
        values,
        layout: l,
    };
    (wrap(mag), wrap(phase))
}

/// Inverse of [`mag_phase`] on full-size arrays.
pub fn recombine(mag: &MagSpec, phase: &PhaseSpec) -> Result<Spectrogram> {
    if mag.dims() != phase.dims() {
        return Err(DspError::ShapeMismatch(mag.dims(), phase.dims()));
    }
    if mag.dims() != (mag.layout.n_bins, mag.layout.n_frames) {
        return Err(DspError::Layout("recombine needs uncropped arrays".into()));
    }
    let bins = mag
        .values
        .iter()
        .zip(&phase.values)
        .map(|(&m, &p)| Complex64::from_polar(m, p))
        .collect();
    Ok(Spectrogram {
        layout: mag.layout,
        bins,
    })
}

/// Network-facing extent of a magnitude spectrogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub bins: usize,
    pub frames: usize,
}

impl NetShape {
    /// Drops the Nyquist bin and cuts frames to the largest multiple of
    /// `frame_multiple` (at least one multiple; shorter inputs are padded).
    pub fn for_layout(layout: &SpecLayout, frame_multiple: usize) -> Self {
        let frames = (layout.n_frames / frame_multiple).max(1) * frame_multiple;
        Self {
            bins: layout.window / 2,
            frames,
        }
    }
}

/// Crops (or zero-pads) a full-size array to the network shape.
pub fn crop(full: &TfArray, shape: NetShape) -> TfArray {
    let mut values = vec![0.0; shape.bins * shape.frames];
    for k in 0..shape.bins.min(full.bins) {
        for t in 0..shape.frames.min(full.frames) {
            values[k * shape.frames + t] = full.at(k, t);
        }
    }
    TfArray {
        bins: shape.bins,
        frames: shape.frames,
        values,
        layout: full.layout,
    }
}

/// Re-inserts a cropped array into its full layout, zero elsewhere.
pub fn uncrop(net: &TfArray) -> TfArray {
    let l = net.layout;
    let mut values = vec![0.0; l.n_bins * l.n_frames];
    for k in 0..net.bins.min(l.n_bins) {
        for t in 0..net.frames.min(l.n_frames) {
            values[k * l.n_frames + t] = net.at(k, t);
        }
    }
    TfArray {
        bins: l.n_bins,
        frames: l.n_frames,
        values,
        layout: l,
    }
}

/// Waveform from an estimated (network-shaped) magnitude and the mixture
/// phase.
pub fn reconstruct(est_mag: &MagSpec, mixture_phase: &PhaseSpec) -> Result<Waveform> {
    if est_mag.dims() != mixture_phase.dims() {
        return Err(DspError::ShapeMismatch(est_mag.dims(), mixture_phase.dims()));
    }
    if est_mag.layout != mixture_phase.layout {
        return Err(DspError::Layout("magnitude and phase come from different signals".into()));
    }
    let full = recombine(&uncrop(est_mag), &uncrop(mixture_phase))?;
    istft(&full)
}

/// Cropped magnitude and phase of `w` in one call.
pub fn analyze(w: &Waveform, window: usize, frame_multiple: usize) -> Result<(MagSpec, PhaseSpec)> {
    let spec = stft(w, window)?;
    let shape = NetShape::for_layout(&spec.layout, frame_multiple);
    let (mag, phase) = mag_phase(&spec);
    Ok((crop(&mag, shape), crop(&phase, shape)))
}

/// Output sample encoding for [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Reads a mono WAV (16-bit PCM or 32-bit float) at `expected_rate`.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::NotMono(spec.channels));
    }
    if spec.sample_rate != expected_rate {
        return Err(DspError::SampleRateMismatch {
            expected: expected_rate,
            found: spec.sample_rate,
        });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => return Err(DspError::Unsupported(format!("{fmt:?} {bits}-bit"))),
    };
    let w = Waveform::new(samples, spec.sample_rate);
    w.check_finite()?;
    Ok(w)
}

pub fn write_wav(path: &Path, w: &Waveform, format: WavFormat) -> Result<()> {
    w.check_finite()?;
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, hound::SampleFormat::Int),
        WavFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        match format {
            WavFormat::Pcm16 => writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?,
            WavFormat::Float32 => writer.write_sample(s as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}
