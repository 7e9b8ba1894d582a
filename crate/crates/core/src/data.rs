//! Synthetic stems, stem-directory loading and the training mixture sampler.
//!
//! A mixture is `m = Σ_{i∈T} α_i β_i v_i + Σ_{j∈R} α_j β_j v_j = s_T + s_R`
//! with random groups `T`/`R`, gates `α ~ Bernoulli(0.5)` and gains
//! `β ~ U[0.25, 1.25]`. Segments are drawn independently per class, with no
//! attempt at musical alignment.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsp::{analyze, read_wav, MagSpec, PhaseSpec, Waveform};
use crate::model::ModelConfig;
use crate::{Error, Result};

pub const GAIN_RANGE: (f64, f64) = (0.25, 1.25);
pub const GATE_P: f64 = 0.5;
pub const PEAK: f64 = 0.5;

/// Spectral family of a synthetic class. Frequencies are in Hz and are
/// clipped below Nyquist at synthesis time.
#[derive(Debug, Clone, PartialEq)]
pub enum Recipe {
    /// Sequence of pitched notes with `harmonics` partials at amplitude 1/h.
    Harmonic {
        f0: (f64, f64),
        harmonics: usize,
        note_secs: (f64, f64),
        vibrato: f64,
    },
    /// Sparse noise bursts restricted to `band`, decaying exponentially.
    Transient {
        band: (f64, f64),
        gap_secs: (f64, f64),
        decay_secs: f64,
    },
    /// Low sine notes with a weak octave partial.
    LowTone { f0: (f64, f64), note_secs: (f64, f64) },
    /// Band-limited noise with a slow amplitude wobble.
    BandNoise { band: (f64, f64), wobble_hz: f64 },
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Recipe::Harmonic {
                f0,
                harmonics,
                note_secs,
                vibrato,
            } => write!(
                f,
                "harmonic f0={}-{} harmonics={harmonics} note={}-{} vibrato={vibrato}",
                f0.0, f0.1, note_secs.0, note_secs.1
            ),
            Recipe::Transient {
                band,
                gap_secs,
                decay_secs,
            } => write!(
                f,
                "transient band={}-{} gap={}-{} decay={decay_secs}",
                band.0, band.1, gap_secs.0, gap_secs.1
            ),
            Recipe::LowTone { f0, note_secs } => {
                write!(f, "lowtone f0={}-{} note={}-{}", f0.0, f0.1, note_secs.0, note_secs.1)
            }
            Recipe::BandNoise { band, wobble_hz } => {
                write!(f, "bandnoise band={}-{} wobble={wobble_hz}", band.0, band.1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassSource {
    Synthetic(Recipe),
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    /// 1-based class id.
    pub id: usize,
    pub name: String,
    pub source: ClassSource,
}

/// The four default classes (vocals/drums/bass/other roles), followed by
/// extra harmonic and noise variants when `k > 4`.
pub fn default_classes(k: usize) -> Result<Vec<ClassSpec>> {
    if k < 2 {
        return Err(Error::Data(format!("need at least 2 classes, got {k}")));
    }
    let base = [
        (
            "vocals",
            Recipe::Harmonic {
                f0: (150.0, 300.0),
                harmonics: 6,
                note_secs: (0.12, 0.35),
                vibrato: 0.01,
            },
        ),
        (
            "drums",
            Recipe::Transient {
                band: (1300.0, 1950.0),
                gap_secs: (0.06, 0.2),
                decay_secs: 0.03,
            },
        ),
        (
            "bass",
            Recipe::LowTone {
                f0: (40.0, 120.0),
                note_secs: (0.15, 0.45),
            },
        ),
        (
            "other",
            Recipe::BandNoise {
                band: (650.0, 1000.0),
                wobble_hz: 3.0,
            },
        ),
    ];
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let (name, recipe) = if i < base.len() {
            (base[i].0.to_string(), base[i].1.clone())
        } else {
            let j = (i - base.len()) as f64;
            if i % 2 == 0 {
                (
                    format!("lead{}", i + 1),
                    Recipe::Harmonic {
                        f0: (320.0 + 60.0 * j, 380.0 + 60.0 * j),
                        harmonics: 2,
                        note_secs: (0.2, 0.5),
                        vibrato: 0.0,
                    },
                )
            } else {
                (
                    format!("noise{}", i + 1),
                    Recipe::BandNoise {
                        band: (1050.0 + 40.0 * j, 1250.0 + 40.0 * j),
                        wobble_hz: 1.0,
                    },
                )
            }
        };
        out.push(ClassSpec {
            id: i + 1,
            name,
            source: ClassSource::Synthetic(recipe),
        });
    }
    Ok(out)
}

/// Zeroes every FFT bin outside `[lo, hi]` Hz.
fn band_limit(x: &mut [f64], sample_rate: u32, lo: f64, hi: f64) {
    let n = x.len();
    if n == 0 {
        return;
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = f64::from(sample_rate) / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * df;
        if f < lo || f > hi {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    for (v, c) in x.iter_mut().zip(&buf) {
        *v = c.re / n as f64;
    }
}

/// Attack/release envelope over a note of `len` samples.
fn note_env(i: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    if i < ramp {
        i as f64 / ramp as f64
    } else if i + ramp > len {
        (len - i) as f64 / ramp as f64
    } else {
        1.0
    }
}

fn secs(rng: &mut ChaCha8Rng, range: (f64, f64), sr: f64) -> usize {
    ((rng.random_range(range.0..=range.1)) * sr).round().max(1.0) as usize
}

/// Deterministic class-typical signal of `len` samples, peak-normalized to
/// 0.5 and rounded to 32-bit precision (so a WAV round trip is exact).
pub fn generate_stem(recipe: &Recipe, len: usize, sample_rate: u32, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = f64::from(sample_rate);
    let nyq = 0.45 * sr;
    let mut x = vec![0.0; len];
    match recipe {
        Recipe::Harmonic {
            f0,
            harmonics,
            note_secs,
            vibrato,
        } => {
            let mut pos = 0;
            while pos < len {
                let n = secs(&mut rng, *note_secs, sr).min(len - pos);
                let f = rng.random_range(f0.0..=f0.1);
                let amp = rng.random_range(0.6..=1.0);
                let vib_rate = rng.random_range(4.0..=6.0);
                let mut phase = 0.0;
                for i in 0..n {
                    let t = i as f64 / sr;
                    let fi = f * (1.0 + vibrato * (2.0 * PI * vib_rate * t).sin());
                    phase += 2.0 * PI * fi / sr;
                    let mut s = 0.0;
                    for h in 1..=*harmonics {
                        if fi * h as f64 >= nyq {
                            break;
                        }
                        s += (h as f64 * phase).sin() / h as f64;
                    }
                    x[pos + i] = amp * note_env(i, n, (0.01 * sr) as usize) * s;
                }
                pos += n;
            }
        }
        Recipe::Transient {
            band,
            gap_secs,
            decay_secs,
        } => {
            let mut noise: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..=1.0)).collect();
            band_limit(&mut noise, sample_rate, band.0, band.1.min(nyq));
            let mut env = vec![0.0; len];
            let mut pos = secs(&mut rng, (0.0, gap_secs.0), sr) - 1;
            while pos < len {
                let amp = rng.random_range(0.5..=1.0);
                for (i, e) in env[pos..].iter_mut().enumerate() {
                    let v = amp * (-(i as f64) / (decay_secs * sr)).exp();
                    if v < 1e-4 {
                        break;
                    }
                    *e = f64::max(*e, v);
                }
                pos += secs(&mut rng, *gap_secs, sr);
            }
            for ((v, n), e) in x.iter_mut().zip(&noise).zip(&env) {
                *v = n * e;
            }
        }
        Recipe::LowTone { f0, note_secs } => {
            let mut pos = 0;
            while pos < len {
                let n = secs(&mut rng, *note_secs, sr).min(len - pos);
                let f = rng.random_range(f0.0..=f0.1);
                let amp = rng.random_range(0.6..=1.0);
                let start_phase = rng.random_range(0.0..2.0 * PI);
                for i in 0..n {
                    let ph = start_phase + 2.0 * PI * f * i as f64 / sr;
                    let s = ph.sin() + 0.15 * (2.0 * ph).sin();
                    x[pos + i] = amp * note_env(i, n, (0.02 * sr) as usize) * s;
                }
                pos += n;
            }
        }
        Recipe::BandNoise { band, wobble_hz } => {
            let mut noise: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..=1.0)).collect();
            band_limit(&mut noise, sample_rate, band.0, band.1.min(nyq));
            let ph = rng.random_range(0.0..2.0 * PI);
            for (i, (v, n)) in x.iter_mut().zip(&noise).enumerate() {
                let m = 0.65 + 0.35 * (2.0 * PI * wobble_hz * i as f64 / sr + ph).sin();
                *v = n * m;
            }
        }
    }
    let peak = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        for v in &mut x {
            *v = f64::from((*v * PEAK / peak) as f32);
        }
    }
    Waveform::new(x, sample_rate)
}

/// Splits into non-overlapping `seg_len` pieces; the last one is
/// zero-padded.
pub fn segment(w: &Waveform, seg_len: usize) -> Vec<Waveform> {
    assert!(seg_len > 0, "segment length must be positive");
    w.samples
        .chunks(seg_len)
        .map(|c| {
            let mut s = c.to_vec();
            s.resize(seg_len, 0.0);
            Waveform::new(s, w.sample_rate)
        })
        .collect()
}

/// Seed of track `track` of class `class` under a dataset seed.
pub fn stem_seed(seed: u64, class: usize, track: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | track as u64);
    rng.random()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStems {
    pub name: String,
    /// Whole tracks, in load/generation order.
    pub tracks: Vec<Waveform>,
    /// All segments of all tracks, track-major.
    pub segments: Vec<Waveform>,
}

/// Stems per class, ready for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct StemPool {
    pub sample_rate: u32,
    pub segment_len: usize,
    pub classes: Vec<ClassStems>,
}

impl StemPool {
    /// Builds a pool from tracks per class, segmenting each track.
    pub fn from_tracks(sample_rate: u32, segment_len: usize, classes: Vec<(String, Vec<Waveform>)>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Data("empty stem pool".into()));
        }
        let mut out = Vec::with_capacity(classes.len());
        for (name, tracks) in classes {
            let segments: Vec<Waveform> = tracks.iter().flat_map(|t| segment(t, segment_len)).collect();
            if segments.is_empty() {
                return Err(Error::Data(format!("class '{name}' has no audio")));
            }
            if let Some(t) = tracks.iter().find(|t| t.sample_rate != sample_rate) {
                return Err(Error::Data(format!(
                    "class '{name}': sample rate {} differs from {sample_rate}",
                    t.sample_rate
                )));
            }
            out.push(ClassStems { name, tracks, segments });
        }
        Ok(Self {
            sample_rate,
            segment_len,
            classes: out,
        })
    }

    /// Synthesizes `tracks` tracks of `track_len` samples for each class.
    pub fn synthetic(
        classes: &[ClassSpec],
        tracks: usize,
        track_len: usize,
        sample_rate: u32,
        segment_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if track_len < segment_len {
            return Err(Error::Data("track shorter than one segment".into()));
        }
        let mut per_class = Vec::with_capacity(classes.len());
        for c in classes {
            let ClassSource::Synthetic(recipe) = &c.source else {
                return Err(Error::Data(format!("class '{}' is not synthetic", c.name)));
            };
            let ws = (0..tracks)
                .map(|t| generate_stem(recipe, track_len, sample_rate, stem_seed(seed, c.id, t)))
                .collect();
            per_class.push((c.name.clone(), ws));
        }
        Self::from_tracks(sample_rate, segment_len, per_class)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Loads `<root>/<class>/<track>.wav`, classes and tracks in lexicographic
/// order.
pub fn load_stem_dir(root: &Path, sample_rate: u32, segment_len: usize) -> Result<StemPool> {
    let mut classes = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut tracks = Vec::new();
        for f in sorted_entries(&dir)? {
            if f.extension().and_then(|e| e.to_str()) == Some("wav") {
                tracks.push(read_wav(&f, sample_rate).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?);
            }
        }
        if tracks.is_empty() {
            return Err(Error::Data(format!("class directory '{name}' has no WAV files")));
        }
        classes.push((name, tracks));
    }
    if classes.is_empty() {
        return Err(Error::Data(format!("{}: no class directories", root.display())));
    }
    StemPool::from_tracks(sample_rate, segment_len, classes)
}

/// Waveforms and random choices behind one training example.
#[derive(Debug, Clone)]
pub struct MixtureDraw {
    pub mix: Waveform,
    pub target: Waveform,
    pub rest: Waveform,
    /// Per class: member of the target group `T` (else of `R`).
    pub in_target: Vec<bool>,
    /// Final gates.
    pub alpha: Vec<bool>,
    /// Gates as first drawn, before any silent-target redraw.
    pub alpha_first: Vec<bool>,
    pub beta: Vec<f64>,
    /// Segment index used per class.
    pub segments: Vec<usize>,
}

/// One training example: the draw plus cropped network-shaped spectra.
#[derive(Debug, Clone)]
pub struct MixtureSample {
    pub draw: MixtureDraw,
    pub mix_mag: MagSpec,
    pub mix_phase: PhaseSpec,
    pub target_mag: MagSpec,
}

/// `(s_T, s_R)` from per-class stems, memberships, gates and gains.
pub fn mix_groups(stems: &[&Waveform], in_target: &[bool], alpha: &[bool], beta: &[f64]) -> (Waveform, Waveform) {
    let len = stems[0].len();
    let sr = stems[0].sample_rate;
    let mut t = vec![0.0; len];
    let mut r = vec![0.0; len];
    for (i, s) in stems.iter().enumerate() {
        if !alpha[i] {
            continue;
        }
        let acc = if in_target[i] { &mut t } else { &mut r };
        for (a, v) in acc.iter_mut().zip(&s.samples) {
            *a += beta[i] * v;
        }
    }
    (Waveform::new(t, sr), Waveform::new(r, sr))
}

/// Draws mixtures from a pool and transforms them for the network.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    pool: &'a StemPool,
    window: usize,
    frame_multiple: usize,
}

const MAX_REDRAWS: usize = 1000;

impl<'a> Sampler<'a> {
    pub fn new(pool: &'a StemPool, cfg: &ModelConfig) -> Result<Self> {
        if pool.segment_len != cfg.segment_samples || pool.sample_rate != cfg.sample_rate {
            return Err(Error::Data(format!(
                "pool has {} Hz / {}-sample segments, model expects {} Hz / {}",
                pool.sample_rate, pool.segment_len, cfg.sample_rate, cfg.segment_samples
            )));
        }
        Ok(Self {
            pool,
            window: cfg.window,
            frame_multiple: cfg.frame_multiple(),
        })
    }

    pub fn pool(&self) -> &StemPool {
        self.pool
    }

    /// Group split, gates, gains and segment choice, without any transform.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MixtureDraw> {
        let k = self.pool.num_classes();
        let size = rng.random_range(1..=k);
        let mut in_target = vec![false; k];
        for i in index::sample(rng, k, size) {
            in_target[i] = true;
        }
        let mut segments = Vec::with_capacity(k);
        let mut alpha = Vec::with_capacity(k);
        let mut beta = Vec::with_capacity(k);
        for c in &self.pool.classes {
            segments.push(rng.random_range(0..c.segments.len()));
            alpha.push(rng.random_bool(GATE_P));
            beta.push(rng.random_range(GAIN_RANGE.0..GAIN_RANGE.1));
        }
        let alpha_first = alpha.clone();
        let mut redraws = 0;
        loop {
            let stems: Vec<&Waveform> = self
                .pool
                .classes
                .iter()
                .zip(&segments)
                .map(|(c, &s)| &c.segments[s])
                .collect();
            let (target, rest) = mix_groups(&stems, &in_target, &alpha, &beta);
            if !target.is_silent() {
                let mix = target.add(&rest);
                return Ok(MixtureDraw {
                    mix,
                    target,
                    rest,
                    in_target,
                    alpha,
                    alpha_first,
                    beta,
                    segments,
                });
            }
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(Error::Data("could not draw a non-silent target".into()));
            }
            for i in (0..k).filter(|&i| in_target[i]) {
                alpha[i] = rng.random_bool(GATE_P);
                // A silent segment would never pass; swap those out as well.
                if alpha[i] && stems[i].is_silent() {
                    segments[i] = rng.random_range(0..self.pool.classes[i].segments.len());
                }
            }
        }
    }

    /// [`Sampler::draw`] plus cropped magnitudes of `m` and `s_T`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MixtureSample> {
        let draw = self.draw(rng)?;
        let (mix_mag, mix_phase) = analyze(&draw.mix, self.window, self.frame_multiple)?;
        let (target_mag, _) = analyze(&draw.target, self.window, self.frame_multiple)?;
        Ok(MixtureSample {
            draw,
            mix_mag,
            mix_phase,
            target_mag,
        })
    }
}

/// `key=value` record of how a synthetic dataset was generated.
pub fn manifest(classes: &[ClassSpec], seed: u64, tracks: usize, track_len: usize, sample_rate: u32) -> String {
    let mut s = format!(
        "seed={seed}\nclasses={}\ntracks_per_class={tracks}\ntrack_samples={track_len}\nsample_rate={sample_rate}\n",
        classes.len()
    );
    for c in classes {
        let src = match &c.source {
            ClassSource::Synthetic(r) => r.to_string(),
            ClassSource::Directory(p) => format!("dir {}", p.display()),
        };
        s.push_str(&format!("class.{}.name={}\nclass.{}.recipe={src}\n", c.id, c.name, c.id));
    }
    s
}

/// Writes every track as `<root>/<class>/<track>.wav` plus `manifest.txt`.
pub fn write_pool(pool: &StemPool, root: &Path, manifest_text: &str) -> Result<()> {
    fs::create_dir_all(root)?;
    for c in &pool.classes {
        let dir = root.join(&c.name);
        fs::create_dir_all(&dir)?;
        for (i, t) in c.tracks.iter().enumerate() {
            crate::dsp::write_wav(&dir.join(format!("track{i:03}.wav")), t, crate::dsp::WavFormat::Float32)?;
        }
    }
    fs::write(root.join("manifest.txt"), manifest_text)?;
    Ok(())
}
