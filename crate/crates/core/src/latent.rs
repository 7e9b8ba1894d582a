//! Latent-space utilities: interpolation, mean vectors, retrieval and
//! iterative re-encoding.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::StemPool;
use crate::dsp::Waveform;
use crate::model::{LatentVec, Model};
use crate::{Error, Result};

/// Angles closer than this to 0 or π fall back to linear interpolation.
pub const SLERP_EPS: f64 = 1e-6;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(a: &LatentVec, b: &LatentVec) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::LatentDim {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    if a.norm() == 0.0 || b.norm() == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(())
}

/// Angle between two nonzero vectors, from the parallel and orthogonal
/// components of the second relative to the first.
pub fn angle(a: &LatentVec, b: &LatentVec) -> Result<f64> {
    check_pair(a, b)?;
    let ua: Vec<f64> = a.0.iter().map(|v| v / a.norm()).collect();
    let ub: Vec<f64> = b.0.iter().map(|v| v / b.norm()).collect();
    let par = dot(&ua, &ub);
    let orth = ua
        .iter()
        .zip(&ub)
        .map(|(x, y)| (y - par * x).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(orth.atan2(par))
}

/// Spherical linear interpolation; `alpha = 0` gives `z1`, `1` gives `z2`.
pub fn slerp(z1: &LatentVec, z2: &LatentVec, alpha: f64) -> Result<LatentVec> {
    let theta = angle(z1, z2)?;
    let (w1, w2) = if theta < SLERP_EPS || (std::f64::consts::PI - theta).abs() < SLERP_EPS {
        (1.0 - alpha, alpha)
    } else {
        let s = theta.sin();
        (((1.0 - alpha) * theta).sin() / s, (alpha * theta).sin() / s)
    };
    Ok(LatentVec(z1.0.iter().zip(&z2.0).map(|(a, b)| w1 * a + w2 * b).collect()))
}

/// Arithmetic mean of latent vectors.
pub fn class_mean(latents: &[LatentVec]) -> Result<LatentVec> {
    let first = latents.first().ok_or(Error::Empty("class_mean"))?;
    let mut acc = vec![0.0; first.dim()];
    for z in latents {
        if z.dim() != acc.len() {
            return Err(Error::LatentDim {
                expected: acc.len(),
                found: z.dim(),
            });
        }
        for (a, v) in acc.iter_mut().zip(&z.0) {
            *a += v;
        }
    }
    let n = latents.len() as f64;
    Ok(LatentVec(acc.into_iter().map(|a| a / n).collect()))
}

/// `1 − cos(z1, z2)`, in `[0, 2]`.
pub fn cosine_distance(z1: &LatentVec, z2: &LatentVec) -> Result<f64> {
    check_pair(z1, z2)?;
    let c = dot(&z1.0, &z2.0) / (z1.norm() * z2.norm());
    Ok((1.0 - c).clamp(0.0, 2.0))
}

/// `CD(z_test, z_mean) − CD(z_test, z_ret)`.
pub fn delta_cd(z_test: &LatentVec, z_mean: &LatentVec, z_ret: &LatentVec) -> Result<f64> {
    Ok(cosine_distance(z_test, z_mean)? - cosine_distance(z_test, z_ret)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibraryEntry {
    pub label: String,
    pub z: LatentVec,
    /// Number of encodings averaged into `z`.
    pub count: usize,
}

/// Labelled latent vectors (class means or per-track means).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentLibrary {
    entries: Vec<LibraryEntry>,
}

impl LatentLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, label: impl Into<String>, z: LatentVec, count: usize) -> Result<()> {
        let label = label.into();
        if self.entries.iter().any(|e| e.label == label) {
            return Err(Error::Data(format!("duplicate library label '{label}'")));
        }
        if !z.is_finite() || count == 0 {
            return Err(Error::Data(format!("library entry '{label}' is non-finite or empty")));
        }
        if let Some(e) = self.entries.first() {
            if e.z.dim() != z.dim() {
                return Err(Error::LatentDim {
                    expected: e.z.dim(),
                    found: z.dim(),
                });
            }
        }
        self.entries.push(LibraryEntry { label, z, count });
        Ok(())
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: &str) -> Result<&LatentVec> {
        self.entries
            .iter()
            .find(|e| e.label == label)
            .map(|e| &e.z)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// Entries whose label satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> LatentLibrary {
        Self {
            entries: self.entries.iter().filter(|e| keep(&e.label)).cloned().collect(),
        }
    }
}

/// Entry with the smallest cosine distance to `query`; ties go to the
/// lexicographically smallest label.
pub fn retrieve_nearest<'a>(query: &LatentVec, library: &'a LatentLibrary) -> Result<(&'a str, &'a LatentVec)> {
    let mut best: Option<(f64, &LibraryEntry)> = None;
    for e in library.entries() {
        let d = cosine_distance(query, &e.z)?;
        let better = match best {
            None => true,
            Some((bd, be)) => d < bd || (d == bd && e.label < be.label),
        };
        if better {
            best = Some((d, e));
        }
    }
    best.map(|(_, e)| (e.label.as_str(), &e.z))
        .ok_or(Error::Empty("retrieve_nearest library"))
}

/// μ encodings of every segment of every track, grouped per class.
#[derive(Debug, Clone)]
pub struct PoolEncodings {
    /// `[class][track][segment]`.
    pub classes: Vec<(String, Vec<Vec<LatentVec>>)>,
}

impl PoolEncodings {
    pub fn compute(model: &Model, pool: &StemPool) -> Result<Self> {
        let seg = pool.segment_len;
        let mut classes = Vec::with_capacity(pool.num_classes());
        for c in &pool.classes {
            let mut tracks = Vec::with_capacity(c.tracks.len());
            for t in &c.tracks {
                let encs = crate::data::segment(t, seg)
                    .iter()
                    .map(|s| model.encode_waveform(s).map(|d| LatentVec(d.mu)))
                    .collect::<Result<Vec<_>>>()?;
                tracks.push(encs);
            }
            classes.push((c.name.clone(), tracks));
        }
        Ok(Self { classes })
    }

    /// One mean vector per class, averaged over all its segments.
    pub fn class_means(&self) -> Result<LatentLibrary> {
        let mut lib = LatentLibrary::new();
        for (name, tracks) in &self.classes {
            let all: Vec<LatentVec> = tracks.iter().flatten().cloned().collect();
            lib.insert(name.clone(), class_mean(&all)?, all.len())?;
        }
        Ok(lib)
    }

    /// One mean vector per track, labelled `<class>/<track index>`.
    pub fn track_means(&self) -> Result<LatentLibrary> {
        let mut lib = LatentLibrary::new();
        for (name, tracks) in &self.classes {
            for (i, encs) in tracks.iter().enumerate() {
                lib.insert(track_label(name, i), class_mean(encs)?, encs.len())?;
            }
        }
        Ok(lib)
    }

    /// Every segment encoding with its class label (for export).
    pub fn labelled(&self) -> Vec<(String, LatentVec)> {
        self.classes
            .iter()
            .flat_map(|(name, tracks)| tracks.iter().flatten().map(move |z| (name.clone(), z.clone())))
            .collect()
    }
}

pub fn track_label(class: &str, track: usize) -> String {
    format!("{class}/{track:03}")
}

/// Result of [`iterative_separate`].
#[derive(Debug, Clone)]
pub struct IterativeResult {
    pub audio: Waveform,
    /// Conditioning vector of every completed round, starting with `z_init`.
    pub trace: Vec<LatentVec>,
    /// True when a silent estimate ended the iteration early.
    pub stopped_early: bool,
}

/// Separates with `z_init`, then repeatedly re-encodes the estimate (μ only,
/// averaged over segments) and separates again.
pub fn iterative_separate(model: &Model, mixture: &Waveform, z_init: &LatentVec, n_rounds: usize) -> Result<IterativeResult> {
    if n_rounds == 0 {
        return Err(Error::Config("iterative separation needs at least one round".into()));
    }
    let mut z = z_init.clone();
    let mut sep = model.separate_waveform(mixture, &z)?;
    let mut trace = vec![z.clone()];
    for _ in 1..n_rounds {
        if sep.est_mags.iter().all(|m| m.values.iter().all(|&v| v == 0.0)) {
            return Ok(IterativeResult {
                audio: sep.audio,
                trace,
                stopped_early: true,
            });
        }
        let encs = sep
            .est_mags
            .iter()
            .map(|m| model.encode(m).map(|d| LatentVec(d.mu)))
            .collect::<Result<Vec<_>>>()?;
        z = class_mean(&encs)?;
        sep = model.separate_waveform(mixture, &z)?;
        trace.push(z.clone());
    }
    Ok(IterativeResult {
        audio: sep.audio,
        trace,
        stopped_early: false,
    })
}

/// CSV text with header `label,z_0,…,z_{d−1}`. Values use Rust's shortest
/// round-trip float formatting.
pub fn latents_csv(rows: &[(String, LatentVec)], dim: usize) -> Result<String> {
    let mut s = String::from("label");
    for i in 0..dim {
        let _ = write!(s, ",z_{i}");
    }
    s.push('\n');
    for (label, z) in rows {
        if z.dim() != dim {
            return Err(Error::LatentDim {
                expected: dim,
                found: z.dim(),
            });
        }
        if label.contains([',', '\n', '"']) {
            return Err(Error::Data(format!("label '{label}' contains a CSV delimiter")));
        }
        s.push_str(label);
        for v in &z.0 {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_latents(rows: &[(String, LatentVec)], dim: usize, path: &Path) -> Result<()> {
    std::fs::write(path, latents_csv(rows, dim)?)?;
    Ok(())
}

/// Parses [`latents_csv`] output.
pub fn parse_latents(text: &str) -> Result<Vec<(String, LatentVec)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Empty("latent CSV"))?;
    let dim = header.split(',').count() - 1;
    lines
        .map(|l| {
            let mut parts = l.split(',');
            let label = parts.next().unwrap_or_default().to_string();
            let z = parts
                .map(|v| v.parse::<f64>().map_err(|_| Error::Data(format!("bad value '{v}'"))))
                .collect::<Result<Vec<_>>>()?;
            if z.len() != dim {
                return Err(Error::LatentDim {
                    expected: dim,
                    found: z.len(),
                });
            }
            Ok((label, LatentVec(z)))
        })
        .collect()
}
