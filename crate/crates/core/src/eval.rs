//! Projection SDR, ΔSDR and median reporting.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{StemPool, GAIN_RANGE};
use crate::dsp::Waveform;
use crate::latent::{iterative_separate, retrieve_nearest, LatentLibrary};
use crate::model::{LatentVec, Model};
use crate::{Error, Result};

pub const SDR_MIN: f64 = -40.0;
pub const SDR_MAX: f64 = 60.0;

/// `10·log10(‖s_t‖² / ‖ŝ − s_t‖²)` where `s_t` is the orthogonal projection
/// of the estimate onto the reference; clamped to `[−40, 60]` dB.
pub fn sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Data(format!(
            "sdr: reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    let ss: f64 = reference.samples.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Err(Error::Data("sdr: all-zero reference".into()));
    }
    let g = reference.samples.iter().zip(&estimate.samples).map(|(s, e)| s * e).sum::<f64>() / ss;
    let mut target = 0.0;
    let mut error = 0.0;
    for (s, e) in reference.samples.iter().zip(&estimate.samples) {
        let t = g * s;
        target += t * t;
        error += (e - t) * (e - t);
    }
    let db = if error == 0.0 {
        SDR_MAX
    } else if target == 0.0 {
        SDR_MIN
    } else {
        10.0 * (target / error).log10()
    };
    Ok(db.clamp(SDR_MIN, SDR_MAX))
}

/// `sdr(gt, est_ret) − sdr(gt, est_mean)`.
pub fn delta_sdr(gt: &Waveform, est_ret: &Waveform, est_mean: &Waveform) -> Result<f64> {
    Ok(sdr(gt, est_ret)? - sdr(gt, est_mean)?)
}

/// Median of the finite values; even counts average the two central ones.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// One held-out mixture with every class present.
#[derive(Debug, Clone)]
pub struct TestMixture {
    pub mix: Waveform,
    /// Scaled source of each class, in class order; they sum to `mix`.
    pub sources: Vec<Waveform>,
}

#[derive(Debug, Clone)]
pub struct TestSet {
    pub class_names: Vec<String>,
    pub items: Vec<TestMixture>,
}

impl TestSet {
    /// `n` mixtures of one random segment per class, each with a gain drawn
    /// from the training gain range. Silent segments are skipped.
    pub fn from_pool(pool: &StemPool, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("test set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            let mut sources = Vec::with_capacity(pool.num_classes());
            for c in &pool.classes {
                let audible: Vec<&Waveform> = c.segments.iter().filter(|s| !s.is_silent()).collect();
                if audible.is_empty() {
                    return Err(Error::Data(format!("class '{}' has only silent segments", c.name)));
                }
                let seg = audible[rng.random_range(0..audible.len())];
                sources.push(seg.scaled(rng.random_range(GAIN_RANGE.0..GAIN_RANGE.1)));
            }
            let mut mix = Waveform::silence(pool.segment_len, pool.sample_rate);
            for s in &sources {
                mix = mix.add(s);
            }
            items.push(TestMixture { mix, sources });
        }
        Ok(Self {
            class_names: pool.names(),
            items,
        })
    }
}

/// Class means and per-track means encoded from training stems.
#[derive(Debug, Clone)]
pub struct EvalLibrary {
    pub class_means: LatentLibrary,
    /// Labels `<class>/<track>`.
    pub tracks: LatentLibrary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    MeanVector,
    GroundTruthQuery,
    Retrieved,
    Iterative(usize),
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::MeanVector => f.write_str("mean"),
            EvalMode::GroundTruthQuery => f.write_str("gt"),
            EvalMode::Retrieved => f.write_str("retrieved"),
            EvalMode::Iterative(n) => write!(f, "iterative{n}"),
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "mean-vector" => Ok(EvalMode::MeanVector),
            "gt" | "ground-truth-query" => Ok(EvalMode::GroundTruthQuery),
            "retrieved" => Ok(EvalMode::Retrieved),
            "iterative" => Ok(EvalMode::Iterative(2)),
            other => match other.strip_prefix("iterative") {
                Some(n) => n
                    .parse()
                    .ok()
                    .filter(|&n: &usize| n >= 1)
                    .map(EvalMode::Iterative)
                    .ok_or_else(|| Error::Config(format!("bad mode '{other}'"))),
                None => Err(Error::Config(format!("unknown mode '{other}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    pub mixture: usize,
    pub class: String,
    pub sdr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub preset: String,
    pub checkpoint: String,
    pub classes: Vec<String>,
    /// Sorted by (mixture, class order).
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn sdrs(&self, class: &str) -> Vec<f64> {
        self.entries.iter().filter(|e| e.class == class).map(|e| e.sdr).collect()
    }

    pub fn medians(&self) -> Vec<(String, Option<f64>)> {
        self.classes.iter().map(|c| (c.clone(), median(&self.sdrs(c)))).collect()
    }

    /// Tab-separated `mixture  class  sdr_db` lines after a comment header.
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# mode={} preset={} checkpoint={}\nmixture\tclass\tsdr_db\n",
            self.mode, self.preset, self.checkpoint
        );
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{:.4}", e.mixture, e.class, e.sdr);
        }
        s
    }
}

/// Aligned block of median SDRs: one row per report, one column per class.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let label_w = reports
        .iter()
        .map(|r| r.mode.to_string().len() + 7)
        .max()
        .unwrap_or(0)
        .max("Method".len());
    let col_w = first.classes.iter().map(String::len).max().unwrap_or(0).max(8);
    let mut s = format!("Median SDR (dB), preset {}\n{:<label_w$}", first.preset, "Method");
    for c in &first.classes {
        let _ = write!(s, "  {c:>col_w$}");
    }
    s.push('\n');
    for r in reports {
        let _ = write!(s, "{:<label_w$}", format!("Ours ({})", r.mode));
        for (_, m) in r.medians() {
            match m {
                Some(v) => {
                    let _ = write!(s, "  {v:>col_w$.2}");
                }
                None => {
                    let _ = write!(s, "  {:>col_w$}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

fn mean_vector<'a>(lib: &'a EvalLibrary, class: &str) -> Result<&'a LatentVec> {
    lib.class_means.get(class)
}

/// Estimate for `class` in `item` under `mode`.
pub fn estimate(model: &Model, lib: &EvalLibrary, item: &TestMixture, class_idx: usize, class: &str, mode: EvalMode) -> Result<Waveform> {
    let gt_query = || model.encode_waveform(&item.sources[class_idx]).map(|d| LatentVec(d.mu));
    let z = match mode {
        EvalMode::MeanVector => mean_vector(lib, class)?.clone(),
        EvalMode::GroundTruthQuery => gt_query()?,
        EvalMode::Retrieved => {
            let prefix = format!("{class}/");
            let own = lib.tracks.filtered(|l| l.starts_with(&prefix));
            if own.is_empty() {
                return Err(Error::UnknownLabel(prefix));
            }
            retrieve_nearest(&gt_query()?, &own)?.1.clone()
        }
        EvalMode::Iterative(n) => {
            return Ok(iterative_separate(model, &item.mix, mean_vector(lib, class)?, n)?.audio);
        }
    };
    Ok(model.separate_waveform(&item.mix, &z)?.audio)
}

/// SDR of every (mixture, class) pair under `mode`.
pub fn evaluate(model: &Model, test: &TestSet, lib: &EvalLibrary, mode: EvalMode, checkpoint: &str) -> Result<EvalReport> {
    if test.items.is_empty() {
        return Err(Error::Empty("test set"));
    }
    for c in &test.class_names {
        lib.class_means.get(c)?;
    }
    let per_item: Vec<Result<Vec<EvalEntry>>> = test
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            test.class_names
                .iter()
                .enumerate()
                .map(|(ci, c)| {
                    let est = estimate(model, lib, item, ci, c, mode)?;
                    Ok(EvalEntry {
                        mixture: i,
                        class: c.clone(),
                        sdr: sdr(&item.sources[ci], &est)?,
                    })
                })
                .collect()
        })
        .collect();
    let mut entries = Vec::with_capacity(test.items.len() * test.class_names.len());
    for r in per_item {
        entries.extend(r?);
    }
    Ok(EvalReport {
        mode,
        preset: model.config.preset.to_string(),
        checkpoint: checkpoint.to_string(),
        classes: test.class_names.clone(),
        entries,
    })
}

/// For each class `c`, the fraction of mixtures where conditioning on the
/// mean vector of `c` gives strictly higher SDR against the `c` source than
/// conditioning on any other class mean.
pub fn class_argmax_rates(model: &Model, test: &TestSet, lib: &EvalLibrary) -> Result<Vec<f64>> {
    let k = test.class_names.len();
    let means = test
        .class_names
        .iter()
        .map(|c| lib.class_means.get(c).cloned())
        .collect::<Result<Vec<_>>>()?;
    let wins: Vec<Result<Vec<bool>>> = test
        .items
        .par_iter()
        .map(|item| {
            let ests = means
                .iter()
                .map(|z| model.separate_waveform(&item.mix, z).map(|s| s.audio))
                .collect::<Result<Vec<_>>>()?;
            (0..k)
                .map(|c| {
                    let own = sdr(&item.sources[c], &ests[c])?;
                    let mut best_other = f64::NEG_INFINITY;
                    for (o, e) in ests.iter().enumerate() {
                        if o != c {
                            best_other = best_other.max(sdr(&item.sources[c], e)?);
                        }
                    }
                    Ok(own > best_other)
                })
                .collect()
        })
        .collect();
    let mut counts = vec![0usize; k];
    for w in wins {
        for (c, won) in w?.into_iter().enumerate() {
            counts[c] += usize::from(won);
        }
    }
    Ok(counts.into_iter().map(|n| n as f64 / test.items.len() as f64).collect())
}
