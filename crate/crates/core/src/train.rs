//! Conditional-VAE training with a latent regressor.
//!
//! Per example the step computes
//!
//! * `L_R`: mean absolute error between `mask ⊙ M` and `S_T`, with
//!   `z = μ + exp(logvar/2) ⊙ ε` from the query encoding of `S_T`;
//! * `L_KL`: `½ Σ (μ² + exp(logvar) − 1 − logvar)`;
//! * `L_latent`: mean absolute error between a fresh `z' ~ N(0, I)` and the
//!   μ head of `Q(S(M, z'))`;
//!
//! and minimizes `λ_R·L_R + λ_KL·L_KL + λ_latent·L_latent` with Adam.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::checkpoint::{self, Checkpoint};
use crate::data::{MixtureSample, Sampler, StemPool};
use crate::dsp::MagSpec;
use crate::model::{self, LatentDist, LatentVec, Model, ModelConfig, ParamSet, ParamVars};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::{Error, Result};

/// How the learning rate behaves past the decay boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayMode {
    /// Subtract `decay_step` every `decay_every` iterations.
    Subtract,
    /// Jump to `decay_step` and stay there.
    SetTo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    pub lambda_r: f64,
    pub lambda_kl: f64,
    pub lambda_latent: f64,
    pub lr0: f64,
    pub decay_start: u64,
    pub decay_every: u64,
    pub decay_step: f64,
    pub decay_mode: DecayMode,
    pub lr_floor: f64,
    pub batch: usize,
    /// Global-norm gradient clip; `None` disables it.
    pub clip_norm: Option<f64>,
    /// Reuse the cVAE mixture for the latent-regressor branch. When false the
    /// branch takes the mixture of the next example in the batch.
    pub shared_mixture: bool,
    pub adam: AdamConfig,
}

impl Hyper {
    pub fn paper() -> Self {
        Self {
            lambda_r: 10.0,
            lambda_kl: 0.01,
            lambda_latent: 0.5,
            lr0: 2e-4,
            decay_start: 200_000,
            decay_every: 10_000,
            decay_step: 5e-6,
            decay_mode: DecayMode::Subtract,
            lr_floor: 1e-7,
            batch: 5,
            clip_norm: Some(5.0),
            shared_mixture: true,
            adam: AdamConfig::default(),
        }
    }

    /// Same objective with a larger step size so a few thousand iterations
    /// make visible progress.
    pub fn desk() -> Self {
        Self {
            lr0: 1e-3,
            ..Self::paper()
        }
    }

    pub fn for_preset(p: model::Preset) -> Self {
        match p {
            model::Preset::Paper => Self::paper(),
            _ => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if [self.lambda_r, self.lambda_kl, self.lambda_latent].iter().any(|l| !(*l >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr0 >= 0.0) || !(self.lr_floor > 0.0) || self.decay_every == 0 {
            return bad("learning-rate settings out of range");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "lambda_r={}\nlambda_kl={}\nlambda_latent={}\nlr={}\ndecay_start={}\ndecay_every={}\ndecay_step={}\ndecay_mode={}\nlr_floor={}\nbatch={}\nclip_norm={}\nshared_mixture={}\nbeta1={}\nbeta2={}\nadam_eps={}\n",
            self.lambda_r,
            self.lambda_kl,
            self.lambda_latent,
            self.lr0,
            self.decay_start,
            self.decay_every,
            self.decay_step,
            match self.decay_mode {
                DecayMode::Subtract => "subtract",
                DecayMode::SetTo => "set",
            },
            self.lr_floor,
            self.batch,
            self.clip_norm.map_or("none".to_string(), |c| c.to_string()),
            self.shared_mixture,
            self.adam.beta1,
            self.adam.beta2,
            self.adam.eps,
        )
    }

    /// Overrides one field; returns `Ok(false)` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let f = |v: &str| v.parse::<f64>().map_err(|_| Error::Config(format!("{key}: bad number '{v}'")));
        let u = |v: &str| v.parse::<u64>().map_err(|_| Error::Config(format!("{key}: bad integer '{v}'")));
        match key {
            "lambda_r" => self.lambda_r = f(value)?,
            "lambda_kl" => self.lambda_kl = f(value)?,
            "lambda_latent" => self.lambda_latent = f(value)?,
            "lr" | "lr0" => self.lr0 = f(value)?,
            "decay_start" => self.decay_start = u(value)?,
            "decay_every" => self.decay_every = u(value)?,
            "decay_step" => self.decay_step = f(value)?,
            "decay_mode" => {
                self.decay_mode = match value {
                    "subtract" => DecayMode::Subtract,
                    "set" => DecayMode::SetTo,
                    other => return Err(Error::Config(format!("decay_mode: unknown '{other}'"))),
                }
            }
            "lr_floor" => self.lr_floor = f(value)?,
            "batch" => self.batch = u(value)? as usize,
            "clip_norm" => self.clip_norm = if value == "none" { None } else { Some(f(value)?) },
            "shared_mixture" => {
                self.shared_mixture = value
                    .parse()
                    .map_err(|_| Error::Config(format!("shared_mixture: bad bool '{value}'")))?
            }
            "beta1" => self.adam.beta1 = f(value)?,
            "beta2" => self.adam.beta2 = f(value)?,
            "adam_eps" => self.adam.eps = f(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Learning rate used at `iteration` (0-based).
pub fn lr_schedule(iteration: u64, h: &Hyper) -> f64 {
    if iteration < h.decay_start {
        return h.lr0;
    }
    let lr = match h.decay_mode {
        DecayMode::Subtract => {
            let steps = (iteration - h.decay_start) / h.decay_every + 1;
            h.lr0 - h.decay_step * steps as f64
        }
        DecayMode::SetTo => h.decay_step,
    };
    lr.max(h.lr_floor)
}

/// Draws `z = μ + exp(logvar/2) ⊙ ε`.
pub fn reparameterize<R: Rng + ?Sized>(dist: &LatentDist, rng: &mut R) -> LatentVec {
    let eps = standard_normal(rng, dist.mu.len());
    LatentVec(reparameterize_with(dist, &eps))
}

fn reparameterize_with(dist: &LatentDist, eps: &[f64]) -> Vec<f64> {
    dist.mu
        .iter()
        .zip(&dist.logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Recorded reparameterization; gradients reach both μ and logvar.
pub fn reparameterize_var(g: &mut Graph, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5)?;
    let sigma = g.exp(half)?;
    let noise = g.mul(sigma, eps)?;
    Ok(g.add(mu, noise)?)
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn loss_reconstruction(target: &MagSpec, est: &MagSpec) -> Result<f64> {
    if target.dims() != est.dims() {
        return Err(Error::Dsp(crate::dsp::DspError::ShapeMismatch(target.dims(), est.dims())));
    }
    Ok(mean_abs(&target.values, &est.values))
}

pub fn loss_kl(dist: &LatentDist) -> f64 {
    0.5 * dist
        .mu
        .iter()
        .zip(&dist.logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

pub fn loss_latent_regressor(z: &LatentVec, recovered_mu: &LatentVec) -> Result<f64> {
    if z.dim() != recovered_mu.dim() {
        return Err(Error::LatentDim {
            expected: z.dim(),
            found: recovered_mu.dim(),
        });
    }
    Ok(mean_abs(&z.0, &recovered_mu.0))
}

pub fn mean_abs_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    Ok(g.mean_all(d)?)
}

pub fn kl_var(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(logvar)?;
    let s = g.add(mu2, var)?;
    let s = g.sub(s, logvar)?;
    let s = g.add_scalar(s, -1.0)?;
    let s = g.sum_all(s)?;
    Ok(g.scale(s, 0.5)?)
}

/// Network inputs of one training example.
#[derive(Debug, Clone)]
pub struct TrainExample {
    /// Mixture magnitude `[1×F×T]`.
    pub mixture: Tensor,
    /// Target magnitude `[1×F×T]`, also used as the query.
    pub target: Tensor,
}

impl TrainExample {
    pub fn from_sample(s: &MixtureSample) -> Result<Self> {
        let t = |m: &MagSpec| Tensor::new(vec![1, m.bins, m.frames], m.values.clone());
        Ok(Self {
            mixture: t(&s.mix_mag)?,
            target: t(&s.target_mag)?,
        })
    }
}

/// Loss terms of one example, recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub l_r: Var,
    pub l_kl: Var,
    pub l_latent: Var,
}

/// Records the full objective for one example. `eps` is the
/// reparameterization noise and `z_prime` the regressor's latent draw.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &ModelConfig,
    h: &Hyper,
    mixture: Var,
    target: Var,
    regressor_mixture: Var,
    eps: Var,
    z_prime: Var,
) -> Result<LossVars> {
    let (mu, logvar) = model::query_encode(g, p, cfg, target)?;
    let z = reparameterize_var(g, mu, logvar, eps)?;
    let (_, est) = model::separate(g, p, cfg, mixture, z)?;
    let l_r = mean_abs_var(g, est, target)?;
    let l_kl = kl_var(g, mu, logvar)?;
    let (_, est2) = model::separate(g, p, cfg, regressor_mixture, z_prime)?;
    let (mu2, _) = model::query_encode(g, p, cfg, est2)?;
    let l_latent = mean_abs_var(g, mu2, z_prime)?;
    let a = g.scale(l_r, h.lambda_r)?;
    let b = g.scale(l_kl, h.lambda_kl)?;
    let c = g.scale(l_latent, h.lambda_latent)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossVars {
        total,
        l_r,
        l_kl,
        l_latent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub l_r: f64,
    pub l_kl: f64,
    pub l_latent: f64,
    pub l_total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepReport {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.6e}",
            self.iteration, self.l_r, self.l_kl, self.l_latent, self.l_total, self.lr
        )
    }
}

struct ExampleResult {
    l_r: f64,
    l_kl: f64,
    l_latent: f64,
    l_total: f64,
    grads: Vec<Tensor>,
}

fn example_grads(
    params: &ParamSet,
    cfg: &ModelConfig,
    h: &Hyper,
    ex: &TrainExample,
    reg_mixture: &Tensor,
    eps: &[f64],
    z_prime: &[f64],
) -> Result<ExampleResult> {
    let mut g = Graph::new();
    let p = params.record(&mut g, true);
    let m = g.constant(ex.mixture.clone());
    let t = g.constant(ex.target.clone());
    let m2 = g.constant(reg_mixture.clone());
    let e = g.constant(Tensor::vector(eps.to_vec()));
    let zp = g.constant(Tensor::vector(z_prime.to_vec()));
    let l = composite_loss(&mut g, &p, cfg, h, m, t, m2, e, zp)?;
    let mut grads = g.backward(l.total)?;
    let grads = p
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(ExampleResult {
        l_r: g.value(l.l_r).item(),
        l_kl: g.value(l.l_kl).item(),
        l_latent: g.value(l.l_latent).item(),
        l_total: g.value(l.total).item(),
        grads,
    })
}

/// One optimizer step over `batch`. Noise is drawn from `rng` in a fixed
/// order before any work starts, and per-example gradients are summed in
/// batch order, so the result does not depend on the thread count.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    state: &mut AdamState,
    batch: &[TrainExample],
    rng: &mut R,
    h: &Hyper,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Empty("train_step batch"));
    }
    let iteration = state.t;
    let d = model.config.latent_dim;
    let noise: Vec<(Vec<f64>, Vec<f64>)> = batch
        .iter()
        .map(|_| (standard_normal(rng, d), standard_normal(rng, d)))
        .collect();

    let results: Vec<Result<ExampleResult>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let reg = if h.shared_mixture {
                &batch[i].mixture
            } else {
                &batch[(i + 1) % batch.len()].mixture
            };
            example_grads(&model.params, &model.config, h, &batch[i], reg, &noise[i].0, &noise[i].1)
        })
        .collect();

    let n = batch.len() as f64;
    let mut sums = [0.0; 4];
    let mut grads: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for r in results {
        let r = r.map_err(|e| match e {
            Error::Tensor(t) => Error::NonFiniteLoss {
                iteration,
                what: t.to_string(),
            },
            other => other,
        })?;
        for (k, v) in [r.l_r, r.l_kl, r.l_latent, r.l_total].into_iter().enumerate() {
            sums[k] += v;
        }
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    let [l_r, l_kl, l_latent, l_total] = sums.map(|s| s / n);
    if !l_total.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            what: "total loss".into(),
        });
    }
    let mut sq = 0.0;
    for g in &mut grads {
        for v in g.data_mut() {
            *v /= n;
            sq += *v * *v;
        }
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            what: "gradient".into(),
        });
    }
    if let Some(c) = h.clip_norm {
        if grad_norm > c {
            let s = c / grad_norm;
            grads.iter_mut().flat_map(|g| g.data_mut().iter_mut()).for_each(|v| *v *= s);
        }
    }
    let lr = lr_schedule(iteration, h);
    adam_step(model.params.tensors_mut(), &grads, state, lr, h.adam)?;
    model.params.round_to_f32();
    state.m.iter_mut().chain(state.v.iter_mut()).for_each(Tensor::round_to_f32);
    Ok(StepReport {
        iteration,
        l_r,
        l_kl,
        l_latent,
        l_total,
        grad_norm,
        lr,
    })
}

/// RNG for everything drawn at one iteration: ChaCha8 keyed by the run seed,
/// with the iteration number as the stream id.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub iterations: u64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Training state that can be checkpointed and resumed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub hyper: Hyper,
    pub seed: u64,
}

impl Trainer {
    pub fn new(config: ModelConfig, hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let model = Model::init(config, seed)?;
        let adam = AdamState::new(model.params.tensors());
        Ok(Self {
            model,
            adam,
            hyper,
            seed,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let hyper = ck.hyper.clone();
        hyper.validate()?;
        Ok(Self {
            model: Model::new(ck.config, ck.params)?,
            adam: ck.adam,
            hyper,
            seed: ck.seed,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.adam.t
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            hyper: self.hyper.clone(),
            seed: self.seed,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Draws this iteration's batch and takes one step.
    pub fn step(&mut self, sampler: &Sampler<'_>) -> Result<StepReport> {
        let mut rng = iteration_rng(self.seed, self.iteration());
        let mut batch = Vec::with_capacity(self.hyper.batch);
        for _ in 0..self.hyper.batch {
            let s = sampler.sample(&mut rng)?;
            batch.push(TrainExample::from_sample(&s)?);
        }
        train_step(&mut self.model, &mut self.adam, &batch, &mut rng, &self.hyper)
    }
}

/// File name of the checkpoint written at `iteration`.
pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:08}.qsep")
}

/// Runs until `opts.iterations` total iterations have been taken, appending
/// one line per step to `loss.tsv` and writing checkpoints into `out_dir`
/// (`final.qsep` at the end). Resuming a trainer loaded from a checkpoint
/// continues the same sequence of batches and noise draws.
pub fn train_loop(
    trainer: &mut Trainer,
    pool: &StemPool,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    std::fs::create_dir_all(&opts.out_dir)?;
    let sampler = Sampler::new(pool, &trainer.model.config)?;
    let log_path = opts.out_dir.join("loss.tsv");
    let log = if trainer.iteration() == 0 {
        File::create(&log_path)?
    } else {
        truncate_log(&log_path, trainer.iteration())?;
        OpenOptions::new().append(true).open(&log_path)?
    };
    let mut log = BufWriter::new(log);
    let mut reports = Vec::new();
    while trainer.iteration() < opts.iterations {
        let r = trainer.step(&sampler)?;
        writeln!(log, "{}", r.log_line())?;
        on_step(&r);
        reports.push(r);
        let done = trainer.iteration();
        if opts.checkpoint_every > 0 && done.is_multiple_of(opts.checkpoint_every) {
            log.flush()?;
            checkpoint::save(&trainer.checkpoint(), &opts.out_dir.join(checkpoint_name(done)))?;
        }
    }
    log.flush()?;
    checkpoint::save(&trainer.checkpoint(), &opts.out_dir.join("final.qsep"))?;
    Ok(reports)
}

/// Keeps the first `lines` lines of an existing loss log (so a resumed run
/// does not duplicate steps logged after the checkpoint was written).
fn truncate_log(path: &Path, lines: u64) -> Result<()> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let kept: String = text.lines().take(lines as usize).map(|l| format!("{l}\n")).collect();
    std::fs::write(path, kept)?;
    Ok(())
}

/// Exponential moving average of a series (used to smooth loss curves).
pub fn smooth(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

/// `‖z − μ(Q(S(M, z)))‖₁ / d_z` for one mixture magnitude and latent draw.
pub fn regressor_error(model: &Model, mixture: &MagSpec, z: &LatentVec) -> Result<f64> {
    let (_, est) = model.separate(mixture, z)?;
    let mu = LatentVec(model.encode(&est)?.mu);
    loss_latent_regressor(z, &mu)
}
