//! Query-net and Separator.
//!
//! The Query-net maps a magnitude spectrogram `[1×F×T]` through six strided
//! convolutions (instance norm + ReLU), stacks each feature map along the
//! frequency axis to get a sequence over time, runs a GRU and feeds its last
//! state to two affine heads giving `(μ, log σ²)`.
//!
//! The Separator is a U-Net. The latent vector is tiled over the plane and
//! concatenated to the mixture magnitude as extra input channels. Encoder
//! layers are conv → instance norm → leaky ReLU(0.2). Decoder layers are
//! transposed conv → AdaIN(z) → ReLU, taking the previous decoder output
//! concatenated with the matching encoder activation. The last decoder layer
//! has a bias, no normalization, and a sigmoid; its output is the mask.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dsp::{analyze, reconstruct, DspError, MagSpec, NetShape, PhaseSpec, SpecLayout, Waveform};
use crate::tensor::{Conv2dSpec, GruVars, Graph, Padding, Tensor, TensorError, Var};
use crate::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const LOGVAR_CLAMP: f64 = 10.0;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
    /// Tiny shapes for finite-difference checks; not meant for training.
    Mini,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
            Preset::Mini => "mini",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            "mini" => Ok(Preset::Mini),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Network and framing configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    pub sample_rate: u32,
    /// STFT window; hop is a quarter of it.
    pub window: usize,
    /// Length of one segment (and of every query) in samples.
    pub segment_samples: usize,
    pub latent_dim: usize,
    pub kernel: usize,
    pub query_channels: Vec<usize>,
    /// Frequency stride of each Query-net layer (1 or 2).
    pub query_freq_strides: Vec<usize>,
    pub query_time_strides: Vec<usize>,
    pub gru_units: usize,
    /// Output channels of each Separator encoder layer; depth L is its length.
    pub sep_channels: Vec<usize>,
    /// Time stride of each Separator encoder layer; decoders mirror it.
    pub sep_time_strides: Vec<usize>,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            sample_rate: 22050,
            window: 1024,
            segment_samples: 3 * 22050,
            latent_dim: 32,
            kernel: 4,
            query_channels: vec![32, 32, 64, 64, 128, 128],
            query_freq_strides: vec![2; 6],
            query_time_strides: vec![1, 2, 1, 2, 1, 2],
            gru_units: 128,
            sep_channels: vec![64, 128, 256, 512, 512, 512, 512, 512, 512],
            sep_time_strides: vec![1, 2, 2, 2, 2, 2, 2, 2, 2],
        }
    }

    /// CPU-trainable scale: 64 bins × 32 frames, five U-Net levels. The
    /// Query-net stops halving frequency at 8 bins, the extent the paper
    /// network reaches before its GRU.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            sample_rate: 4000,
            window: 128,
            segment_samples: 1024,
            latent_dim: 16,
            kernel: 4,
            query_channels: vec![8, 8, 8, 8, 16, 16],
            query_freq_strides: vec![2, 2, 2, 1, 1, 1],
            query_time_strides: vec![1, 2, 1, 2, 1, 2],
            gru_units: 32,
            sep_channels: vec![8, 16, 16, 16, 16],
            sep_time_strides: vec![1, 2, 2, 2, 2],
        }
    }

    /// 16 bins × 8 frames with a handful of channels.
    pub fn mini() -> Self {
        Self {
            preset: Preset::Mini,
            sample_rate: 4000,
            window: 32,
            segment_samples: 64,
            latent_dim: 3,
            kernel: 4,
            query_channels: vec![2, 2, 3, 3, 2, 2],
            query_freq_strides: vec![2, 2, 1, 1, 1, 1],
            query_time_strides: vec![1, 2, 1, 2, 1, 1],
            gru_units: 4,
            sep_channels: vec![3, 4, 4],
            sep_time_strides: vec![1, 2, 2],
        }
    }

    pub fn for_preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
            Preset::Mini => Self::mini(),
        }
    }

    pub fn hop(&self) -> usize {
        self.window / 4
    }

    pub fn depth(&self) -> usize {
        self.sep_channels.len()
    }

    /// Frame counts are cut to a multiple of this so every time stride
    /// divides evenly.
    pub fn frame_multiple(&self) -> usize {
        self.sep_time_strides.iter().product::<usize>().max(self.query_time_strides.iter().product())
    }

    pub fn segment_layout(&self) -> SpecLayout {
        let hop = self.hop();
        SpecLayout {
            window: self.window,
            hop,
            n_bins: self.window / 2 + 1,
            n_frames: 1 + self.segment_samples / hop,
            signal_len: self.segment_samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn net_shape(&self) -> NetShape {
        NetShape::for_layout(&self.segment_layout(), self.frame_multiple())
    }

    /// Frequency extent after the Query-net's convolutions.
    fn query_out_bins(&self) -> usize {
        let mut f = self.net_shape().bins;
        for &s in &self.query_freq_strides {
            f = f.div_ceil(s);
        }
        f
    }

    pub fn gru_input_dim(&self) -> usize {
        self.query_channels.last().copied().unwrap_or(1) * self.query_out_bins()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.window < 8 || !self.window.is_multiple_of(4) || !self.window.is_power_of_two() {
            return bad(format!("window {} must be a power of two ≥ 8", self.window));
        }
        if self.segment_samples < self.window {
            return bad("segment shorter than one window".into());
        }
        if self.latent_dim == 0 || self.gru_units == 0 || self.kernel == 0 {
            return bad("latent_dim, gru_units and kernel must be positive".into());
        }
        if self.query_channels.len() != self.query_time_strides.len()
            || self.query_channels.len() != self.query_freq_strides.len()
            || self.query_channels.is_empty()
        {
            return bad("query channel and stride lists differ in length".into());
        }
        if self.sep_channels.len() != self.sep_time_strides.len() || self.sep_channels.len() < 2 {
            return bad("separator needs ≥ 2 layers with one stride each".into());
        }
        if self
            .query_channels
            .iter()
            .chain(&self.sep_channels)
            .any(|&c| c == 0)
            || self
                .query_time_strides
                .iter()
                .chain(&self.query_freq_strides)
                .chain(&self.sep_time_strides)
                .any(|&s| s != 1 && s != 2)
        {
            return bad("channels must be positive and strides 1 or 2".into());
        }
        let shape = self.net_shape();
        if !shape.bins.is_multiple_of(1 << self.depth()) {
            return bad(format!("{} bins not divisible by 2^{}", shape.bins, self.depth()));
        }
        Ok(())
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "preset={}\nsample_rate={}\nwindow={}\nsegment_samples={}\nlatent_dim={}\nkernel={}\nquery_channels={}\nquery_freq_strides={}\nquery_time_strides={}\ngru_units={}\nsep_channels={}\nsep_time_strides={}\n",
            self.preset,
            self.sample_rate,
            self.window,
            self.segment_samples,
            self.latent_dim,
            self.kernel,
            list(&self.query_channels),
            list(&self.query_freq_strides),
            list(&self.query_time_strides),
            self.gru_units,
            list(&self.sep_channels),
            list(&self.sep_time_strides),
        )
    }

    /// Parses [`ModelConfig::to_kv`] output. Missing keys fall back to the
    /// named preset; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let preset = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Desk,
        };
        let mut cfg = Self::for_preset(preset);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("{key}: bad number '{v}'")));
        let list = |v: &str| v.split(',').map(num).collect::<Result<Vec<usize>>>();
        match key {
            "preset" => self.preset = value.parse()?,
            "sample_rate" => self.sample_rate = num(value)? as u32,
            "window" => self.window = num(value)?,
            "segment_samples" => self.segment_samples = num(value)?,
            "latent_dim" | "d_z" => self.latent_dim = num(value)?,
            "kernel" => self.kernel = num(value)?,
            "query_channels" => self.query_channels = list(value)?,
            "query_freq_strides" => self.query_freq_strides = list(value)?,
            "query_time_strides" => self.query_time_strides = list(value)?,
            "gru_units" => self.gru_units = num(value)?,
            "sep_channels" => self.sep_channels = list(value)?,
            "sep_time_strides" => self.sep_time_strides = list(value)?,
            other => return Err(Error::Config(format!("unknown model key '{other}'"))),
        }
        Ok(())
    }
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{l}'")))
        })
        .collect()
}

/// Gaussian posterior produced by the Query-net.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDist {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// A point in latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVec(pub Vec<f64>);

impl LatentVec {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on `g` as a gradient-receiving leaf (or as a
    /// constant when `trainable` is false).
    pub fn record(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        ParamVars::new(self.names.clone(), vars)
    }

    /// Rounds every value to 32-bit precision so checkpoints are lossless.
    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_to_f32);
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters recorded on a graph, addressable by name.
#[derive(Debug, Clone)]
pub struct ParamVars {
    index: HashMap<String, usize>,
    vars: Vec<Var>,
}

impl ParamVars {
    /// Pairs `names` with already-recorded `vars`, in the same order.
    pub fn new(names: Vec<String>, vars: Vec<Var>) -> Self {
        let index = names.into_iter().enumerate().map(|(i, n)| (n, i)).collect();
        Self { index, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    /// Vars in [`ParamSet`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Name and shape of every parameter a config needs, in canonical order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let k = cfg.kernel;
    let mut out = Vec::new();
    let mut prev = 1;
    for (i, &c) in cfg.query_channels.iter().enumerate() {
        out.push((format!("q.conv{}.w", i + 1), vec![c, prev, k, k]));
        prev = c;
    }
    let (d, h) = (cfg.gru_input_dim(), cfg.gru_units);
    for gate in ["z", "r", "n"] {
        out.push((format!("q.gru.w_{gate}"), vec![d, h]));
    }
    for gate in ["z", "r", "n"] {
        out.push((format!("q.gru.u_{gate}"), vec![h, h]));
    }
    for gate in ["z", "r", "n"] {
        out.push((format!("q.gru.b_{gate}"), vec![h]));
    }
    out.push(("q.mu.w".into(), vec![h, cfg.latent_dim]));
    out.push(("q.mu.b".into(), vec![cfg.latent_dim]));
    out.push(("q.logvar.w".into(), vec![h, cfg.latent_dim]));
    out.push(("q.logvar.b".into(), vec![cfg.latent_dim]));

    let depth = cfg.depth();
    let ch = &cfg.sep_channels;
    let mut prev = 1 + cfg.latent_dim;
    for (i, &c) in ch.iter().enumerate() {
        out.push((format!("s.enc{}.w", i + 1), vec![c, prev, k, k]));
        prev = c;
    }
    for i in (1..=depth).rev() {
        let input = if i == depth { ch[depth - 1] } else { 2 * ch[i - 1] };
        let output = if i == 1 { 1 } else { ch[i - 2] };
        out.push((format!("s.dec{i}.w"), vec![input, output, k, k]));
        if i > 1 {
            out.push((format!("s.dec{i}.ws"), vec![cfg.latent_dim, output]));
            out.push((format!("s.dec{i}.bs"), vec![output]));
            out.push((format!("s.dec{i}.wb"), vec![cfg.latent_dim, output]));
            out.push((format!("s.dec{i}.bb"), vec![output]));
        } else {
            out.push(("s.dec1.b".into(), vec![1]));
        }
    }
    out
}

/// Whether a parameter name denotes a bias vector.
pub fn is_bias(name: &str) -> bool {
    name.ends_with(".b") || name.contains(".b_") || name.ends_with(".bs") || name.ends_with(".bb")
}

/// He-normal weights with `std = sqrt(2 / fan_in)`, zero biases, and unit
/// bias on every AdaIN scale head. Deterministic in `seed`; values are
/// rounded to 32-bit precision so they survive a checkpoint unchanged.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in param_layout(cfg) {
        let t = if is_bias(&name) {
            let fill = if name.ends_with(".bs") { 1.0 } else { 0.0 };
            Tensor::full(&shape, fill)
        } else {
            let fan = weight_fan_in(&name, &shape);
            let normal = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
        };
        params.insert(name, t)?;
    }
    params.round_to_f32();
    Ok(params)
}

/// Convolution kernels are `[out×in×k×k]` and transposed ones `[in×out×k×k]`;
/// in both cases fan-in counts input channels times kernel area.
pub fn weight_fan_in(name: &str, shape: &[usize]) -> usize {
    if shape.len() == 4 {
        let input = if name.starts_with("s.dec") { shape[0] } else { shape[1] };
        input * shape[2] * shape[3]
    } else {
        shape[0]
    }
}

fn conv_spec(cfg: &ModelConfig, len: (usize, usize), stride: (usize, usize)) -> Conv2dSpec {
    Conv2dSpec {
        stride,
        padding: Padding::same(len, (cfg.kernel, cfg.kernel), stride),
    }
}

fn expect_shape(g: &Graph, v: Var, shape: &[usize]) -> Result<()> {
    if g.shape(v) != shape {
        return Err(Error::Tensor(TensorError::ShapeMismatch {
            op: "model input",
            lhs: g.shape(v).to_vec(),
            rhs: shape.to_vec(),
        }));
    }
    Ok(())
}

/// Query-net forward on a `[1×F×T]` magnitude. Returns `(μ, logvar)` as
/// `[d_z]` vars; logvar is clamped to ±10.
pub fn query_encode(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig, query: Var) -> Result<(Var, Var)> {
    let net = cfg.net_shape();
    expect_shape(g, query, &[1, net.bins, net.frames])?;
    let mut x = query;
    for (i, (&stride_f, &stride_t)) in cfg.query_freq_strides.iter().zip(&cfg.query_time_strides).enumerate() {
        let s = g.shape(x).to_vec();
        let spec = conv_spec(cfg, (s[1], s[2]), (stride_f, stride_t));
        let w = p.get(&format!("q.conv{}.w", i + 1))?;
        let y = g.conv2d(x, w, spec)?;
        let n = g.instance_norm(y, NORM_EPS)?;
        x = g.relu(n)?;
    }
    // [C×F×T] → [T×C×F] → [T×(C·F)]
    let s = g.shape(x).to_vec();
    let seq = g.permute(x, &[2, 0, 1])?;
    let seq = g.reshape(seq, &[s[2], s[0] * s[1]])?;
    let steps: Vec<Var> = (0..s[2]).map(|t| g.slice(seq, 0, t, 1)).collect::<std::result::Result<_, _>>()?;
    let gru = GruVars {
        w: [p.get("q.gru.w_z")?, p.get("q.gru.w_r")?, p.get("q.gru.w_n")?],
        u: [p.get("q.gru.u_z")?, p.get("q.gru.u_r")?, p.get("q.gru.u_n")?],
        b: [p.get("q.gru.b_z")?, p.get("q.gru.b_r")?, p.get("q.gru.b_n")?],
    };
    let (_, h) = crate::tensor::gru_forward(g, &gru, &steps)?;
    let head = |g: &mut Graph, name: &str| -> Result<Var> {
        let y = g.matmul(h, p.get(&format!("q.{name}.w"))?)?;
        let y = g.reshape(y, &[cfg.latent_dim])?;
        Ok(g.add(y, p.get(&format!("q.{name}.b"))?)?)
    };
    let mu = head(g, "mu")?;
    let lv = head(g, "logvar")?;
    let logvar = g.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
    Ok((mu, logvar))
}

/// Separator forward. `mixture` is `[1×F×T]`, `z` is `[d_z]`. Returns the
/// sigmoid mask and the masked mixture, both `[1×F×T]`.
pub fn separate(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig, mixture: Var, z: Var) -> Result<(Var, Var)> {
    let net = cfg.net_shape();
    expect_shape(g, mixture, &[1, net.bins, net.frames])?;
    expect_shape(g, z, &[cfg.latent_dim])?;
    let tiled = g.tile_spatial(z, net.bins, net.frames)?;
    let mut x = g.concat(&[mixture, tiled], 0)?;
    let zrow = g.reshape(z, &[1, cfg.latent_dim])?;

    let depth = cfg.depth();
    let mut skips = Vec::with_capacity(depth);
    let mut sizes = Vec::with_capacity(depth);
    for (i, &stride_t) in cfg.sep_time_strides.iter().enumerate() {
        let s = g.shape(x).to_vec();
        sizes.push((s[1], s[2]));
        let spec = conv_spec(cfg, (s[1], s[2]), (2, stride_t));
        let y = g.conv2d(x, p.get(&format!("s.enc{}.w", i + 1))?, spec)?;
        let n = g.instance_norm(y, NORM_EPS)?;
        x = g.leaky_relu(n, LEAKY_SLOPE)?;
        skips.push(x);
    }

    let mut mask = None;
    for i in (1..=depth).rev() {
        let input = if i == depth {
            skips[depth - 1]
        } else {
            g.concat(&[x, skips[i - 1]], 0)?
        };
        let out_size = sizes[i - 1];
        let spec = conv_spec(cfg, out_size, (2, cfg.sep_time_strides[i - 1]));
        let y = g.conv_transpose2d(input, p.get(&format!("s.dec{i}.w"))?, spec, out_size)?;
        if i > 1 {
            let c = g.shape(y)[0];
            let affine = |g: &mut Graph, w: &str, b: &str| -> Result<Var> {
                let v = g.matmul(zrow, p.get(&format!("s.dec{i}.{w}"))?)?;
                let v = g.reshape(v, &[c])?;
                Ok(g.add(v, p.get(&format!("s.dec{i}.{b}"))?)?)
            };
            let ys = affine(g, "ws", "bs")?;
            let yb = affine(g, "wb", "bb")?;
            let n = g.instance_norm(y, NORM_EPS)?;
            let a = g.channel_affine(n, ys, yb)?;
            x = g.relu(a)?;
        } else {
            let b = p.get("s.dec1.b")?;
            let tiled_b = g.tile_spatial(b, out_size.0, out_size.1)?;
            let logits = g.add(y, tiled_b)?;
            mask = Some(g.sigmoid(logits)?);
        }
    }
    let mask = mask.expect("depth ≥ 1");
    let est = g.mul(mask, mixture)?;
    Ok((mask, est))
}

/// Parameters plus configuration, with graph-free inference helpers.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, params: ParamSet) -> Result<Self> {
        check_params(&config, &params)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    fn mag_tensor(&self, mag: &MagSpec) -> Result<Tensor> {
        let net = self.config.net_shape();
        if (mag.bins, mag.frames) != (net.bins, net.frames) {
            return Err(Error::Tensor(TensorError::ShapeMismatch {
                op: "magnitude",
                lhs: vec![mag.bins, mag.frames],
                rhs: vec![net.bins, net.frames],
            }));
        }
        Ok(Tensor::new(vec![1, mag.bins, mag.frames], mag.values.clone())?)
    }

    pub fn encode(&self, query: &MagSpec) -> Result<LatentDist> {
        let mut g = Graph::new();
        let p = self.params.record(&mut g, false);
        let q = g.constant(self.mag_tensor(query)?);
        let (mu, lv) = query_encode(&mut g, &p, &self.config, q)?;
        Ok(LatentDist {
            mu: g.value(mu).data().to_vec(),
            logvar: g.value(lv).data().to_vec(),
        })
    }

    /// Mask and masked magnitude for `mixture` conditioned on `z`.
    pub fn separate(&self, mixture: &MagSpec, z: &LatentVec) -> Result<(MagSpec, MagSpec)> {
        if z.dim() != self.config.latent_dim {
            return Err(Error::LatentDim {
                expected: self.config.latent_dim,
                found: z.dim(),
            });
        }
        let mut g = Graph::new();
        let p = self.params.record(&mut g, false);
        let m = g.constant(self.mag_tensor(mixture)?);
        let zv = g.constant(Tensor::vector(z.0.clone()));
        let (mask, est) = separate(&mut g, &p, &self.config, m, zv)?;
        let mask = mixture.with_values(g.value(mask).data().to_vec())?;
        let est = mixture.with_values(g.value(est).data().to_vec())?;
        Ok((mask, est))
    }

    /// Cropped magnitude and phase of one segment-length signal.
    pub fn analyze(&self, w: &Waveform) -> Result<(MagSpec, PhaseSpec)> {
        if w.sample_rate != self.config.sample_rate {
            return Err(Error::Dsp(DspError::SampleRateMismatch {
                expected: self.config.sample_rate,
                found: w.sample_rate,
            }));
        }
        Ok(analyze(w, self.config.window, self.config.frame_multiple())?)
    }

    /// Exactly one segment: longer inputs are center-cropped, shorter ones
    /// zero-padded at the end.
    pub fn fit_query(&self, w: &Waveform) -> Waveform {
        let n = self.config.segment_samples;
        if w.len() >= n {
            w.window((w.len() - n) / 2, n)
        } else {
            let mut s = w.samples.clone();
            s.resize(n, 0.0);
            Waveform::new(s, w.sample_rate)
        }
    }

    /// Query encoding of an arbitrary-length waveform (see [`Model::fit_query`]).
    pub fn encode_waveform(&self, w: &Waveform) -> Result<LatentDist> {
        let (mag, _) = self.analyze(&self.fit_query(w))?;
        self.encode(&mag)
    }

    /// Segment-wise separation of a mixture of any length with one latent
    /// vector; segments are reconstructed with the mixture phase and
    /// concatenated, then trimmed to the input length.
    pub fn separate_waveform(&self, mixture: &Waveform, z: &LatentVec) -> Result<Separation> {
        let mut audio = Vec::with_capacity(mixture.len());
        let mut est_mags = Vec::new();
        for seg in crate::data::segment(mixture, self.config.segment_samples) {
            let (mag, phase) = self.analyze(&seg)?;
            let (_, est) = self.separate(&mag, z)?;
            audio.extend(reconstruct(&est, &phase)?.samples);
            est_mags.push(est);
        }
        audio.truncate(mixture.len());
        Ok(Separation {
            audio: Waveform::new(audio, mixture.sample_rate),
            est_mags,
        })
    }
}

/// Output of [`Model::separate_waveform`].
#[derive(Debug, Clone)]
pub struct Separation {
    pub audio: Waveform,
    /// Estimated magnitude of each segment.
    pub est_mags: Vec<MagSpec>,
}

/// Verifies that `params` has exactly the names and shapes `cfg` requires.
pub fn check_params(cfg: &ModelConfig, params: &ParamSet) -> Result<()> {
    let layout = param_layout(cfg);
    if layout.len() != params.len() {
        return Err(Error::Config(format!(
            "config needs {} tensors, parameter set has {}",
            layout.len(),
            params.len()
        )));
    }
    for ((name, shape), (pname, t)) in layout.iter().zip(params.iter()) {
        if name != pname || shape.as_slice() != t.shape() {
            return Err(Error::Config(format!(
                "parameter {pname} {:?} does not match expected {name} {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}
