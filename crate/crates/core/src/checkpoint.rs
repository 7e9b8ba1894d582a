//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `QSEP`, `u32` version, `u32` length plus
//! UTF-8 `key=value` config text, `u32` tensor count, then one record per
//! tensor: `u32` name length, name bytes, `u32` rank, `u32` dims, `f32` data.
//! The Adam step count lives in the config text; moment buffers are stored
//! as tensors named `adam.m.<param>` / `adam.v.<param>`.

use std::path::Path;

use crate::model::{check_params, parse_kv, ModelConfig, ParamSet};
use crate::tensor::{AdamState, Tensor};
use crate::train::Hyper;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QSEP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub hyper: Hyper,
    pub seed: u64,
    pub params: ParamSet,
    pub adam: AdamState,
}

impl Checkpoint {
    fn header_text(&self) -> String {
        let hyper: String = self.hyper.to_kv().lines().map(|l| format!("train.{l}\n")).collect();
        format!(
            "{}{hyper}train.seed={}\ntrain.step={}\n",
            self.config.to_kv(),
            self.seed,
            self.adam.t
        )
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.to_f32() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    check_params(&ck.config, &ck.params)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = ck.header_text();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, 3 * ck.params.len())?;
    for (name, t) in ck.params.iter() {
        put_tensor(&mut out, name, t)?;
    }
    for (name, m) in ck.params.names().iter().zip(&ck.adam.m) {
        put_tensor(&mut out, &format!("adam.m.{name}"), m)?;
    }
    for (name, v) in ck.params.names().iter().zip(&ck.adam.v) {
        put_tensor(&mut out, &format!("adam.v.{name}"), v)?;
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()?;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()?;
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint("dims overflow".into()))?;
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("dims overflow".into()))?)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Tensor::from_f32(dims, &data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let mut model_text = String::new();
    let mut hyper = Hyper::paper();
    let (mut seed, mut step) = (None, None);
    for (k, v) in parse_kv(text)? {
        match k.strip_prefix("train.") {
            Some("seed") => seed = v.parse::<u64>().ok(),
            Some("step") => step = v.parse::<u64>().ok(),
            Some(key) => {
                if !hyper.set(key, &v)? {
                    return Err(Error::Checkpoint(format!("unknown key '{k}'")));
                }
            }
            None => model_text.push_str(&format!("{k}={v}\n")),
        }
    }
    let config = ModelConfig::from_kv(&model_text)?;
    let (seed, step) = seed
        .zip(step)
        .ok_or_else(|| Error::Checkpoint("missing train.seed or train.step".into()))?;

    let count = r.u32()?;
    let mut params = ParamSet::new();
    let mut moments = Vec::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if name.starts_with("adam.") {
            moments.push((name, t));
        } else {
            params.insert(name, t)?;
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    check_params(&config, &params)?;
    let find = |kind: &str, name: &str| -> Result<Tensor> {
        let key = format!("adam.{kind}.{name}");
        moments
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))
    };
    let mut adam = AdamState::new(params.tensors());
    for (i, name) in params.names().iter().enumerate() {
        adam.m[i] = find("m", name)?;
        adam.v[i] = find("v", name)?;
        if adam.m[i].shape() != params.tensors()[i].shape() || adam.v[i].shape() != params.tensors()[i].shape() {
            return Err(Error::Checkpoint(format!("moment shape mismatch for {name}")));
        }
    }
    if moments.len() != 2 * params.len() {
        return Err(Error::Checkpoint("unexpected extra moment tensors".into()));
    }
    adam.t = step;
    Ok(Checkpoint {
        config,
        hyper,
        seed,
        params,
        adam,
    })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ck)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&buf)
}
