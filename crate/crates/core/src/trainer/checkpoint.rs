//! Binary checkpoint: `"CMSL"`, u32 version, u32 array count, then per array
//! a u32 name length, the name, u32 dtype tag, u32 rank, u32 dims and raw
//! little-endian values; finally a u32-length-prefixed text block echoing the
//! model config and training state.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{AdamW, TrainState};
use crate::kv::{KvError, KvMap};
use crate::model::{ComSLModel, ModelConfig, ModelError};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMSL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("unknown array {0:?}")]
    UnknownArray(String),
    #[error("missing array {0:?}")]
    MissingArray(String),
    #[error("array {name:?} has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("bad dtype tag {0}")]
    DType(u32),
    #[error("config block: {0}")]
    Config(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn array<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.u32(name.len());
        self.0.extend_from_slice(name.as_bytes());
        self.0.extend_from_slice(&T::DTYPE.tag().to_le_bytes());
        self.u32(t.rank());
        for &d in t.shape() {
            self.u32(d);
        }
        for &v in t.data() {
            v.write_le(&mut self.0);
        }
    }
}

/// Serializes parameters, optimizer moments and the state echo.
pub fn checkpoint_bytes<T: Scalar>(model: &ComSLModel<T>, state: Option<&TrainState<T>>) -> Vec<u8> {
    let params = model.params();
    let count = params.len() * if state.is_some() { 4 } else { 1 };
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.u32(count);
    for p in params.iter() {
        w.array(&p.name, &p.value);
    }
    let mut text = String::new();
    model.config().write_kv("model.", &mut text);
    if let Some(s) = state {
        for (i, p) in params.iter().enumerate() {
            w.array(&format!("adam.m/{}", p.name), &s.opt.m[i]);
            w.array(&format!("adam.v/{}", p.name), &s.opt.v[i]);
            w.array(&format!("adam.t/{}", p.name), &Tensor::<f64>::scalar(s.opt.steps[i] as f64));
        }
        let _ = writeln!(text, "state.step = {}", s.step);
        let _ = writeln!(text, "state.seed = {}", s.seed);
        let _ = writeln!(text, "state.beta1 = {}", s.opt.beta1);
        let _ = writeln!(text, "state.beta2 = {}", s.opt.beta2);
        let _ = writeln!(text, "state.adam_eps = {}", s.opt.eps);
        let _ = writeln!(text, "state.weight_decay = {}", s.opt.weight_decay);
        if let Some(b) = s.best_bleu {
            let _ = writeln!(text, "state.best_bleu = {b}");
        }
        if let Some(p) = &s.best_path {
            let _ = writeln!(text, "state.best_path = {}", p.display());
        }
    }
    w.u32(text.len());
    w.0.extend_from_slice(text.as_bytes());
    w.0
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint<T: Scalar>(
    model: &ComSLModel<T>,
    state: Option<&TrainState<T>>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, checkpoint_bytes(model, state)).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

struct RawArray {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    start: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn array(&mut self) -> Result<RawArray, CheckpointError> {
        let len = self.u32("array name length")?;
        let name = String::from_utf8(self.take(len, "array name")?.to_vec())
            .map_err(|_| CheckpointError::Config("array name is not UTF-8".into()))?;
        let tag = self.u32("dtype")? as u32;
        let dtype = DType::from_tag(tag).ok_or(CheckpointError::DType(tag))?;
        let rank = self.u32("rank")?;
        let shape = (0..rank).map(|_| self.u32("dims")).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let start = self.pos;
        let bytes = n.checked_mul(dtype.width()).ok_or(CheckpointError::Truncated("values"))?;
        self.take(bytes, "values")?;
        Ok(RawArray {
            name,
            dtype,
            shape,
            start,
        })
    }

    fn values<T: Scalar>(&self, a: &RawArray) -> Vec<T> {
        let n: usize = a.shape.iter().product();
        let w = a.dtype.width();
        let bytes = &self.buf[a.start..a.start + n * w];
        if a.dtype == T::DTYPE {
            return bytes.chunks_exact(w).map(T::read_le).collect();
        }
        match a.dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        }
    }
}

fn parse_state_key<V: std::str::FromStr + Default>(kv: &mut KvMap, key: &str) -> Result<Option<V>, CheckpointError> {
    if kv.get(key).is_none() {
        return Ok(None);
    }
    let mut v = V::default();
    kv.take_parse(key, &mut v)?;
    Ok(Some(v))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ComSLModel<T>, Option<TrainState<T>>), CheckpointError> {
    let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    checkpoint_from_bytes(&buf)
}

pub fn checkpoint_from_bytes<T: Scalar>(buf: &[u8]) -> Result<(ComSLModel<T>, Option<TrainState<T>>), CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")? as u32;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32("array count")?;
    let arrays = (0..count).map(|_| r.array()).collect::<Result<Vec<_>, _>>()?;
    let text_len = r.u32("config length")?;
    let text = std::str::from_utf8(r.take(text_len, "config")?)
        .map_err(|_| CheckpointError::Config("config block is not UTF-8".into()))?;
    if r.pos != buf.len() {
        return Err(CheckpointError::Config("trailing bytes after config block".into()));
    }

    let mut kv = KvMap::parse(text)?;
    let mut cfg = ModelConfig::default();
    cfg.apply_kv("model.", &mut kv)?;
    let mut model = ComSLModel::<T>::init(&cfg, 0)?;

    let step: Option<usize> = parse_state_key(&mut kv, "state.step")?;
    let seed: Option<u64> = parse_state_key(&mut kv, "state.seed")?;
    let beta1: Option<f64> = parse_state_key(&mut kv, "state.beta1")?;
    let beta2: Option<f64> = parse_state_key(&mut kv, "state.beta2")?;
    let eps: Option<f64> = parse_state_key(&mut kv, "state.adam_eps")?;
    let wd: Option<f64> = parse_state_key(&mut kv, "state.weight_decay")?;
    let best_bleu: Option<f64> = parse_state_key(&mut kv, "state.best_bleu")?;
    let best_path: Option<String> = parse_state_key(&mut kv, "state.best_path")?;
    kv.ensure_consumed()?;

    let mut state = match (step, seed, beta1, beta2, eps, wd) {
        (Some(step), Some(seed), Some(b1), Some(b2), Some(eps), Some(wd)) => Some(TrainState {
            step,
            seed,
            opt: AdamW::new(model.params(), b1, b2, eps, wd),
            best_bleu,
            best_path: best_path.map(PathBuf::from),
        }),
        (None, None, None, None, None, None) => None,
        _ => return Err(CheckpointError::Config("incomplete training state".into())),
    };

    let n = model.params().len();
    let mut seen = vec![[false; 4]; n];
    for a in &arrays {
        let (kind, pname) = match a.name.split_once('/') {
            Some(("adam.m", rest)) => (1, rest),
            Some(("adam.v", rest)) => (2, rest),
            Some(("adam.t", rest)) => (3, rest),
            _ => (0, a.name.as_str()),
        };
        let id = model
            .params()
            .id(pname)
            .ok_or_else(|| CheckpointError::UnknownArray(a.name.clone()))?;
        if kind > 0 && state.is_none() {
            return Err(CheckpointError::UnknownArray(a.name.clone()));
        }
        let expected: Vec<usize> = if kind == 3 {
            Vec::new()
        } else {
            model.params().get(id).value.shape().to_vec()
        };
        if a.shape != expected {
            return Err(CheckpointError::Shape {
                name: a.name.clone(),
                got: a.shape.clone(),
                expected,
            });
        }
        seen[id.0][kind] = true;
        let shape = a.shape.clone();
        match kind {
            0 => model.params_mut().get_mut(id).value = Tensor::new(shape, r.values(a)).expect("checked shape"),
            3 => {
                let t: Vec<f64> = r.values(a);
                state.as_mut().expect("state present").opt.steps[id.0] = t[0] as u64;
            }
            _ => {
                let opt = &mut state.as_mut().expect("state present").opt;
                let slot = if kind == 1 { &mut opt.m[id.0] } else { &mut opt.v[id.0] };
                *slot = Tensor::new(shape, r.values(a)).expect("checked shape");
            }
        }
    }
    let kinds = if state.is_some() { 4 } else { 1 };
    for (i, s) in seen.iter().enumerate() {
        if let Some(k) = s[..kinds].iter().position(|&b| !b) {
            let name = &model.params().get(crate::tensor::ParamId(i)).name;
            let prefix = ["", "adam.m/", "adam.v/", "adam.t/"][k];
            return Err(CheckpointError::MissingArray(format!("{prefix}{name}")));
        }
    }
    Ok((model, state))
}
