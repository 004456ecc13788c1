//! Binary checkpoints: `LATTE1` magic, endianness marker, config digest and
//! JSON, a tensor manifest, then little-endian payloads.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use latte::{DType, LatteError, Result, Scalar, Tensor};

use crate::config::ModelConfig;
use crate::optim::AdamW;
use crate::params::ParameterStore;

const MAGIC: &[u8; 6] = b"LATTE1";
const ENDIAN_MARK: u32 = 0x0102_0304;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    /// Completed optimizer steps.
    pub step: usize,
    /// Schedule length the run was started with.
    pub total_steps: usize,
    pub store: ParameterStore<T>,
    pub optimizer: Option<AdamW<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub digest: String,
    pub dtype: DType,
    pub step: usize,
    pub total_steps: usize,
}

fn format_err(m: impl Into<String>) -> LatteError {
    LatteError::Format(m.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err("truncated checkpoint"))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err("invalid utf-8"))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for &x in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&x.as_f64().to_le_bytes()),
        }
    }
}

impl<T: Scalar> Checkpoint<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut all: Vec<(String, &Tensor<T>)> = self.store.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            all.extend(opt.m.iter().map(|(n, t)| (format!("{M_PREFIX}{n}"), t)));
            all.extend(opt.v.iter().map(|(n, t)| (format!("{V_PREFIX}{n}"), t)));
        }
        all
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ENDIAN_MARK.to_le_bytes());
        put_str(&mut out, &self.config.digest());
        put_str(&mut out, &self.config.to_json());
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        out.extend_from_slice(&(self.total_steps as u64).to_le_bytes());
        let opt_steps = self.optimizer.as_ref().map_or(0, |o| o.steps);
        out.push(self.optimizer.is_some() as u8);
        out.extend_from_slice(&opt_steps.to_le_bytes());
        let tensors = self.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let width = T::DTYPE.size_of();
        let mut offset = 0u64;
        for (name, t) in &tensors {
            put_str(&mut out, name);
            out.push(T::DTYPE.tag());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (t.len() * width) as u64;
        }
        for (_, t) in &tensors {
            encode(t, &mut out);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let (header, mut cur) = parse_header(buf)?;
        if header.dtype != T::DTYPE {
            return Err(format_err(format!(
                "checkpoint holds {:?} tensors, requested {:?}",
                header.dtype,
                T::DTYPE
            )));
        }
        let has_opt = cur.u8()? != 0;
        let opt_steps = cur.u64()?;
        let count = cur.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name = cur.string()?;
            let tag = cur.u8()?;
            if tag != T::DTYPE.tag() {
                return Err(format_err(format!("tensor {name} has dtype tag {tag}")));
            }
            let rank = cur.u8()? as usize;
            let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = cur.u64()? as usize;
            manifest.push((name, shape, offset));
        }
        let payload = &buf[cur.at..];
        let width = T::DTYPE.size_of();
        let mut store = ParameterStore::new();
        let mut m = ParameterStore::new();
        let mut v = ParameterStore::new();
        for (name, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            let bytes = payload
                .get(offset..offset + n * width)
                .ok_or_else(|| format_err(format!("payload of {name} out of bounds")))?;
            let data: Vec<T> = bytes
                .chunks_exact(width)
                .map(|c| match T::DTYPE {
                    DType::F32 => T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                    DType::F64 => T::of(f64::from_le_bytes(c.try_into().unwrap())),
                })
                .collect();
            let t = Tensor::new(shape, data)?;
            if let Some(rest) = name.strip_prefix(M_PREFIX) {
                m.insert(rest, t)?;
            } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
                v.insert(rest, t)?;
            } else {
                store.insert(&name, t)?;
            }
        }
        let cfg = &header.config;
        let optimizer = has_opt.then(|| AdamW {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            steps: opt_steps,
            m,
            v,
        });
        Ok(Self {
            config: header.config,
            step: header.step,
            total_steps: header.total_steps,
            store,
            optimizer,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn parse_header(buf: &[u8]) -> Result<(CheckpointHeader, Cursor<'_>)> {
    let mut cur = Cursor { buf, at: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(format_err("not a checkpoint (bad magic)"));
    }
    if cur.u32()? != ENDIAN_MARK {
        return Err(format_err("unsupported byte order"));
    }
    let digest = cur.string()?;
    let json = cur.string()?;
    let config: ModelConfig = serde_json::from_str(&json)?;
    if config.digest() != digest {
        return Err(format_err("config digest mismatch"));
    }
    let step = cur.u64()? as usize;
    let total_steps = cur.u64()? as usize;
    let mut peek = Cursor { buf, at: cur.at };
    peek.u8()?;
    peek.u64()?;
    let count = peek.u32()?;
    let dtype = if count == 0 {
        DType::F32
    } else {
        peek.string()?;
        let t = peek.u8()?;
        DType::from_tag(t).ok_or_else(|| format_err(format!("unknown dtype tag {t}")))?
    };
    Ok((
        CheckpointHeader {
            config,
            digest,
            dtype,
            step,
            total_steps,
        },
        cur,
    ))
}

/// Header only, without decoding tensors.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    parse_header(&buf).map(|(h, _)| h)
}
