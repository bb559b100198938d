//! Binary model checkpoints.
//!
//! Layout (little-endian): `b"NRCK"`, version `u32`, manifest (`u32`
//! length + UTF-8 `key=value` lines), blob count `u32`, then per blob:
//! name (`u32` length + UTF-8), kind tag (`u32` length + UTF-8), dtype
//! `u8` (32 or 64), ndim `u32`, dims `u64`×ndim, values. A trailing `u64`
//! holds the sum of all preceding bytes modulo 2^64.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::lru::{LruOptions, ScanMode};
use crate::matryoshka::SizeLadder;
use crate::model::{ModelConfig, RecModel};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::{Precision, Scalar};

pub const CKPT_MAGIC: &[u8; 4] = b"NRCK";
pub const CKPT_VERSION: u32 = 1;

const OPT_M: &str = "adam.m.";
const OPT_V: &str = "adam.v.";

/// First/second moment estimates keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: IndexMap<String, Vec<T>>,
    pub v: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: IndexMap<String, Vec<T>> = params
            .iter()
            .map(|(n, p)| (n.clone(), vec![T::zero(); p.numel()]))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: RecModel<T>,
    pub optimizer: Option<AdamState<T>>,
    /// Free-form entries (e.g. the training configuration).
    pub extra: Manifest,
}

pub fn model_manifest<T: Scalar>(cfg: &ModelConfig) -> Manifest {
    let mut m = Manifest::new();
    m.set("version", CKPT_VERSION);
    m.set("precision", T::PRECISION);
    m.set("ladder", &cfg.ladder);
    m.set("width", cfg.width);
    m.set("n_blocks", cfg.n_blocks);
    m.set("ffn_k", cfg.ffn_k);
    m.set("num_items", cfg.num_items);
    m.set("d_lang", cfg.d_lang);
    m.set("d_img", cfg.d_img);
    m.set("norm_mode", cfg.norm_mode);
    m.set("modality_mode", cfg.modality);
    m.set("gamma_norm", cfg.lru.gamma_norm);
    m.set("complex", cfg.lru.complex);
    m.set("r_min", cfg.r_min);
    m.set("r_max", cfg.r_max);
    m.set("ln_eps", cfg.ln_eps);
    m.set("dropout", cfg.dropout);
    m.set("masked", cfg.masked);
    m.set(
        "scan",
        match cfg.scan {
            ScanMode::Parallel => "parallel",
            ScanMode::Sequential => "sequential",
        },
    );
    if let Some(w) = &cfg.loss_weights {
        m.set(
            "loss_weights",
            w.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        );
    }
    if !cfg.masked {
        m.set("extracted_size", cfg.width);
    }
    m
}

pub fn config_from_manifest(m: &Manifest) -> Result<ModelConfig> {
    let ladder: SizeLadder = m
        .require("ladder")?
        .parse()
        .map_err(|e| Error::Data(format!("checkpoint ladder: {e}")))?;
    let scan = match m.require("scan")? {
        "parallel" => ScanMode::Parallel,
        "sequential" => ScanMode::Sequential,
        other => return Err(Error::Data(format!("unknown scan mode `{other}`"))),
    };
    let loss_weights = m
        .get("loss_weights")
        .map(|s| {
            s.split(',')
                .map(|x| {
                    x.parse::<f64>()
                        .map_err(|_| Error::Data(format!("bad loss weight `{x}`")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let cfg = ModelConfig {
        width: m.parse_value("width")?,
        ladder,
        n_blocks: m.parse_value("n_blocks")?,
        ffn_k: m.parse_value("ffn_k")?,
        num_items: m.parse_value("num_items")?,
        d_lang: m.parse_value("d_lang")?,
        d_img: m.parse_value("d_img")?,
        norm_mode: m.require("norm_mode")?.parse().map_err(to_data)?,
        modality: m.require("modality_mode")?.parse().map_err(to_data)?,
        lru: LruOptions {
            gamma_norm: m.parse_value("gamma_norm")?,
            complex: m.parse_value("complex")?,
        },
        r_min: m.parse_value("r_min")?,
        r_max: m.parse_value("r_max")?,
        ln_eps: m.parse_value("ln_eps")?,
        dropout: m.parse_value("dropout")?,
        masked: m.parse_value("masked")?,
        scan,
        loss_weights,
    };
    cfg.validate().map_err(to_data)?;
    Ok(cfg)
}

fn to_data(e: Error) -> Error {
    match e {
        Error::Config(s) => Error::Data(s),
        other => other,
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_blob<T: Scalar>(out: &mut Vec<u8>, name: &str, tag: &str, shape: &[usize], data: &[T]) {
    put_str(out, name);
    put_str(out, tag);
    out.push(T::PRECISION.bits() as u8);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        x.write_le(out);
    }
}

fn byte_sum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |s, &b| s.wrapping_add(b as u64))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: RecModel<T>) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            extra: Manifest::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut manifest = model_manifest::<T>(&self.model.config);
        if let Some(o) = &self.optimizer {
            manifest.set("adam_step", o.step);
        }
        for (k, v) in self.extra.iter() {
            manifest.set(format!("extra.{k}"), v);
        }
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        put_str(&mut out, &manifest.to_text());
        let n_opt = self.optimizer.as_ref().map_or(0, |o| o.m.len() + o.v.len());
        out.extend_from_slice(&((self.model.params.len() + n_opt) as u32).to_le_bytes());
        for (name, p) in self.model.params.iter() {
            put_blob(&mut out, name, &p.kind.tag(), &p.shape, &p.data);
        }
        if let Some(o) = &self.optimizer {
            for (prefix, map) in [(OPT_M, &o.m), (OPT_V, &o.v)] {
                for (name, data) in map {
                    put_blob(
                        &mut out,
                        &format!("{prefix}{name}"),
                        "state",
                        &[data.len()],
                        data,
                    );
                }
            }
        }
        let sum = byte_sum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if bytes.len() < 16 {
            return Err(r.err(format!(
                "file is {} bytes, too short for a checkpoint",
                bytes.len()
            )));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        let actual = byte_sum(body);
        if stored != actual {
            return Err(r.err(format!("expected checksum {stored:#x}, found {actual:#x}")));
        }
        r.bytes = body;
        let magic = r.take(4)?;
        if magic != CKPT_MAGIC {
            return Err(r.err(format!("expected magic {CKPT_MAGIC:?}, found {magic:?}")));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(r.err(format!("expected version {CKPT_VERSION}, found {version}")));
        }
        let manifest = Manifest::parse(&r.string()?, path)?;
        let cfg = config_from_manifest(&manifest)?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for _ in 0..n {
            let name = r.string()?;
            let tag = r.string()?;
            let dtype = r.u8()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data: Vec<T> = match dtype {
                32 => r
                    .take(4 * count)?
                    .chunks_exact(4)
                    .map(|c| T::of(f32::read_le(c).as_f64()))
                    .collect(),
                64 => r
                    .take(8 * count)?
                    .chunks_exact(8)
                    .map(|c| T::of(f64::read_le(c)))
                    .collect(),
                other => {
                    return Err(r.err(format!(
                        "blob {name}: expected dtype 32 or 64, found {other}"
                    )))
                }
            };
            if let Some(p) = name.strip_prefix(OPT_M) {
                m.insert(p.to_string(), data);
            } else if let Some(p) = name.strip_prefix(OPT_V) {
                v.insert(p.to_string(), data);
            } else {
                let kind =
                    ParamKind::from_tag(&tag).map_err(|e| r.err(format!("blob {name}: {e}")))?;
                params.insert(name, shape, kind, data)?;
            }
        }
        if r.pos != r.bytes.len() {
            return Err(r.err(format!(
                "{} trailing bytes after the last blob",
                r.bytes.len() - r.pos
            )));
        }
        let model = RecModel::from_params(cfg, params)?;
        let optimizer = match manifest.get("adam_step") {
            Some(step) => {
                let step = step
                    .parse()
                    .map_err(|_| r.err(format!("bad adam_step `{step}`")))?;
                for (name, p) in model.params.iter() {
                    for map in [&m, &v] {
                        if map.get(name).map(Vec::len) != Some(p.numel()) {
                            return Err(r.err(format!(
                                "optimizer state for {name} is missing or mis-sized"
                            )));
                        }
                    }
                }
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        let mut extra = Manifest::new();
        for (k, val) in manifest.iter() {
            if let Some(k) = k.strip_prefix("extra.") {
                extra.set(k, val);
            }
        }
        Ok(Checkpoint {
            model,
            optimizer,
            extra,
        })
    }
}

/// Precision recorded in a checkpoint file, read without decoding blobs.
pub fn peek_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CKPT_MAGIC {
        return Err(r.err("not a checkpoint (bad magic)".into()));
    }
    r.u32()?;
    let manifest = Manifest::parse(&r.string()?, path)?;
    manifest.require("precision")?.parse().map_err(Error::Data)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: String) -> Error {
        Error::format(self.path, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!(
                "truncated: need {n} bytes at offset {}, only {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("name is not UTF-8".into()))
    }
}
