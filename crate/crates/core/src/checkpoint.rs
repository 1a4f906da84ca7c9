//! Binary checkpoints. All integers and floats are little-endian; weights are
//! stored as f32 in row-major order.
//!
//! Adapter file (`FLRA`, one modality per file):
//! magic, u16 version, u32 d_model, u32 rank, u32 n_sites, u32 activation id,
//! then per site a path string (`u16` length + UTF-8, e.g.
//! `audio.enc.0.post_attn`) followed by `W_D`, `H`, `W_U`.
//!
//! Backbone file (`FLBB`): magic, u16 version, u32 field count and the model
//! config fields, u32 entry count, then per entry a path string, u8 rank,
//! u32 dims and the data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::adapters::{AdapterParams, AdapterSet, AdapterSiteId};
use crate::autograd::Activation;
use crate::backbone::check_store;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::params::{FreezePolicy, ParamStore};
use crate::tensor::Tensor;

pub const ADAPTER_MAGIC: &[u8; 4] = b"FLRA";
pub const BACKBONE_MAGIC: &[u8; 4] = b"FLBB";
pub const FORMAT_VERSION: u16 = 1;

const CONFIG_FIELDS: u32 = 12;

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Checkpoint(format!("path too long: {s:?}")))?;
    put_u16(buf, len);
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, data: &[f64]) {
    for &x in data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("path is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4).map_err(|_| Error::Checkpoint("file too short for a header".into()))?;
        if m != magic {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last entry",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes the adapters of one modality.
pub fn encode_adapters(set: &AdapterSet, m: Modality) -> Result<Vec<u8>> {
    if !set.modalities().contains(m) {
        return Err(Error::MissingAdapter(m));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(ADAPTER_MAGIC);
    put_u16(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, set.d_model())?;
    put_u32(&mut buf, set.rank())?;
    put_u32(&mut buf, set.sites().len())?;
    put_u32(&mut buf, set.activation().id() as usize)?;
    for &site in set.sites() {
        let a = set.get(m, site).ok_or(Error::MissingAdapter(m))?;
        put_str(&mut buf, &format!("{}.{site}", m.name()))?;
        for (_, t) in a.tensors() {
            put_f32s(&mut buf, t.data());
        }
    }
    Ok(buf)
}

/// Parses one adapter file against `config`; the result holds exactly one
/// modality, active.
pub fn decode_adapters(bytes: &[u8], config: &ModelConfig) -> Result<AdapterSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(ADAPTER_MAGIC)?;
    let (d, rank, n_sites, act) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let activation = Activation::from_id(act as u32)
        .ok_or_else(|| Error::Checkpoint(format!("unknown activation id {act}")))?;
    if d != config.d_model || rank != config.adapter_rank || n_sites != config.n_sites() {
        return Err(Error::Checkpoint(format!(
            "adapter file has d_model {d}, rank {rank}, {n_sites} sites; config expects {}, {}, {}",
            config.d_model,
            config.adapter_rank,
            config.n_sites()
        )));
    }
    if activation != config.activation {
        return Err(Error::Checkpoint(format!(
            "adapter file uses {} but config uses {}",
            activation.name(),
            config.activation.name()
        )));
    }
    let mut modality = None;
    let mut sites = BTreeMap::new();
    for _ in 0..n_sites {
        let path = r.string()?;
        let (m, site) = path
            .split_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("bad adapter path {path:?}")))?;
        let m: Modality = m.parse().map_err(|_| Error::Checkpoint(format!("bad adapter path {path:?}")))?;
        if *modality.get_or_insert(m) != m {
            return Err(Error::Checkpoint("adapter file mixes modalities".into()));
        }
        let site = AdapterSiteId::parse(site)?;
        let params = AdapterParams {
            w_down: Tensor::new(vec![d, rank], r.f32s(d * rank)?)?,
            hidden: Tensor::new(vec![rank, rank], r.f32s(rank * rank)?)?,
            w_up: Tensor::new(vec![rank, d], r.f32s(rank * d)?)?,
            activation,
        };
        if sites.insert(site, params).is_some() {
            return Err(Error::Checkpoint(format!("duplicate site {site}")));
        }
    }
    r.finish()?;
    let mut set = AdapterSet::empty(config);
    if let Some(m) = modality {
        set.insert_modality(m, sites)?;
    }
    Ok(set)
}

pub fn save_adapters(set: &AdapterSet, m: Modality, path: &Path) -> Result<()> {
    write_atomic(path, &encode_adapters(set, m)?)
}

pub fn load_adapters(path: &Path, config: &ModelConfig) -> Result<AdapterSet> {
    decode_adapters(&fs::read(path)?, config)
}

fn config_fields(c: &ModelConfig) -> [usize; CONFIG_FIELDS as usize] {
    [
        c.d_model,
        c.n_enc_layers,
        c.n_dec_layers,
        c.n_heads,
        c.d_ff,
        c.vocab_size,
        c.max_seq_len,
        c.d_audio,
        c.d_video,
        c.adapter_rank,
        c.prefix_rank,
        c.activation.id() as usize,
    ]
}

/// Serializes a parameter store (complete or partial) with its config.
pub fn encode_params(config: &ModelConfig, store: &ParamStore) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BACKBONE_MAGIC);
    put_u16(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, CONFIG_FIELDS as usize)?;
    for v in config_fields(config) {
        put_u32(&mut buf, v)?;
    }
    put_u32(&mut buf, store.len())?;
    for (path, p) in store.iter() {
        put_str(&mut buf, path)?;
        let shape = p.tensor.shape();
        buf.push(u8::try_from(shape.len()).map_err(|_| Error::Checkpoint("too many dims".into()))?);
        for &s in shape {
            put_u32(&mut buf, s)?;
        }
        put_f32s(&mut buf, p.tensor.data());
    }
    Ok(buf)
}

/// Parses a backbone-container file. Entries come back with the adapter-mode
/// freeze policy.
pub fn decode_params(bytes: &[u8]) -> Result<(ModelConfig, ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(BACKBONE_MAGIC)?;
    let n_fields = r.u32()?;
    if n_fields != CONFIG_FIELDS as usize {
        return Err(Error::Checkpoint(format!(
            "config block has {n_fields} fields, expected {CONFIG_FIELDS}"
        )));
    }
    let mut f = [0usize; CONFIG_FIELDS as usize];
    for v in f.iter_mut() {
        *v = r.u32()?;
    }
    let activation = Activation::from_id(f[11] as u32)
        .ok_or_else(|| Error::Checkpoint(format!("unknown activation id {}", f[11])))?;
    let config = ModelConfig {
        d_model: f[0],
        n_enc_layers: f[1],
        n_dec_layers: f[2],
        n_heads: f[3],
        d_ff: f[4],
        vocab_size: f[5],
        max_seq_len: f[6],
        d_audio: f[7],
        d_video: f[8],
        adapter_rank: f[9],
        prefix_rank: f[10],
        activation,
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let path = r.string()?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &s| a.checked_mul(s));
        let numel = numel.ok_or_else(|| Error::Checkpoint("size overflow".into()))?;
        let t = Tensor::new(shape, r.f32s(numel)?).map_err(|e| Error::Checkpoint(format!("{path}: {e}")))?;
        if store.contains(&path) {
            return Err(Error::Checkpoint(format!("duplicate entry {path:?}")));
        }
        store.insert(path, t, false);
    }
    r.finish()?;
    store.apply_policy(FreezePolicy::AdapterMode);
    Ok((config, store))
}

pub fn save_params(config: &ModelConfig, store: &ParamStore, path: &Path) -> Result<()> {
    write_atomic(path, &encode_params(config, store)?)
}

/// Loads a partial or complete parameter file.
pub fn load_params(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    decode_params(&fs::read(path)?)
}

/// Loads a complete backbone and checks it against its own config.
pub fn load_backbone(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let (config, store) = load_params(path)?;
    check_store(&config, &store)?;
    Ok((config, store))
}
