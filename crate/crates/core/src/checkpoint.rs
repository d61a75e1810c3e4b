//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes   "SCFCKPT\0"
//! version      u32 LE
//! header_len   u32 LE, followed by a UTF-8 JSON header
//!              {arch, rank, alpha, adapter_enabled, version, seed, ema}
//! tensor_count u32 LE, then per tensor:
//!   name_len u32, name bytes, ndim u32, dims u64 x ndim, data f64 LE
//! ```
//!
//! Tensors are `layer{i}.weight`, `layer{i}.bias`, `layer{i}.lora_a`,
//! `layer{i}.lora_b`, and for the EMA shadow `ema.shadow`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Adapter, Arch, Dense, ModelParams, Trainable};
use crate::optim::EmaShadow;

pub const MAGIC: &[u8; 8] = b"SCFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: Arch,
    rank: usize,
    alpha: f64,
    adapter_enabled: bool,
    version: u64,
    seed: u64,
    ema: Option<EmaHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmaHeader {
    decay: f64,
    update_interval: u64,
    tracks: Trainable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub ema: Option<EmaShadow>,
}

struct Tensor {
    name: String,
    dims: Vec<u64>,
    data: Vec<f64>,
}

fn tensors_of(ckpt: &Checkpoint) -> Vec<Tensor> {
    let p = &ckpt.params;
    let mut out = Vec::new();
    for (i, (layer, ad)) in p.layers.iter().zip(&p.adapters).enumerate() {
        let (fi, fo, r) = (layer.fan_in as u64, layer.fan_out as u64, p.rank as u64);
        out.push(Tensor { name: format!("layer{i}.weight"), dims: vec![fo, fi], data: layer.weight.clone() });
        out.push(Tensor { name: format!("layer{i}.bias"), dims: vec![fo], data: layer.bias.clone() });
        out.push(Tensor { name: format!("layer{i}.lora_a"), dims: vec![r, fi], data: ad.a.clone() });
        out.push(Tensor { name: format!("layer{i}.lora_b"), dims: vec![fo, r], data: ad.b.clone() });
    }
    if let Some(ema) = &ckpt.ema {
        out.push(Tensor {
            name: "ema.shadow".into(),
            dims: vec![ema.shadow.len() as u64],
            data: ema.shadow.clone(),
        });
    }
    out
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ckpt.params;
    let header = Header {
        arch: p.arch.clone(),
        rank: p.rank,
        alpha: p.alpha,
        adapter_enabled: p.adapter_enabled,
        version: p.version,
        seed: p.seed,
        ema: ckpt.ema.as_ref().map(|e| EmaHeader {
            decay: e.decay,
            update_interval: e.update_interval,
            tracks: e.tracks,
        }),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let tensors = tensors_of(ckpt);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (h, t) = self.bytes.split_at(n);
        self.bytes = t;
        Ok(h)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n: u64 = dims.iter().product();
        let raw = r.take(n as usize * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect::<Vec<_>>();
        tensors.insert(name, (dims, data));
    }
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let mut take = |name: &str, dims: &[u64]| -> Result<Vec<f64>> {
        let (d, data) = tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if d != dims {
            return Err(Error::Checkpoint(format!("tensor {name} has shape {d:?}, expected {dims:?}")));
        }
        Ok(data)
    };
    let r = header.rank as u64;
    let mut layers = Vec::new();
    let mut adapters = Vec::new();
    for (i, (fan_in, fan_out)) in header.arch.layer_dims().into_iter().enumerate() {
        let (fi, fo) = (fan_in as u64, fan_out as u64);
        layers.push(Dense {
            fan_in,
            fan_out,
            weight: take(&format!("layer{i}.weight"), &[fo, fi])?,
            bias: take(&format!("layer{i}.bias"), &[fo])?,
        });
        adapters.push(Adapter {
            a: take(&format!("layer{i}.lora_a"), &[r, fi])?,
            b: take(&format!("layer{i}.lora_b"), &[fo, r])?,
        });
    }
    let params = ModelParams {
        arch: header.arch,
        layers,
        adapters,
        rank: header.rank,
        alpha: header.alpha,
        adapter_enabled: header.adapter_enabled,
        version: header.version,
        seed: header.seed,
    };
    let ema = match header.ema {
        Some(e) => {
            let n = params.trainable_len(e.tracks) as u64;
            Some(EmaShadow {
                shadow: take("ema.shadow", &[n])?,
                decay: e.decay,
                update_interval: e.update_interval,
                tracks: e.tracks,
            })
        }
        None => None,
    };
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(Checkpoint { params, ema })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn sample() -> Checkpoint {
        let arch = Arch { data_dim: 2, cond_dim: 4, time_freqs: 6, hidden: vec![8, 8] };
        let mut params = init_model(&arch, 2, 4.0, 5).unwrap();
        params.version = 17;
        let ema = EmaShadow::new(&params, Trainable::Adapters, 0.9, 8).unwrap();
        Checkpoint { params, ema: Some(ema) }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = encode(&c).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(decode(&bytes).unwrap(), c);
        assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        save(&path, &c).unwrap();
        assert_eq!(load(&path).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&sample()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
