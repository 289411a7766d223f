//! Versioned binary container for model parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "OFCK" | u32 format_version | u64 header_len | header JSON | sha256(header)
//! u32 tensor_count
//! per tensor: u32 name_len | name | u8 dtype | u32 ndim | u64 dims.. | u64 byte_len | bytes | sha256
//! ```
//!
//! The per-tensor digest covers name, dtype, shape and data bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bag_net::{BagNet, BagNetConfig};
use crate::error::{Error, Result};
use crate::imaging::Geometry;
use crate::ingest::{ClassId, ClassVocab};
use crate::patch_net::{PatchNet, PatchNetConfig};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"OFCK";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// "patch_net" or "bag_net".
    pub kind: String,
    pub config: serde_json::Value,
    pub class_vocab: ClassVocab,
    pub rng_seed: u64,
    /// Digest of the serialized config.
    pub config_hash: String,
    /// Content hash of the checkpoint this one was derived from, if any.
    pub parent: Option<String>,
    #[serde(default)]
    pub geometry: Option<Geometry>,
    /// Class id behind each output of a patch network.
    #[serde(default)]
    pub output_classes: Option<Vec<ClassId>>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn tensor_digest(name: &str, t: &Tensor, data: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update([DTYPE_F64]);
    for d in &t.shape {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(data);
    h.finalize().into()
}

pub fn encode(header: &CheckpointHeader, params: &ParamSet) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header.format_version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&Sha256::digest(&json));
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let data: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        out.extend_from_slice(&data);
        out.extend_from_slice(&tensor_digest(name, t, &data));
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity(format!("file truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Integrity(format!("implausible {what} {v}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, ParamSet)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = r.len("header length")?;
    let json = r.take(hlen, "header")?;
    let digest = r.take(32, "header checksum")?;
    if Sha256::digest(json).as_slice() != digest {
        return Err(Error::Integrity("header checksum mismatch".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for i in 0..count {
        let nlen = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::Integrity(format!("tensor {i}: name is not utf-8")))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Integrity(format!("tensor {name}: unknown dtype tag {dtype}")));
        }
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.len("dimension")?);
        }
        let blen = r.len("data length")?;
        let data = r.take(blen, &format!("data of {name}"))?;
        let sum = r.take(32, &format!("checksum of {name}"))?;
        let numel: usize = shape.iter().product();
        if blen != numel * 8 {
            return Err(Error::Integrity(format!("tensor {name}: {blen} bytes for shape {shape:?}")));
        }
        let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor { shape, data: values };
        if tensor_digest(&name, &t, data) != sum {
            return Err(Error::Integrity(format!("tensor {name}: checksum mismatch")));
        }
        params.push(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, params))
}

pub fn save(path: &Path, header: &CheckpointHeader, params: &ParamSet) -> Result<String> {
    let bytes = encode(header, params)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Loads a checkpoint and returns it with the content hash of the file.
pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamSet, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, p) = decode(&bytes)?;
    Ok((h, p, sha256_hex(&bytes)))
}

fn header_for<C: Serialize>(kind: &str, cfg: &C, vocab: &ClassVocab, seed: u64) -> Result<CheckpointHeader> {
    let config = serde_json::to_value(cfg)?;
    let config_hash = sha256_hex(serde_json::to_string(&config)?.as_bytes());
    Ok(CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config,
        class_vocab: vocab.clone(),
        rng_seed: seed,
        config_hash,
        parent: None,
        geometry: None,
        output_classes: None,
    })
}

/// `classes[i]` is the class id behind output `i`.
pub fn save_patch_net(
    path: &Path,
    net: &PatchNet,
    vocab: &ClassVocab,
    classes: &[ClassId],
    geom: &Geometry,
    seed: u64,
) -> Result<String> {
    if classes.len() != net.config().num_classes || classes.iter().any(|c| !vocab.contains(*c)) {
        return Err(Error::precondition("patch net outputs must map onto vocabulary classes"));
    }
    let mut h = header_for("patch_net", net.config(), vocab, seed)?;
    h.geometry = Some(*geom);
    h.output_classes = Some(classes.to_vec());
    save(path, &h, net.params())
}

pub struct LoadedPatchNet {
    pub net: PatchNet,
    pub vocab: ClassVocab,
    pub classes: Vec<ClassId>,
    pub geometry: Geometry,
    pub hash: String,
}

pub fn load_patch_net(path: &Path) -> Result<LoadedPatchNet> {
    let (h, params, hash) = load(path)?;
    if h.kind != "patch_net" {
        return Err(Error::Integrity(format!("{} holds a {} model, expected patch_net", path.display(), h.kind)));
    }
    let cfg: PatchNetConfig =
        serde_json::from_value(h.config).map_err(|e| Error::Integrity(format!("patch net config: {e}")))?;
    let geometry = h.geometry.ok_or_else(|| Error::Integrity("patch net checkpoint lacks geometry".into()))?;
    let classes = h.output_classes.ok_or_else(|| Error::Integrity("patch net checkpoint lacks output classes".into()))?;
    if classes.len() != cfg.num_classes {
        return Err(Error::Integrity("patch net output classes disagree with its config".into()));
    }
    Ok(LoadedPatchNet {
        net: PatchNet::from_params(cfg, params)?,
        vocab: h.class_vocab,
        classes,
        geometry,
        hash,
    })
}

/// `parent` is the content hash of the patch network the bag model was
/// trained on.
pub fn save_bag_net(path: &Path, net: &BagNet, vocab: &ClassVocab, seed: u64, parent: &str) -> Result<String> {
    let mut h = header_for("bag_net", net.config(), vocab, seed)?;
    h.parent = Some(parent.to_string());
    save(path, &h, net.params())
}

pub struct LoadedBagNet {
    pub net: BagNet,
    pub vocab: ClassVocab,
    pub parent: String,
    pub hash: String,
}

pub fn load_bag_net(path: &Path) -> Result<LoadedBagNet> {
    let (h, params, hash) = load(path)?;
    if h.kind != "bag_net" {
        return Err(Error::Integrity(format!("{} holds a {} model, expected bag_net", path.display(), h.kind)));
    }
    let cfg: BagNetConfig = serde_json::from_value(h.config).map_err(|e| Error::Integrity(format!("bag net config: {e}")))?;
    let setpoints = h.class_vocab.setpoints().to_vec();
    Ok(LoadedBagNet {
        net: BagNet::from_params(cfg, setpoints, params)?,
        vocab: h.class_vocab,
        parent: h.parent.unwrap_or_default(),
        hash,
    })
}
