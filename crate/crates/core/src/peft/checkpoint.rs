//! Adapter-only checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"PFADAPT\0"
//! version  u32
//! spec     u64   base-model fingerprint
//! config   u32 length + JSON RawTunerConfig
//! count    u32
//! count × { u32 name length, name, u32 rank, rank × u64 extent, f64 payload }
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::attach::{attach, AttachHandle};
use super::config::{parse_config, RawTunerConfig};
use super::registry::MethodRegistry;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 8] = b"PFADAPT\0";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterCheckpoint {
    pub version: u32,
    pub spec_fingerprint: u64,
    pub config: RawTunerConfig,
    pub tensors: Vec<(String, Tensor)>,
}

/// Serializes the handle's trainable tensors; frozen base tensors are never written.
pub fn encode_adapter(model: &TransformerModel, handle: &AttachHandle) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&model.spec().fingerprint().to_le_bytes());
    let config = serde_json::to_vec(&handle.config.to_raw()).map_err(|e| Error::Runtime(e.to_string()))?;
    put_len(&mut buf, config.len())?;
    buf.extend_from_slice(&config);

    let names: Vec<&str> = handle.trainable().collect();
    put_len(&mut buf, names.len())?;
    for name in names {
        if handle.frozen.iter().any(|f| f == name) {
            return Err(Error::State(format!("refusing to write frozen tensor '{name}'")));
        }
        let t = model.params.expect(name)?;
        put_len(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_len(&mut buf, t.rank())?;
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_adapter(model: &TransformerModel, handle: &AttachHandle, path: &Path) -> Result<()> {
    let bytes = encode_adapter(model, handle)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn put_len(buf: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Runtime(format!("length {n} exceeds u32")))?;
    buf.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Compatibility(format!("malformed adapter checkpoint: {}", msg.into()))
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let remaining = self.0.get_ref().len() as u64 - self.0.position();
        if n as u64 > remaining {
            return Err(corrupt("unexpected end of file"));
        }
        let mut out = vec![0; n];
        self.0.read_exact(&mut out).map_err(|e| corrupt(e.to_string()))?;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

pub fn decode_adapter(bytes: &[u8]) -> Result<AdapterCheckpoint> {
    let mut r = Reader(Cursor::new(bytes));
    if &r.array::<8>()? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Compatibility(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let spec_fingerprint = r.u64()?;
    let len = r.u32()? as usize;
    let config: RawTunerConfig =
        serde_json::from_slice(&r.bytes(len)?).map_err(|e| corrupt(format!("config: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| corrupt("extent overflow"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| corrupt("tensor too large"))?;
        let data = r
            .bytes(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor '{name}': {e}")))?;
        tensors.push((name, t));
    }
    if r.0.position() as usize != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(AdapterCheckpoint {
        version,
        spec_fingerprint,
        config,
        tensors,
    })
}

pub fn read_adapter(path: &Path) -> Result<AdapterCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_adapter(&bytes)
}

/// Re-attaches the stored method onto a fresh `model` and restores its tensors.
pub fn load_adapter(model: &mut TransformerModel, registry: &MethodRegistry, path: &Path) -> Result<AttachHandle> {
    let ckpt = read_adapter(path)?;
    let expected = model.spec().fingerprint();
    if ckpt.spec_fingerprint != expected {
        return Err(Error::Compatibility(format!(
            "checkpoint was trained for base model {:016x}, this model is {expected:016x}",
            ckpt.spec_fingerprint
        )));
    }
    let config = parse_config(registry, &ckpt.config.peft_type, &ckpt.config.values)?;

    let mut staged = model.clone();
    let handle = attach(&mut staged, registry, &config)?;
    let stored: Vec<&str> = ckpt.tensors.iter().map(|(n, _)| n.as_str()).collect();
    let mut wanted: Vec<&str> = handle.trainable().collect();
    wanted.sort_unstable();
    let mut have = stored.clone();
    have.sort_unstable();
    if have != wanted {
        return Err(Error::Compatibility(format!(
            "checkpoint tensors [{}] do not match the '{}' layout [{}]",
            stored.join(", "),
            handle.peft_type,
            wanted.join(", ")
        )));
    }
    for (name, t) in ckpt.tensors {
        let slot = staged.params.get_mut(&name).expect("checked above");
        if slot.shape() != t.shape() {
            return Err(Error::Compatibility(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    *model = staged;
    Ok(handle)
}
