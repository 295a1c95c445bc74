//! Single-file model bundles.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MEMEFUSE1"  u32 version
//! u32 n  config text (n bytes, canonical key=value lines)
//! [u8; 32] replacement-lexicon digest
//! u32 embedding dim
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rank, rank × u32 dims, u64 offset
//! tensor payloads in MFT1 encoding, offsets relative to the first payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::fusion::{Ensemble, Member};
use crate::nn::Params;
use crate::rng::Rng;
use crate::tensor::{read_u32, Tensor};

pub const BUNDLE_MAGIC: &[u8; 9] = b"MEMEFUSE1";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    /// Must carry `model.*` input widths.
    pub config: Config,
    pub lexicon_digest: [u8; 32],
    pub embedding_dim: usize,
    pub ensemble: Ensemble,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn fmt(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn truncated(e: std::io::Error) -> Error {
    fmt(format!("truncated bundle: {e}"))
}

fn read_exact_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf).map_err(truncated)?;
    if buf.len() != n {
        return Err(fmt(format!("truncated bundle: wanted {n} bytes, found {}", buf.len())));
    }
    Ok(buf)
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        put_u32(&mut out, BUNDLE_VERSION as usize);
        let text = self.config.to_text();
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.lexicon_digest);
        put_u32(&mut out, self.embedding_dim);

        let tensors = self.ensemble.named_tensors("");
        put_u32(&mut out, tensors.len());
        let mut offset = 0u64;
        for (name, t) in &tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.encoded_len() as u64;
        }
        for (_, t) in &tensors {
            t.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let magic = read_exact_vec(&mut r, BUNDLE_MAGIC.len())?;
        if magic != BUNDLE_MAGIC {
            return Err(fmt("not a model bundle (bad magic)"));
        }
        let version = read_u32(&mut r).map_err(truncated)?;
        if version != BUNDLE_VERSION {
            return Err(fmt(format!("unsupported bundle version {version}")));
        }
        let text_len = read_u32(&mut r).map_err(truncated)? as usize;
        let text = String::from_utf8(read_exact_vec(&mut r, text_len)?).map_err(|_| fmt("config is not UTF-8"))?;
        let config = Config::parse(&text, "bundle config")?;
        let mut lexicon_digest = [0u8; 32];
        r.read_exact(&mut lexicon_digest).map_err(truncated)?;
        let embedding_dim = read_u32(&mut r).map_err(truncated)? as usize;

        let count = read_u32(&mut r).map_err(truncated)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = read_u32(&mut r).map_err(truncated)? as usize;
            let name = String::from_utf8(read_exact_vec(&mut r, n)?).map_err(|_| fmt("tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r).map_err(truncated)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(read_u32(&mut r).map_err(truncated)? as usize);
            }
            let mut off = [0u8; 8];
            r.read_exact(&mut off).map_err(truncated)?;
            entries.push((name, shape, u64::from_le_bytes(off) as usize));
        }
        let payload = r;

        let dims = config.model_dims()?;
        if dims.embedding_dim != embedding_dim {
            return Err(fmt(format!(
                "bundle header says embedding dim {embedding_dim} but config says {}",
                dims.embedding_dim
            )));
        }
        let mut scratch = Rng::new(0);
        let members = config
            .ensemble_members
            .iter()
            .map(|&spec| Member::new(spec, &dims, &mut scratch))
            .collect::<Result<Vec<_>>>()?;
        let mut ensemble = Ensemble::new(members, config.ensemble_weights.clone())?;

        let expected: Vec<(String, Vec<usize>)> = ensemble
            .named_tensors("")
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != entries.len() {
            return Err(fmt(format!(
                "bundle holds {} tensors but the configured model has {}",
                entries.len(),
                expected.len()
            )));
        }
        let mut end = 0;
        for (slot, ((name, shape, offset), (want_name, want_shape))) in
            ensemble.tensors_mut().into_iter().zip(entries.iter().zip(&expected))
        {
            if name != want_name || shape != want_shape {
                return Err(fmt(format!(
                    "bundle tensor {name} {shape:?} does not match expected {want_name} {want_shape:?}"
                )));
            }
            let mut at = payload
                .get(*offset..)
                .ok_or_else(|| fmt(format!("tensor {name} offset {offset} is past the end")))?;
            let before = at.len();
            let t = Tensor::read_from(&mut at)?;
            if t.shape() != shape.as_slice() {
                return Err(fmt(format!("tensor {name} payload shape {:?} disagrees with its entry", t.shape())));
            }
            end = end.max(offset + (before - at.len()));
            *slot = t;
        }
        if end != payload.len() {
            return Err(fmt(format!("{} unexpected trailing bytes", payload.len() - end)));
        }
        Ok(ModelBundle {
            config,
            lexicon_digest,
            embedding_dim,
            ensemble,
        })
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ModelBundle::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Atomic replace: write a sibling temp file, flush, rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
