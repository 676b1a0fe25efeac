//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                              |
//! |--------------|------------------------------------------------------|
//! | 8            | magic `DDXCKPT\0`                                    |
//! | 4            | format version (`u32`)                               |
//! | 8            | header length `n` (`u64`)                            |
//! | n            | UTF-8 JSON header: version, byte order, dims, vocab  |
//! | per block    | element count (`u64`) then `f64` values, row-major   |
//!
//! Blocks appear in the order finding embeddings, projection, bias,
//! demographic embeddings.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Dims, ModelParameters, Tensors};

pub const MAGIC: &[u8; 8] = b"DDXCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

const BLOCK_NAMES: [&str; 4] = [
    "finding_embeddings",
    "projection",
    "bias",
    "demographic_embeddings",
];

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    byte_order: String,
    dims: Dims,
    blocks: Vec<String>,
    vocab: Vocabulary,
}

pub fn write_checkpoint<W: Write>(p: &ModelParameters, mut w: W) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        byte_order: "little".into(),
        dims: p.dims,
        blocks: BLOCK_NAMES.iter().map(|s| s.to_string()).collect(),
        vocab: p.vocab.clone(),
    };
    let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for block in p.weights.blocks() {
        w.write_all(&(block.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(block.len() * 8);
        for v in block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes(p: &ModelParameters) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(p, &mut out).expect("writing to memory cannot fail");
    out
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParameters> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a ddx checkpoint (bad magic)".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let len = read_u64(&mut r)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint("header version disagrees with preamble".into()));
    }
    if header.byte_order != "little" {
        return Err(Error::Checkpoint(format!("unsupported byte order `{}`", header.byte_order)));
    }
    if header.blocks != BLOCK_NAMES {
        return Err(Error::Checkpoint(format!("unexpected block list {:?}", header.blocks)));
    }
    let dims = header.dims;
    if Dims::of(&header.vocab, dims.dim) != dims {
        return Err(Error::Checkpoint("dims disagree with vocabulary".into()));
    }

    let mut weights = Tensors::zeros(dims);
    for (name, block) in BLOCK_NAMES.iter().zip(weights.blocks_mut()) {
        let n = read_u64(&mut r)? as usize;
        if n != block.len() {
            return Err(Error::Checkpoint(format!(
                "block {name} has {n} values, expected {}",
                block.len()
            )));
        }
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        for (dst, src) in block.iter_mut().zip(buf.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().expect("8-byte chunk"));
        }
    }
    if !weights.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok(ModelParameters { vocab: header.vocab, dims, weights })
}

pub fn save(p: &ModelParameters, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(p))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParameters> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_vocabulary, read_cases};
    use crate::model::init_parameters;

    fn params() -> ModelParameters {
        let cs = read_cases(
            r#"{"id":"1","pos":["a","b"],"neg":["c"],"ddx":[{"disease":"x","p":1.0}],"source":"vignette"}"#,
        )
        .unwrap();
        let v = build_vocabulary(&[&cs], None, None).unwrap();
        init_parameters(&v, 5, 9, None).unwrap()
    }

    #[test]
    fn roundtrip() {
        let p = params();
        let bytes = to_bytes(&p);
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(p, back);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = to_bytes(&params());
        bytes[8] = 2;
        let err = read_checkpoint(bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let bytes = to_bytes(&params());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
