//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic, u32 format version, phase tag (u16 length +
//! UTF-8), u32 block count, then per block: u16 name length, name bytes,
//! u8 ndim, u32 dims, f64 little-endian data. A SHA-256 checksum of
//! everything preceding it closes the file.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{PipelineError, PipelineResult};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"CTXCKPT1";
const VERSION: u32 = 1;

/// A named set of parameter blocks plus the training-phase tag.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub phase: String,
    pub blocks: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.phase.len() as u16).to_le_bytes());
        out.extend_from_slice(self.phase.as_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> PipelineResult<Self> {
        let fail = |s: &str| PipelineError::Checkpoint(s.to_string());
        if bytes.len() < MAGIC.len() + 4 + 2 + 4 + 32 {
            return Err(fail("file too short"));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != checksum {
            return Err(fail("checksum mismatch"));
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> PipelineResult<&[u8]> {
            if *pos + n > body.len() {
                return Err(fail("truncated"));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let phase_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let phase = String::from_utf8(take(&mut pos, phase_len)?.to_vec())
            .map_err(|_| fail("phase tag not utf-8"))?;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| fail("name not utf-8"))?;
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blocks.push((name, shape, data));
        }
        if pos != body.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(Self { phase, blocks })
    }

    pub fn save(&self, path: &Path) -> PipelineResult<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> PipelineResult<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// SHA-256 digests of every parameter, keyed by name. Used to verify the
/// per-phase freeze contracts.
pub fn parameter_hashes(
    visit: impl FnOnce(&mut dyn FnMut(String, &Tensor)),
) -> BTreeMap<String, [u8; 32]> {
    let mut out = BTreeMap::new();
    visit(&mut |name, t| {
        let mut hasher = Sha256::new();
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
        out.insert(name, hasher.finalize().into());
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_blocks_and_phase() {
        let ck = Checkpoint {
            phase: "main".into(),
            blocks: vec![
                ("a.w".into(), vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, f64::MIN]),
                ("b".into(), vec![1], vec![42.0]),
            ],
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.phase, "main");
        assert_eq!(back.blocks.len(), 2);
        assert_eq!(back.blocks[0].2, ck.blocks[0].2);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let ck = Checkpoint {
            phase: "main".into(),
            blocks: vec![("x".into(), vec![1], vec![1.0])],
        };
        let mut bytes = ck.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(PipelineError::Checkpoint(_))
        ));
    }
}
