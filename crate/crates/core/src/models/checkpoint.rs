//! Binary checkpoint files.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "PGOR" | version u16 | config sha256 [32] | config json (u32 len + bytes)
//! | train seed u64 | metadata json (u32 len + bytes) | record count u32
//! | records: name (u16 len + utf8), rank u8, dims u32 × rank, f32 × numel
//! | sha256 of everything above [32]
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Arch, Model, ModelConfig};
use crate::numcore::Tensor;
use crate::util::write_atomic;

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"PGOR";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { found: u16, expected: u16 },
    #[error("checkpoint digest mismatch; file is corrupted")]
    Digest,
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("checkpoint holds a {found:?} model, expected {expected:?}")]
    ArchMismatch { expected: Arch, found: Arch },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub train_seed: u64,
    pub meta: serde_json::Value,
    pub records: Vec<Record>,
}

fn put_len(buf: &mut Vec<u8>, len: usize, what: &str) -> Result<(), CheckpointError> {
    let len = u32::try_from(len).map_err(|_| CheckpointError::Format(format!("{what} too large")))?;
    buf.extend_from_slice(&len.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ck.config.digest());
    let cfg = serde_json::to_vec(&ck.config).map_err(|e| CheckpointError::Format(e.to_string()))?;
    put_len(&mut buf, cfg.len(), "config")?;
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&ck.train_seed.to_le_bytes());
    let meta = serde_json::to_vec(&ck.meta).map_err(|e| CheckpointError::Format(e.to_string()))?;
    put_len(&mut buf, meta.len(), "metadata")?;
    buf.extend_from_slice(&meta);
    put_len(&mut buf, ck.records.len(), "record count")?;
    for r in &ck.records {
        let name = r.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| CheckpointError::Format("record name too long".into()))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        let dims = r.tensor.dims();
        buf.push(u8::try_from(dims.len()).map_err(|_| CheckpointError::Format("tensor rank too large".into()))?);
        for &d in dims {
            put_len(&mut buf, d, "dimension")?;
        }
        for &x in r.tensor.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 6 {
        return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            CheckpointError::BadMagic
        } else {
            CheckpointError::Truncated
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    if bytes.len() < 6 + 32 + 32 {
        return Err(CheckpointError::Truncated);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        // A shortened file also fails the digest; report it as truncation
        // when the body cannot be parsed to its end.
        return Err(match parse_body(body) {
            Err(CheckpointError::Truncated) => CheckpointError::Truncated,
            _ => CheckpointError::Digest,
        });
    }
    parse_body(body)
}

fn parse_body(body: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: body, pos: 6 };
    let cfg_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(cfg_len)?).map_err(|e| CheckpointError::Format(format!("config: {e}")))?;
    if config.digest() != cfg_digest {
        return Err(CheckpointError::Digest);
    }
    let train_seed = r.u64()?;
    let meta_len = r.u32()? as usize;
    let meta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Format(format!("metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Format("record name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        let tensor = Tensor::new(dims, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
        records.push(Record { name, tensor });
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Format("trailing bytes after records".into()));
    }
    Ok(Checkpoint { config, train_seed, meta, records })
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}

impl Model {
    pub fn to_records(&self) -> Vec<Record> {
        self.params().iter().map(|(name, t)| Record { name: name.to_string(), tensor: t.clone() }).collect()
    }

    /// Rebuilds the model for `config` and overwrites every parameter from
    /// the records with matching names.
    pub fn from_records(config: ModelConfig, records: &[Record]) -> Result<Self, CheckpointError> {
        let mut model = Model::new(config).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let name = model.params().name(id).to_string();
            let rec = records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| CheckpointError::Format(format!("missing parameter {name}")))?;
            let dst = model.params_mut().get_mut(id);
            if dst.dims() != rec.tensor.dims() {
                return Err(CheckpointError::Format(format!(
                    "parameter {name} has dims {:?}, model expects {:?}",
                    rec.tensor.dims(),
                    dst.dims()
                )));
            }
            dst.data_mut().copy_from_slice(rec.tensor.data());
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, train_seed: u64, path: &Path) -> Result<(), CheckpointError> {
    let ck = Checkpoint {
        config: model.config().clone(),
        train_seed,
        meta: serde_json::Value::Null,
        records: model.to_records(),
    };
    write_checkpoint(&ck, path)
}

/// Returns the model and the seed it was trained with.
pub fn load_checkpoint(path: &Path) -> Result<(Model, u64), CheckpointError> {
    let ck = read_checkpoint(path)?;
    Ok((Model::from_records(ck.config, &ck.records)?, ck.train_seed))
}

pub fn load_checkpoint_as(path: &Path, arch: Arch) -> Result<(Model, u64), CheckpointError> {
    let ck = read_checkpoint(path)?;
    if ck.config.arch != arch {
        return Err(CheckpointError::ArchMismatch { expected: arch, found: ck.config.arch });
    }
    Ok((Model::from_records(ck.config, &ck.records)?, ck.train_seed))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::*;
    use crate::corpus::{generate_corpus, shuffle_all, CorpusConfig};
    use crate::numcore::SeedStream;
    use rand::Rng;

    fn perturbed(arch: Arch) -> Model {
        let mut m = Model::new(tiny(arch, 6)).unwrap();
        let mut rng = SeedStream::new(8).rng();
        let ids: Vec<_> = m.params().ids().collect();
        for id in ids {
            m.params_mut().get_mut(id).data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.01..0.01));
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let docs = generate_corpus(&CorpusConfig { n_docs: 10, dim: 6, chrono_dim: 2, ..Default::default() }).unwrap();
        let inst = shuffle_all(&docs, SeedStream::new(1));
        for arch in super::super::Arch::ALL {
            let m = perturbed(arch);
            let path = dir.path().join(format!("{arch:?}.ckpt"));
            save_checkpoint(&m, 42, &path).unwrap();
            let (back, seed) = load_checkpoint(&path).unwrap();
            assert_eq!(seed, 42);
            assert_eq!(back.to_records(), m.to_records());
            for x in &inst {
                let a = m.predict_instance(x).unwrap();
                let b = back.predict_instance(x).unwrap();
                assert_eq!(a.ordering, b.ordering);
                assert_eq!(a.position_scores, b.position_scores);
            }
        }
    }

    #[test]
    fn corruption_and_version_and_arch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&perturbed(Arch::PairwiseRank), 1, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::Digest)));

        assert!(matches!(decode_checkpoint(&good[..good.len() - 100]), Err(CheckpointError::Truncated)));

        let mut old = good.clone();
        old[4] = 9;
        assert!(matches!(decode_checkpoint(&old), Err(CheckpointError::Version { found: 9, expected: 1 })));

        assert!(matches!(decode_checkpoint(b"NOPE0000"), Err(CheckpointError::BadMagic)));

        assert!(matches!(
            load_checkpoint_as(&path, Arch::Seq2Seq),
            Err(CheckpointError::ArchMismatch { expected: Arch::Seq2Seq, found: Arch::PairwiseRank })
        ));
        assert!(load_checkpoint_as(&path, Arch::PairwiseRank).is_ok());
    }

    #[test]
    fn parameter_count_matches_records() {
        let m = perturbed(Arch::PointerLstm);
        let total: usize = m.to_records().iter().map(|r| r.tensor.numel()).sum();
        assert_eq!(total, m.num_params());
    }
}
