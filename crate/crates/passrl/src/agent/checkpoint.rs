//! Versioned binary weight checkpoints: a JSON metadata header followed
//! by raw little-endian f64 tensor data in the network's canonical
//! order. Round-trips are bit-exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::net::{NetConfig, QNetwork};
use crate::action::ActionLevel;

const MAGIC: &[u8; 8] = b"PASSRLQ\x01";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub level: ActionLevel,
    pub input_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub n_actions: usize,
    pub mu_max: usize,
    pub train_step: u64,
    pub optimizer: String,
    /// Encoder vocabulary, so a checkpoint can re-encode states by itself.
    pub vocab: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
}

pub fn save_checkpoint(
    path: &Path,
    net: &QNetwork,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let meta_json = serde_json::to_vec(meta)?;
    w.write_all(&(meta_json.len() as u64).to_le_bytes())?;
    w.write_all(&meta_json)?;

    let (mats, vecs) = net.tensors();
    w.write_all(&(mats.len() as u64).to_le_bytes())?;
    for m in mats {
        w.write_all(&[2u8])?;
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for &v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&(vecs.len() as u64).to_le_bytes())?;
    for vec in vecs {
        w.write_all(&[1u8])?;
        w.write_all(&(vec.len() as u64).to_le_bytes())?;
        for &v in vec.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(QNetwork, CheckpointMeta), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_json = vec![0u8; meta_len];
    r.read_exact(&mut meta_json)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_json)?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(meta.format_version));
    }

    let mut net = QNetwork::zeros(NetConfig {
        input_dim: meta.input_dim,
        width: meta.width,
        blocks: meta.blocks,
        n_actions: meta.n_actions,
    });
    {
        let (mats, vecs) = net.tensors_mut();
        let mat_count = read_u64(&mut r)? as usize;
        if mat_count != mats.len() {
            return Err(CheckpointError::Corrupt(format!(
                "expected {} matrices, file has {mat_count}",
                mats.len()
            )));
        }
        for m in mats {
            expect_rank(&mut r, 2)?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            if (rows, cols) != (m.nrows(), m.ncols()) {
                return Err(CheckpointError::Corrupt(format!(
                    "matrix shape {rows}x{cols} does not match network {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            for v in m.iter_mut() {
                *v = read_f64(&mut r)?;
            }
        }
        let vec_count = read_u64(&mut r)? as usize;
        if vec_count != vecs.len() {
            return Err(CheckpointError::Corrupt(format!(
                "expected {} vectors, file has {vec_count}",
                vecs.len()
            )));
        }
        for vec in vecs {
            expect_rank(&mut r, 1)?;
            let len = read_u64(&mut r)? as usize;
            if len != vec.len() {
                return Err(CheckpointError::Corrupt(format!(
                    "vector length {len} does not match network {}",
                    vec.len()
                )));
            }
            for v in vec.iter_mut() {
                *v = read_f64(&mut r)?;
            }
        }
    }
    Ok((net, meta))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn expect_rank(r: &mut impl Read, rank: u8) -> Result<(), CheckpointError> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    if buf[0] != rank {
        return Err(CheckpointError::Corrupt(format!(
            "expected rank-{rank} tensor, found rank {}",
            buf[0]
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn meta(net: &QNetwork) -> CheckpointMeta {
        let cfg = net.config();
        CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            level: ActionLevel::H,
            input_dim: cfg.input_dim,
            width: cfg.width,
            blocks: cfg.blocks,
            n_actions: cfg.n_actions,
            mu_max: 16,
            train_step: 1234,
            optimizer: "adam".into(),
            vocab: vec!["add".into(), "other".into()],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let net = QNetwork::new(
            NetConfig { input_dim: 7, width: 6, blocks: 2, n_actions: 4 },
            &mut rng,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.qnet");
        save_checkpoint(&path, &net, &meta(&net)).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, net);
        assert_eq!(loaded_meta.train_step, 1234);
        assert_eq!(loaded_meta.vocab, ["add", "other"]);
    }

    #[test]
    fn garbage_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
    }
}
