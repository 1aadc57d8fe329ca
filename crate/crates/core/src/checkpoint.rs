//! Versioned binary checkpoint: magic, format version, JSON header
//! (configs, learner tag, progress, tensor manifest), then raw
//! little-endian f64 tensor payloads in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::encoder::{AdamState, EncoderConfig, HeadDims, ParamSet};
use crate::error::SluError;
use crate::learners::{LearnerKind, TrainState};
use crate::tensor::{Tensor, TensorMap};

const MAGIC: &[u8; 8] = b"SLUCHKPT";
const VERSION: u32 = 1;

/// A pretraining checkpoint: learner tag, seed, and full training state.
/// The RNG needs no cursor — all streams are derived from (run_seed,
/// epoch/episode indices), so run_seed plus epochs_done resumes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub learner: LearnerKind,
    pub run_seed: u64,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    learner: LearnerKind,
    run_seed: u64,
    epochs_done: usize,
    encoder: EncoderConfig,
    head_dims: Option<HeadDims>,
    adam_step: u64,
    params: Vec<TensorEntry>,
    adam_m: Vec<TensorEntry>,
    adam_v: Vec<TensorEntry>,
}

fn manifest(map: &TensorMap) -> Vec<TensorEntry> {
    map.iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
        })
        .collect()
}

fn write_payload<W: Write>(w: &mut W, map: &TensorMap, path: &Path) -> Result<(), SluError> {
    for t in map.values() {
        for &v in &t.data {
            w.write_f64::<LittleEndian>(v)
                .map_err(|e| SluError::io(path, e))?;
        }
    }
    Ok(())
}

fn read_payload<R: Read>(
    r: &mut R,
    entries: &[TensorEntry],
    path: &Path,
) -> Result<TensorMap, SluError> {
    let mut map = TensorMap::new();
    for entry in entries {
        let len: usize = entry.shape.iter().product();
        let mut data = vec![0.0; len];
        r.read_f64_into::<LittleEndian>(&mut data)
            .map_err(|e| SluError::io(path, e))?;
        let tensor = Tensor {
            shape: entry.shape.clone(),
            data,
        };
        if map.insert(entry.name.clone(), tensor).is_some() {
            return Err(SluError::Checkpoint(format!(
                "duplicate tensor {} in manifest",
                entry.name
            )));
        }
    }
    Ok(map)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), SluError> {
    let path = path.as_ref();
    let header = Header {
        learner: ckpt.learner,
        run_seed: ckpt.run_seed,
        epochs_done: ckpt.state.epochs_done,
        encoder: ckpt.state.params.encoder,
        head_dims: ckpt.state.params.head_dims,
        adam_step: ckpt.state.adam.step,
        params: manifest(&ckpt.state.params.tensors),
        adam_m: manifest(&ckpt.state.adam.m),
        adam_v: manifest(&ckpt.state.adam.v),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| SluError::Checkpoint(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path).map_err(|e| SluError::io(path, e))?);
    w.write_all(MAGIC).map_err(|e| SluError::io(path, e))?;
    w.write_u32::<LittleEndian>(VERSION)
        .map_err(|e| SluError::io(path, e))?;
    w.write_u64::<LittleEndian>(header_json.len() as u64)
        .map_err(|e| SluError::io(path, e))?;
    w.write_all(&header_json).map_err(|e| SluError::io(path, e))?;
    write_payload(&mut w, &ckpt.state.params.tensors, path)?;
    write_payload(&mut w, &ckpt.state.adam.m, path)?;
    write_payload(&mut w, &ckpt.state.adam.v, path)?;
    w.flush().map_err(|e| SluError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, SluError> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| SluError::io(path, e))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| SluError::io(path, e))?;
    if &magic != MAGIC {
        return Err(SluError::Checkpoint(format!(
            "{}: bad magic, not a checkpoint file",
            path.display()
        )));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| SluError::io(path, e))?;
    if version != VERSION {
        return Err(SluError::Checkpoint(format!(
            "{}: unsupported version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let header_len = r
        .read_u64::<LittleEndian>()
        .map_err(|e| SluError::io(path, e))? as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)
        .map_err(|e| SluError::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| SluError::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    let tensors = read_payload(&mut r, &header.params, path)?;
    let m = read_payload(&mut r, &header.adam_m, path)?;
    let v = read_payload(&mut r, &header.adam_v, path)?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => {
            return Err(SluError::Checkpoint(format!(
                "{}: trailing bytes after tensor payload",
                path.display()
            )))
        }
        Err(e) => return Err(SluError::io(path, e)),
    }
    let params = ParamSet {
        encoder: header.encoder,
        head_dims: header.head_dims,
        tensors,
    };
    params.encoder.validate()?;
    Ok(Checkpoint {
        learner: header.learner,
        run_seed: header.run_seed,
        state: TrainState {
            params,
            adam: AdamState {
                step: header.adam_step,
                m,
                v,
            },
            epochs_done: header.epochs_done,
        },
    })
}
