//! FLCK checkpoint files: a JSON header with config and progress, then
//! named f32 parameter tensors in canonical order, then an optional
//! optimizer section. Single-precision training state round-trips
//! bitwise; double-precision state is rounded to f32 on save.
//!
//! Layout (little-endian):
//!   magic "FLCK", u32 version = 1,
//!   u64 header-JSON length, header JSON,
//!   u64 tensor count, per tensor: u16 name length, name, u8 rank,
//!   u64 dims[rank], f32 data,
//!   u8 optimizer-present flag; if 1: u64 step, u64 tensor count,
//!   then first-moment tensors and second-moment tensors with the same
//!   framing, both in canonical parameter order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::optim::AdamState;
use crate::tensor::{Scalar, Tensor};
use crate::train::{TrainConfig, TrainState};

const FLCK_MAGIC: [u8; 4] = *b"FLCK";
const FLCK_VERSION: u32 = 1;
const MAX_RANK: u8 = 8;
const MAX_HEADER_LEN: u64 = 1 << 24;

/// Everything needed to rebuild a training run.
#[derive(Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub norm: Option<NormStats>,
    pub epochs_done: usize,
    pub params: ModelParams<f32>,
    pub opt: Option<AdamState<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm: Option<NormStats>,
    epochs_done: usize,
}

impl Checkpoint {
    /// Snapshot of live training state, cast to storage precision.
    pub fn from_state<T: Scalar>(
        state: &TrainState<T>,
        model: &ModelConfig,
        train: Option<&TrainConfig>,
        norm: Option<&NormStats>,
    ) -> Self {
        Checkpoint {
            model: model.clone(),
            train: train.cloned(),
            norm: norm.cloned(),
            epochs_done: state.epochs_done,
            params: state.params.cast::<f32>(),
            opt: Some(state.opt.cast::<f32>()),
        }
    }

    /// Rebuilds live training state in the requested precision. Missing
    /// optimizer state starts fresh with zero moments.
    pub fn into_state<T: Scalar>(&self) -> TrainState<T> {
        let params = self.params.cast::<T>();
        let opt = match &self.opt {
            Some(o) => o.cast::<T>(),
            None => {
                let refs: Vec<&Tensor<T>> = Vec::new();
                let mut fresh = AdamState::new(&refs);
                params.for_each(&mut |_, t| {
                    fresh.m.push(Tensor::zeros(t.shape()));
                    fresh.v.push(Tensor::zeros(t.shape()));
                });
                fresh
            }
        };
        TrainState {
            params,
            opt,
            epochs_done: self.epochs_done,
        }
    }
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_u16::<LittleEndian>(name.len() as u16)?;
    w.write_all(name.as_bytes())?;
    w.write_u8(t.rank() as u8)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &x in t.data() {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn checkpoint_save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    let header = serde_json::to_vec(&Header {
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        norm: ckpt.norm.clone(),
        epochs_done: ckpt.epochs_done,
    })
    .map_err(|e| Error::json(path, e))?;
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        w.write_all(&FLCK_MAGIC)?;
        w.write_u32::<LittleEndian>(FLCK_VERSION)?;
        w.write_u64::<LittleEndian>(header.len() as u64)?;
        w.write_all(&header)?;
        let named = ckpt.params.named();
        w.write_u64::<LittleEndian>(named.len() as u64)?;
        for (name, t) in &named {
            write_tensor(&mut w, name, t)?;
        }
        match &ckpt.opt {
            None => w.write_u8(0)?,
            Some(opt) => {
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(opt.step)?;
                w.write_u64::<LittleEndian>((opt.m.len() + opt.v.len()) as u64)?;
                for (moments, prefix) in [(&opt.m, "m"), (&opt.v, "v")] {
                    for ((name, _), t) in named.iter().zip(moments.iter()) {
                        write_tensor(&mut w, &format!("{}.{}", prefix, name), t)?;
                    }
                }
            }
        }
        w.flush()
    })()
    .map_err(io_err)
}

fn truncated(path: &Path, what: &str, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Truncated {
            path: path.display().to_string(),
            what: what.to_string(),
        }
    } else {
        Error::io(path, e)
    }
}

fn read_tensor<R: Read>(r: &mut R, path: &Path, what: &str) -> Result<(String, Tensor<f32>)> {
    let name_len = r
        .read_u16::<LittleEndian>()
        .map_err(|e| truncated(path, what, e))? as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)
        .map_err(|e| truncated(path, what, e))?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::CheckpointMismatch(format!("{}: tensor name is not UTF-8", what)))?;
    let rank = r.read_u8().map_err(|e| truncated(path, &name, e))?;
    if rank > MAX_RANK {
        return Err(Error::CheckpointMismatch(format!(
            "tensor {} declares rank {}",
            name, rank
        )));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut len = 1usize;
    for _ in 0..rank {
        let d = r
            .read_u64::<LittleEndian>()
            .map_err(|e| truncated(path, &name, e))? as usize;
        len = len.saturating_mul(d);
        shape.push(d);
    }
    if len > (1 << 31) {
        return Err(Error::CheckpointMismatch(format!(
            "tensor {} declares {} elements",
            name, len
        )));
    }
    let mut data = vec![0.0f32; len];
    for slot in data.iter_mut() {
        *slot = r
            .read_f32::<LittleEndian>()
            .map_err(|e| truncated(path, &name, e))?;
    }
    Ok((name, Tensor::new(&shape, data)?))
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| truncated(path, "magic", e))?;
    if magic != FLCK_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: FLCK_MAGIC,
            found: magic,
        });
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| truncated(path, "version", e))?;
    if version != FLCK_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.display().to_string(),
            found: version,
            supported: FLCK_VERSION,
        });
    }
    let header_len = r
        .read_u64::<LittleEndian>()
        .map_err(|e| truncated(path, "header length", e))?;
    if header_len > MAX_HEADER_LEN {
        return Err(Error::CheckpointMismatch(format!(
            "header declares {} bytes",
            header_len
        )));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    r.read_exact(&mut header_bytes)
        .map_err(|e| truncated(path, "header JSON", e))?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::json(path, e))?;
    header.model.validate()?;

    // Shape skeleton from the config; every stored tensor must match it.
    let mut params: ModelParams<f32> = init_params(&header.model, 0)?;
    let expected = params.tensor_count();
    let declared = r
        .read_u64::<LittleEndian>()
        .map_err(|e| truncated(path, "tensor count", e))? as usize;
    if declared != expected {
        return Err(Error::TensorCount {
            path: path.display().to_string(),
            declared: declared as u64,
            expected: expected as u64,
        });
    }
    let mut stored = Vec::with_capacity(declared);
    for i in 0..declared {
        stored.push(read_tensor(&mut r, path, &format!("tensor {}", i))?);
    }
    let mut idx = 0usize;
    let mut mismatch: Option<String> = None;
    params.for_each_mut(&mut |name, slot| {
        if mismatch.is_some() {
            return;
        }
        let (stored_name, tensor) = &stored[idx];
        if *stored_name != name {
            mismatch = Some(format!("expected tensor {}, found {}", name, stored_name));
        } else if tensor.shape() != slot.shape() {
            mismatch = Some(format!(
                "tensor {} has shape {:?}, config implies {:?}",
                name,
                tensor.shape(),
                slot.shape()
            ));
        } else {
            *slot = tensor.clone();
        }
        idx += 1;
    });
    if let Some(msg) = mismatch {
        return Err(Error::CheckpointMismatch(msg));
    }

    let flag = r.read_u8().map_err(|e| truncated(path, "optimizer flag", e))?;
    let opt = if flag == 0 {
        None
    } else {
        let step = r
            .read_u64::<LittleEndian>()
            .map_err(|e| truncated(path, "optimizer step", e))?;
        let count = r
            .read_u64::<LittleEndian>()
            .map_err(|e| truncated(path, "optimizer tensor count", e))? as usize;
        if count != 2 * expected {
            return Err(Error::TensorCount {
                path: path.display().to_string(),
                declared: count as u64,
                expected: 2 * expected as u64,
            });
        }
        let mut moments = Vec::with_capacity(count);
        for i in 0..count {
            let (name, t) = read_tensor(&mut r, path, &format!("moment {}", i))?;
            let expect_prefix = if i < expected { "m." } else { "v." };
            if !name.starts_with(expect_prefix) {
                return Err(Error::CheckpointMismatch(format!(
                    "moment {} named {}, expected prefix {}",
                    i, name, expect_prefix
                )));
            }
            moments.push(t);
        }
        let v = moments.split_off(expected);
        Some(AdamState {
            step,
            m: moments,
            v,
        })
    };

    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        norm: header.norm,
        epochs_done: header.epochs_done,
        params,
        opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Precision;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            blocks: 1,
            channels: 8,
            heads: 2,
            latents: 3,
            d_in: 3,
            d_out: 1,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn sample_checkpoint() -> Checkpoint {
        let cfg = small_cfg();
        let state = TrainState::<f32>::new(&cfg).unwrap();
        let train = TrainConfig {
            epochs: 7,
            precision: Precision::Single,
            ..TrainConfig::default()
        };
        Checkpoint::from_state(&state, &cfg, Some(&train), None)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.flck");
        let p2 = dir.path().join("b.flck");
        let ckpt = sample_checkpoint();
        checkpoint_save(&p1, &ckpt).unwrap();
        let loaded = checkpoint_load(&p1).unwrap();
        checkpoint_save(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        for ((n1, t1), (n2, t2)) in ckpt.params.named().iter().zip(loaded.params.named().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
        let (o1, o2) = (ckpt.opt.as_ref().unwrap(), loaded.opt.as_ref().unwrap());
        assert_eq!(o1.step, o2.step);
        for (a, b) in o1.m.iter().zip(&o2.m) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(loaded.epochs_done, ckpt.epochs_done);
        assert_eq!(loaded.train.as_ref().unwrap().epochs, 7);
    }

    #[test]
    fn missing_optimizer_section_loads_fresh_moments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bare.flck");
        let mut ckpt = sample_checkpoint();
        ckpt.opt = None;
        checkpoint_save(&path, &ckpt).unwrap();
        let loaded = checkpoint_load(&path).unwrap();
        assert!(loaded.opt.is_none());
        let state: TrainState<f32> = loaded.into_state();
        assert_eq!(state.opt.step, 0);
        assert!(state.opt.m.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn corrupted_magic_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.flck");
        checkpoint_save(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            checkpoint_load(&path),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn future_version_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.flck");
        checkpoint_save(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            checkpoint_load(&path),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn truncation_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.flck");
        checkpoint_save(&path, &sample_checkpoint()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match checkpoint_load(&path) {
            Err(Error::Truncated { what, .. }) => {
                assert!(!what.is_empty());
            }
            other => panic!("expected Truncated, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn tensor_count_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.flck");
        checkpoint_save(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // The count field sits right after the header JSON.
        let header_len =
            u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let count_at = 16 + header_len;
        bytes[count_at] = bytes[count_at].wrapping_add(1);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            checkpoint_load(&path),
            Err(Error::TensorCount { .. })
        ));
    }

    #[test]
    fn double_precision_state_roundtrips_through_f32() {
        let cfg = small_cfg();
        let state = TrainState::<f64>::new(&cfg).unwrap();
        let ckpt = Checkpoint::from_state(&state, &cfg, None, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.flck");
        checkpoint_save(&path, &ckpt).unwrap();
        let restored: TrainState<f64> = checkpoint_load(&path).unwrap().into_state();
        for ((_, a), (_, b)) in state.params.named().iter().zip(restored.params.named().iter()) {
            let diff = a.max_abs_diff(b).unwrap();
            assert!(diff < 1e-7, "f32 rounding drift {}", diff);
        }
    }
}
