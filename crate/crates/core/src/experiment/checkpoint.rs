//! Binary checkpoints: an 8-byte magic, a little-endian u32 version, a u64
//! header length, a JSON header and a little-endian f64 payload.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::error::{Error, Result};
use crate::model::{InputShape, ModelConfig, TmkNet};
use crate::spd::{DomainRole, MomentumSchedule, RunningStats};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TMKNETCK";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Tensor tag for running statistics; parameters are tagged with their manifold.
const STATE_TAG: &str = "state";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TmkNet,
    pub seed: u64,
    pub config_hash: String,
    pub run: Option<RunConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    tag: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SlotEntry {
    slot: usize,
    steps: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config_hash: String,
    seed: u64,
    run: Option<RunConfig>,
    model: ModelConfig,
    input: InputShape,
    shared: bool,
    schedule: MomentumSchedule,
    roles: Vec<(usize, DomainRole)>,
    slots: Vec<SlotEntry>,
    mrt_bn_updates: u64,
    mss_bn_updates: u64,
    tensors: Vec<TensorEntry>,
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::CorruptHeader {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Serializes a checkpoint to bytes.
pub fn write_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ck.model;
    let mut payload: Vec<f64> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, tag: &str, shape: Vec<usize>, data: &[f64]| {
        tensors.push(TensorEntry {
            name,
            tag: tag.to_string(),
            shape,
            offset: payload.len(),
        });
        payload.extend_from_slice(data);
    };
    for p in m.params.iter() {
        let tag = serde_json::to_value(p.manifold)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        push(p.name.clone(), &tag, p.value.shape().to_vec(), p.value.data());
    }
    for (prefix, bn) in [("mrt_bn", &m.mrt_bn), ("mss_bn", &m.mss_bn)] {
        push(format!("state.{prefix}.mean"), STATE_TAG, vec![bn.mean.len()], &bn.mean);
        push(format!("state.{prefix}.var"), STATE_TAG, vec![bn.var.len()], &bn.var);
    }
    let mut slots = Vec::new();
    for (slot, s) in m.dsbn.slots() {
        push(format!("state.dsbn.{slot}.g_run"), STATE_TAG, s.g_run.shape().to_vec(), s.g_run.data());
        push(format!("state.dsbn.{slot}.v_run"), STATE_TAG, vec![], &[s.v_run]);
        slots.push(SlotEntry { slot, steps: s.steps });
    }
    let header = Header {
        config_hash: ck.config_hash.clone(),
        seed: ck.seed,
        run: ck.run.clone(),
        model: m.config.clone(),
        input: m.input.clone(),
        shared: m.dsbn.shared,
        schedule: m.dsbn.schedule,
        roles: m.dsbn.domains().collect(),
        slots,
        mrt_bn_updates: m.mrt_bn.updates,
        mss_bn_updates: m.mss_bn.updates,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses checkpoint bytes. `path` is only used in error messages.
pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "missing checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if header_len > body.len() {
        return Err(corrupt(path, format!("header length {header_len} exceeds file size")));
    }
    let header: Header = serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(path, e.to_string()))?;
    let raw = &body[header_len..];
    if raw.len() % 8 != 0 {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            detail: format!("payload of {} bytes is not a whole number of f64 values", raw.len()),
        });
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if expected != payload.len() {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            detail: format!("header describes {expected} values, payload holds {}", payload.len()),
        });
    }
    let slice = |t: &TensorEntry| -> Result<&[f64]> {
        let n: usize = t.shape.iter().product();
        payload
            .get(t.offset..t.offset + n)
            .ok_or_else(|| corrupt(path, format!("tensor {} lies outside the payload", t.name)))
    };
    let find = |name: &str| -> Result<&TensorEntry> {
        header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| corrupt(path, format!("missing tensor {name}")))
    };

    let mut config = header.model.clone();
    config.shared_bn = header.shared;
    config.backbone.momentum = header.schedule;
    // initial values are overwritten below; the rng only has to exist
    let mut model = TmkNet::new(config, header.input.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let t = find(&name)?;
        let value = Tensor::new(t.shape.clone(), slice(t)?.to_vec())?;
        model.params.set_value(&name, value)?;
    }
    let stored_params = header.tensors.iter().filter(|t| t.tag != STATE_TAG).count();
    if stored_params != model.params.len() {
        return Err(corrupt(
            path,
            format!("{stored_params} stored parameters, model has {}", model.params.len()),
        ));
    }
    for (prefix, updates) in [("mrt_bn", header.mrt_bn_updates), ("mss_bn", header.mss_bn_updates)] {
        let mean = slice(find(&format!("state.{prefix}.mean"))?)?.to_vec();
        let var = slice(find(&format!("state.{prefix}.var"))?)?.to_vec();
        let bn = if prefix == "mrt_bn" { &mut model.mrt_bn } else { &mut model.mss_bn };
        if mean.len() != bn.mean.len() || var.len() != bn.var.len() {
            return Err(corrupt(path, format!("{prefix} statistics have the wrong channel count")));
        }
        bn.mean = mean;
        bn.var = var;
        bn.updates = updates;
    }
    for (domain, role) in &header.roles {
        model.register_domain(*domain, *role);
    }
    for s in &header.slots {
        let g = find(&format!("state.dsbn.{}.g_run", s.slot))?;
        let v = find(&format!("state.dsbn.{}.v_run", s.slot))?;
        model.dsbn.set_slot(
            s.slot,
            RunningStats {
                g_run: Tensor::new(g.shape.clone(), slice(g)?.to_vec())?,
                v_run: slice(v)?[0],
                steps: s.steps,
            },
        );
    }
    Ok(Checkpoint {
        model,
        seed: header.seed,
        config_hash: header.config_hash,
        run: header.run,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = write_checkpoint(ck)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}
