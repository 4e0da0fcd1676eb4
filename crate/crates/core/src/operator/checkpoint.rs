//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic `HNOCKPT\0`, `u32` format version, `u64` header
//! length, UTF-8 JSON header, then the `f64` blocks listed in the header,
//! little-endian, in order. The first block is always `params` (branch
//! layers, trunk layers, branch slopes, trunk slopes; each layer `W`
//! row-major then `b`).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, Lattice, MlpLayout, Normalizer, Operator};
use crate::bvp::SIGN_CONVENTION;
use crate::error::{Error, Result};
use crate::game::{CaseId, GameSpec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HNOCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    case: CaseId,
    spec: GameSpec,
    activation: Activation,
    q: usize,
    branch: MlpLayout,
    trunk: MlpLayout,
    lattice: Lattice,
    normalizer: Normalizer,
    output_scale: f64,
    sign_convention: String,
    blocks: Vec<BlockInfo>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub operator: Operator,
    /// Blocks other than `params` (optimizer moments and the like).
    pub blocks: BTreeMap<String, Vec<f64>>,
    pub extra: serde_json::Value,
}

fn encode(op: &Operator, blocks: &[(&str, &[f64])], extra: &serde_json::Value) -> Result<Vec<u8>> {
    let mut infos = vec![BlockInfo {
        name: "params".into(),
        len: op.params.len(),
    }];
    infos.extend(blocks.iter().map(|(n, b)| BlockInfo {
        name: n.to_string(),
        len: b.len(),
    }));
    let header = Header {
        case: op.spec.case,
        spec: op.spec.clone(),
        activation: op.activation,
        q: op.q,
        branch: op.branch.clone(),
        trunk: op.trunk.clone(),
        lattice: op.lattice.clone(),
        normalizer: op.normalizer.clone(),
        output_scale: op.output_scale,
        sign_convention: SIGN_CONVENTION.into(),
        blocks: infos,
        extra: extra.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = op.params.len() + blocks.iter().map(|b| b.1.len()).sum::<usize>();
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * total);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in op.params.iter().chain(blocks.iter().flat_map(|b| b.1.iter())) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, op: &Operator, blocks: &[(&str, &[f64])], extra: &serde_json::Value) -> Result<()> {
    let buf = encode(op, blocks, extra)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn corrupt(msg: &str) -> Error {
    Error::Artifact(format!("corrupt checkpoint: {msg}"))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes
        .get(20..20usize.saturating_add(hlen))
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
    if header.sign_convention != SIGN_CONVENTION {
        return Err(Error::Artifact(format!(
            "checkpoint sign convention '{}' unsupported",
            header.sign_convention
        )));
    }
    let data = &bytes[20 + hlen..];
    let total: usize = header.blocks.iter().map(|b| b.len).sum();
    if data.len() != 8 * total {
        return Err(corrupt(&format!(
            "expected {} data bytes, found {}",
            8 * total,
            data.len()
        )));
    }
    let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut blocks = BTreeMap::new();
    let mut params = None;
    for info in &header.blocks {
        let v: Vec<f64> = values.by_ref().take(info.len).collect();
        if info.name == "params" {
            params = Some(v);
        } else {
            blocks.insert(info.name.clone(), v);
        }
    }
    let params = params.ok_or_else(|| corrupt("no params block"))?;
    let expected =
        header.branch.n_weights() + header.trunk.n_weights() + header.branch.n_hidden() + header.trunk.n_hidden();
    if params.len() != expected || header.branch.sizes[0] != header.lattice.len() {
        return Err(corrupt("parameter count does not match the architecture"));
    }
    if header.spec.case != header.case || header.lattice.case != header.case {
        return Err(corrupt("inconsistent case ids"));
    }
    Ok(Checkpoint {
        operator: Operator {
            spec: header.spec,
            activation: header.activation,
            q: header.q,
            lattice: header.lattice,
            normalizer: header.normalizer,
            output_scale: header.output_scale,
            branch: header.branch,
            trunk: header.trunk,
            params,
        },
        blocks,
        extra: header.extra,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl Operator {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self, &[], &serde_json::Value::Null)
    }

    /// Loads a checkpoint, rejecting one trained for another case.
    pub fn load(path: &Path, case: CaseId) -> Result<Operator> {
        let ck = load_checkpoint(path)?;
        if ck.operator.spec.case != case {
            return Err(Error::Artifact(format!(
                "checkpoint {} is for case {}, expected {case}",
                path.display(),
                ck.operator.spec.case
            )));
        }
        Ok(ck.operator)
    }
}
