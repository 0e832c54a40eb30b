//! `MTCKPT1` checkpoints.
//!
//! Layout: the 7 magic bytes `MTCKPT1`, a little-endian u64 header length,
//! the JSON header, then every parameter in declaration order as
//! little-endian f32.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{build_unet, NetConfig, Network};
use crate::collection::ClassRef;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MTCKPT1";

/// How logits are turned into class probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// One independent sigmoid per global class.
    Sigmoid,
    /// Softmax over background + the classes of one dataset (baseline).
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub net: NetConfig,
    pub classes: Vec<ClassRef>,
    pub step: u64,
    pub output: OutputMode,
    pub parameters: Vec<ParamInfo>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub network: Network<f32>,
}

pub fn encode_checkpoint(net: &Network<f32>, classes: &[ClassRef], step: u64, output: OutputMode) -> Vec<u8> {
    let header = CheckpointHeader {
        net: net.config.clone(),
        classes: classes.to_vec(),
        step,
        output,
        parameters: net
            .params
            .iter()
            .map(|p| ParamInfo {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(15 + json.len() + 4 * net.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &net.params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    net: &Network<f32>,
    classes: &[ClassRef],
    step: u64,
    output: OutputMode,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(net, classes, step, output);
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 15 || &bytes[..7] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[7..15].try_into().unwrap()) as usize;
    let body = bytes
        .get(15..15 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut network = build_unet::<f32>(&header.net, 0)?;
    if network.params.len() != header.parameters.len() {
        return Err(Error::Checkpoint(format!(
            "header lists {} parameters, topology has {}",
            header.parameters.len(),
            network.params.len()
        )));
    }
    let mut off = 15 + hlen;
    for (p, info) in network.params.iter_mut().zip(&header.parameters) {
        if p.name != info.name || p.value.shape() != info.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} does not match topology",
                info.name
            )));
        }
        let n = p.value.numel();
        let blob = bytes
            .get(off..off + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", info.name)))?;
        for (d, c) in p.value.data_mut().iter_mut().zip(blob.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
        off += 4 * n;
    }
    if off != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(Checkpoint { header, network })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint for a known class list. A mismatch is an error unless
/// `reinit_heads` is set, in which case the backbone is kept and fresh heads
/// are created for `classes` from `head_seed`.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    classes: &[ClassRef],
    reinit_heads: bool,
    head_seed: u64,
) -> Result<Checkpoint> {
    let mut ck = load_checkpoint(path)?;
    if ck.header.classes != classes {
        if !reinit_heads {
            return Err(Error::Checkpoint(format!(
                "class list mismatch: checkpoint has {} classes, expected {}",
                ck.header.classes.len(),
                classes.len()
            )));
        }
        ck.network.reinit_heads(classes.len(), head_seed)?;
        ck.header.classes = classes.to_vec();
        ck.header.net = ck.network.config.clone();
    }
    Ok(ck)
}
