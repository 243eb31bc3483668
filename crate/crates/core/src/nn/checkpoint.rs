use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::LayerSpec;
use super::network::{NetworkModel, Variant};
use crate::error::{Error, Result};
use crate::grid::NormalizedAdjacency;
use crate::io::{read_f64s, write_f64s};

const MAGIC: &[u8; 8] = b"PIGSCKP1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    variant: Variant,
    layers: Vec<LayerSpec>,
    nodes: usize,
    readout: Vec<usize>,
    param_count: usize,
}

/// Binary layout: magic, format version (u32), seed (u64), step (u64), JSON
/// header length (u64) and header, then the adjacency and all parameters as
/// little-endian f64.
pub fn write_checkpoint(path: impl AsRef<Path>, model: &NetworkModel, variant: Variant) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        variant,
        layers: model.layers().to_vec(),
        nodes: model.nodes(),
        readout: model.readout().to_vec(),
        param_count: model.param_count(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&model.seed.to_le_bytes());
    buf.extend_from_slice(&model.step.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    write_f64s(&mut buf, model.adjacency().as_slice());
    write_f64s(&mut buf, &model.flat_params());
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(NetworkModel, Variant)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
    if bytes.len() < 36 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let (seed, step, hlen) = (u64_at(12), u64_at(20), u64_at(28) as usize);
    let body = bytes.get(36..36 + hlen).ok_or_else(|| bad("truncated header"))?;
    let h: Header = serde_json::from_slice(body).map_err(|e| Error::json(path, e))?;
    let mut rest = &bytes[36 + hlen..];
    if rest.len() != 8 * (h.nodes * h.nodes + h.param_count) {
        return Err(bad("payload size does not match header"));
    }
    let adjacency = NormalizedAdjacency::from_dense(h.nodes, read_f64s(&mut rest, h.nodes * h.nodes))?;
    let params = read_f64s(&mut rest, h.param_count);
    let mut model = NetworkModel::new(h.layers, adjacency, h.readout, seed)?;
    model.set_flat_params(&params)?;
    model.step = step;
    Ok((model, h.variant))
}
