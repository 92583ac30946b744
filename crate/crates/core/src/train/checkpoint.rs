//! Binary checkpoint: `EDSP`, u32 version, u64 header length, JSON header,
//! then little-endian f64 blobs (parameters, Adam `m`, Adam `v`) in
//! directory order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig, TrainState};
use crate::data::DatasetSpec;
use crate::denoise::{NetConfig, NeuralDenoiser};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::sde::SdeParams;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EDSP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    network: NetConfig,
    stft: StftConfig,
    sde: SdeParams,
    train: TrainConfig,
    data: DatasetSpec,
    step: u64,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let shapes = state.net.named_shapes();
    let mut entries = Vec::with_capacity(3 * shapes.len());
    let mut offset = 0;
    for prefix in ["", "adam.m.", "adam.v."] {
        for (name, shape) in &shapes {
            entries.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: shape.clone(),
                offset,
            });
            offset += 8 * numel(shape);
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        network: state.net.config().clone(),
        stft: *state.net.stft_config(),
        sde: state.sde,
        train: state.config.clone(),
        data: state.data.clone(),
        step: state.step,
        seed: state.config.seed,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let params = state.net.tensors();
    let blobs = params
        .iter()
        .copied()
        .chain(state.moments.m.iter().map(Vec::as_slice))
        .chain(state.moments.v.iter().map(Vec::as_slice));
    for t in blobs {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn take(bytes: &[u8], at: usize, n: usize) -> Result<&[u8]> {
    bytes.get(at..at + n).ok_or(Error::CheckpointTruncated {
        needed: at + n,
        found: bytes.len(),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(&bytes, 4, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(take(&bytes, 8, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(&bytes, 16, header_len)?)
        .map_err(|e| Error::CheckpointFormat(format!("header: {e}")))?;
    let blob_start = 16 + header_len;

    let mut net = NeuralDenoiser::zeroed(header.network.clone(), header.stft)?;
    let expected = net.named_shapes();
    if header.tensors.len() != 3 * expected.len() {
        return Err(Error::CheckpointFormat(format!(
            "directory lists {} tensors, architecture needs {}",
            header.tensors.len(),
            3 * expected.len()
        )));
    }
    let mut groups: Vec<Vec<Vec<f64>>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for (i, entry) in header.tensors.iter().enumerate() {
        let (_, shape) = &expected[i % expected.len()];
        if &entry.shape != shape {
            return Err(Error::CheckpointShape {
                name: entry.name.clone(),
                found: entry.shape.clone(),
                expected: shape.clone(),
            });
        }
        let n = numel(shape);
        let raw = take(&bytes, blob_start + entry.offset, 8 * n)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        groups[i / expected.len()].push(values);
    }
    let v = groups.pop().expect("three groups");
    let m = groups.pop().expect("three groups");
    net.load_tensors(&groups[0])?;
    let mut config = header.train;
    config.seed = header.seed;
    Ok(TrainState {
        net,
        moments: AdamState { m, v },
        step: header.step,
        sde: header.sde,
        config,
        data: header.data,
    })
}
