//! UNET model checkpoints.
//!
//! ```text
//! "UNET"                       magic
//! u32 version                  currently 1
//! u32 in_channels, n_classes, depth, base_filters, dilation
//! f64 dropout_rate
//! u64 seed
//! f64 × parameter_count        blobs in declaration order
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{UNetConfig, UNetModel};

pub const MAGIC: &[u8; 4] = b"UNET";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 5 * 4 + 8 + 8;

pub fn encode(model: &UNetModel) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        c.in_channels,
        c.n_classes,
        c.depth,
        c.base_filters,
        c.dilation,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.dropout_rate.to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    for v in model.parameter_slices().into_iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<UNetModel> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::format("not a UNET checkpoint (bad magic)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported UNET checkpoint version {version} (expected {VERSION})"
        )));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("truncated UNET header"));
    }
    let field = |i: usize| u32_at(8 + 4 * i) as usize;
    let config = UNetConfig {
        in_channels: field(0),
        n_classes: field(1),
        depth: field(2),
        base_filters: field(3),
        dilation: field(4),
        dropout_rate: f64::from_le_bytes(bytes[28..36].try_into().unwrap()),
        seed: u64::from_le_bytes(bytes[36..44].try_into().unwrap()),
    };
    config
        .validate()
        .map_err(|e| Error::format(format!("UNET config block: {e}")))?;

    let specs = config.layer_specs();
    let expected = HEADER_LEN + 8 * config.parameter_count();
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "UNET checkpoint is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut blobs = Vec::with_capacity(2 * specs.len());
    for s in &specs {
        blobs.push(values.by_ref().take(s.weight_len()).collect());
        blobs.push(values.by_ref().take(s.out_channels).collect());
    }
    UNetModel::from_parameters(config, blobs)
        .map_err(|e| Error::format(format!("UNET parameters: {e}")))
}

pub fn save(path: &Path, model: &UNetModel) -> Result<()> {
    super::write_file(path, &encode(model))
}

pub fn load(path: &Path) -> Result<UNetModel> {
    decode(&super::read_file(path)?)
}
