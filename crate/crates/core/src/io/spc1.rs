//! SPC1 cube files.
//!
//! Layout: the magic `SPC1`, then `H`, `W`, `B` as little-endian `u32`
//! (`B` is always 36), then `H·W·B` little-endian `f32` samples in band-major
//! order (band, then row, then column).

use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::{SpectralCube, BAND_COUNT};

pub const MAGIC: &[u8; 4] = b"SPC1";
const HEADER_LEN: usize = 16;

pub fn encode(cube: &SpectralCube) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + cube.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(cube.height() as u32).to_le_bytes());
    out.extend_from_slice(&(cube.width() as u32).to_le_bytes());
    out.extend_from_slice(&(BAND_COUNT as u32).to_le_bytes());
    for v in cube.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<SpectralCube> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("SPC1 header truncated"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("bad SPC1 magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, b) = (word(4), word(8), word(12));
    if b != BAND_COUNT {
        return Err(Error::format(format!(
            "SPC1 band count {b}, expected {BAND_COUNT}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::format("SPC1 dimensions must be nonzero"));
    }
    let count = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(b))
        .ok_or_else(|| Error::format("SPC1 dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(Error::format(format!(
            "SPC1 payload is {} bytes, expected {}",
            payload.len(),
            count * 4
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    SpectralCube::new(h, w, data).map_err(|e| Error::format(format!("SPC1 payload: {e}")))
}

pub fn save(path: &Path, cube: &SpectralCube) -> Result<()> {
    super::write_file(path, &encode(cube))
}

pub fn load(path: &Path) -> Result<SpectralCube> {
    decode(&super::read_file(path)?)
}
