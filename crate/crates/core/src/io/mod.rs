//! File formats.
//!
//! * SPC1 spectral cubes ([`spc1`])
//! * binary P5/P6 netpbm label maps and images ([`pnm`])
//! * whitespace-separated wavelength tables for cameras and spectra, and the
//!   text form of a fitted reconstructor ([`table`])
//! * UNET model checkpoints ([`checkpoint`])

pub mod checkpoint;
pub mod pnm;
pub mod spc1;
pub mod table;

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
