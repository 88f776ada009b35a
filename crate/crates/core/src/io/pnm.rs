//! Binary netpbm: P5 (8-bit grey) for label maps and masks, P6 (8-bit RGB)
//! for images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::RgbImage;

/// An 8-bit raster with one (P5) or three (P6) samples per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(raster: &Raster) -> Vec<u8> {
    let magic = match raster.channels {
        1 => "P5",
        3 => "P6",
        n => panic!("netpbm raster must have 1 or 3 channels, got {n}"),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.data);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format(format!("unsupported netpbm magic {other:?}"))),
    };
    let width = parse_dim(&next_token(bytes, &mut pos)?, "width")?;
    let height = parse_dim(&next_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_dim(&next_token(bytes, &mut pos)?, "maxval")?;
    if maxval > 255 {
        return Err(Error::format(format!(
            "16-bit netpbm (maxval {maxval}) is not supported"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("netpbm header not terminated"));
    }
    pos += 1;
    let expected = width * height * channels;
    let data = &bytes[pos..];
    if data.len() != expected {
        return Err(Error::format(format!(
            "netpbm raster is {} bytes, expected {expected}",
            data.len()
        )));
    }
    if maxval != 255 {
        if let Some(v) = data.iter().find(|v| **v as usize > maxval) {
            return Err(Error::format(format!("sample {v} exceeds maxval {maxval}")));
        }
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: data.to_vec(),
    })
}

fn parse_dim(token: &str, what: &str) -> Result<usize> {
    match token.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(format!("invalid netpbm {what} {token:?}"))),
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            None => return Err(Error::format("netpbm header truncated")),
            Some(b'#') => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn save(path: &Path, raster: &Raster) -> Result<()> {
    super::write_file(path, &encode(raster))
}

pub fn load(path: &Path) -> Result<Raster> {
    decode(&super::read_file(path)?)
}

/// How 8-bit P6 samples map to linear light.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Transfer {
    #[default]
    Linear,
    Srgb,
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn rgb_to_raster(img: &RgbImage, transfer: Transfer) -> Raster {
    let data = img
        .data()
        .iter()
        .map(|v| {
            let v = v.clamp(0.0, 1.0);
            let v = match transfer {
                Transfer::Linear => v,
                Transfer::Srgb => linear_to_srgb(v),
            };
            (v * 255.0).round() as u8
        })
        .collect();
    Raster {
        width: img.width(),
        height: img.height(),
        channels: 3,
        data,
    }
}

pub fn raster_to_rgb(raster: &Raster, transfer: Transfer) -> Result<RgbImage> {
    if raster.channels != 3 {
        return Err(Error::format("expected a P6 colour image"));
    }
    let data = raster
        .data
        .iter()
        .map(|b| {
            let v = *b as f64 / 255.0;
            match transfer {
                Transfer::Linear => v,
                Transfer::Srgb => srgb_to_linear(v),
            }
        })
        .collect();
    RgbImage::new(raster.height, raster.width, data)
}
