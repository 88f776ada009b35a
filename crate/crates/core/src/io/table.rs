//! Plain-text wavelength tables.
//!
//! One line per band: `wavelength_nm value...`, whitespace separated, with
//! `#` starting a comment. Every table must list the 36 grid wavelengths in
//! increasing order.
//!
//! Camera tables carry five value columns: the R, G and B filter
//! transmittances, the illuminant and the sensor sensitivity. Spectrum tables
//! carry one. A fitted reconstructor is stored as a table with seven value
//! columns (mean, three gain columns, three system-matrix rows) preceded by a
//! `noise_sigma <value>` directive.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::{
    CameraModel, SpectralGrid, Spectrum, SystemMatrix, WienerReconstructor, BAND_COUNT,
};

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

/// Parses a table with `columns` value columns into a `BAND_COUNT × columns`
/// array, checking the wavelength column against the grid. Lines starting
/// with an alphabetic token are returned as directives.
fn parse_rows(text: &str, columns: usize) -> Result<(Vec<[f64; 8]>, Vec<(usize, String, String)>)> {
    assert!(columns <= 7);
    let grid = SpectralGrid;
    let mut rows = Vec::with_capacity(BAND_COUNT);
    let mut directives = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let first = fields.next().unwrap();
        if first.starts_with(|c: char| c.is_ascii_alphabetic()) {
            let rest = fields.collect::<Vec<_>>().join(" ");
            directives.push((line_no, first.to_string(), rest));
            continue;
        }
        let values: Vec<f64> = std::iter::once(first)
            .chain(fields)
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("not a number: {f:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != columns + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} columns, found {}", columns + 1, values.len()),
            });
        }
        let band = rows.len();
        if band >= BAND_COUNT {
            return Err(Error::Parse {
                line: line_no,
                message: format!("more than {BAND_COUNT} bands"),
            });
        }
        if grid.band_of(values[0]) != Some(band) {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "wavelength {} nm where {} nm was expected",
                    values[0],
                    grid.wavelength(band)
                ),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                message: "non-finite value".into(),
            });
        }
        let mut row = [0.0; 8];
        row[..values.len()].copy_from_slice(&values);
        rows.push(row);
    }
    if rows.len() != BAND_COUNT {
        return Err(Error::format(format!(
            "table lists {} bands, expected {BAND_COUNT}",
            rows.len()
        )));
    }
    Ok((rows, directives))
}

fn no_directives(directives: &[(usize, String, String)]) -> Result<()> {
    match directives.first() {
        Some((line, key, _)) => Err(Error::Parse {
            line: *line,
            message: format!("unexpected directive {key:?}"),
        }),
        None => Ok(()),
    }
}

pub fn parse_camera(text: &str) -> Result<CameraModel> {
    let (rows, directives) = parse_rows(text, 5)?;
    no_directives(&directives)?;
    let col = |j: usize| -> [f64; BAND_COUNT] { std::array::from_fn(|k| rows[k][j]) };
    CameraModel::new([col(1), col(2), col(3)], col(4), col(5))
        .map_err(|e| Error::format(format!("camera table: {e}")))
}

pub fn format_camera(camera: &CameraModel) -> String {
    let mut out = String::from("# wavelength_nm t_r t_g t_b illuminant sensor\n");
    let grid = SpectralGrid;
    let t = camera.filter_transmittance();
    for k in 0..BAND_COUNT {
        writeln!(
            out,
            "{} {} {} {} {} {}",
            grid.wavelength(k),
            t[0][k],
            t[1][k],
            t[2][k],
            camera.illuminant()[k],
            camera.sensor_sensitivity()[k]
        )
        .unwrap();
    }
    out
}

pub fn parse_spectrum(text: &str) -> Result<Spectrum> {
    let (rows, directives) = parse_rows(text, 1)?;
    no_directives(&directives)?;
    Spectrum::from_physical(std::array::from_fn(|k| rows[k][1]))
}

pub fn format_spectrum(spectrum: &Spectrum) -> String {
    let mut out = String::from("# wavelength_nm reflectance\n");
    let grid = SpectralGrid;
    for k in 0..BAND_COUNT {
        writeln!(out, "{} {}", grid.wavelength(k), spectrum[k]).unwrap();
    }
    out
}

pub fn parse_reconstructor(text: &str) -> Result<WienerReconstructor> {
    let (rows, directives) = parse_rows(text, 7)?;
    let mut sigma = None;
    for (line, key, value) in directives {
        match key.as_str() {
            "noise_sigma" if sigma.is_none() => {
                sigma = Some(value.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("invalid noise_sigma {value:?}"),
                })?);
            }
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unexpected directive {key:?}"),
                })
            }
        }
    }
    let sigma = sigma.ok_or_else(|| Error::format("reconstructor is missing noise_sigma"))?;
    let mean = std::array::from_fn(|k| rows[k][1]);
    let gain = std::array::from_fn(|k| [rows[k][2], rows[k][3], rows[k][4]]);
    let system = SystemMatrix::from_rows(std::array::from_fn(|c| {
        std::array::from_fn(|k| rows[k][5 + c])
    }));
    WienerReconstructor::from_parts(mean, gain, system, sigma)
        .map_err(|e| Error::format(format!("reconstructor: {e}")))
}

pub fn format_reconstructor(rec: &WienerReconstructor) -> String {
    let mut out =
        String::from("# wavelength_nm mean gain_r gain_g gain_b system_r system_g system_b\n");
    writeln!(out, "noise_sigma {}", rec.noise_sigma()).unwrap();
    let grid = SpectralGrid;
    let m = rec.system().rows();
    for k in 0..BAND_COUNT {
        let g = rec.gain()[k];
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            grid.wavelength(k),
            rec.mean_spectrum()[k],
            g[0],
            g[1],
            g[2],
            m[0][k],
            m[1][k],
            m[2][k]
        )
        .unwrap();
    }
    out
}

pub fn load_camera(path: &Path) -> Result<CameraModel> {
    parse_camera(&super::read_text(path)?)
}

pub fn load_spectrum(path: &Path) -> Result<Spectrum> {
    parse_spectrum(&super::read_text(path)?)
}

pub fn load_reconstructor(path: &Path) -> Result<WienerReconstructor> {
    parse_reconstructor(&super::read_text(path)?)
}

pub fn save_reconstructor(path: &Path, rec: &WienerReconstructor) -> Result<()> {
    super::write_file(path, format_reconstructor(rec).as_bytes())
}
