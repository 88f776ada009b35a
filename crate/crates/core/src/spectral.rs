//! Spectral grid, camera forward model and Wiener reconstruction.
//!
//! A camera is described by three colour-filter transmittance curves, an
//! illuminant and a sensor sensitivity, all sampled on the fixed 36-band grid
//! (380 nm to 730 nm in 10 nm steps). Discretising the camera response integral
//! gives a 3×36 system matrix
//!
//! ```text
//! M[c, k] = t_c(λ_k) · E(λ_k) · S(λ_k) · Δλ
//! ```
//!
//! so that a reflectance spectrum `r` renders to `p = M · r`.
//!
//! Reconstruction is the affine Wiener estimator fitted from a set of training
//! spectra with mean `μ` and covariance `C`:
//!
//! ```text
//! W = C Mᵀ (M C Mᵀ + σ² I₃)⁻¹
//! r̂ = μ + W (p − M μ)
//! ```

use nalgebra::{Matrix3, SMatrix, SVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const BAND_COUNT: usize = 36;
pub const FIRST_WAVELENGTH_NM: f64 = 380.0;
pub const BAND_SPACING_NM: f64 = 10.0;

/// Condition-number ceiling for the 3×3 system solved by [`fit_wiener`].
pub const MAX_CONDITION: f64 = 1e12;

/// The fixed uniform wavelength grid shared by every spectrum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpectralGrid;

impl SpectralGrid {
    pub const fn len(&self) -> usize {
        BAND_COUNT
    }

    pub const fn is_empty(&self) -> bool {
        false
    }

    pub const fn delta_nm(&self) -> f64 {
        BAND_SPACING_NM
    }

    pub fn wavelength(&self, band: usize) -> f64 {
        FIRST_WAVELENGTH_NM + BAND_SPACING_NM * band as f64
    }

    pub fn wavelengths(&self) -> [f64; BAND_COUNT] {
        std::array::from_fn(|k| self.wavelength(k))
    }

    /// Band index of `nm` if it lies on the grid (within 1e-6 nm).
    pub fn band_of(&self, nm: f64) -> Option<usize> {
        let pos = (nm - FIRST_WAVELENGTH_NM) / BAND_SPACING_NM;
        let k = pos.round();
        if (pos - k).abs() * BAND_SPACING_NM < 1e-6 && k >= 0.0 && (k as usize) < BAND_COUNT {
            Some(k as usize)
        } else {
            None
        }
    }
}

/// 36 reflectance samples on [`SpectralGrid`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spectrum([f64; BAND_COUNT]);

impl Spectrum {
    /// Wraps raw values, which may lie outside [0, 1] (reconstruction output).
    pub fn new(values: [f64; BAND_COUNT]) -> Result<Self> {
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("spectrum band {k} is not finite")));
        }
        Ok(Spectrum(values))
    }

    /// Builds a physical reflectance, clamping every sample to [0, 1].
    pub fn from_physical(values: [f64; BAND_COUNT]) -> Result<Self> {
        let s = Self::new(values)?;
        Ok(Spectrum(s.0.map(|v| v.clamp(0.0, 1.0))))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; BAND_COUNT] = values.try_into().map_err(|_| Error::Dim {
            expected: BAND_COUNT,
            actual: values.len(),
        })?;
        Self::new(arr)
    }

    pub fn constant(value: f64) -> Self {
        Spectrum([value; BAND_COUNT])
    }

    pub fn values(&self) -> &[f64; BAND_COUNT] {
        &self.0
    }

    pub fn l2_distance(&self, other: &Spectrum) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn to_vector(self) -> SVector<f64, BAND_COUNT> {
        SVector::from_column_slice(&self.0)
    }
}

impl std::ops::Index<usize> for Spectrum {
    type Output = f64;
    fn index(&self, band: usize) -> &f64 {
        &self.0[band]
    }
}

/// H×W×36 reflectance cube stored band-major (band, row, column).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SpectralCube {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("cube dimensions must be at least 1x1"));
        }
        let expected = height * width * BAND_COUNT;
        if data.len() != expected {
            return Err(Error::Dim {
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cube contains non-finite values"));
        }
        Ok(SpectralCube {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "cube dimensions must be positive");
        SpectralCube {
            height,
            width,
            data: vec![0.0; height * width * BAND_COUNT],
        }
    }

    pub fn filled(height: usize, width: usize, spectrum: &Spectrum) -> Self {
        let mut cube = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                cube.set_pixel(y, x, spectrum);
            }
        }
        cube
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub const fn bands(&self) -> usize {
        BAND_COUNT
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, band: usize, y: usize, x: usize) -> usize {
        (band * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, band: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(band, y, x)]
    }

    pub fn band(&self, band: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[band * plane..(band + 1) * plane]
    }

    pub fn band_mut(&mut self, band: usize) -> &mut [f64] {
        let plane = self.height * self.width;
        &mut self.data[band * plane..(band + 1) * plane]
    }

    pub fn pixel(&self, y: usize, x: usize) -> Spectrum {
        Spectrum(std::array::from_fn(|k| self.get(k, y, x)))
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, spectrum: &Spectrum) {
        for k in 0..BAND_COUNT {
            let i = self.index(k, y, x);
            self.data[i] = spectrum[k];
        }
    }
}

/// H×W linear-light RGB image, pixel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be at least 1x1"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Dim {
                expected: height * width * 3,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Colour filters, illuminant and sensor sensitivity sampled on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    filter_transmittance: [[f64; BAND_COUNT]; 3],
    illuminant: [f64; BAND_COUNT],
    sensor_sensitivity: [f64; BAND_COUNT],
}

impl CameraModel {
    pub fn new(
        filter_transmittance: [[f64; BAND_COUNT]; 3],
        illuminant: [f64; BAND_COUNT],
        sensor_sensitivity: [f64; BAND_COUNT],
    ) -> Result<Self> {
        let valid = |v: &f64| v.is_finite() && *v >= 0.0;
        for (c, row) in filter_transmittance.iter().enumerate() {
            if !row.iter().all(valid) {
                return Err(Error::invalid(format!(
                    "filter {c} has negative or non-finite entries"
                )));
            }
            if !row.iter().any(|v| *v > 0.0) {
                return Err(Error::invalid(format!("filter {c} is identically zero")));
            }
        }
        if !illuminant.iter().all(valid) {
            return Err(Error::invalid(
                "illuminant has negative or non-finite entries",
            ));
        }
        if !sensor_sensitivity.iter().all(valid) {
            return Err(Error::invalid(
                "sensor sensitivity has negative or non-finite entries",
            ));
        }
        Ok(CameraModel {
            filter_transmittance,
            illuminant,
            sensor_sensitivity,
        })
    }

    /// Gaussian colour filters, peak 1, with flat illuminant and sensor.
    pub fn gaussian(centers_nm: [f64; 3], sigma_nm: f64) -> Result<Self> {
        let grid = SpectralGrid;
        let filters = centers_nm.map(|c| {
            std::array::from_fn(|k| {
                let d = (grid.wavelength(k) - c) / sigma_nm;
                (-0.5 * d * d).exp()
            })
        });
        Self::new(filters, [1.0; BAND_COUNT], [1.0; BAND_COUNT])
    }

    /// The synthetic camera used when no camera file is supplied: Gaussian
    /// filters at 620/550/450 nm (σ = 30 nm), each rescaled so that a perfect
    /// white reflector renders to 1 in every channel.
    pub fn synthetic_default() -> Self {
        let base = Self::gaussian([620.0, 550.0, 450.0], 30.0).expect("valid gaussian camera");
        let m = system_matrix(&base, &SpectralGrid);
        let mut filters = base.filter_transmittance;
        for (c, row) in filters.iter_mut().enumerate() {
            let white: f64 = m.row(c).iter().sum();
            for v in row.iter_mut() {
                *v /= white;
            }
        }
        Self::new(filters, base.illuminant, base.sensor_sensitivity).expect("valid camera")
    }

    pub fn filter_transmittance(&self) -> &[[f64; BAND_COUNT]; 3] {
        &self.filter_transmittance
    }

    pub fn illuminant(&self) -> &[f64; BAND_COUNT] {
        &self.illuminant
    }

    pub fn sensor_sensitivity(&self) -> &[f64; BAND_COUNT] {
        &self.sensor_sensitivity
    }
}

/// The 3×36 discretised camera response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemMatrix([[f64; BAND_COUNT]; 3]);

impl SystemMatrix {
    pub fn from_rows(rows: [[f64; BAND_COUNT]; 3]) -> Self {
        SystemMatrix(rows)
    }

    pub fn rows(&self) -> &[[f64; BAND_COUNT]; 3] {
        &self.0
    }

    pub fn row(&self, c: usize) -> &[f64; BAND_COUNT] {
        &self.0[c]
    }

    pub fn project(&self, spectrum: &Spectrum) -> [f64; 3] {
        self.project_values(spectrum.values())
    }

    fn project_values(&self, r: &[f64; BAND_COUNT]) -> [f64; 3] {
        self.0
            .map(|row| row.iter().zip(r).map(|(m, v)| m * v).sum::<f64>())
    }

    fn to_matrix(self) -> SMatrix<f64, 3, BAND_COUNT> {
        SMatrix::from_fn(|c, k| self.0[c][k])
    }
}

pub fn system_matrix(camera: &CameraModel, grid: &SpectralGrid) -> SystemMatrix {
    let delta = grid.delta_nm();
    SystemMatrix(std::array::from_fn(|c| {
        std::array::from_fn(|k| {
            camera.filter_transmittance[c][k]
                * camera.illuminant[k]
                * camera.sensor_sensitivity[k]
                * delta
        })
    }))
}

pub fn forward_project(spectrum: &Spectrum, camera: &CameraModel) -> [f64; 3] {
    system_matrix(camera, &SpectralGrid).project(spectrum)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Global scale applied to every channel before clipping.
    pub exposure: f64,
    /// Clip rendered values to [0, 1].
    pub clip: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            exposure: 1.0,
            clip: true,
        }
    }
}

impl RenderOptions {
    pub fn unclipped() -> Self {
        RenderOptions {
            exposure: 1.0,
            clip: false,
        }
    }
}

pub fn render_cube(cube: &SpectralCube, camera: &CameraModel, opts: RenderOptions) -> RgbImage {
    let m = system_matrix(camera, &SpectralGrid);
    let (h, w) = (cube.height(), cube.width());
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for v in m.project(&cube.pixel(y, x)) {
                let v = v * opts.exposure;
                data.push(if opts.clip { v.clamp(0.0, 1.0) } else { v });
            }
        }
    }
    RgbImage {
        height: h,
        width: w,
        data,
    }
}

/// Affine map from RGB to 36-band reflectance.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerReconstructor {
    mean_spectrum: [f64; BAND_COUNT],
    gain: [[f64; 3]; BAND_COUNT],
    system: SystemMatrix,
    noise_sigma: f64,
}

impl WienerReconstructor {
    /// Reassembles a reconstructor from stored parts.
    pub fn from_parts(
        mean_spectrum: [f64; BAND_COUNT],
        gain: [[f64; 3]; BAND_COUNT],
        system: SystemMatrix,
        noise_sigma: f64,
    ) -> Result<Self> {
        let finite = mean_spectrum.iter().all(|v| v.is_finite())
            && gain.iter().flatten().all(|v| v.is_finite())
            && system.0.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("reconstructor contains non-finite values"));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be finite and nonnegative"));
        }
        Ok(WienerReconstructor {
            mean_spectrum,
            gain,
            system,
            noise_sigma,
        })
    }

    pub fn mean_spectrum(&self) -> &[f64; BAND_COUNT] {
        &self.mean_spectrum
    }

    pub fn gain(&self) -> &[[f64; 3]; BAND_COUNT] {
        &self.gain
    }

    pub fn system(&self) -> &SystemMatrix {
        &self.system
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn gain_frobenius_norm(&self) -> f64 {
        self.gain
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn reconstruct_values(&self, rgb: [f64; 3]) -> [f64; BAND_COUNT] {
        let predicted = self.system.project_values(&self.mean_spectrum);
        let innovation = [
            rgb[0] - predicted[0],
            rgb[1] - predicted[1],
            rgb[2] - predicted[2],
        ];
        std::array::from_fn(|k| {
            let g = &self.gain[k];
            self.mean_spectrum[k]
                + g[0] * innovation[0]
                + g[1] * innovation[1]
                + g[2] * innovation[2]
        })
    }
}

pub fn fit_wiener(
    training: &[Spectrum],
    camera: &CameraModel,
    noise_sigma: f64,
) -> Result<WienerReconstructor> {
    if training.len() < 2 {
        return Err(Error::Data(format!(
            "Wiener fit needs at least 2 training spectra, got {}",
            training.len()
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid("noise sigma must be finite and nonnegative"));
    }
    let n = training.len() as f64;
    let mean = training
        .iter()
        .fold(SVector::<f64, BAND_COUNT>::zeros(), |acc, s| {
            acc + s.to_vector()
        })
        / n;
    let mut cov = SMatrix::<f64, BAND_COUNT, BAND_COUNT>::zeros();
    for s in training {
        let d = s.to_vector() - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;

    let system = system_matrix(camera, &SpectralGrid);
    let m = system.to_matrix();
    let cmt = cov * m.transpose();
    let mut a: Matrix3<f64> = m * cmt;
    a += Matrix3::identity() * (noise_sigma * noise_sigma);
    // enforce exact symmetry before the eigen solve
    a = (a + a.transpose()) * 0.5;

    let condition = condition_estimate(&a);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularSystem {
            condition,
            limit: MAX_CONDITION,
        });
    }
    let a_inv = a.try_inverse().ok_or(Error::SingularSystem {
        condition: f64::INFINITY,
        limit: MAX_CONDITION,
    })?;
    let w = cmt * a_inv;

    Ok(WienerReconstructor {
        mean_spectrum: std::array::from_fn(|k| mean[k]),
        gain: std::array::from_fn(|k| [w[(k, 0)], w[(k, 1)], w[(k, 2)]]),
        system,
        noise_sigma,
    })
}

fn condition_estimate(a: &Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(*a);
    let abs = eig.eigenvalues.map(f64::abs);
    let max = abs.max();
    let min = abs.min();
    if max == 0.0 || min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn reconstruct_pixel(rec: &WienerReconstructor, rgb: [f64; 3]) -> Spectrum {
    Spectrum(rec.reconstruct_values(rgb))
}

pub fn reconstruct_cube(rec: &WienerReconstructor, img: &RgbImage) -> SpectralCube {
    let (h, w) = (img.height(), img.width());
    let mut cube = SpectralCube::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let values = rec.reconstruct_values(img.pixel(y, x));
            for (k, v) in values.iter().enumerate() {
                let i = cube.index(k, y, x);
                cube.data[i] = *v;
            }
        }
    }
    cube
}
