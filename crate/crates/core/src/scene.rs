//! Seeded synthetic labelled scenes.
//!
//! A scene is a Voronoi partition of the image plane. Each Voronoi site is
//! assigned a tissue class, and every pixel takes the base reflectance of its
//! class, perturbed by multiplicative per-band noise and a smooth shading
//! field. [`apply_degradations`] then layers on blur, wavelength-dependent
//! attenuation and additive sensor noise. Everything is a pure function of the
//! configuration and the seed.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{pnm, spc1};
use crate::rng::{self, streams};
use crate::spectral::{SpectralCube, SpectralGrid, Spectrum, BAND_COUNT};

pub const MIN_SCENE_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TissueClassSpec {
    pub class_id: u8,
    pub name: String,
    pub base_spectrum: Spectrum,
    /// σ of the per-pixel, per-band multiplicative noise.
    pub spectral_jitter: f64,
}

// (name, baseline, amplitude, shape, centre nm, width nm)
// shape 0: logistic step rising at the centre, 1: gaussian bump
const LIBRARY: [(&str, f64, f64, u8, f64, f64); 8] = [
    ("femur_cartilage", 0.78, 0.15, 0, 600.0, 40.0),
    ("acl", 0.22, 0.55, 0, 580.0, 25.0),
    ("meniscus", 0.62, -0.40, 1, 520.0, 45.0),
    ("synovium", 0.10, 0.35, 1, 640.0, 40.0),
    ("fat", 0.45, 0.45, 1, 470.0, 35.0),
    ("tibia_cartilage", 0.95, -0.55, 0, 500.0, 30.0),
    ("tendon", 0.40, -0.30, 0, 450.0, 50.0),
    ("blood", 0.04, 0.84, 0, 610.0, 12.0),
];

const DEFAULT_JITTER: f64 = 0.02;

/// The shipped tissue library: `n_classes` smooth, well separated spectra.
pub fn default_tissue_library(n_classes: usize) -> Result<Vec<TissueClassSpec>> {
    if !(2..=LIBRARY.len()).contains(&n_classes) {
        return Err(Error::Range(format!(
            "tissue library supports 2..={} classes, got {n_classes}",
            LIBRARY.len()
        )));
    }
    let grid = SpectralGrid;
    Ok(LIBRARY[..n_classes]
        .iter()
        .enumerate()
        .map(|(id, &(name, base, amp, shape, center, width))| {
            let values = std::array::from_fn(|k| {
                let t = (grid.wavelength(k) - center) / width;
                let profile = match shape {
                    0 => 1.0 / (1.0 + (-t).exp()),
                    _ => (-0.5 * t * t).exp(),
                };
                base + amp * profile
            });
            TissueClassSpec {
                class_id: id as u8,
                name: name.to_string(),
                base_spectrum: Spectrum::from_physical(values).expect("finite library spectrum"),
                spectral_jitter: DEFAULT_JITTER,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<TissueClassSpec>,
    pub n_regions: usize,
    pub shading_strength: f64,
    /// Fraction of Voronoi sites given to class 0. `None` assigns sites
    /// round-robin over all classes.
    pub dominant_share: Option<f64>,
    pub seed: u64,
}

impl SceneConfig {
    /// 64×64, twelve regions, 60% of the sites on class 0.
    pub fn with_classes(classes: Vec<TissueClassSpec>) -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            n_regions: 12.max(classes.len()),
            classes,
            shading_strength: 0.3,
            dominant_share: Some(0.6),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SCENE_SIDE || self.width < MIN_SCENE_SIDE {
            return Err(Error::Config(format!(
                "scene must be at least {MIN_SCENE_SIDE}x{MIN_SCENE_SIDE}, got {}x{}",
                self.height, self.width
            )));
        }
        if self.classes.len() < 2 {
            return Err(Error::Config("a scene needs at least 2 classes".into()));
        }
        let mut ids: Vec<u8> = self.classes.iter().map(|c| c.class_id).collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, id)| *id as usize != i) {
            return Err(Error::Config(
                "class ids must be 0..n without gaps or duplicates".into(),
            ));
        }
        for c in &self.classes {
            if !(c.spectral_jitter >= 0.0 && c.spectral_jitter.is_finite()) {
                return Err(Error::Config(format!(
                    "class {} has invalid jitter",
                    c.name
                )));
            }
            if c.base_spectrum
                .values()
                .iter()
                .any(|v| !(0.0..=1.0).contains(v))
            {
                return Err(Error::Config(format!(
                    "class {} spectrum outside [0,1]",
                    c.name
                )));
            }
        }
        if self.n_regions < self.classes.len() {
            return Err(Error::Config(format!(
                "n_regions {} is fewer than the {} classes",
                self.n_regions,
                self.classes.len()
            )));
        }
        if self.n_regions > self.height * self.width {
            return Err(Error::Config("more regions than pixels".into()));
        }
        if !(0.0..=1.0).contains(&self.shading_strength) {
            return Err(Error::Config("shading_strength must lie in [0,1]".into()));
        }
        if let Some(s) = self.dominant_share {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config("dominant_share must lie in [0,1]".into()));
            }
        }
        Ok(())
    }

    fn class_by_id(&self, id: u8) -> &TissueClassSpec {
        self.classes
            .iter()
            .find(|c| c.class_id == id)
            .expect("validated ids")
    }

    fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"scene");
        for v in [self.height, self.width, self.n_regions, self.classes.len()] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(self.shading_strength.to_le_bytes());
        h.update(self.dominant_share.map_or(-1.0, |s| s).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        for c in &self.classes {
            h.update([c.class_id]);
            h.update((c.name.len() as u64).to_le_bytes());
            h.update(c.name.as_bytes());
            for v in c.base_spectrum.values() {
                h.update(v.to_le_bytes());
            }
            h.update(c.spectral_jitter.to_le_bytes());
        }
        digest_u64(h)
    }
}

fn digest_u64(h: Sha256) -> u64 {
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationConfig {
    pub blur_sigma_px: f64,
    /// σ of the additive noise, per band.
    pub noise_sigma: f64,
    pub attenuation_alpha: [f64; BAND_COUNT],
    pub attenuation_depth: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl DegradationConfig {
    pub fn none() -> Self {
        DegradationConfig {
            blur_sigma_px: 0.0,
            noise_sigma: 0.0,
            attenuation_alpha: [0.0; BAND_COUNT],
            attenuation_depth: 0.0,
        }
    }

    /// Attenuation that grows towards long wavelengths, as in water.
    pub fn water_alpha(strength: f64) -> [f64; BAND_COUNT] {
        std::array::from_fn(|k| {
            let t = k as f64 / (BAND_COUNT - 1) as f64;
            strength * (0.1 + 0.9 * t * t)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.blur_sigma_px) || !ok(self.noise_sigma) || !ok(self.attenuation_depth) {
            return Err(Error::Config(
                "degradation parameters must be finite and nonnegative".into(),
            ));
        }
        if !self.attenuation_alpha.iter().all(|v| ok(*v)) {
            return Err(Error::Config(
                "attenuation coefficients must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.blur_sigma_px == 0.0
            && self.noise_sigma == 0.0
            && (self.attenuation_depth == 0.0 || self.attenuation_alpha.iter().all(|a| *a == 0.0))
    }
}

/// Per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Dim {
                expected: height * width,
                actual: data.len(),
            });
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &c in &self.data {
            counts[c as usize] += 1;
        }
        counts
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn to_raster(&self) -> pnm::Raster {
        pnm::Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.clone(),
        }
    }

    pub fn from_raster(raster: pnm::Raster) -> Result<Self> {
        if raster.channels != 1 {
            return Err(Error::format("label maps must be P5 greyscale"));
        }
        LabelMap::new(raster.height, raster.width, raster.data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub cube: SpectralCube,
    pub labels: LabelMap,
    pub fingerprint: u64,
}

impl LabeledScene {
    pub fn new(cube: SpectralCube, labels: LabelMap, fingerprint: u64) -> Result<Self> {
        if cube.height() != labels.height() || cube.width() != labels.width() {
            return Err(Error::shape(format!(
                "cube is {}x{} but labels are {}x{}",
                cube.height(),
                cube.width(),
                labels.height(),
                labels.width()
            )));
        }
        Ok(LabeledScene {
            cube,
            labels,
            fingerprint,
        })
    }
}

/// Site-to-class assignment before shuffling.
fn site_classes(config: &SceneConfig) -> Vec<u8> {
    let n = config.classes.len();
    let sites = config.n_regions;
    match config.dominant_share {
        None => (0..sites).map(|i| (i % n) as u8).collect(),
        Some(share) => {
            let dominant = ((share * sites as f64).round() as usize).clamp(1, sites - (n - 1));
            let mut out = vec![0u8; dominant];
            out.extend((0..sites - dominant).map(|i| (1 + i % (n - 1)) as u8));
            out
        }
    }
}

pub fn generate_scene(config: &SceneConfig) -> Result<LabeledScene> {
    config.validate()?;
    let (h, w) = (config.height, config.width);

    let mut layout = rng::stream(config.seed, streams::SCENE_LAYOUT);
    // distinct pixel positions, so each site owns at least its own pixel
    let mut positions: Vec<usize> = (0..h * w).collect();
    let (chosen, _) = positions.partial_shuffle(&mut layout, config.n_regions);
    let sites: Vec<(f64, f64)> = chosen
        .iter()
        .map(|&p| ((p / w) as f64, (p % w) as f64))
        .collect();
    let mut classes = site_classes(config);
    classes.shuffle(&mut layout);

    let mut labels = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for (i, &(sy, sx)) in sites.iter().enumerate() {
                let d = (y as f64 - sy).powi(2) + (x as f64 - sx).powi(2);
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            labels.set(y, x, classes[best]);
        }
    }

    // three low-frequency cosine waves averaged into a field in [0,1]
    let waves: Vec<[f64; 3]> = (0..3)
        .map(|_| {
            [
                layout.random_range(0.2..1.0),
                layout.random_range(0.2..1.0),
                layout.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let shade = |y: usize, x: usize| -> f64 {
        let f: f64 = waves
            .iter()
            .map(|[fx, fy, phase]| {
                let arg = std::f64::consts::TAU
                    * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                    + phase;
                0.5 * (1.0 + arg.cos())
            })
            .sum::<f64>()
            / waves.len() as f64;
        1.0 - config.shading_strength * f
    };

    let mut jitter = rng::stream(config.seed, streams::SCENE_JITTER);
    let mut cube = SpectralCube::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let class = config.class_by_id(labels.get(y, x));
            let s = shade(y, x);
            for k in 0..BAND_COUNT {
                let g: f64 = jitter.sample(StandardNormal);
                let v = class.base_spectrum[k] * (1.0 + class.spectral_jitter * g) * s;
                let i = cube.index(k, y, x);
                cube.data_mut()[i] = v.clamp(0.0, 1.0);
            }
        }
    }

    LabeledScene::new(cube, labels, config.fingerprint())
}

/// Normalised Gaussian taps, truncated at 3σ.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Separable Gaussian blur of one plane with edge replication.
fn blur_plane(plane: &mut [f64], h: usize, w: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + t as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + t as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            plane[y * w + x] = acc;
        }
    }
}

/// Blur, attenuate and add noise band by band, clamping to [0,1]. The label
/// map is carried through untouched.
pub fn apply_degradations(
    scene: &LabeledScene,
    deg: &DegradationConfig,
    seed: u64,
) -> Result<LabeledScene> {
    deg.validate()?;
    let mut h = Sha256::new();
    h.update(b"degrade");
    h.update(scene.fingerprint.to_le_bytes());
    h.update(deg.blur_sigma_px.to_le_bytes());
    h.update(deg.noise_sigma.to_le_bytes());
    h.update(deg.attenuation_depth.to_le_bytes());
    for a in deg.attenuation_alpha {
        h.update(a.to_le_bytes());
    }
    h.update(seed.to_le_bytes());
    let fingerprint = digest_u64(h);

    if deg.is_identity() {
        return Ok(LabeledScene {
            fingerprint,
            ..scene.clone()
        });
    }

    let mut cube = scene.cube.clone();
    let (hh, ww) = (cube.height(), cube.width());
    let kernel = (deg.blur_sigma_px > 0.0).then(|| gaussian_kernel(deg.blur_sigma_px));
    let mut noise = rng::stream(seed, streams::DEGRADATION);
    for k in 0..BAND_COUNT {
        let factor = (-deg.attenuation_alpha[k] * deg.attenuation_depth).exp();
        let plane = cube.band_mut(k);
        if let Some(kernel) = &kernel {
            blur_plane(plane, hh, ww, kernel);
        }
        for v in plane.iter_mut() {
            let mut out = *v * factor;
            if deg.noise_sigma > 0.0 {
                let g: f64 = noise.sample(StandardNormal);
                out += deg.noise_sigma * g;
            }
            *v = out.clamp(0.0, 1.0);
        }
    }
    LabeledScene::new(cube, scene.labels.clone(), fingerprint)
}

/// `count` scenes; scene `i` is generated and degraded with seed `seed + i`.
pub fn generate_dataset(
    config: &SceneConfig,
    deg: &DegradationConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<LabeledScene>> {
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    (0..count as u64)
        .map(|i| {
            let scene_seed = seed.wrapping_add(i);
            let cfg = SceneConfig {
                seed: scene_seed,
                ..config.clone()
            };
            apply_degradations(&generate_scene(&cfg)?, deg, scene_seed)
        })
        .collect()
}

/// Writes `<stem>.spc` and `<stem>.pgm`.
pub fn save_scene(dir: &Path, stem: &str, scene: &LabeledScene) -> Result<()> {
    spc1::save(&dir.join(format!("{stem}.spc")), &scene.cube)?;
    pnm::save(&dir.join(format!("{stem}.pgm")), &scene.labels.to_raster())
}

pub fn load_scene(dir: &Path, stem: &str, fingerprint: u64) -> Result<LabeledScene> {
    let cube = spc1::load(&dir.join(format!("{stem}.spc")))?;
    let labels = LabelMap::from_raster(pnm::load(&dir.join(format!("{stem}.pgm")))?)?;
    LabeledScene::new(cube, labels, fingerprint).map_err(|e| Error::format(e.to_string()))
}

/// Sidecar listing the seed, class names and the scenes of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: u64,
    pub class_names: Vec<String>,
    /// (file stem, scene fingerprint)
    pub scenes: Vec<(String, u64)>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.txt";

    pub fn format(&self) -> String {
        let mut out = String::from("# scene dataset manifest\n");
        writeln!(out, "seed {}", self.seed).unwrap();
        writeln!(out, "config_hash {:016x}", self.config_hash).unwrap();
        writeln!(out, "classes {}", self.class_names.join(" ")).unwrap();
        for (stem, fp) in &self.scenes {
            writeln!(out, "scene {stem} {fp:016x}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut config_hash = None;
        let mut class_names = None;
        let mut scenes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let mut f = line.split_whitespace();
            match f.next().unwrap() {
                "seed" => {
                    seed = Some(
                        f.next()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| err("bad seed"))?,
                    )
                }
                "config_hash" => {
                    config_hash = Some(
                        f.next()
                            .and_then(|v| u64::from_str_radix(v, 16).ok())
                            .ok_or_else(|| err("bad config_hash"))?,
                    )
                }
                "classes" => class_names = Some(f.map(str::to_string).collect::<Vec<_>>()),
                "scene" => {
                    let stem = f.next().ok_or_else(|| err("missing scene name"))?;
                    let fp = f
                        .next()
                        .and_then(|v| u64::from_str_radix(v, 16).ok())
                        .ok_or_else(|| err("bad scene fingerprint"))?;
                    scenes.push((stem.to_string(), fp));
                }
                other => return Err(err(&format!("unknown manifest entry {other:?}"))),
            }
        }
        let missing = |k: &str| Error::format(format!("manifest is missing `{k}`"));
        let class_names = class_names.ok_or_else(|| missing("classes"))?;
        if class_names.len() < 2 {
            return Err(Error::format("manifest lists fewer than 2 classes"));
        }
        Ok(Manifest {
            seed: seed.ok_or_else(|| missing("seed"))?,
            config_hash: config_hash.ok_or_else(|| missing("config_hash"))?,
            class_names,
            scenes,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::io::write_file(&dir.join(Self::FILE_NAME), self.format().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(&crate::io::read_text(&dir.join(Self::FILE_NAME))?)
    }

    /// Loads every scene listed, checking label ids against the class list.
    pub fn load_scenes(&self, dir: &Path) -> Result<Vec<LabeledScene>> {
        self.scenes
            .iter()
            .map(|(stem, fp)| {
                let scene = load_scene(dir, stem, *fp)?;
                if scene.labels.max_class() as usize >= self.class_names.len() {
                    return Err(Error::format(format!(
                        "{stem}.pgm has class id {} but only {} classes exist",
                        scene.labels.max_class(),
                        self.class_names.len()
                    )));
                }
                Ok(scene)
            })
            .collect()
    }
}
