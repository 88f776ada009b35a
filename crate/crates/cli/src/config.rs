//! Flat `section.key = value` pipeline configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; an empty
//! file yields [`PipelineConfig::default`]. Unknown keys, repeated keys and
//! out-of-range values are errors.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use spectraseg::io::pnm::Transfer;
use spectraseg::nn::AdamConfig;
use spectraseg::scene::{DegradationConfig, MIN_SCENE_SIDE};
use spectraseg::train::Optimizer;
use spectraseg::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSection {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub regions: usize,
    pub shading: f64,
    /// `None` spreads sites evenly over the classes.
    pub dominant_share: Option<f64>,
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationSection {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Strength of the water-like attenuation profile.
    pub attenuation: f64,
    pub depth: f64,
}

impl DegradationSection {
    pub fn to_core(&self) -> DegradationConfig {
        DegradationConfig {
            blur_sigma_px: self.blur_sigma,
            noise_sigma: self.noise_sigma,
            attenuation_alpha: DegradationConfig::water_alpha(self.attenuation),
            attenuation_depth: self.depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionSection {
    pub noise_sigma: f64,
    /// Camera table; the built-in synthetic camera when absent.
    pub camera: Option<PathBuf>,
    pub gamma: Transfer,
    /// Every `fit_stride`-th pixel of every scene is a training spectrum.
    pub fit_stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSection {
    pub size: usize,
    pub stride: usize,
    pub k: usize,
    /// Upper bound on the patches used to fit the PCA.
    pub pca_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub augment: bool,
    pub val_fraction: f64,
    pub depth: usize,
    pub base_filters: usize,
    pub dilation: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub scene: SceneSection,
    pub degradation: DegradationSection,
    pub reconstruction: ReconstructionSection,
    pub patch: PatchSection,
    pub training: TrainingSection,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scene: SceneSection {
                count: 20,
                height: 64,
                width: 64,
                classes: 4,
                regions: 12,
                shading: 0.3,
                dominant_share: Some(0.6),
                jitter: 0.02,
            },
            degradation: DegradationSection {
                blur_sigma: 0.0,
                noise_sigma: 0.0,
                attenuation: 0.0,
                depth: 0.0,
            },
            reconstruction: ReconstructionSection {
                noise_sigma: 0.01,
                camera: None,
                gamma: Transfer::Linear,
                fit_stride: 7,
            },
            patch: PatchSection {
                size: 7,
                stride: 3,
                k: 3,
                pca_samples: 400,
            },
            training: TrainingSection {
                epochs: 30,
                batch_size: 4,
                optimizer: Optimizer::Sgd { lr: 0.001 },
                augment: true,
                val_fraction: 0.2,
                depth: 5,
                base_filters: 8,
                dilation: 2,
                dropout: 0.1,
            },
            out: PathBuf::from("out"),
        }
    }
}

const KEYS: &[&str] = &[
    "scene.count",
    "scene.height",
    "scene.width",
    "scene.classes",
    "scene.regions",
    "scene.shading",
    "scene.dominant_share",
    "scene.jitter",
    "degradation.blur_sigma",
    "degradation.noise_sigma",
    "degradation.attenuation",
    "degradation.depth",
    "reconstruction.noise_sigma",
    "reconstruction.camera",
    "reconstruction.gamma",
    "reconstruction.fit_stride",
    "patch.size",
    "patch.stride",
    "patch.k",
    "patch.pca_samples",
    "training.epochs",
    "training.batch_size",
    "training.optimizer",
    "training.lr",
    "training.augment",
    "training.val_fraction",
    "training.depth",
    "training.base_filters",
    "training.dilation",
    "training.dropout",
    "paths.out",
];

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        key: key.to_string(),
        message: message.into(),
    }
}

struct Values {
    map: HashMap<String, String>,
}

impl Values {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| invalid(key, format!("expected a nonnegative integer, got {v:?}"))),
        }
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(invalid(key, format!("expected a finite number, got {v:?}"))),
            },
        }
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(invalid(key, format!("expected true or false, got {v:?}"))),
        }
    }
}

/// Splits the text into key/value pairs, checking syntax, uniqueness and
/// key names.
fn parse_pairs(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |m: String| Error::Parse {
            line: line_no,
            message: m,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected `section.key = value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.split('.').count() != 2 || key.split('.').any(str::is_empty) {
            return Err(parse_err(format!(
                "key {key:?} is not of the form section.key"
            )));
        }
        if value.is_empty() {
            return Err(parse_err(format!("missing value for {key}")));
        }
        if map.contains_key(key) {
            return Err(parse_err(format!("duplicate key {key}")));
        }
        if !KEYS.contains(&key) {
            return Err(invalid(key, "unknown key"));
        }
        map.insert(key.to_string(), value.to_string());
    }
    Ok(map)
}

/// Parses and validates configuration text. Relative file paths are
/// resolved against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<PipelineConfig> {
    let v = Values {
        map: parse_pairs(text)?,
    };
    let d = PipelineConfig::default();

    let scene = SceneSection {
        count: v.usize("scene.count", d.scene.count)?,
        height: v.usize("scene.height", d.scene.height)?,
        width: v.usize("scene.width", d.scene.width)?,
        classes: v.usize("scene.classes", d.scene.classes)?,
        regions: v.usize("scene.regions", d.scene.regions)?,
        shading: v.f64("scene.shading", d.scene.shading)?,
        dominant_share: match v.raw("scene.dominant_share") {
            None => d.scene.dominant_share,
            Some("none") => None,
            Some(_) => Some(v.f64("scene.dominant_share", 0.0)?),
        },
        jitter: v.f64("scene.jitter", d.scene.jitter)?,
    };
    let degradation = DegradationSection {
        blur_sigma: v.f64("degradation.blur_sigma", d.degradation.blur_sigma)?,
        noise_sigma: v.f64("degradation.noise_sigma", d.degradation.noise_sigma)?,
        attenuation: v.f64("degradation.attenuation", d.degradation.attenuation)?,
        depth: v.f64("degradation.depth", d.degradation.depth)?,
    };
    let reconstruction = ReconstructionSection {
        noise_sigma: v.f64("reconstruction.noise_sigma", d.reconstruction.noise_sigma)?,
        camera: v.raw("reconstruction.camera").map(|p| base.join(p)),
        gamma: match v.raw("reconstruction.gamma") {
            None | Some("linear") => Transfer::Linear,
            Some("srgb") => Transfer::Srgb,
            Some(other) => {
                return Err(invalid(
                    "reconstruction.gamma",
                    format!("expected linear or srgb, got {other:?}"),
                ))
            }
        },
        fit_stride: v.usize("reconstruction.fit_stride", d.reconstruction.fit_stride)?,
    };
    let patch = PatchSection {
        size: v.usize("patch.size", d.patch.size)?,
        stride: v.usize("patch.stride", d.patch.stride)?,
        k: v.usize("patch.k", d.patch.k)?,
        pca_samples: v.usize("patch.pca_samples", d.patch.pca_samples)?,
    };
    let lr = v.f64("training.lr", d.training.optimizer.learning_rate())?;
    let training = TrainingSection {
        epochs: v.usize("training.epochs", d.training.epochs)?,
        batch_size: v.usize("training.batch_size", d.training.batch_size)?,
        optimizer: match v.raw("training.optimizer") {
            None | Some("sgd") => Optimizer::Sgd { lr },
            Some("adam") => Optimizer::Adam(AdamConfig {
                lr,
                ..AdamConfig::default()
            }),
            Some(other) => {
                return Err(invalid(
                    "training.optimizer",
                    format!("expected sgd or adam, got {other:?}"),
                ))
            }
        },
        augment: v.bool("training.augment", d.training.augment)?,
        val_fraction: v.f64("training.val_fraction", d.training.val_fraction)?,
        depth: v.usize("training.depth", d.training.depth)?,
        base_filters: v.usize("training.base_filters", d.training.base_filters)?,
        dilation: v.usize("training.dilation", d.training.dilation)?,
        dropout: v.f64("training.dropout", d.training.dropout)?,
    };
    let out = v.raw("paths.out").map_or(d.out, |p| base.join(p));
    let config = PipelineConfig {
        scene,
        degradation,
        reconstruction,
        patch,
        training,
        out,
    };
    validate(&config)?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}

fn check(ok: bool, key: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(invalid(key, message))
    }
}

fn validate(c: &PipelineConfig) -> Result<()> {
    let s = &c.scene;
    check(s.count >= 1, "scene.count", "must be at least 1")?;
    check(
        s.height >= MIN_SCENE_SIDE,
        "scene.height",
        "must be at least 16",
    )?;
    check(
        s.width >= MIN_SCENE_SIDE,
        "scene.width",
        "must be at least 16",
    )?;
    check(
        (2..=8).contains(&s.classes),
        "scene.classes",
        "must lie in 2..=8",
    )?;
    check(
        s.regions >= s.classes,
        "scene.regions",
        "must be at least scene.classes",
    )?;
    check(
        (0.0..=1.0).contains(&s.shading),
        "scene.shading",
        "must lie in [0,1]",
    )?;
    if let Some(share) = s.dominant_share {
        check(
            (0.0..=1.0).contains(&share),
            "scene.dominant_share",
            "must lie in [0,1] or be none",
        )?;
    }
    check(s.jitter >= 0.0, "scene.jitter", "must be nonnegative")?;

    let d = &c.degradation;
    check(
        d.blur_sigma >= 0.0,
        "degradation.blur_sigma",
        "must be nonnegative",
    )?;
    check(
        d.noise_sigma >= 0.0,
        "degradation.noise_sigma",
        "must be nonnegative",
    )?;
    check(
        d.attenuation >= 0.0,
        "degradation.attenuation",
        "must be nonnegative",
    )?;
    check(d.depth >= 0.0, "degradation.depth", "must be nonnegative")?;

    let r = &c.reconstruction;
    check(
        r.noise_sigma >= 0.0,
        "reconstruction.noise_sigma",
        "must be nonnegative",
    )?;
    check(
        r.fit_stride >= 1,
        "reconstruction.fit_stride",
        "must be at least 1",
    )?;
    if let Some(p) = &r.camera {
        check(
            p.is_file(),
            "reconstruction.camera",
            &format!("{} does not exist", p.display()),
        )?;
    }

    let p = &c.patch;
    check(p.size % 2 == 1, "patch.size", "must be odd")?;
    check(
        p.size <= s.height.min(s.width),
        "patch.size",
        "must not exceed the scene size",
    )?;
    check(p.stride >= 1, "patch.stride", "must be at least 1")?;
    check(p.k >= 1, "patch.k", "must be at least 1")?;
    check(
        p.pca_samples >= 2,
        "patch.pca_samples",
        "must be at least 2",
    )?;

    let t = &c.training;
    check(t.epochs >= 1, "training.epochs", "must be at least 1")?;
    check(
        t.batch_size >= 1,
        "training.batch_size",
        "must be at least 1",
    )?;
    check(
        t.optimizer.learning_rate() > 0.0,
        "training.lr",
        "must be positive",
    )?;
    check(
        t.val_fraction > 0.0 && t.val_fraction < 1.0,
        "training.val_fraction",
        "must lie in (0,1)",
    )?;
    check(
        (1..=8).contains(&t.depth),
        "training.depth",
        "must lie in 1..=8",
    )?;
    check(
        t.base_filters >= 1,
        "training.base_filters",
        "must be at least 1",
    )?;
    check(t.dilation >= 1, "training.dilation", "must be at least 1")?;
    check(
        (0.0..1.0).contains(&t.dropout),
        "training.dropout",
        "must lie in [0,1)",
    )?;
    let divisor = 1usize << (t.depth - 1);
    check(
        s.height % divisor == 0 && s.width % divisor == 0,
        "scene.height",
        &format!(
            "scene sides must be multiples of {divisor} for a depth-{} network",
            t.depth
        ),
    )?;
    Ok(())
}
