//! Training and evaluation of the segmentation network.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::io::pnm::Raster;
use crate::nn::{adam_step, sgd_step, AdamConfig, AdamState, Gradients, Mode, Tensor, UNetModel};
use crate::rng::{self, streams};
use crate::scene::{LabelMap, LabeledScene};
use crate::spectral::{SpectralCube, BAND_COUNT};

pub const MIN_SCENES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(AdamConfig),
}

impl Optimizer {
    pub fn learning_rate(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } => *lr,
            Optimizer::Adam(c) => c.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Expand the training split by the dihedral variants of every scene.
    pub augment: bool,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            optimizer: Optimizer::Sgd { lr: 0.001 },
            augment: true,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail("val_fraction must lie strictly between 0 and 1");
        }
        let lr = self.optimizer.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return fail("learning rate must be positive");
        }
        if let Optimizer::Adam(c) = &self.optimizer {
            if !((0.0..1.0).contains(&c.beta1) && (0.0..1.0).contains(&c.beta2) && c.eps > 0.0) {
                return fail("Adam needs betas in [0,1) and a positive epsilon");
            }
        }
        Ok(())
    }
}

/// Inverse-frequency weights `N / (C · n_c)`; absent classes get 0.
pub fn compute_class_weights<'a>(
    maps: impl IntoIterator<Item = &'a LabelMap>,
    n_classes: usize,
) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_classes];
    for m in maps {
        for &c in m.data() {
            let c = c as usize;
            if c >= n_classes {
                return Err(Error::invalid(format!(
                    "label {c} out of range for {n_classes} classes"
                )));
            }
            counts[c] += 1;
        }
    }
    Ok(weights_from_counts(&counts))
}

pub fn weights_from_counts(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let c = counts.len() as f64;
    counts
        .iter()
        .map(|&n| {
            if n == 0 {
                0.0
            } else {
                total as f64 / (c * n as f64)
            }
        })
        .collect()
}

/// Element of the dihedral group of the square: `rotation` quarter turns
/// clockwise, applied after an optional left-right mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub mirror: bool,
    pub rotation: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        mirror: false,
        rotation: 0,
    };

    pub fn all() -> [Dihedral; 8] {
        std::array::from_fn(|i| Dihedral {
            mirror: i >= 4,
            rotation: (i % 4) as u8,
        })
    }

    /// The variants that keep a non-square image's shape.
    pub fn shape_preserving() -> [Dihedral; 4] {
        [0, 2, 4, 6].map(|i| Dihedral::all()[i])
    }

    fn output_shape(&self, h: usize, w: usize) -> (usize, usize) {
        if self.rotation % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source pixel for output pixel (y, x) of an `h × w` input.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (oh, ow) = self.output_shape(h, w);
        // undo the rotation
        let (mut sy, mut sx) = (y, x);
        let (mut ch, mut cw) = (oh, ow);
        for _ in 0..self.rotation % 4 {
            // one clockwise quarter turn maps (r, c) of a ch' × cw' image to
            // (c, ch' − 1 − r); invert it on the current ch × cw grid
            let (r, c) = (cw - 1 - sx, sy);
            sy = r;
            sx = c;
            std::mem::swap(&mut ch, &mut cw);
        }
        if self.mirror {
            sx = w - 1 - sx;
        }
        (sy, sx)
    }

    pub fn apply_labels(&self, labels: &LabelMap) -> LabelMap {
        let (h, w) = (labels.height(), labels.width());
        let (oh, ow) = self.output_shape(h, w);
        let mut out = LabelMap::filled(oh, ow, 0);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source(y, x, h, w);
                out.set(y, x, labels.get(sy, sx));
            }
        }
        out
    }

    pub fn apply_cube(&self, cube: &SpectralCube) -> SpectralCube {
        let (h, w) = (cube.height(), cube.width());
        let (oh, ow) = self.output_shape(h, w);
        let mut out = SpectralCube::zeros(oh, ow);
        let map: Vec<usize> = (0..oh * ow)
            .map(|i| {
                let (sy, sx) = self.source(i / ow, i % ow, h, w);
                sy * w + sx
            })
            .collect();
        for b in 0..BAND_COUNT {
            let src = cube.band(b);
            for (o, &s) in out.band_mut(b).iter_mut().zip(&map) {
                *o = src[s];
            }
        }
        out
    }

    pub fn apply(&self, scene: &LabeledScene) -> LabeledScene {
        LabeledScene {
            cube: self.apply_cube(&scene.cube),
            labels: self.apply_labels(&scene.labels),
            fingerprint: scene.fingerprint,
        }
    }
}

/// The 8 dihedral variants of a square scene, or the 4 shape-preserving
/// ones of a non-square scene. The identity comes first.
pub fn augment(scene: &LabeledScene) -> Vec<LabeledScene> {
    if scene.labels.height() == scene.labels.width() {
        Dihedral::all().iter().map(|d| d.apply(scene)).collect()
    } else {
        Dihedral::shape_preserving()
            .iter()
            .map(|d| d.apply(scene))
            .collect()
    }
}

/// Validation and training indices of a dataset of `n` scenes.
///
/// `round(val_fraction · n)` scenes (clamped to `1..n`) chosen by a seeded
/// shuffle are held out; both lists are returned in ascending order.
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, streams::TRAIN_SPLIT));
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_mean_iou: Vec<f64>,
}

impl History {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    /// `epoch,train_loss,val_loss,val_mean_iou`, epochs counted from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_mean_iou\n");
        for e in 0..self.epochs() {
            writeln!(
                out,
                "{},{},{},{}",
                e + 1,
                self.train_loss[e],
                self.val_loss[e],
                self.val_mean_iou[e]
            )
            .unwrap();
        }
        out
    }
}

/// Batch of cubes in NCHW order.
pub fn cubes_to_tensor(cubes: &[&SpectralCube]) -> Result<Tensor> {
    let first = cubes.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(cubes.len() * BAND_COUNT * h * w);
    for c in cubes {
        if c.height() != h || c.width() != w {
            return Err(Error::shape(format!(
                "batch mixes {h}x{w} and {}x{} cubes",
                c.height(),
                c.width()
            )));
        }
        data.extend_from_slice(c.data());
    }
    Tensor::from_vec([cubes.len(), BAND_COUNT, h, w], data)
}

fn argmax_masks(probs: &Tensor) -> Vec<LabelMap> {
    let [n, c, h, w] = probs.shape();
    let plane = h * w;
    let p = probs.data();
    (0..n)
        .map(|b| {
            let data = (0..plane)
                .map(|q| {
                    let mut best = 0;
                    for k in 1..c {
                        if p[(b * c + k) * plane + q] > p[(b * c + best) * plane + q] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, data).expect("nonempty plane")
        })
        .collect()
}

/// Per-pixel argmax of the network output, lowest class id on ties.
pub fn predict_mask(model: &UNetModel, cube: &SpectralCube) -> Result<LabelMap> {
    let probs = model.forward(&cubes_to_tensor(&[cube])?, Mode::Inference)?;
    Ok(argmax_masks(&probs).pop().unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` when the class occurs in neither mask.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over the defined entries of `per_class_iou`.
    pub mean_iou: f64,
    /// `confusion[truth][predicted]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
}

impl IouReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let c = confusion.len();
        let per_class_iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = confusion[k][k];
                let fn_: u64 = confusion[k].iter().sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|t| confusion[t][k]).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let mean_iou = if defined.is_empty() {
            f64::NAN
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        IouReport {
            per_class_iou,
            mean_iou,
            confusion,
        }
    }

    /// `class,iou` rows followed by `mean,<value>`; undefined entries are
    /// left empty.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,iou\n");
        for (k, v) in self.per_class_iou.iter().enumerate() {
            let name = class_names.get(k).cloned().unwrap_or_else(|| k.to_string());
            match v {
                Some(v) => writeln!(out, "{name},{v}").unwrap(),
                None => writeln!(out, "{name},").unwrap(),
            }
        }
        writeln!(out, "mean,{}", self.mean_iou).unwrap();
        out
    }
}

/// Adds the (truth, prediction) pairs of one mask pair to `confusion`.
pub fn accumulate_confusion(
    confusion: &mut [Vec<u64>],
    pred: &LabelMap,
    gt: &LabelMap,
) -> Result<()> {
    if pred.height() != gt.height() {
        return Err(Error::Dim {
            expected: gt.height(),
            actual: pred.height(),
        });
    }
    if pred.width() != gt.width() {
        return Err(Error::Dim {
            expected: gt.width(),
            actual: pred.width(),
        });
    }
    let c = confusion.len();
    for (&p, &t) in pred.data().iter().zip(gt.data()) {
        if p as usize >= c || t as usize >= c {
            return Err(Error::invalid(format!(
                "label {} out of range for {c} classes",
                p.max(t)
            )));
        }
        confusion[t as usize][p as usize] += 1;
    }
    Ok(())
}

pub fn iou(pred: &LabelMap, gt: &LabelMap, n_classes: usize) -> Result<IouReport> {
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    accumulate_confusion(&mut confusion, pred, gt)?;
    Ok(IouReport::from_confusion(confusion))
}

/// IoU of the masks predicted for `scenes`, pooled over one confusion
/// matrix, plus the weighted cross-entropy over all their pixels.
pub fn evaluate_scenes(
    model: &UNetModel,
    scenes: &[&LabeledScene],
    class_weights: &[f64],
) -> Result<(IouReport, f64)> {
    let n_classes = model.config().n_classes;
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    let (mut wsum, mut wtotal) = (0.0, 0.0);
    for s in scenes {
        let probs = model.forward(&cubes_to_tensor(&[&s.cube])?, Mode::Inference)?;
        let loss = crate::nn::weighted_ce_loss(&probs, s.labels.data(), class_weights)?;
        wsum += loss.weighted_sum;
        wtotal += loss.weight_total;
        let mask = argmax_masks(&probs).pop().unwrap();
        accumulate_confusion(&mut confusion, &mask, &s.labels)?;
    }
    let loss = if wtotal > 0.0 { wsum / wtotal } else { 0.0 };
    Ok((IouReport::from_confusion(confusion), loss))
}

/// Trains `model` in place on a seeded split of `dataset`.
///
/// Class weights come from the training split. Every epoch visits the
/// (optionally augmented) training samples in a fresh seeded order, with a
/// final partial batch when the count is not a multiple of the batch size,
/// and then scores the unaugmented validation split.
pub fn train(
    mut model: UNetModel,
    dataset: &[LabeledScene],
    config: &TrainConfig,
) -> Result<(UNetModel, History)> {
    config.validate()?;
    if dataset.len() < MIN_SCENES {
        return Err(Error::Config(format!(
            "training needs at least {MIN_SCENES} scenes, got {}",
            dataset.len()
        )));
    }
    let n_classes = model.config().n_classes;
    let (h, w) = (dataset[0].labels.height(), dataset[0].labels.width());
    for s in dataset {
        if s.labels.height() != h || s.labels.width() != w {
            return Err(Error::shape("all training scenes must share one size"));
        }
        if s.labels.max_class() as usize >= n_classes {
            return Err(Error::Config(format!(
                "label {} exceeds the model's {n_classes} classes",
                s.labels.max_class()
            )));
        }
    }

    let (train_idx, val_idx) = train_val_split(dataset.len(), config.val_fraction, config.seed);
    let weights = compute_class_weights(train_idx.iter().map(|&i| &dataset[i].labels), n_classes)?;
    let samples: Vec<LabeledScene> = if config.augment {
        train_idx
            .iter()
            .flat_map(|&i| augment(&dataset[i]))
            .collect()
    } else {
        train_idx.iter().map(|&i| dataset[i].clone()).collect()
    };
    let val: Vec<&LabeledScene> = val_idx.iter().map(|&i| &dataset[i]).collect();

    let mut shuffle = rng::stream(config.seed, streams::TRAIN_SHUFFLE);
    let mut adam = match config.optimizer {
        Optimizer::Adam(_) => Some(AdamState::new(&model)),
        Optimizer::Sgd { .. } => None,
    };
    let mut dropout_calls = 0u64;
    let mut history = History::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let (mut wsum, mut wtotal) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let cubes: Vec<&SpectralCube> = batch.iter().map(|&i| &samples[i].cube).collect();
            let input = cubes_to_tensor(&cubes)?;
            let labels: Vec<u8> = batch
                .iter()
                .flat_map(|&i| samples[i].labels.data().iter().copied())
                .collect();
            let mode = Mode::Train {
                seed: config.seed,
                dropout_calls: &mut dropout_calls,
            };
            let (loss, grads) = model.loss_and_gradients(&input, &labels, &weights, mode)?;
            wsum += loss.weighted_sum;
            wtotal += loss.weight_total;
            step(&mut model, &grads, &config.optimizer, adam.as_mut())?;
        }
        let (report, val_loss) = evaluate_scenes(&model, &val, &weights)?;
        history
            .train_loss
            .push(if wtotal > 0.0 { wsum / wtotal } else { 0.0 });
        history.val_loss.push(val_loss);
        history.val_mean_iou.push(report.mean_iou);
    }
    Ok((model, history))
}

fn step(
    model: &mut UNetModel,
    grads: &Gradients,
    optimizer: &Optimizer,
    adam: Option<&mut AdamState>,
) -> Result<()> {
    match (optimizer, adam) {
        (Optimizer::Sgd { lr }, _) => sgd_step(model, grads, *lr),
        (Optimizer::Adam(cfg), Some(state)) => adam_step(model, grads, state, cfg),
        (Optimizer::Adam(_), None) => unreachable!("Adam state is created with the optimizer"),
    }
}

/// Colours for class ids 0..8; larger ids reuse them cyclically.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

/// Colour-coded P6 rendering of a mask.
pub fn mask_to_color(mask: &LabelMap) -> Raster {
    Raster {
        width: mask.width(),
        height: mask.height(),
        channels: 3,
        data: mask
            .data()
            .iter()
            .flat_map(|&c| PALETTE[c as usize % PALETTE.len()])
            .collect(),
    }
}
