//! Patch-level analysis of labelled spectral cubes.
//!
//! Square `size × size × 36` patches are cut from the valid region of a cube
//! and labelled by their centre pixel. [`pca_fit`] projects them to a handful
//! of components, [`fit_baselines`] scores three classical classifiers on a
//! stratified split, and [`separability_report`] summarises how much the
//! classes overlap in a projected space.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::scene::LabelMap;
use crate::spectral::{SpectralCube, BAND_COUNT};

pub const DEFAULT_PATCH_SIZE: usize = 7;

/// Row-major `len × dim` feature vectors with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVectors {
    dim: usize,
    data: Vec<f64>,
    labels: Vec<u8>,
}

impl LabeledVectors {
    pub fn new(dim: usize, data: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if data.len() != dim * labels.len() {
            return Err(Error::shape(format!(
                "{} values for {} vectors of length {dim}",
                data.len(),
                labels.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature vectors must be finite"));
        }
        Ok(LabeledVectors { dim, data, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Number of classes implied by the largest label.
    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| *m as usize + 1)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for l in &self.labels {
            counts[*l as usize] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> LabeledVectors {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        LabeledVectors {
            dim: self.dim,
            data,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn extend(&mut self, other: &LabeledVectors) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Dim {
                expected: self.dim,
                actual: other.dim,
            });
        }
        self.data.extend_from_slice(&other.data);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    patch_size: usize,
    samples: LabeledVectors,
}

impl PatchDataset {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Flattened patches, each `size² · 36` long in (row, column, band) order.
    pub fn samples(&self) -> &LabeledVectors {
        &self.samples
    }

    pub fn into_samples(self) -> LabeledVectors {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Appends the patches of another dataset with the same patch size.
    pub fn extend(&mut self, other: &PatchDataset) -> Result<()> {
        if other.patch_size != self.patch_size {
            return Err(Error::Size(format!(
                "cannot merge patch sizes {} and {}",
                self.patch_size, other.patch_size
            )));
        }
        self.samples.extend(&other.samples)
    }
}

/// Number of patch positions along one axis.
pub fn patch_positions(side: usize, size: usize, stride: usize) -> usize {
    if size > side || stride == 0 {
        0
    } else {
        (side - size) / stride + 1
    }
}

/// Patches over the valid region (no padding), top-left corners on a
/// `stride` grid, each labelled by its centre pixel.
pub fn extract_patches(
    cube: &SpectralCube,
    labels: &LabelMap,
    size: usize,
    stride: usize,
) -> Result<PatchDataset> {
    let (h, w) = (cube.height(), cube.width());
    if labels.height() != h || labels.width() != w {
        return Err(Error::shape(format!(
            "cube is {h}x{w} but labels are {}x{}",
            labels.height(),
            labels.width()
        )));
    }
    if size % 2 == 0 || size == 0 {
        return Err(Error::Size(format!("patch size must be odd, got {size}")));
    }
    if size > h.min(w) {
        return Err(Error::Size(format!(
            "patch size {size} exceeds image {h}x{w}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let (ny, nx) = (
        patch_positions(h, size, stride),
        patch_positions(w, size, stride),
    );
    let dim = size * size * BAND_COUNT;
    let mut data = Vec::with_capacity(ny * nx * dim);
    let mut out_labels = Vec::with_capacity(ny * nx);
    for py in 0..ny {
        for px in 0..nx {
            let (y0, x0) = (py * stride, px * stride);
            for dy in 0..size {
                for dx in 0..size {
                    for b in 0..BAND_COUNT {
                        data.push(cube.get(b, y0 + dy, x0 + dx));
                    }
                }
            }
            out_labels.push(labels.get(y0 + size / 2, x0 + size / 2));
        }
    }
    Ok(PatchDataset {
        patch_size: size,
        samples: LabeledVectors::new(dim, data, out_labels)?,
    })
}

/// Eigen-decomposition of a symmetric `n × n` row-major matrix by cyclic
/// Jacobi rotations. Returns eigenvalues in descending order and the
/// matching eigenvectors as rows.
pub fn jacobi_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if matrix.len() != n * n {
        return Err(Error::shape(format!(
            "{} values for a {n}x{n} matrix",
            matrix.len()
        )));
    }
    let mut a = matrix.to_vec();
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs()
                > 1e-12 * (a[i * n + j].abs() + a[j * n + i].abs()).max(1.0)
            {
                return Err(Error::invalid("matrix is not symmetric"));
            }
        }
    }
    // v holds the eigenvectors as rows
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return Ok((
            vec![0.0; n],
            (0..n).map(|i| v[i * n..(i + 1) * n].to_vec()).collect(),
        ));
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J with J the (p, q) rotation
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vp = v[p * n + k];
                    let vq = v[q * n + k];
                    v[p * n + k] = c * vp - s * vq;
                    v[q * n + k] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| v[i * n..(i + 1) * n].to_vec())
        .collect();
    Ok((values, vectors))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// k × D, orthonormal rows.
    components: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    total_variance: f64,
}

impl PcaModel {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    /// Sample-covariance eigenvalues of the kept components, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Trace of the sample covariance.
    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .map(|l| {
                if self.total_variance > 0.0 {
                    l / self.total_variance
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Maps a k-vector of coordinates back to the input space.
    pub fn lift(&self, coords: &[f64]) -> Result<Vec<f64>> {
        if coords.len() != self.k() {
            return Err(Error::Dim {
                expected: self.k(),
                actual: coords.len(),
            });
        }
        let mut out = self.mean.clone();
        for (c, u) in coords.iter().zip(&self.components) {
            for (o, ui) in out.iter_mut().zip(u) {
                *o += c * ui;
            }
        }
        Ok(out)
    }
}

/// Top-`k` principal components of the rows of `data`.
///
/// The covariance is decomposed directly when `D ≤ N`. Otherwise the
/// `N × N` Gram matrix of the centred data is decomposed and its
/// eigenvectors are mapped back, which yields the same nonzero spectrum.
pub fn pca_fit(data: &LabeledVectors, k: usize) -> Result<PcaModel> {
    let (n, d) = (data.len(), data.dim());
    if k == 0 || k > n.min(d) {
        return Err(Error::Rank {
            requested: k,
            available: n.min(d),
        });
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(data.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<f64> = (0..n)
        .flat_map(|i| data.row(i).iter().zip(&mean).map(|(x, m)| x - m))
        .collect();
    let row = |i: usize| &centred[i * d..(i + 1) * d];
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let total_variance = centred.iter().map(|x| x * x).sum::<f64>() / denom;

    let (values, mut components) = if d <= n {
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            let r = row(i);
            for a in 0..d {
                let ra = r[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..d {
                    cov[a * d + b] += ra * r[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] /= denom;
                cov[b * d + a] = cov[a * d + b];
            }
        }
        let (vals, vecs) = jacobi_eigen(&cov, d)?;
        (vals[..k].to_vec(), vecs[..k].to_vec())
    } else {
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let g: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum::<f64>() / denom;
                gram[i * n + j] = g;
                gram[j * n + i] = g;
            }
        }
        let (vals, vecs) = jacobi_eigen(&gram, n)?;
        let mut comps = Vec::with_capacity(k);
        for v in vecs.iter().take(k) {
            let mut u = vec![0.0; d];
            for (i, vi) in v.iter().enumerate() {
                for (uj, xj) in u.iter_mut().zip(row(i)) {
                    *uj += vi * xj;
                }
            }
            comps.push(u);
        }
        (vals[..k].to_vec(), comps)
    };

    // Orthonormalise, which also covers directions of zero variance that
    // the Gram path leaves undetermined.
    let mut basis = 0;
    for c in 0..k {
        let (done, rest) = components.split_at_mut(c);
        let v = &mut rest[0];
        while !orthonormalize(v, done) {
            v.fill(0.0);
            v[basis % d] = 1.0;
            basis += 1;
        }
    }
    let eigenvalues = values.into_iter().map(|v| v.max(0.0)).collect();
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        total_variance,
    })
}

/// Two passes of Gram-Schmidt against `previous`, then normalisation.
/// Returns false when nothing independent remains.
fn orthonormalize(v: &mut [f64], previous: &[Vec<f64>]) -> bool {
    let before = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if before == 0.0 {
        return false;
    }
    for _ in 0..2 {
        for p in previous {
            let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-10 * before {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

/// `components · (x − mean)`.
pub fn pca_project(model: &PcaModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.dim() {
        return Err(Error::Dim {
            expected: model.dim(),
            actual: x.len(),
        });
    }
    Ok(model
        .components
        .iter()
        .map(|u| {
            u.iter()
                .zip(x)
                .zip(&model.mean)
                .map(|((ui, xi), mi)| ui * (xi - mi))
                .sum()
        })
        .collect())
}

/// Projects every row; the result keeps the labels.
pub fn pca_project_all(model: &PcaModel, data: &LabeledVectors) -> Result<LabeledVectors> {
    let mut out = Vec::with_capacity(data.len() * model.k());
    for i in 0..data.len() {
        out.extend(pca_project(model, data.row(i))?);
    }
    LabeledVectors::new(model.k(), out, data.labels().to_vec())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean 1-nearest-neighbour; ties go to the lowest training index.
#[derive(Debug, Clone)]
pub struct NearestNeighbor {
    train: LabeledVectors,
}

impl NearestNeighbor {
    pub fn fit(train: LabeledVectors) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data(
                "1-NN needs at least one training vector".into(),
            ));
        }
        Ok(NearestNeighbor { train })
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.train.len() {
            let d = sq_dist(self.train.row(i), x);
            if d < best.0 {
                best = (d, i);
            }
        }
        self.train.labels()[best.1]
    }
}

/// Assigns the class whose training mean is closest.
#[derive(Debug, Clone)]
pub struct NearestCentroid {
    centroids: Vec<Option<Vec<f64>>>,
}

impl NearestCentroid {
    pub fn fit(train: &LabeledVectors) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data(
                "nearest centroid needs training vectors".into(),
            ));
        }
        Ok(NearestCentroid {
            centroids: class_centroids(train),
        })
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        let mut best = (f64::INFINITY, 0u8);
        for (c, centroid) in self.centroids.iter().enumerate() {
            if let Some(m) = centroid {
                let d = sq_dist(m, x);
                if d < best.0 {
                    best = (d, c as u8);
                }
            }
        }
        best.1
    }
}

fn class_centroids(data: &LabeledVectors) -> Vec<Option<Vec<f64>>> {
    let c = data.n_classes();
    let mut sums = vec![vec![0.0; data.dim()]; c];
    let mut counts = vec![0usize; c];
    for i in 0..data.len() {
        let l = data.labels()[i] as usize;
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(data.row(i)) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            learning_rate: 0.5,
            iterations: 200,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression trained by full-batch gradient descent on
/// standardised features, starting from zero weights.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    shift: Vec<f64>,
    scale: Vec<f64>,
    /// n_classes × (dim + 1), bias last.
    weights: Vec<Vec<f64>>,
}

impl LogisticRegression {
    pub fn fit(train: &LabeledVectors, config: &LogisticConfig) -> Result<Self> {
        let (n, d, c) = (train.len(), train.dim(), train.n_classes());
        if n == 0 {
            return Err(Error::Data(
                "logistic regression needs training vectors".into(),
            ));
        }
        let mut shift = vec![0.0; d];
        for i in 0..n {
            shift
                .iter_mut()
                .zip(train.row(i))
                .for_each(|(s, x)| *s += x);
        }
        shift.iter_mut().for_each(|s| *s /= n as f64);
        let mut scale = vec![0.0; d];
        for i in 0..n {
            for ((s, x), m) in scale.iter_mut().zip(train.row(i)).zip(&shift) {
                *s += (x - m) * (x - m);
            }
        }
        for s in scale.iter_mut() {
            let sd = (*s / n as f64).sqrt();
            *s = if sd > 1e-12 { sd } else { 1.0 };
        }
        let mut model = LogisticRegression {
            shift,
            scale,
            weights: vec![vec![0.0; d + 1]; c],
        };
        let xs: Vec<Vec<f64>> = (0..n).map(|i| model.standardize(train.row(i))).collect();
        let mut grad = vec![vec![0.0; d + 1]; c];
        for _ in 0..config.iterations {
            grad.iter_mut().for_each(|g| g.fill(0.0));
            for (x, &label) in xs.iter().zip(train.labels()) {
                let p = model.probabilities_standardized(x);
                for (k, pk) in p.iter().enumerate() {
                    let r = pk - if k == label as usize { 1.0 } else { 0.0 };
                    let g = &mut grad[k];
                    for (gj, xj) in g.iter_mut().zip(x) {
                        *gj += r * xj;
                    }
                    g[d] += r;
                }
            }
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                for j in 0..=d {
                    let reg = if j < d { config.l2 * w[j] } else { 0.0 };
                    w[j] -= config.learning_rate * (g[j] / n as f64 + reg);
                }
            }
        }
        Ok(model)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.shift)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn probabilities_standardized(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let z: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d])
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        self.probabilities_standardized(&self.standardize(x))
    }

    /// Most probable class, lowest id on ties.
    pub fn predict(&self, x: &[f64]) -> u8 {
        let p = self.probabilities(x);
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        best as u8
    }
}

/// Train and test indices; each class contributes `round(0.2 · n_c)` test
/// samples (at least one), chosen by a shuffle seeded with `seed`.
pub fn stratified_split(labels: &[u8], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng::stream(seed, streams::PATCH_SPLIT);
    let n_classes = labels.iter().max().map_or(0, |m| *m as usize + 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i] as usize == c)
            .collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n_test = ((test_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub const MIN_SAMPLES_PER_CLASS: usize = 10;
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierScore {
    pub name: String,
    /// Held-out accuracy.
    pub accuracy: f64,
    /// `confusion[truth][predicted]` over the held-out samples.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierReport {
    pub n_train: usize,
    pub n_test: usize,
    pub scores: Vec<ClassifierScore>,
}

impl ClassifierReport {
    pub fn accuracy(&self, name: &str) -> Option<f64> {
        self.scores
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.accuracy)
    }

    /// `classifier,accuracy,n_train,n_test`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("classifier,accuracy,n_train,n_test\n");
        for s in &self.scores {
            writeln!(
                out,
                "{},{},{},{}",
                s.name, s.accuracy, self.n_train, self.n_test
            )
            .unwrap();
        }
        out
    }
}

fn score(
    name: &str,
    test: &LabeledVectors,
    n_classes: usize,
    predict: impl Fn(&[f64]) -> u8,
) -> ClassifierScore {
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut correct = 0;
    for i in 0..test.len() {
        let t = test.labels()[i] as usize;
        let p = predict(test.row(i)) as usize;
        confusion[t][p] += 1;
        correct += usize::from(t == p);
    }
    ClassifierScore {
        name: name.to_string(),
        accuracy: correct as f64 / test.len() as f64,
        confusion,
    }
}

/// Fits 1-NN, nearest-centroid and logistic regression on a stratified 80/20
/// split and reports held-out accuracy for each.
pub fn fit_baselines(data: &LabeledVectors, split_seed: u64) -> Result<ClassifierReport> {
    fit_baselines_with(data, split_seed, &LogisticConfig::default())
}

pub fn fit_baselines_with(
    data: &LabeledVectors,
    split_seed: u64,
    logistic: &LogisticConfig,
) -> Result<ClassifierReport> {
    let counts = data.class_counts();
    let present = counts.iter().filter(|c| **c > 0).count();
    if present < 2 {
        return Err(Error::Data(format!(
            "need at least 2 classes, found {present}"
        )));
    }
    if let Some((c, n)) = counts
        .iter()
        .enumerate()
        .find(|(_, n)| **n > 0 && **n < MIN_SAMPLES_PER_CLASS)
    {
        return Err(Error::Data(format!(
            "class {c} has {n} samples, at least {MIN_SAMPLES_PER_CLASS} are required"
        )));
    }
    let (train_idx, test_idx) = stratified_split(data.labels(), TEST_FRACTION, split_seed);
    let train = data.select(&train_idx);
    let test = data.select(&test_idx);
    let n_classes = counts.len();

    let nn = NearestNeighbor::fit(train.clone())?;
    let centroid = NearestCentroid::fit(&train)?;
    let logreg = LogisticRegression::fit(&train, logistic)?;
    Ok(ClassifierReport {
        n_train: train.len(),
        n_test: test.len(),
        scores: vec![
            score("1-nn", &test, n_classes, |x| nn.predict(x)),
            score("nearest-centroid", &test, n_classes, |x| {
                centroid.predict(x)
            }),
            score("logistic", &test, n_classes, |x| logreg.predict(x)),
        ],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparabilityReport {
    /// Classes present, ascending.
    pub classes: Vec<u8>,
    pub centroids: Vec<Vec<f64>>,
    /// Euclidean distance between the centroids of `classes[i]` and `classes[j]`.
    pub centroid_distances: Vec<Vec<f64>>,
    /// Mean silhouette over all points, in [−1, 1].
    pub silhouette: f64,
    /// Fraction of points closer to some foreign centroid than to their own.
    pub overlap_fraction: f64,
    /// `pairwise_overlap[i][j]`: fraction of `classes[i]` points closer to
    /// the centroid of `classes[j]` than to their own.
    pub pairwise_overlap: Vec<Vec<f64>>,
}

impl SeparabilityReport {
    /// `class_a,class_b,centroid_distance,overlap`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_a,class_b,centroid_distance,overlap\n");
        for (i, a) in self.classes.iter().enumerate() {
            for (j, b) in self.classes.iter().enumerate() {
                if i != j {
                    writeln!(
                        out,
                        "{a},{b},{},{}",
                        self.centroid_distances[i][j], self.pairwise_overlap[i][j]
                    )
                    .unwrap();
                }
            }
        }
        writeln!(out, "# silhouette,{}", self.silhouette).unwrap();
        writeln!(out, "# overlap_fraction,{}", self.overlap_fraction).unwrap();
        out
    }
}

/// Cluster statistics of labelled points. A point alone in its class has
/// silhouette 0.
pub fn separability_report(points: &LabeledVectors) -> Result<SeparabilityReport> {
    if points.is_empty() {
        return Err(Error::Data("no points".into()));
    }
    let all = class_centroids(points);
    let classes: Vec<u8> = (0..all.len())
        .filter(|c| all[*c].is_some())
        .map(|c| c as u8)
        .collect();
    let slot: Vec<Option<usize>> = {
        let mut s = vec![None; all.len()];
        for (i, c) in classes.iter().enumerate() {
            s[*c as usize] = Some(i);
        }
        s
    };
    let centroids: Vec<Vec<f64>> = all.into_iter().flatten().collect();
    let m = classes.len();
    let dist = |a: &[f64], b: &[f64]| sq_dist(a, b).sqrt();
    let centroid_distances: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| dist(&centroids[i], &centroids[j])).collect())
        .collect();

    let n = points.len();
    let own: Vec<usize> = points
        .labels()
        .iter()
        .map(|l| slot[*l as usize].unwrap())
        .collect();
    let sizes: Vec<usize> = (0..m)
        .map(|c| own.iter().filter(|o| **o == c).count())
        .collect();

    let mut silhouette_sum = 0.0;
    let mut sums = vec![0.0; m];
    for i in 0..n {
        sums.fill(0.0);
        for j in 0..n {
            if i != j {
                sums[own[j]] += dist(points.row(i), points.row(j));
            }
        }
        let c = own[i];
        if sizes[c] <= 1 || m < 2 {
            continue;
        }
        let a = sums[c] / (sizes[c] - 1) as f64;
        let b = (0..m)
            .filter(|k| *k != c)
            .map(|k| sums[k] / sizes[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            silhouette_sum += (b - a) / denom;
        }
    }

    let mut overlapping = 0usize;
    let mut pair_counts = vec![vec![0usize; m]; m];
    for i in 0..n {
        let c = own[i];
        let d_own = dist(points.row(i), &centroids[c]);
        let mut any = false;
        for k in 0..m {
            if k != c && dist(points.row(i), &centroids[k]) < d_own {
                pair_counts[c][k] += 1;
                any = true;
            }
        }
        overlapping += usize::from(any);
    }
    let pairwise_overlap = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| pair_counts[i][j] as f64 / sizes[i] as f64)
                .collect()
        })
        .collect();
    Ok(SeparabilityReport {
        classes,
        centroids,
        centroid_distances,
        silhouette: silhouette_sum / n as f64,
        overlap_fraction: overlapping as f64 / n as f64,
        pairwise_overlap,
    })
}

/// Projected points as CSV: `x,y,z,label` for three components, otherwise
/// `pc1,…,pck,label`.
pub fn points_to_csv(points: &LabeledVectors) -> String {
    let k = points.dim();
    let mut out = if k == 3 {
        "x,y,z".to_string()
    } else {
        (1..=k)
            .map(|i| format!("pc{i}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    out.push_str(",label\n");
    for i in 0..points.len() {
        for v in points.row(i) {
            write!(out, "{v},").unwrap();
        }
        writeln!(out, "{}", points.labels()[i]).unwrap();
    }
    out
}
