//! The dilated UNet.
//!
//! Contracting path: `depth` blocks of two 3×3 convolutions with dilation
//! `config.dilation`, each followed by ReLU, then dropout, with 2×2 max
//! pooling between blocks. Filters double per level starting from
//! `base_filters`.
//!
//! Expansive path: `depth − 1` stages of nearest-neighbour upsampling,
//! concatenation with the matching contracting output (skip channels first)
//! and two undilated 3×3 convolutions with ReLU. A 1×1 head maps to
//! `n_classes` logits followed by a channel softmax.
//!
//! Parameters are stored layer by layer in declaration order: the encoder
//! convolutions, then the decoder convolutions from the deepest stage up,
//! then the head. Within a layer, weights precede biases.

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::layers::{
    conv2d, conv2d_backward, dropout, dropout_backward, maxpool2x2, maxpool2x2_backward, relu,
    relu_backward, softmax_channels, upsample2x_concat, upsample2x_concat_backward, Conv2d,
    ConvSpec, PoolIndices,
};
use super::loss::{weighted_ce_loss, LossOutput};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    /// Number of contraction blocks.
    pub depth: usize,
    pub base_filters: usize,
    pub dropout_rate: f64,
    /// Dilation of the contracting-path convolutions.
    pub dilation: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: crate::spectral::BAND_COUNT,
            n_classes: 4,
            depth: 5,
            base_filters: 8,
            dropout_rate: 0.1,
            dilation: 2,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.in_channels == 0 {
            return fail("in_channels must be positive");
        }
        if !(2..=256).contains(&self.n_classes) {
            return fail("n_classes must lie in 2..=256");
        }
        if !(1..=8).contains(&self.depth) {
            return fail("depth must lie in 1..=8");
        }
        if self.base_filters == 0 || self.base_filters << (self.depth - 1) > 1 << 16 {
            return fail("base_filters must be positive and the deepest level at most 65536 wide");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must lie in [0,1)");
        }
        if self.dilation == 0 {
            return fail("dilation must be positive");
        }
        Ok(())
    }

    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Layer geometry in declaration order.
    pub fn layer_specs(&self) -> Vec<ConvSpec> {
        let mut specs = Vec::with_capacity(4 * self.depth);
        let mut c = self.in_channels;
        for level in 0..self.depth {
            let f = self.filters(level);
            specs.push(ConvSpec::same3x3(c, f, self.dilation));
            specs.push(ConvSpec::same3x3(f, f, self.dilation));
            c = f;
        }
        for level in (0..self.depth - 1).rev() {
            let f = self.filters(level);
            specs.push(ConvSpec::same3x3(f + c, f, 1));
            specs.push(ConvSpec::same3x3(f, f, 1));
            c = f;
        }
        specs.push(ConvSpec::pointwise(c, self.n_classes));
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_specs()
            .iter()
            .map(|s| s.weight_len() + s.out_channels)
            .sum()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for v in [
            self.in_channels,
            self.n_classes,
            self.depth,
            self.base_filters,
            self.dilation,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(self.dropout_rate.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }
}

/// Dropout behaviour for a forward pass.
#[derive(Debug)]
pub enum Mode<'a> {
    Inference,
    /// Dropout active; each dropout call consumes one index from the counter.
    Train {
        seed: u64,
        dropout_calls: &'a mut u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetModel {
    config: UNetConfig,
    layers: Vec<Conv2d>,
}

/// Parameter gradients in the model's declaration order (weights, biases
/// per layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(model: &UNetModel) -> Self {
        Gradients(
            model
                .parameter_slices()
                .iter()
                .map(|s| vec![0.0; s.len()])
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.0.iter_mut().flatten() {
            *v *= s;
        }
    }
}

struct ConvStep {
    input: Tensor,
    pre: Tensor,
}

struct EncoderStep {
    a: ConvStep,
    b: ConvStep,
    mask: Option<Vec<f64>>,
    pool: Option<PoolIndices>,
}

struct DecoderStep {
    skip_channels: usize,
    a: ConvStep,
    b: ConvStep,
}

struct ForwardCache {
    encoder: Vec<EncoderStep>,
    decoder: Vec<DecoderStep>,
    head_input: Tensor,
}

/// He-normal weights (σ = √(2/fan_in)) and zero biases.
pub fn unet_init(config: &UNetConfig) -> Result<UNetModel> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, streams::WEIGHT_INIT);
    let layers = config
        .layer_specs()
        .into_iter()
        .map(|spec| {
            let std = (2.0 / spec.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weight = (0..spec.weight_len())
                .map(|_| normal.sample(&mut rng))
                .collect();
            Conv2d::new(spec, weight, vec![0.0; spec.out_channels])
        })
        .collect::<Result<_>>()?;
    Ok(UNetModel {
        config: config.clone(),
        layers,
    })
}

impl UNetModel {
    /// Rebuilds a model from flat parameter blobs in declaration order.
    pub fn from_parameters(config: UNetConfig, blobs: Vec<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        let specs = config.layer_specs();
        if blobs.len() != 2 * specs.len() {
            return Err(Error::shape(format!(
                "{} parameter blobs for {} layers",
                blobs.len(),
                specs.len()
            )));
        }
        let mut it = blobs.into_iter();
        let layers = specs
            .into_iter()
            .map(|spec| Conv2d::new(spec, it.next().unwrap(), it.next().unwrap()))
            .collect::<Result<_>>()?;
        Ok(UNetModel { config, layers })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn parameter_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// SHA-256 of every parameter's bit pattern, truncated to 64 bits.
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        for s in self.parameter_slices() {
            for v in s {
                h.update(v.to_le_bytes());
            }
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.channels() != self.config.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels,
                input.channels()
            )));
        }
        let d = self.config.spatial_divisor();
        let (h, w) = (input.height(), input.width());
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not a positive multiple of {d} in both dimensions"
            )));
        }
        Ok(())
    }

    /// Per-pixel class probabilities, shape (batch, n_classes, H, W).
    pub fn forward(&self, input: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        let (logits, _) = self.forward_cached(input, mode)?;
        softmax_channels(&logits)
    }

    fn conv_relu(&self, layer: usize, input: Tensor) -> Result<(Tensor, ConvStep)> {
        let pre = conv2d(&input, &self.layers[layer])?;
        let out = relu(&pre);
        Ok((out, ConvStep { input, pre }))
    }

    fn forward_cached(&self, input: &Tensor, mut mode: Mode<'_>) -> Result<(Tensor, ForwardCache)> {
        self.check_input(input)?;
        let depth = self.config.depth;
        let mut x = input.clone();
        let mut skips = Vec::with_capacity(depth);
        let mut encoder = Vec::with_capacity(depth);
        for level in 0..depth {
            let (a_out, a) = self.conv_relu(2 * level, x)?;
            let (b_out, b) = self.conv_relu(2 * level + 1, a_out)?;
            let (d, mask) = match &mut mode {
                Mode::Inference => (b_out, None),
                Mode::Train {
                    seed,
                    dropout_calls,
                } => {
                    let call = **dropout_calls;
                    **dropout_calls += 1;
                    dropout(&b_out, self.config.dropout_rate, *seed, call, true)?
                }
            };
            let pool = if level + 1 < depth {
                let (pooled, idx) = maxpool2x2(&d)?;
                skips.push(d);
                x = pooled;
                Some(idx)
            } else {
                x = d;
                None
            };
            encoder.push(EncoderStep { a, b, mask, pool });
        }

        let mut decoder = Vec::with_capacity(depth.saturating_sub(1));
        for (stage, level) in (0..depth - 1).rev().enumerate() {
            let skip = &skips[level];
            let cat = upsample2x_concat(&x, skip)?;
            let base = 2 * depth + 2 * stage;
            let (a_out, a) = self.conv_relu(base, cat)?;
            let (b_out, b) = self.conv_relu(base + 1, a_out)?;
            x = b_out;
            decoder.push(DecoderStep {
                skip_channels: skip.channels(),
                a,
                b,
            });
        }

        let logits = conv2d(&x, self.layers.last().unwrap())?;
        Ok((
            logits,
            ForwardCache {
                encoder,
                decoder,
                head_input: x,
            },
        ))
    }

    fn backward(&self, cache: ForwardCache, dlogits: &Tensor) -> Result<Gradients> {
        let depth = self.config.depth;
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); 2 * self.layers.len()];
        let mut store = |layer: usize, w: Vec<f64>, b: Vec<f64>| {
            grads[2 * layer] = w;
            grads[2 * layer + 1] = b;
        };

        let head = self.layers.len() - 1;
        let gh = conv2d_backward(dlogits, &cache.head_input, &self.layers[head])?;
        store(head, gh.weight, gh.bias);
        let mut g = gh.input;

        let conv_relu_back = |layer: usize, step: &ConvStep, up: &Tensor| {
            let masked = relu_backward(up, &step.pre);
            conv2d_backward(&masked, &step.input, &self.layers[layer])
        };

        let mut skip_grads: Vec<Option<Tensor>> = vec![None; depth];
        for (stage, step) in cache.decoder.iter().enumerate().rev() {
            let level = depth - 2 - stage;
            let base = 2 * depth + 2 * stage;
            let gb = conv_relu_back(base + 1, &step.b, &g)?;
            store(base + 1, gb.weight, gb.bias);
            let ga = conv_relu_back(base, &step.a, &gb.input)?;
            store(base, ga.weight, ga.bias);
            let (g_dec, g_skip) = upsample2x_concat_backward(&ga.input, step.skip_channels)?;
            skip_grads[level] = Some(g_skip);
            g = g_dec;
        }

        for (level, step) in cache.encoder.iter().enumerate().rev() {
            let mut g_d = match &step.pool {
                Some(idx) => maxpool2x2_backward(&g, idx)?,
                None => g,
            };
            if let Some(s) = skip_grads[level].take() {
                for (a, b) in g_d.data_mut().iter_mut().zip(s.data()) {
                    *a += b;
                }
            }
            let g_b = dropout_backward(&g_d, step.mask.as_deref());
            let gb = conv_relu_back(2 * level + 1, &step.b, &g_b)?;
            store(2 * level + 1, gb.weight, gb.bias);
            let ga = conv_relu_back(2 * level, &step.a, &gb.input)?;
            store(2 * level, ga.weight, ga.bias);
            g = ga.input;
        }
        Ok(Gradients(grads))
    }

    /// Forward pass, weighted cross-entropy and parameter gradients.
    pub fn loss_and_gradients(
        &self,
        input: &Tensor,
        labels: &[u8],
        class_weights: &[f64],
        mode: Mode<'_>,
    ) -> Result<(LossOutput, Gradients)> {
        let (logits, cache) = self.forward_cached(input, mode)?;
        let probs = softmax_channels(&logits)?;
        let loss = weighted_ce_loss(&probs, labels, class_weights)?;
        let grads = self.backward(cache, &loss.gradient)?;
        Ok((loss, grads))
    }
}
