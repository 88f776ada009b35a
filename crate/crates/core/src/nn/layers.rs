use rand::Rng as _;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Geometry of a stride-1 "same" convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel side: 3, or 1 for pointwise heads.
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn same3x3(in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 3,
            dilation,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 1,
            dilation: 1,
        }
    }

    /// Zero padding that keeps the output the size of the input.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.dilation == 0 {
            return Err(Error::invalid(
                "convolution channels and dilation must be positive",
            ));
        }
        if self.kernel != 1 && self.kernel != 3 {
            return Err(Error::invalid(format!(
                "unsupported kernel size {}",
                self.kernel
            )));
        }
        Ok(())
    }
}

/// Convolution parameters: weights laid out as [out][in][ky][kx].
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(spec: ConvSpec) -> Self {
        Conv2d {
            weight: vec![0.0; spec.weight_len()],
            bias: vec![0.0; spec.out_channels],
            spec,
        }
    }

    pub fn new(spec: ConvSpec, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if weight.len() != spec.weight_len() || bias.len() != spec.out_channels {
            return Err(Error::shape(format!(
                "conv {}->{} k{} needs {} weights and {} biases, got {} and {}",
                spec.in_channels,
                spec.out_channels,
                spec.kernel,
                spec.weight_len(),
                spec.out_channels,
                weight.len(),
                bias.len()
            )));
        }
        Ok(Conv2d { spec, weight, bias })
    }

    #[inline]
    fn w(&self, o: usize, c: usize, i: usize, j: usize) -> f64 {
        let k = self.spec.kernel;
        self.weight[((o * self.spec.in_channels + c) * k + i) * k + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Tap offset and the half-open output range whose tap stays in bounds.
#[derive(Clone, Copy)]
struct Tap {
    dy: isize,
    dx: isize,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

/// Taps that never land inside the plane are omitted.
fn taps(spec: &ConvSpec, h: usize, w: usize) -> Vec<(usize, usize, Tap)> {
    let r = (spec.kernel / 2) as isize;
    let d = spec.dilation as isize;
    let range = |off: isize, len: usize| -> (usize, usize) {
        let lo = (-off).max(0) as usize;
        let hi = (len as isize - off).clamp(0, len as isize) as usize;
        (lo.min(hi), hi)
    };
    let mut out = Vec::with_capacity(spec.kernel * spec.kernel);
    for i in 0..spec.kernel {
        for j in 0..spec.kernel {
            let dy = (i as isize - r) * d;
            let dx = (j as isize - r) * d;
            let (y0, y1) = range(dy, h);
            let (x0, x1) = range(dx, w);
            if y0 < y1 && x0 < x1 {
                out.push((
                    i,
                    j,
                    Tap {
                        dy,
                        dx,
                        y0,
                        y1,
                        x0,
                        x1,
                    },
                ));
            }
        }
    }
    out
}

fn check_conv_input(input: &Tensor, layer: &Conv2d) -> Result<()> {
    if input.channels() != layer.spec.in_channels {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {}",
            layer.spec.in_channels,
            input.channels()
        )));
    }
    if input.height() == 0 || input.width() == 0 {
        return Err(Error::shape("conv input has an empty spatial extent"));
    }
    Ok(())
}

/// Row-major `c = a·b + beta·c` with `a` m×k and `b` k×n; a transposed flag
/// means the operand is stored as its transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // elements that the length assertion covers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// One row per (input channel, in-range tap), one column per output pixel.
fn im2col(src: &[f64], c_in: usize, h: usize, w: usize, taps: &[(usize, usize, Tap)]) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; c_in * taps.len() * hw];
    for c in 0..c_in {
        let plane = &src[c * hw..(c + 1) * hw];
        for (t, &(_, _, tap)) in taps.iter().enumerate() {
            let row = &mut col[(c * taps.len() + t) * hw..][..hw];
            let len = tap.x1 - tap.x0;
            for y in tap.y0..tap.y1 {
                let s0 = (((y as isize + tap.dy) as usize * w) as isize + tap.x0 as isize + tap.dx)
                    as usize;
                row[y * w + tap.x0..y * w + tap.x1].copy_from_slice(&plane[s0..s0 + len]);
            }
        }
    }
    col
}

fn col2im_add(
    col: &[f64],
    dst: &mut [f64],
    c_in: usize,
    h: usize,
    w: usize,
    taps: &[(usize, usize, Tap)],
) {
    let hw = h * w;
    for c in 0..c_in {
        let plane = &mut dst[c * hw..(c + 1) * hw];
        for (t, &(_, _, tap)) in taps.iter().enumerate() {
            let row = &col[(c * taps.len() + t) * hw..][..hw];
            let len = tap.x1 - tap.x0;
            for y in tap.y0..tap.y1 {
                let s0 = (((y as isize + tap.dy) as usize * w) as isize + tap.x0 as isize + tap.dx)
                    as usize;
                for (g, v) in plane[s0..s0 + len]
                    .iter_mut()
                    .zip(&row[y * w + tap.x0..y * w + tap.x1])
                {
                    *g += v;
                }
            }
        }
    }
}

/// Weights restricted to the in-range taps, c_out × (c_in · taps).
fn gather_weights(layer: &Conv2d, taps: &[(usize, usize, Tap)]) -> Vec<f64> {
    let c_in = layer.spec.in_channels;
    let mut out = Vec::with_capacity(layer.spec.out_channels * c_in * taps.len());
    for o in 0..layer.spec.out_channels {
        for c in 0..c_in {
            out.extend(taps.iter().map(|&(i, j, _)| layer.w(o, c, i, j)));
        }
    }
    out
}

/// `out[o,y,x] = b[o] + Σ w[o,c,i,j] · in[c, y + d(i−r), x + d(j−r)]`, with
/// out-of-range taps reading zero.
pub fn conv2d(input: &Tensor, layer: &Conv2d) -> Result<Tensor> {
    check_conv_input(input, layer)?;
    let [n, c_in, h, w] = input.shape();
    let hw = h * w;
    let c_out = layer.spec.out_channels;
    let taps = taps(&layer.spec, h, w);
    let kk = c_in * taps.len();
    let weights = gather_weights(layer, &taps);
    let mut out = Tensor::zeros([n, c_out, h, w]);
    for b in 0..n {
        let col = im2col(
            &input.data()[b * c_in * hw..(b + 1) * c_in * hw],
            c_in,
            h,
            w,
            &taps,
        );
        let dst = &mut out.data_mut()[b * c_out * hw..(b + 1) * c_out * hw];
        for (o, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(layer.bias[o]);
        }
        gemm(c_out, kk, hw, &weights, false, &col, false, 1.0, dst);
    }
    Ok(out)
}

pub fn conv2d_backward(upstream: &Tensor, input: &Tensor, layer: &Conv2d) -> Result<ConvGrads> {
    check_conv_input(input, layer)?;
    let [n, c_in, h, w] = input.shape();
    let c_out = layer.spec.out_channels;
    if upstream.shape() != [n, c_out, h, w] {
        return Err(Error::shape(format!(
            "conv upstream gradient {:?} does not match output {:?}",
            upstream.shape(),
            [n, c_out, h, w]
        )));
    }
    let hw = h * w;
    let k = layer.spec.kernel;
    let taps = taps(&layer.spec, h, w);
    let kk = c_in * taps.len();
    let weights = gather_weights(layer, &taps);
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_gathered = vec![0.0; c_out * kk];
    let mut grad_col = vec![0.0; kk * hw];
    let mut grad_bias = vec![0.0; c_out];
    for b in 0..n {
        let up = &upstream.data()[b * c_out * hw..(b + 1) * c_out * hw];
        for (o, plane) in up.chunks(hw).enumerate() {
            grad_bias[o] += plane.iter().sum::<f64>();
        }
        let col = im2col(
            &input.data()[b * c_in * hw..(b + 1) * c_in * hw],
            c_in,
            h,
            w,
            &taps,
        );
        gemm(
            c_out,
            hw,
            kk,
            up,
            false,
            &col,
            true,
            1.0,
            &mut grad_gathered,
        );
        gemm(kk, c_out, hw, &weights, true, up, false, 0.0, &mut grad_col);
        let gi = &mut grad_input.data_mut()[b * c_in * hw..(b + 1) * c_in * hw];
        col2im_add(&grad_col, gi, c_in, h, w, &taps);
    }
    let mut grad_weight = vec![0.0; layer.weight.len()];
    for o in 0..c_out {
        for c in 0..c_in {
            for (t, &(i, j, _)) in taps.iter().enumerate() {
                grad_weight[((o * c_in + c) * k + i) * k + j] =
                    grad_gathered[o * kk + c * taps.len() + t];
            }
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

pub fn relu(t: &Tensor) -> Tensor {
    Tensor::from_parts_unchecked(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect())
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward(upstream: &Tensor, input: &Tensor) -> Tensor {
    let data = upstream
        .data()
        .iter()
        .zip(input.data())
        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
        .collect();
    Tensor::from_parts_unchecked(input.shape(), data)
}

/// Flat input offsets of the selected maxima, one per pooled element.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    input_shape: [usize; 4],
    argmax: Vec<usize>,
}

pub fn maxpool2x2(t: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let [n, c, h, w] = t.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Pad {
            height: h,
            width: w,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = t.data();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let first = base + 2 * y * w + 2 * x;
                    let mut best = first;
                    // window order (0,0) (0,1) (1,0) (1,1); ties keep the first
                    for cand in [first + 1, first + w, first + w + 1] {
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((
        Tensor::from_parts_unchecked([n, c, oh, ow], out),
        PoolIndices {
            input_shape: t.shape(),
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward(upstream: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if upstream.len() != indices.argmax.len() {
        return Err(Error::shape(
            "pool upstream gradient does not match pooled output",
        ));
    }
    let mut grad = Tensor::zeros(indices.input_shape);
    let g = grad.data_mut();
    for (u, &i) in upstream.data().iter().zip(&indices.argmax) {
        g[i] += u;
    }
    Ok(grad)
}

/// Nearest-neighbour 2× upsampling of `decoder`, concatenated after the
/// channels of `skip`.
pub fn upsample2x_concat(decoder: &Tensor, skip: &Tensor) -> Result<Tensor> {
    let [n, cd, h, w] = decoder.shape();
    let [ns, cs, hs, ws] = skip.shape();
    if ns != n || hs != 2 * h || ws != 2 * w {
        return Err(Error::shape(format!(
            "skip {:?} is not twice the spatial size of decoder {:?}",
            skip.shape(),
            decoder.shape()
        )));
    }
    let mut out = Tensor::zeros([n, cs + cd, hs, ws]);
    for b in 0..n {
        for c in 0..cs {
            out.plane_mut(b, c).copy_from_slice(skip.plane(b, c));
        }
        for c in 0..cd {
            let src = decoder.plane(b, c);
            let dst = out.plane_mut(b, cs + c);
            for y in 0..hs {
                for x in 0..ws {
                    dst[y * ws + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
    }
    Ok(out)
}

/// Splits the concatenated gradient into (decoder, skip), summing each 2×2
/// replicated block back onto its source cell.
pub fn upsample2x_concat_backward(
    upstream: &Tensor,
    skip_channels: usize,
) -> Result<(Tensor, Tensor)> {
    let [n, c, hs, ws] = upstream.shape();
    if skip_channels > c || hs % 2 != 0 || ws % 2 != 0 {
        return Err(Error::shape(
            "upsample gradient does not match the concatenation",
        ));
    }
    let cd = c - skip_channels;
    let (h, w) = (hs / 2, ws / 2);
    let mut g_skip = Tensor::zeros([n, skip_channels, hs, ws]);
    let mut g_dec = Tensor::zeros([n, cd, h, w]);
    for b in 0..n {
        for ch in 0..skip_channels {
            g_skip
                .plane_mut(b, ch)
                .copy_from_slice(upstream.plane(b, ch));
        }
        for ch in 0..cd {
            let src = upstream.plane(b, skip_channels + ch);
            let dst = g_dec.plane_mut(b, ch);
            for y in 0..hs {
                for x in 0..ws {
                    dst[(y / 2) * w + x / 2] += src[y * ws + x];
                }
            }
        }
    }
    Ok((g_dec, g_skip))
}

/// Inverted dropout. Returns the output and, in training mode, the per-element
/// scale applied (0 or 1/(1−rate)) for the backward pass.
pub fn dropout(
    t: &Tensor,
    rate: f64,
    seed: u64,
    call_index: u64,
    training: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0,1)")));
    }
    if !training || rate == 0.0 {
        return Ok((t.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = rng::stream(seed, streams::DROPOUT_BASE.wrapping_add(call_index));
    let mask: Vec<f64> = (0..t.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((Tensor::from_parts_unchecked(t.shape(), data), Some(mask)))
}

pub fn dropout_backward(upstream: &Tensor, mask: Option<&[f64]>) -> Tensor {
    match mask {
        None => upstream.clone(),
        Some(mask) => Tensor::from_parts_unchecked(
            upstream.shape(),
            upstream
                .data()
                .iter()
                .zip(mask)
                .map(|(g, m)| g * m)
                .collect(),
        ),
    }
}

/// Per-pixel softmax over the channel axis, max-subtracted.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = logits.shape();
    if c < 2 {
        return Err(Error::shape("softmax needs at least 2 channels"));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(logits.shape());
    let src = logits.data();
    let dst = out.data_mut();
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let idx = |ch: usize| base + ch * plane + p;
            let max = (0..c)
                .map(|ch| src[idx(ch)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ch in 0..c {
                let e = (src[idx(ch)] - max).exp();
                dst[idx(ch)] = e;
                total += e;
            }
            for ch in 0..c {
                dst[idx(ch)] /= total;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_conv(spec: ConvSpec, rng: &mut ChaCha8Rng) -> Conv2d {
        Conv2d::new(
            spec,
            (0..spec.weight_len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            (0..spec.out_channels)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    /// Independent reference: six nested loops with explicit bounds checks.
    fn conv_reference(input: &Tensor, layer: &Conv2d) -> Tensor {
        let [n, c_in, h, w] = input.shape();
        let k = layer.spec.kernel as isize;
        let d = layer.spec.dilation as isize;
        let r = k / 2;
        let mut out = Tensor::zeros([n, layer.spec.out_channels, h, w]);
        for b in 0..n {
            for o in 0..layer.spec.out_channels {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = layer.bias[o];
                        for c in 0..c_in {
                            for i in 0..k {
                                for j in 0..k {
                                    let yy = y + d * (i - r);
                                    let xx = x + d * (j - r);
                                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                        let wi = ((o * c_in + c) * k as usize + i as usize)
                                            * k as usize
                                            + j as usize;
                                        acc += layer.weight[wi]
                                            * input.at(b, c, yy as usize, xx as usize);
                                    }
                                }
                            }
                        }
                        out.set(b, o, y as usize, x as usize, acc);
                    }
                }
            }
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    const H: f64 = 1e-5;

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor([1, 3, 6, 7], &mut rng);
        for d in [1, 2, 3] {
            let spec = ConvSpec::same3x3(3, 3, d);
            let mut layer = Conv2d::zeros(spec);
            for c in 0..3 {
                layer.weight[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
            }
            assert_eq!(conv2d(&input, &layer).unwrap(), input);
        }
    }

    #[test]
    fn ones_kernel_counts_nine_taps_in_the_interior() {
        let spec = ConvSpec::same3x3(1, 1, 2);
        let layer = Conv2d::new(spec, vec![1.0; 9], vec![0.0]).unwrap();
        let out = conv2d(&Tensor::full([1, 1, 8, 8], 0.7), &layer).unwrap();
        assert!((out.at(0, 0, 3, 4) - 9.0 * 0.7).abs() < 1e-12);
        // corner sees only the centre, right and down taps
        assert!((out.at(0, 0, 0, 0) - 4.0 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_tensor([1, 3, 8, 8], &mut rng);
        for spec in [
            ConvSpec::same3x3(3, 4, 2),
            ConvSpec::same3x3(3, 2, 1),
            ConvSpec::pointwise(3, 5),
        ] {
            let layer = random_conv(spec, &mut rng);
            let fast = conv2d(&input, &layer).unwrap();
            let slow = conv_reference(&input, &layer);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let layer = Conv2d::zeros(ConvSpec::same3x3(2, 1, 2));
        assert!(matches!(
            conv2d(&Tensor::zeros([1, 3, 4, 4]), &layer),
            Err(Error::Shape(_))
        ));
        let bad = Tensor::zeros([1, 2, 4, 4]);
        assert!(conv2d_backward(&Tensor::zeros([1, 2, 4, 4]), &bad, &layer).is_err());
    }

    #[test]
    fn dilated_output_ignores_pixels_outside_tap_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_conv(ConvSpec::same3x3(2, 2, 2), &mut rng);
        let input = random_tensor([1, 2, 9, 9], &mut rng);
        let base = conv2d(&input, &layer).unwrap();
        let (y, x) = (4usize, 4usize);
        for py in 0..9 {
            for px in 0..9 {
                let dy = py as isize - y as isize;
                let dx = px as isize - x as isize;
                let in_taps = [-2, 0, 2].contains(&dy) && [-2, 0, 2].contains(&dx);
                if in_taps {
                    continue;
                }
                let mut perturbed = input.clone();
                let v = perturbed.at(0, 1, py, px);
                perturbed.set(0, 1, py, px, v + 10.0);
                let out = conv2d(&perturbed, &layer).unwrap();
                for o in 0..2 {
                    assert_eq!(out.at(0, o, y, x), base.at(0, o, y, x));
                }
            }
        }
    }

    #[test]
    fn conv_backward_zero_upstream_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_conv(ConvSpec::same3x3(2, 3, 2), &mut rng);
        let input = random_tensor([2, 2, 5, 5], &mut rng);
        let g = conv2d_backward(&Tensor::zeros([2, 3, 5, 5]), &input, &layer).unwrap();
        assert!(g
            .input
            .data()
            .iter()
            .chain(&g.weight)
            .chain(&g.bias)
            .all(|v| *v == 0.0));
    }

    #[test]
    fn conv_bias_grad_is_upstream_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = random_conv(ConvSpec::same3x3(2, 3, 2), &mut rng);
        let input = random_tensor([2, 2, 5, 5], &mut rng);
        let up = random_tensor([2, 3, 5, 5], &mut rng);
        let g = conv2d_backward(&up, &input, &layer).unwrap();
        for o in 0..3 {
            let s: f64 = (0..2).map(|b| up.plane(b, o).iter().sum::<f64>()).sum();
            assert!((g.bias[o] - s).abs() < 1e-12);
        }
    }

    /// Scalar objective ⟨up, conv(x)⟩ so that its gradient is the backward
    /// pass with upstream `up`.
    fn conv_objective(input: &Tensor, layer: &Conv2d, up: &Tensor) -> f64 {
        conv2d(input, layer)
            .unwrap()
            .data()
            .iter()
            .zip(up.data())
            .map(|(a, b)| a * b)
            .sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for spec in [ConvSpec::same3x3(2, 2, 2), ConvSpec::same3x3(1, 2, 1)] {
            let mut layer = random_conv(spec, &mut rng);
            let mut input = random_tensor([1, spec.in_channels, 5, 5], &mut rng);
            let up = random_tensor([1, 2, 5, 5], &mut rng);
            let g = conv2d_backward(&up, &input, &layer).unwrap();
            for i in 0..layer.weight.len() {
                let orig = layer.weight[i];
                layer.weight[i] = orig + H;
                let fp = conv_objective(&input, &layer, &up);
                layer.weight[i] = orig - H;
                let fm = conv_objective(&input, &layer, &up);
                layer.weight[i] = orig;
                assert!(rel_err(g.weight[i], (fp - fm) / (2.0 * H)) < 1e-6);
            }
            for i in 0..input.len() {
                let orig = input.data()[i];
                input.data_mut()[i] = orig + H;
                let fp = conv_objective(&input, &layer, &up);
                input.data_mut()[i] = orig - H;
                let fm = conv_objective(&input, &layer, &up);
                input.data_mut()[i] = orig;
                assert!(rel_err(g.input.data()[i], (fp - fm) / (2.0 * H)) < 1e-6);
            }
        }
    }

    #[test]
    fn relu_forward_and_backward() {
        let neg = Tensor::full([1, 1, 2, 2], -3.0);
        assert!(relu(&neg).data().iter().all(|v| *v == 0.0));
        let pos = Tensor::full([1, 1, 2, 2], 3.0);
        assert_eq!(relu(&pos), pos);
        let tie = Tensor::zeros([1, 1, 1, 1]);
        assert_eq!(
            relu_backward(&Tensor::full([1, 1, 1, 1], 1.0), &tie).data()[0],
            0.0
        );

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut x = random_tensor([1, 2, 3, 3], &mut rng);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.01;
            }
        }
        let up = random_tensor([1, 2, 3, 3], &mut rng);
        let g = relu_backward(&up, &x);
        let f = |t: &Tensor| {
            relu(t)
                .data()
                .iter()
                .zip(up.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += H;
            let mut m = x.clone();
            m.data_mut()[i] -= H;
            assert!(rel_err(g.data()[i], (f(&p) - f(&m)) / (2.0 * H)) < 1e-6);
        }
    }

    #[test]
    fn maxpool_ties_and_maxima() {
        let t = Tensor::full([1, 1, 4, 4], 2.0);
        let (out, idx) = maxpool2x2(&t).unwrap();
        assert_eq!(out.shape(), [1, 1, 2, 2]);
        assert!(out.data().iter().all(|v| *v == 2.0));
        let g = maxpool2x2_backward(&Tensor::full([1, 1, 2, 2], 1.0), &idx).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expected = if y % 2 == 0 && x % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(g.at(0, 0, y, x), expected);
            }
        }
        let t = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        assert_eq!(maxpool2x2(&t).unwrap().0.data(), &[5.0]);
        assert!(matches!(
            maxpool2x2(&Tensor::zeros([1, 1, 3, 4])),
            Err(Error::Pad { .. })
        ));
    }

    #[test]
    fn maxpool_backward_matches_finite_differences() {
        // distinct values spaced well beyond the step so no ties flip
        let n = 2 * 4 * 4;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        use rand::seq::SliceRandom;
        vals.shuffle(&mut rng);
        let x = Tensor::from_vec([1, 2, 4, 4], vals).unwrap();
        let up = random_tensor([1, 2, 2, 2], &mut rng);
        let (_, idx) = maxpool2x2(&x).unwrap();
        let g = maxpool2x2_backward(&up, &idx).unwrap();
        let f = |t: &Tensor| {
            maxpool2x2(t)
                .unwrap()
                .0
                .data()
                .iter()
                .zip(up.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += H;
            let mut m = x.clone();
            m.data_mut()[i] -= H;
            let fd = (f(&p) - f(&m)) / (2.0 * H);
            assert!((g.data()[i] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn upsample_concat_shapes_and_gradient() {
        let dec = Tensor::from_vec([1, 1, 1, 1], vec![4.0]).unwrap();
        let skip = Tensor::zeros([1, 2, 2, 2]);
        let out = upsample2x_concat(&dec, &skip).unwrap();
        assert_eq!(out.shape(), [1, 3, 2, 2]);
        assert!(out.plane(0, 2).iter().all(|v| *v == 4.0));
        assert!(upsample2x_concat(&dec, &Tensor::zeros([1, 2, 3, 2])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dec = random_tensor([2, 2, 2, 3], &mut rng);
        let skip = random_tensor([2, 3, 4, 6], &mut rng);
        let up = random_tensor([2, 5, 4, 6], &mut rng);
        let (gd, gs) = upsample2x_concat_backward(&up, 3).unwrap();
        let f = |d: &Tensor, s: &Tensor| {
            upsample2x_concat(d, s)
                .unwrap()
                .data()
                .iter()
                .zip(up.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        for i in 0..dec.len() {
            let mut p = dec.clone();
            p.data_mut()[i] += H;
            let mut m = dec.clone();
            m.data_mut()[i] -= H;
            assert!(rel_err(gd.data()[i], (f(&p, &skip) - f(&m, &skip)) / (2.0 * H)) < 1e-6);
        }
        for i in 0..skip.len() {
            let mut p = skip.clone();
            p.data_mut()[i] += H;
            let mut m = skip.clone();
            m.data_mut()[i] -= H;
            assert!(rel_err(gs.data()[i], (f(&dec, &p) - f(&dec, &m)) / (2.0 * H)) < 1e-6);
        }
    }

    #[test]
    fn dropout_modes_and_rate() {
        let t = Tensor::full([1, 1, 10, 10], 1.5);
        assert_eq!(dropout(&t, 0.0, 1, 0, true).unwrap().0, t);
        assert_eq!(dropout(&t, 0.1, 1, 0, false).unwrap().0, t);
        assert!(dropout(&t, 1.0, 1, 0, true).is_err());

        let big = Tensor::full([1, 1, 1000, 1000], 1.0);
        let (out, mask) = dropout(&big, 0.1, 2024, 0, true).unwrap();
        let dropped = out.data().iter().filter(|v| **v == 0.0).count() as f64 / 1e6;
        assert!((dropped - 0.1).abs() < 0.003, "{dropped}");
        let kept = out.data().iter().find(|v| **v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.9).abs() < 1e-15);

        let (again, _) = dropout(&big, 0.1, 2024, 0, true).unwrap();
        assert_eq!(again, out);
        let (other, _) = dropout(&big, 0.1, 2024, 1, true).unwrap();
        assert_ne!(other, out);

        let g = dropout_backward(&big, mask.as_deref());
        assert_eq!(g, out);
    }

    #[test]
    fn softmax_properties() {
        let eq = Tensor::full([1, 4, 2, 2], 0.3);
        let p = softmax_channels(&eq).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let t = Tensor::from_vec([1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap();
        let p = softmax_channels(&t).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_tensor([2, 5, 3, 3], &mut rng);
        let mut shifted = x.clone();
        for v in shifted.data_mut() {
            *v += 123.0;
        }
        let (a, b) = (
            softmax_channels(&x).unwrap(),
            softmax_channels(&shifted).unwrap(),
        );
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        for n in 0..2 {
            for p in 0..9 {
                let s: f64 = (0..5).map(|c| a.data()[(n * 5 + c) * 9 + p]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(softmax_channels(&Tensor::zeros([1, 1, 2, 2])).is_err());
    }
}
