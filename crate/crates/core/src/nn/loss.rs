use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Weight-normalised cross-entropy.
    pub value: f64,
    /// Gradient of `value` with respect to the pre-softmax logits.
    pub gradient: Tensor,
    /// Σ_p w_{t(p)} · (−log prob_{t(p)}) before normalisation.
    pub weighted_sum: f64,
    /// Σ_p w_{t(p)}.
    pub weight_total: f64,
}

/// Class-weighted categorical cross-entropy on softmax outputs.
///
/// `labels` holds one class id per (sample, row, column). The loss is
/// `Σ w_t · (−log p_t) / Σ w_t` over all pixels, and the returned gradient is
/// the fused softmax + CE derivative `w_t (p − onehot_t) / Σ w_t`. Pixels of
/// zero-weight classes contribute nothing.
pub fn weighted_ce_loss(
    probs: &Tensor,
    labels: &[u8],
    class_weights: &[f64],
) -> Result<LossOutput> {
    let [n, c, h, w] = probs.shape();
    if class_weights.len() != c {
        return Err(Error::shape(format!(
            "{} class weights for {c} channels",
            class_weights.len()
        )));
    }
    if labels.len() != n * h * w {
        return Err(Error::shape(format!(
            "{} labels for {} pixels",
            labels.len(),
            n * h * w
        )));
    }
    if class_weights.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid(
            "class weights must be finite and nonnegative",
        ));
    }
    let plane = h * w;
    let p = probs.data();
    let mut weighted_sum = 0.0;
    let mut weight_total = 0.0;
    for b in 0..n {
        for q in 0..plane {
            let t = labels[b * plane + q] as usize;
            if t >= c {
                return Err(Error::invalid(format!(
                    "label {t} out of range for {c} classes"
                )));
            }
            let wt = class_weights[t];
            if wt == 0.0 {
                continue;
            }
            let pt = p[(b * c + t) * plane + q].max(PROB_FLOOR);
            weighted_sum -= wt * pt.ln();
            weight_total += wt;
        }
    }

    let mut gradient = Tensor::zeros(probs.shape());
    if weight_total > 0.0 {
        let g = gradient.data_mut();
        for b in 0..n {
            for q in 0..plane {
                let t = labels[b * plane + q] as usize;
                let scale = class_weights[t] / weight_total;
                if scale == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    let i = (b * c + ch) * plane + q;
                    let onehot = if ch == t { 1.0 } else { 0.0 };
                    g[i] = scale * (p[i] - onehot);
                }
            }
        }
    }
    let value = if weight_total > 0.0 {
        weighted_sum / weight_total
    } else {
        0.0
    };
    Ok(LossOutput {
        value,
        gradient,
        weighted_sum,
        weight_total,
    })
}
