use alloc::vec;

use super::Tensor;
use crate::error::{Error, Result};

/// Label value excluded from loss and metrics (water or padding).
pub const IGNORE: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Weighted loss summed over counted pixels and divided by the normaliser.
    pub loss: f64,
    pub grad: Tensor,
    /// Non-ignored pixels in this call.
    pub counted: usize,
    /// Set when nothing contributed; loss and gradient are then zero.
    pub all_ignored: bool,
}

/// Two-class softmax with max subtraction, in f64.
#[inline]
pub fn softmax2(a: f32, b: f32) -> [f64; 2] {
    let (a, b) = (a as f64, b as f64);
    let m = a.max(b);
    let (ea, eb) = (libm::exp(a - m), libm::exp(b - m));
    let s = ea + eb;
    [ea / s, eb / s]
}

/// Class-weighted cross-entropy averaged over non-ignored pixels.
///
/// `logits` is `[N, 2, H, W]`; `mask` holds `N*H*W` labels in {0, 1, 2},
/// where 2 contributes neither loss nor gradient.
pub fn weighted_ce_loss(logits: &Tensor, mask: &[u8], weights: [f32; 2]) -> Result<LossOutput> {
    let counted = count_labelled(mask);
    weighted_ce_loss_normalized(logits, mask, weights, counted)
}

/// As [`weighted_ce_loss`] but divides by an externally supplied pixel
/// count, so a mini-batch can be evaluated one sample at a time.
pub fn weighted_ce_loss_normalized(
    logits: &Tensor,
    mask: &[u8],
    weights: [f32; 2],
    normalizer: usize,
) -> Result<LossOutput> {
    const OP: &str = "weighted_ce_loss";
    let [n, c, h, w] = logits.dims4(OP)?;
    if c != 2 {
        return Err(Error::Dimension {
            op: OP,
            axis: "C",
            expected: 2,
            actual: c,
        });
    }
    let plane = h * w;
    if mask.len() != n * plane {
        return Err(Error::Dimension {
            op: OP,
            axis: "mask length",
            expected: n * plane,
            actual: mask.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Config(alloc::format!(
            "class weights must be positive and finite, got {weights:?}"
        )));
    }
    if let Some((index, &label)) = mask.iter().enumerate().find(|(_, &l)| l > IGNORE) {
        return Err(Error::InvalidLabel { index, label });
    }
    let counted = count_labelled(mask);
    let mut grad = vec![0.0f32; logits.len()];
    if normalizer == 0 || counted == 0 {
        return Ok(LossOutput {
            loss: 0.0,
            grad: Tensor::from_raw(logits.shape().to_vec(), grad),
            counted,
            all_ignored: true,
        });
    }
    let scale = 1.0 / normalizer as f64;
    let z = logits.data();
    let mut total = 0.0f64;
    for s in 0..n {
        let (l0, l1) = (&z[s * 2 * plane..], &z[(s * 2 + 1) * plane..]);
        for p in 0..plane {
            let label = mask[s * plane + p];
            if label == IGNORE {
                continue;
            }
            let y = label as usize;
            let wy = weights[y] as f64;
            let (a, b) = (l0[p] as f64, l1[p] as f64);
            let m = a.max(b);
            let lse = m + libm::log(libm::exp(a - m) + libm::exp(b - m));
            total += wy * (lse - [a, b][y]);
            let probs = softmax2(l0[p], l1[p]);
            grad[s * 2 * plane + p] = (wy * (probs[0] - (y == 0) as u8 as f64) * scale) as f32;
            grad[(s * 2 + 1) * plane + p] = (wy * (probs[1] - (y == 1) as u8 as f64) * scale) as f32;
        }
    }
    Ok(LossOutput {
        loss: total * scale,
        grad: Tensor::from_raw(logits.shape().to_vec(), grad),
        counted,
        all_ignored: false,
    })
}

fn count_labelled(mask: &[u8]) -> usize {
    mask.iter().filter(|&&l| l != IGNORE).count()
}
