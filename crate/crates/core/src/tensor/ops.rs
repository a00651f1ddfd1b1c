use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};

pub fn relu_forward(input: &Tensor) -> Tensor {
    Tensor::from_raw(
        input.shape().to_vec(),
        input.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

/// Passes the gradient where `input > 0`; the subgradient at 0 is 0.
pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_output.shape() {
        return Err(Error::Shape {
            op: "relu_backward",
            shape: grad_output.shape().to_vec(),
            reason: "grad_output must match input shape",
        });
    }
    Ok(Tensor::from_raw(
        input.shape().to_vec(),
        input
            .data()
            .iter()
            .zip(grad_output.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    ))
}

/// Concatenates `[N, Ca, H, W]` and `[N, Cb, H, W]` along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    const OP: &str = "concat_channels";
    let [n, ca, h, w] = a.dims4(OP)?;
    let [nb, cb, hb, wb] = b.dims4(OP)?;
    for (axis, expected, actual) in [("N", n, nb), ("H", h, hb), ("W", w, wb)] {
        if expected != actual {
            return Err(Error::Dimension {
                op: OP,
                axis,
                expected,
                actual,
            });
        }
    }
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (la + lb));
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * la..(s + 1) * la]);
        out.extend_from_slice(&b.data()[s * lb..(s + 1) * lb]);
    }
    Ok(Tensor::from_raw(vec![n, ca + cb, h, w], out))
}

/// Splits a channel-concatenated tensor at channel `ca`; the backward of
/// [`concat_channels`].
pub fn split_channels(t: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    const OP: &str = "split_channels";
    let [n, c, h, w] = t.dims4(OP)?;
    if ca == 0 || ca >= c {
        return Err(Error::Dimension {
            op: OP,
            axis: "C",
            expected: c,
            actual: ca,
        });
    }
    let cb = c - ca;
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut a = Vec::with_capacity(n * la);
    let mut b = Vec::with_capacity(n * lb);
    for s in 0..n {
        let base = s * (la + lb);
        a.extend_from_slice(&t.data()[base..base + la]);
        b.extend_from_slice(&t.data()[base + la..base + la + lb]);
    }
    Ok((
        Tensor::from_raw(vec![n, ca, h, w], a),
        Tensor::from_raw(vec![n, cb, h, w], b),
    ))
}
