use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};

/// Winning flat input position for every pooled output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2x2 max pooling with stride 2. Ties go to the first element of the
/// window in row-major order.
pub fn maxpool2x2_forward(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    const OP: &str = "maxpool2x2_forward";
    let [n, c, h, w] = input.dims4(OP)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape {
            op: OP,
            shape: input.shape().to_vec(),
            reason: "H and W must be even",
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let first = base + 2 * i * w + 2 * j;
                let mut best = first;
                for cand in [first + 1, first + w, first + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_raw(vec![n, c, oh, ow], out),
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes each output gradient to its window's argmax; all else is zero.
pub fn maxpool2x2_backward(indices: &PoolIndices, grad_output: &Tensor) -> Result<Tensor> {
    if grad_output.len() != indices.argmax.len() {
        return Err(Error::Dimension {
            op: "maxpool2x2_backward",
            axis: "pooled elements",
            expected: indices.argmax.len(),
            actual: grad_output.len(),
        });
    }
    let mut gi = vec![0.0f32; indices.input_shape.iter().product()];
    for (&src, &g) in indices.argmax.iter().zip(grad_output.data()) {
        gi[src] += g;
    }
    Ok(Tensor::from_raw(indices.input_shape.clone(), gi))
}
