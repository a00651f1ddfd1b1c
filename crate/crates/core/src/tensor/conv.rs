use alloc::vec;
use alloc::vec::Vec;

use super::{gemm, sum, ConvKernel, Tensor};
use crate::error::{Error, Result};

/// Gradients of a scalar loss with respect to a convolution's arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(op: &'static str, input: &Tensor, kernel: &ConvKernel) -> Result<Self> {
        let [n, cin, h, w] = input.dims4(op)?;
        if cin != kernel.in_channels() {
            return Err(Error::Dimension {
                op,
                axis: "in_channels",
                expected: kernel.in_channels(),
                actual: cin,
            });
        }
        let (k, stride, pad) = (kernel.size(), kernel.stride, kernel.padding);
        if h + 2 * pad < k {
            return Err(Error::Dimension {
                op,
                axis: "H",
                expected: k,
                actual: h + 2 * pad,
            });
        }
        if w + 2 * pad < k {
            return Err(Error::Dimension {
                op,
                axis: "W",
                expected: k,
                actual: w + 2 * pad,
            });
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout: kernel.out_channels(),
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Maps output coordinate and kernel tap to an input coordinate, if inside.
    #[inline]
    fn source(&self, o: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + tap) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the input row.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride).min(self.wo);
        // ox * stride + kx - pad <= w - 1
        let hi = match (self.w + self.pad).checked_sub(kx + 1) {
            Some(top) => (top / self.stride + 1).min(self.wo),
            None => 0,
        };
        (lo, hi.max(lo))
    }

    /// Unfolds one sample `[cin, h, w]` into `[cin*k*k, ho*wo]`.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let plane = self.out_plane();
        for ci in 0..self.cin {
            let src = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let (lo, hi) = self.valid_cols(kx);
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            line.fill(0.0);
                            continue;
                        };
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let base = iy * self.w + lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[base..base + hi - lo]);
                        } else {
                            for (i, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[base + i * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds `[cin*k*k, ho*wo]` back onto `[cin, h, w]`, accumulating overlaps.
    fn col2im(&self, cols: &[f32], x: &mut [f32]) {
        let plane = self.out_plane();
        for ci in 0..self.cin {
            let dst = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let (lo, hi) = self.valid_cols(kx);
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            continue;
                        };
                        let line = &src[oy * self.wo + lo..oy * self.wo + hi];
                        let base = iy * self.w + lo * self.stride + kx - self.pad;
                        for (i, v) in line.iter().enumerate() {
                            dst[base + i * self.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out[co] = bias[co] + sum_k w[co, k] * cols[k]`
fn gemm_bias(w: &[f32], cols: &[f32], bias: &[f32], out: &mut [f32], patch: usize, plane: usize) {
    for (row, &b) in out.chunks_exact_mut(plane).zip(bias) {
        row.fill(b);
    }
    gemm(bias.len(), patch, plane, (w, patch, 1), (cols, plane, 1), 1.0, out);
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
///
/// Output spatial size is `(H + 2p - k) / stride + 1` on each axis.
pub fn conv2d_forward(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let g = Geometry::new("conv2d_forward", input, kernel)?;
    let (patch, plane) = (g.patch_len(), g.out_plane());
    let mut out = vec![0.0f32; g.n * g.cout * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; patch * plane]
    };
    let sample_len = g.cin * g.h * g.w;
    for n in 0..g.n {
        let x = &input.data()[n * sample_len..(n + 1) * sample_len];
        let cols: &[f32] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        gemm_bias(
            kernel.weights.data(),
            cols,
            kernel.bias.data(),
            &mut out[n * g.cout * plane..(n + 1) * g.cout * plane],
            patch,
            plane,
        );
    }
    Ok(Tensor::from_raw(vec![g.n, g.cout, g.ho, g.wo], out))
}

/// Gradients of `conv2d_forward` given the gradient of its output.
pub fn conv2d_backward(input: &Tensor, kernel: &ConvKernel, grad_output: &Tensor) -> Result<ConvGrads> {
    let (gi, gw, gb) = conv2d_backward_inner(input, kernel, grad_output, true)?;
    Ok(ConvGrads {
        input: gi.expect("input gradient requested"),
        weights: gw,
        bias: gb,
    })
}

pub(crate) fn conv2d_backward_inner(
    input: &Tensor,
    kernel: &ConvKernel,
    grad_output: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    const OP: &str = "conv2d_backward";
    let g = Geometry::new(OP, input, kernel)?;
    let expected = [g.n, g.cout, g.ho, g.wo];
    if grad_output.shape() != expected {
        return Err(Error::Shape {
            op: OP,
            shape: grad_output.shape().to_vec(),
            reason: "grad_output must match the forward output shape",
        });
    }
    let (patch, plane) = (g.patch_len(), g.out_plane());
    let w = kernel.weights.data();
    let mut gw = vec![0.0f32; g.cout * patch];
    let mut gb = vec![0.0f32; g.cout];
    let mut gi = if need_input {
        vec![0.0f32; input.len()]
    } else {
        Vec::new()
    };
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; patch * plane]
    };
    let mut gcols = vec![0.0f32; if need_input { patch * plane } else { 0 }];
    let sample_len = g.cin * g.h * g.w;
    for n in 0..g.n {
        let x = &input.data()[n * sample_len..(n + 1) * sample_len];
        let go = &grad_output.data()[n * g.cout * plane..(n + 1) * g.cout * plane];
        let cols: &[f32] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        for (b, gor) in gb.iter_mut().zip(go.chunks_exact(plane)) {
            *b += sum(gor);
        }
        // gw += go · colsᵀ
        gemm(g.cout, plane, patch, (go, plane, 1), (cols, 1, plane), 1.0, &mut gw);
        if need_input {
            // gcols = wᵀ · go
            gemm(patch, g.cout, plane, (w, 1, patch), (go, plane, 1), 0.0, &mut gcols);
            let dst = &mut gi[n * sample_len..(n + 1) * sample_len];
            if g.is_pointwise() {
                dst.copy_from_slice(&gcols);
            } else {
                g.col2im(&gcols, dst);
            }
        }
    }
    let gi = need_input.then(|| Tensor::from_raw(input.shape().to_vec(), gi));
    Ok((
        gi,
        Tensor::from_raw(kernel.weights.shape().to_vec(), gw),
        Tensor::from_raw(vec![g.cout], gb),
    ))
}
