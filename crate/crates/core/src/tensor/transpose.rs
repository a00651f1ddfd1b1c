use alloc::vec;

use super::{axpy, dot, sum, ConvGrads, ConvKernel, Tensor};
use crate::error::{Error, Result};

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
}

fn geometry(op: &'static str, input: &Tensor, kernel: &ConvKernel) -> Result<Geometry> {
    if kernel.stride != 2 || kernel.padding != 0 || kernel.size() != 2 {
        return Err(Error::Config(alloc::format!(
            "{op}: only 2x2 kernels with stride 2 and padding 0 are supported \
             (got {k}x{k}, stride {}, padding {})",
            kernel.stride,
            kernel.padding,
            k = kernel.size()
        )));
    }
    let [n, cin, h, w] = input.dims4(op)?;
    if cin != kernel.in_channels() {
        return Err(Error::Dimension {
            op,
            axis: "in_channels",
            expected: kernel.in_channels(),
            actual: cin,
        });
    }
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout: kernel.out_channels(),
    })
}

/// Stride-2 transposed convolution with a 2x2 kernel; doubles H and W.
///
/// `out[co, 2i+a, 2j+b] = bias[co] + sum_ci x[ci, i, j] * w[co, ci, a, b]`,
/// the adjoint of a stride-2 2x2 convolution whose weights swap the
/// channel axes.
pub fn conv_transpose2d_forward(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let g = geometry("conv_transpose2d_forward", input, kernel)?;
    let plane = g.h * g.w;
    let (oh, ow) = (2 * g.h, 2 * g.w);
    let wts = kernel.weights.data();
    let mut out = vec![0.0f32; g.n * g.cout * oh * ow];
    let mut tap = vec![0.0f32; plane];
    for n in 0..g.n {
        let x = &input.data()[n * g.cin * plane..(n + 1) * g.cin * plane];
        for co in 0..g.cout {
            let dst = &mut out[(n * g.cout + co) * oh * ow..(n * g.cout + co + 1) * oh * ow];
            for a in 0..2 {
                for b in 0..2 {
                    tap.fill(kernel.bias.data()[co]);
                    for ci in 0..g.cin {
                        let wv = wts[((co * g.cin + ci) * 2 + a) * 2 + b];
                        axpy(&mut tap, wv, &x[ci * plane..(ci + 1) * plane]);
                    }
                    for i in 0..g.h {
                        for j in 0..g.w {
                            dst[(2 * i + a) * ow + 2 * j + b] = tap[i * g.w + j];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![g.n, g.cout, oh, ow], out))
}

pub fn conv_transpose2d_backward(input: &Tensor, kernel: &ConvKernel, grad_output: &Tensor) -> Result<ConvGrads> {
    const OP: &str = "conv_transpose2d_backward";
    let g = geometry(OP, input, kernel)?;
    let plane = g.h * g.w;
    let (oh, ow) = (2 * g.h, 2 * g.w);
    if grad_output.shape() != [g.n, g.cout, oh, ow] {
        return Err(Error::Shape {
            op: OP,
            shape: grad_output.shape().to_vec(),
            reason: "grad_output must match the forward output shape",
        });
    }
    let wts = kernel.weights.data();
    let mut gi = vec![0.0f32; input.len()];
    let mut gw = vec![0.0f32; kernel.weights.len()];
    let mut gb = vec![0.0f32; g.cout];
    // gathered[co][a][b] is the (a, b) phase of grad_output, laid out [h, w]
    let mut gathered = vec![0.0f32; g.cout * 4 * plane];
    for n in 0..g.n {
        let x = &input.data()[n * g.cin * plane..(n + 1) * g.cin * plane];
        let go = &grad_output.data()[n * g.cout * oh * ow..(n + 1) * g.cout * oh * ow];
        for co in 0..g.cout {
            let src = &go[co * oh * ow..(co + 1) * oh * ow];
            gb[co] += sum(src);
            for ab in 0..4 {
                let (a, b) = (ab / 2, ab % 2);
                let dst = &mut gathered[(co * 4 + ab) * plane..(co * 4 + ab + 1) * plane];
                for i in 0..g.h {
                    for j in 0..g.w {
                        dst[i * g.w + j] = src[(2 * i + a) * ow + 2 * j + b];
                    }
                }
            }
        }
        for co in 0..g.cout {
            for ci in 0..g.cin {
                let xr = &x[ci * plane..(ci + 1) * plane];
                for ab in 0..4 {
                    let gr = &gathered[(co * 4 + ab) * plane..(co * 4 + ab + 1) * plane];
                    gw[(co * g.cin + ci) * 4 + ab] += dot(gr, xr);
                }
            }
        }
        let gx = &mut gi[n * g.cin * plane..(n + 1) * g.cin * plane];
        for ci in 0..g.cin {
            let row = &mut gx[ci * plane..(ci + 1) * plane];
            for co in 0..g.cout {
                for ab in 0..4 {
                    let wv = wts[(co * g.cin + ci) * 4 + ab];
                    axpy(row, wv, &gathered[(co * 4 + ab) * plane..(co * 4 + ab + 1) * plane]);
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_raw(input.shape().to_vec(), gi),
        weights: Tensor::from_raw(kernel.weights.shape().to_vec(), gw),
        bias: Tensor::from_raw(vec![g.cout], gb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{numeric_grad, random, rel_err, FD_FLOOR};
    use alloc::vec::Vec;

    fn up(w: Tensor) -> ConvKernel {
        let out = w.shape()[0];
        ConvKernel::new(w, Tensor::zeros(&[out]), 2, 0).unwrap()
    }

    /// Scatter form in f64, one input pixel at a time.
    fn naive_transpose(x: &Tensor, k: &ConvKernel) -> Vec<f64> {
        let [n, cin, h, w] = x.dims4("naive").unwrap();
        let cout = k.out_channels();
        let mut out = vec![0.0f64; n * cout * 4 * h * w];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..2 * h {
                    for ox in 0..2 * w {
                        out[((b * cout + co) * 2 * h + oy) * 2 * w + ox] = k.bias.data()[co] as f64;
                    }
                }
            }
            for ci in 0..cin {
                for i in 0..h {
                    for j in 0..w {
                        let xv = x.data()[((b * cin + ci) * h + i) * w + j] as f64;
                        for co in 0..cout {
                            for a in 0..2 {
                                for c in 0..2 {
                                    let wv = k.weights.data()[((co * cin + ci) * 2 + a) * 2 + c] as f64;
                                    out[((b * cout + co) * 2 * h + 2 * i + a) * 2 * w + 2 * j + c] += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_scatter() {
        let x = random(&[2, 3, 3, 4], 31);
        let mut k = up(random(&[2, 3, 2, 2], 32));
        k.bias = random(&[2], 33);
        let y = conv_transpose2d_forward(&x, &k).unwrap();
        for (a, b) in y.data().iter().zip(naive_transpose(&x, &k)) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn single_pixel_broadcast() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let k = up(Tensor::new(&[1, 1, 2, 2], vec![1.0; 4]).unwrap());
        let y = conv_transpose2d_forward(&x, &k).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0; 4]);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut k = up(random(&[3, 2, 2, 2], 1));
        k.bias = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv_transpose2d_forward(&Tensor::zeros(&[2, 2, 3, 4]), &k).unwrap();
        assert_eq!(y.shape(), &[2, 3, 6, 8]);
        for (idx, v) in y.data().iter().enumerate() {
            let co = (idx / 48) % 3;
            assert_eq!(*v, [0.5, -1.0, 2.0][co]);
        }
    }

    #[test]
    fn rejects_unsupported_geometry() {
        let w = random(&[1, 1, 2, 2], 1);
        let k = ConvKernel::new(w.clone(), Tensor::zeros(&[1]), 1, 0).unwrap();
        assert!(matches!(
            conv_transpose2d_forward(&Tensor::zeros(&[1, 1, 2, 2]), &k),
            Err(Error::Config(_))
        ));
        let k = ConvKernel::new(w, Tensor::zeros(&[1]), 2, 1).unwrap();
        assert!(matches!(
            conv_transpose2d_forward(&Tensor::zeros(&[1, 1, 2, 2]), &k),
            Err(Error::Config(_))
        ));
    }

    /// Builds the matrix of the stride-2 2x2 convolution `y = A x` column by
    /// column with an explicit loop, then checks the transposed convolution
    /// equals `A^T`.
    #[test]
    fn equals_adjoint_of_strided_conv() {
        let (cout, cin, h, w) = (2usize, 3usize, 2usize, 2usize);
        let k = up(random(&[cout, cin, 2, 2], 4));
        // strided conv maps [cout, 2h, 2w] -> [cin, h, w] with weights w[co, ci] swapped
        let in_len = cout * 4 * h * w;
        let out_len = cin * h * w;
        let mut a = vec![vec![0.0f64; in_len]; out_len];
        #[allow(clippy::needless_range_loop)]
        for col in 0..in_len {
            let mut e = vec![0.0f64; in_len];
            e[col] = 1.0;
            for ci in 0..cin {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for co in 0..cout {
                            for ky in 0..2 {
                                for kx in 0..2 {
                                    let src = (co * 2 * h + 2 * i + ky) * 2 * w + 2 * j + kx;
                                    acc += e[src] * k.weights.data()[((co * cin + ci) * 2 + ky) * 2 + kx] as f64;
                                }
                            }
                        }
                        a[(ci * h + i) * w + j][col] = acc;
                    }
                }
            }
        }
        let x = random(&[1, cin, h, w], 5);
        let y = conv_transpose2d_forward(&x, &k).unwrap();
        #[allow(clippy::needless_range_loop)]
        for col in 0..in_len {
            let expect: f64 = (0..out_len).map(|r| a[r][col] * x.data()[r] as f64).sum();
            assert!((y.data()[col] as f64 - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_grad_output_gives_zero_grads() {
        let x = random(&[1, 2, 3, 3], 1);
        let k = up(random(&[2, 2, 2, 2], 2));
        let g = conv_transpose2d_backward(&x, &k, &Tensor::zeros(&[1, 2, 6, 6])).unwrap();
        assert!(g
            .input
            .data()
            .iter()
            .chain(g.weights.data())
            .chain(g.bias.data())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn broadcast_case_hand_expansion() {
        // one input pixel: dx = sum over the 2x2 footprint of go * w
        let x = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let k = up(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let go = Tensor::new(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let g = conv_transpose2d_backward(&x, &k, &go).unwrap();
        assert_eq!(g.input.data(), &[0.5 - 2.0 + 6.0 + 1.0]);
        assert_eq!(g.weights.data(), &[1.5, -3.0, 6.0, 0.75]);
        assert_eq!(g.bias.data(), &[1.75]);
    }

    #[test]
    fn finite_differences() {
        let x = random(&[1, 2, 3, 3], 21);
        let mut k = up(random(&[3, 2, 2, 2], 22));
        k.bias = random(&[3], 23);
        let r = random(&[1, 3, 6, 6], 24);
        let loss = |x: &Tensor, k: &ConvKernel| -> f64 {
            naive_transpose(x, k)
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * *b as f64)
                .sum()
        };
        let g = conv_transpose2d_backward(&x, &k, &r).unwrap();
        let mut checked = Vec::new();
        for i in 0..x.len() {
            let num = numeric_grad(&x, i, |xp| loss(xp, &k));
            checked.push(rel_err(g.input.data()[i] as f64, num, FD_FLOOR));
        }
        for i in 0..k.weights.len() {
            let num = numeric_grad(&k.weights, i, |wp| {
                let mut kp = k.clone();
                kp.weights = wp.clone();
                loss(&x, &kp)
            });
            checked.push(rel_err(g.weights.data()[i] as f64, num, FD_FLOOR));
        }
        for i in 0..3 {
            let num = numeric_grad(&k.bias, i, |bp| {
                let mut kp = k.clone();
                kp.bias = bp.clone();
                loss(&x, &kp)
            });
            checked.push(rel_err(g.bias.data()[i] as f64, num, FD_FLOOR));
        }
        let worst = checked.iter().cloned().fold(0.0, f64::max);
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }
}
