//! Straight-loop f64 reference implementations used as test oracles.
//!
//! Nothing here shares code with the kernels under test: every operator is
//! written from its definition, in double precision, over plain `Vec<f64>`.

#![allow(dead_code)]

use fireseg::tensor::{ConvKernel, Tensor};
use fireseg::unet::UNetParams;

/// `[C, H, W]` activation in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Act {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            v: vec![0.0; c * h * w],
        }
    }

    pub fn from_sample(t: &Tensor, n: usize) -> Self {
        let s = t.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let len = c * h * w;
        Self {
            c,
            h,
            w,
            v: t.data()[n * len..(n + 1) * len].iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.v[(c * self.h + y) * self.w + x]
    }
}

fn weight(k: &ConvKernel, co: usize, ci: usize, y: usize, x: usize) -> f64 {
    let s = k.weights.shape();
    k.weights.data()[((co * s[1] + ci) * s[2] + y) * s[3] + x] as f64
}

/// Direct cross-correlation with zero padding.
pub fn conv(x: &Act, k: &ConvKernel) -> Act {
    let ks = k.size();
    let (s, p) = (k.stride, k.padding as isize);
    let ho = (x.h + 2 * k.padding - ks) / s + 1;
    let wo = (x.w + 2 * k.padding - ks) / s + 1;
    let mut out = Act::zeros(k.out_channels(), ho, wo);
    for co in 0..out.c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = k.bias.data()[co] as f64;
                for ci in 0..x.c {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (oy * s + ky) as isize - p;
                            let ix = (ox * s + kx) as isize - p;
                            if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                acc += x.at(ci, iy as usize, ix as usize) * weight(k, co, ci, ky, kx);
                            }
                        }
                    }
                }
                *out.at_mut(co, oy, ox) = acc;
            }
        }
    }
    out
}

/// Stride-2 2x2 transposed convolution, scatter form.
pub fn up(x: &Act, k: &ConvKernel) -> Act {
    let mut out = Act::zeros(k.out_channels(), 2 * x.h, 2 * x.w);
    for co in 0..out.c {
        for y in 0..out.h {
            for xx in 0..out.w {
                *out.at_mut(co, y, xx) = k.bias.data()[co] as f64;
            }
        }
    }
    for ci in 0..x.c {
        for i in 0..x.h {
            for j in 0..x.w {
                for co in 0..out.c {
                    for a in 0..2 {
                        for b in 0..2 {
                            *out.at_mut(co, 2 * i + a, 2 * j + b) += x.at(ci, i, j) * weight(k, co, ci, a, b);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn relu(x: &Act) -> Act {
    Act {
        v: x.v.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        ..*x
    }
}

pub fn pool(x: &Act) -> Act {
    let mut out = Act::zeros(x.c, x.h / 2, x.w / 2);
    for c in 0..x.c {
        for i in 0..out.h {
            for j in 0..out.w {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(a, b)| x.at(c, 2 * i + a, 2 * j + b))
                    .fold(f64::NEG_INFINITY, f64::max);
                *out.at_mut(c, i, j) = m;
            }
        }
    }
    out
}

/// Activation pattern of a forward pass: which ReLU inputs were positive and
/// how many window entries attain each pooled maximum. Two passes with equal
/// patterns lie on the same smooth piece of the network.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pattern {
    pub relu: Vec<bool>,
    pub pool: Vec<(u8, u8)>,
}

impl Pattern {
    fn relu(&mut self, x: &Act) -> Act {
        self.relu.extend(x.v.iter().map(|&v| v > 0.0));
        relu(x)
    }

    fn pool(&mut self, x: &Act) -> Act {
        for c in 0..x.c {
            for i in 0..x.h / 2 {
                for j in 0..x.w / 2 {
                    let vals: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(a, b)| x.at(c, 2 * i + a, 2 * j + b))
                        .collect();
                    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let first = vals.iter().position(|&v| v == m).unwrap() as u8;
                    let ties = vals.iter().filter(|&&v| v == m).count() as u8;
                    self.pool.push((first, ties));
                }
            }
        }
        pool(x)
    }

    /// True when some pooling window has a tied maximum.
    pub fn has_ties(&self) -> bool {
        self.pool.iter().any(|&(_, t)| t > 1)
    }
}

pub fn concat(a: &Act, b: &Act) -> Act {
    let mut v = a.v.clone();
    v.extend_from_slice(&b.v);
    Act {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        v,
    }
}

/// Mean over non-ignored pixels of `w[y] * -ln softmax(logits)[y]`.
pub fn weighted_ce(logits: &[Act], masks: &[Vec<u8>], weights: [f64; 2]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (z, m) in logits.iter().zip(masks) {
        let plane = z.h * z.w;
        for (p, &y) in m.iter().enumerate().take(plane) {
            if y == 2 {
                continue;
            }
            let (a, b) = (z.v[p], z.v[plane + p]);
            let lse = (a.exp() + b.exp()).ln();
            total += weights[y as usize] * (lse - [a, b][y as usize]);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Where to add a perturbation to an encoder skip tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipPath {
    /// Only the copy concatenated in the decoder.
    Concat,
    /// Only the copy fed to max-pooling.
    Pool,
}

#[derive(Debug, Clone, Copy)]
pub struct SkipNudge {
    pub level: usize,
    pub path: SkipPath,
    pub index: usize,
    pub delta: f64,
}

/// Reference U-Net forward for one sample, following the documented layer
/// order: enc1.conv1, enc1.conv2, ..., bottleneck.conv1/2, decD.up,
/// decD.conv, ..., dec1.up, dec1.conv, head.
pub fn unet_forward(params: &UNetParams, x: &Act, nudge: Option<SkipNudge>) -> Act {
    unet_forward_traced(params, x, nudge).0
}

pub fn unet_forward_traced(params: &UNetParams, x: &Act, nudge: Option<SkipNudge>) -> (Act, Pattern) {
    let mut pat = Pattern::default();
    let layers = params.layers();
    let depth = params.config().depth;
    let mut skips = Vec::new();
    let mut cur = x.clone();
    for level in 1..=depth {
        let a = pat.relu(&conv(&cur, &layers[2 * (level - 1)]));
        let skip = pat.relu(&conv(&a, &layers[2 * (level - 1) + 1]));
        let mut to_pool = skip.clone();
        let mut to_cat = skip;
        if let Some(n) = nudge.filter(|n| n.level == level) {
            match n.path {
                SkipPath::Pool => to_pool.v[n.index] += n.delta,
                SkipPath::Concat => to_cat.v[n.index] += n.delta,
            }
        }
        skips.push(to_cat);
        cur = pat.pool(&to_pool);
    }
    let b = 2 * depth;
    let a = pat.relu(&conv(&cur, &layers[b]));
    cur = pat.relu(&conv(&a, &layers[b + 1]));
    for (i, level) in (1..=depth).rev().enumerate() {
        let u = up(&cur, &layers[b + 2 + 2 * i]);
        cur = pat.relu(&conv(&concat(&u, &skips[level - 1]), &layers[b + 3 + 2 * i]));
    }
    (conv(&cur, layers.last().unwrap()), pat)
}

/// Central difference of `f` along flat coordinate `i` of `t`, using the
/// perturbation actually representable in f32. `f` returns the loss and the
/// activation pattern; `None` means the step crossed a kink.
pub fn numeric_grad_smooth<P: PartialEq>(
    t: &Tensor,
    i: usize,
    eps: f32,
    f: impl Fn(&Tensor) -> (f64, P),
) -> Option<f64> {
    let (_, base) = f(t);
    let mut d = t.data().to_vec();
    let orig = d[i];
    d[i] = orig + eps;
    let up = d[i];
    let (lp, pp) = f(&Tensor::new(t.shape(), d.clone()).unwrap());
    d[i] = orig - eps;
    let down = d[i];
    let (lm, pm) = f(&Tensor::new(t.shape(), d).unwrap());
    (pp == base && pm == base).then(|| (lp - lm) / (up as f64 - down as f64))
}

/// Central difference of `f` along flat coordinate `i` of `t`, using the
/// perturbation actually representable in f32.
pub fn numeric_grad(t: &Tensor, i: usize, eps: f32, f: impl Fn(&Tensor) -> f64) -> f64 {
    let mut d = t.data().to_vec();
    let orig = d[i];
    d[i] = orig + eps;
    let up = d[i];
    let lp = f(&Tensor::new(t.shape(), d.clone()).unwrap());
    d[i] = orig - eps;
    let down = d[i];
    let lm = f(&Tensor::new(t.shape(), d).unwrap());
    (lp - lm) / (up as f64 - down as f64)
}

/// `|a - b| / max(|a|, |b|, floor)`
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
