//! Symmetric U-Net mapping a `C`-channel tile to per-pixel two-class logits.
//!
//! Layout for depth `D` and initial width `F` (`w_i = F * 2^(i-1)`):
//!
//! * encoder level `i = 1..=D`: 3x3 conv → ReLU → 3x3 conv → ReLU at width
//!   `w_i`, then 2x2 max-pool; the pre-pool activation is the skip tensor;
//! * bottleneck: two 3x3 conv + ReLU at width `F * 2^D`;
//! * decoder level `i = D..=1`: 2x2 stride-2 transposed conv to `w_i`,
//!   concatenation `[upsampled, skip_i]`, one 3x3 conv + ReLU to `w_i`;
//! * head: 1x1 conv to 2 logits.
//!
//! All 3x3 convolutions are zero-padded so spatial size is preserved.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{
    concat_channels, conv2d_backward, conv2d_backward_inner, conv2d_forward, conv_transpose2d_backward,
    conv_transpose2d_forward, maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward, split_channels,
    ConvKernel, PoolIndices, Tensor,
};

pub const TILE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub init_features: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl UNetConfig {
    /// Depth 4, two classes, seed 0.
    pub fn new(in_channels: usize, init_features: usize) -> Self {
        Self {
            in_channels,
            init_features,
            depth: 4,
            num_classes: 2,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.init_features == 0 {
            return Err(Error::Config("init_features must be at least 1".into()));
        }
        if self.depth == 0 || !TILE.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "depth {} does not divide the {TILE}-pixel tile",
                self.depth
            )));
        }
        if self.num_classes != 2 {
            return Err(Error::Config("only two classes are supported".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.init_features << (level - 1)
    }

    /// Every layer in topology order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let conv = |name: String, cin, cout| LayerSpec {
            name,
            kind: LayerKind::Conv3x3,
            in_channels: cin,
            out_channels: cout,
        };
        let mut prev = self.in_channels;
        for i in 1..=self.depth {
            let w = self.width(i);
            out.push(conv(format!("enc{i}.conv1"), prev, w));
            out.push(conv(format!("enc{i}.conv2"), w, w));
            prev = w;
        }
        let b = self.width(self.depth + 1);
        out.push(conv("bottleneck.conv1".into(), prev, b));
        out.push(conv("bottleneck.conv2".into(), b, b));
        for i in (1..=self.depth).rev() {
            let w = self.width(i);
            out.push(LayerSpec {
                name: format!("dec{i}.up"),
                kind: LayerKind::UpConv2x2,
                in_channels: self.width(i + 1),
                out_channels: w,
            });
            out.push(conv(format!("dec{i}.conv"), 2 * w, w));
        }
        out.push(LayerSpec {
            name: "head".into(),
            kind: LayerKind::Head1x1,
            in_channels: self.init_features,
            out_channels: self.num_classes,
        });
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::parameter_count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    UpConv2x2,
    Head1x1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn kernel_size(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 => 3,
            LayerKind::UpConv2x2 => 2,
            LayerKind::Head1x1 => 1,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let k = self.kernel_size();
        [self.out_channels, self.in_channels, k, k]
    }

    /// Summands feeding one output element. A stride-2 2x2 transposed conv
    /// touches exactly one tap per input channel.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::UpConv2x2 => self.in_channels,
            _ => self.in_channels * self.kernel_size() * self.kernel_size(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_channels
    }

    fn stride_padding(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv3x3 => (1, 1),
            LayerKind::UpConv2x2 => (2, 0),
            LayerKind::Head1x1 => (1, 0),
        }
    }
}

/// The learnable parameter set, one kernel per layer in topology order.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams {
    config: UNetConfig,
    layers: Vec<ConvKernel>,
}

impl UNetParams {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases, drawn in
    /// topology order from a ChaCha8 stream seeded by `config.seed`.
    pub fn init(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::new();
        for spec in config.layers() {
            let std = libm::sqrt(2.0 / spec.fan_in() as f64);
            let normal = Normal::new(0.0f64, std).expect("positive std");
            let shape = spec.weight_shape();
            let n: usize = shape.iter().product();
            let w: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
            let (stride, padding) = spec.stride_padding();
            layers.push(ConvKernel::new(
                Tensor::new(&shape, w)?,
                Tensor::zeros(&[spec.out_channels]),
                stride,
                padding,
            )?);
        }
        Ok(Self { config, layers })
    }

    /// Rebuilds parameters from `[weights, bias]` pairs in topology order,
    /// checking every shape against the configuration.
    pub fn from_tensors(config: UNetConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.layers();
        if tensors.len() != 2 * specs.len() {
            return Err(Error::Dimension {
                op: "UNetParams::from_tensors",
                axis: "tensor count",
                expected: 2 * specs.len(),
                actual: tensors.len(),
            });
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in &specs {
            let (w, b) = (it.next().unwrap(), it.next().unwrap());
            if w.shape() != spec.weight_shape() || b.shape() != [spec.out_channels] {
                return Err(Error::Shape {
                    op: "UNetParams::from_tensors",
                    shape: w.shape().to_vec(),
                    reason: "parameter shape does not match the configured layer",
                });
            }
            let (stride, padding) = spec.stride_padding();
            layers.push(ConvKernel::new(w, b, stride, padding)?);
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvKernel] {
        &self.layers
    }

    /// `[w0, b0, w1, b1, ...]` in topology order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|k| [&k.weights, &k.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|k| [&mut k.weights, &mut k.bias])
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.layers.into_iter().flat_map(|k| [k.weights, k.bias]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    fn enc(&self, level: usize, j: usize) -> &ConvKernel {
        &self.layers[2 * (level - 1) + j]
    }

    fn bottleneck(&self, j: usize) -> &ConvKernel {
        &self.layers[2 * self.config.depth + j]
    }

    fn dec_index(&self, level: usize) -> usize {
        2 * self.config.depth + 2 + 2 * (self.config.depth - level)
    }

    fn up(&self, level: usize) -> &ConvKernel {
        &self.layers[self.dec_index(level)]
    }

    fn dec(&self, level: usize) -> &ConvKernel {
        &self.layers[self.dec_index(level) + 1]
    }

    fn head(&self) -> &ConvKernel {
        self.layers.last().unwrap()
    }

    /// Runs the network on `[N, C, H, W]`; with `training` the activations
    /// needed by [`UNetParams::backward`] are kept.
    pub fn forward(&self, batch: &Tensor, training: bool) -> Result<(Tensor, Option<ForwardCache>)> {
        let [_, c, h, w] = batch.dims4("UNet::forward")?;
        if c != self.config.in_channels {
            return Err(Error::Config(format!(
                "batch has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        let m = 1 << self.config.depth;
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape {
                op: "UNet::forward",
                shape: batch.shape().to_vec(),
                reason: "H and W must be divisible by 2^depth",
            });
        }
        let mut enc = Vec::with_capacity(self.config.depth);
        let mut x = batch.clone();
        for level in 1..=self.config.depth {
            let (block, pooled) = DoubleConv::run(self.enc(level, 0), self.enc(level, 1), x)?;
            let (pooled, indices) = maxpool2x2_forward(&pooled)?;
            enc.push(EncoderCache { block, indices });
            x = pooled;
        }
        let (bottleneck, mut x) = DoubleConv::run(self.bottleneck(0), self.bottleneck(1), x)?;
        let mut dec = Vec::with_capacity(self.config.depth);
        for level in (1..=self.config.depth).rev() {
            let up_in = x;
            let up = conv_transpose2d_forward(&up_in, self.up(level))?;
            let up_channels = up.shape()[1];
            let cat = concat_channels(&up, &enc[level - 1].block.output)?;
            let pre = conv2d_forward(&cat, self.dec(level))?;
            x = relu_forward(&pre);
            dec.push(DecoderCache {
                up_in,
                up_channels,
                cat,
                pre,
            });
        }
        let logits = conv2d_forward(&x, self.head())?;
        let cache = training.then(|| ForwardCache {
            input: batch.clone(),
            enc,
            bottleneck,
            dec,
            head_in: x,
        });
        Ok((logits, cache))
    }

    /// Gradients aligned with [`UNetParams::tensors`].
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.backward_inner(cache, grad_logits, false)?.params)
    }

    /// As [`UNetParams::backward`], additionally returning the input gradient
    /// and both contributions to every skip tensor's gradient.
    pub fn backward_full(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Backward> {
        self.backward_inner(cache, grad_logits, true)
    }

    fn backward_inner(&self, cache: &ForwardCache, grad_logits: &Tensor, full: bool) -> Result<Backward> {
        let depth = self.config.depth;
        let mut grads: Vec<Option<(Tensor, Tensor)>> = vec![None; self.layers.len()];
        let n_layers = self.layers.len();

        let (g, gw, gb) = conv2d_backward_inner(&cache.head_in, self.head(), grad_logits, true)?;
        grads[n_layers - 1] = Some((gw, gb));
        let mut g = g.unwrap();

        // dec caches were pushed from level D down to 1
        let mut skip_concat: Vec<Option<Tensor>> = vec![None; depth];
        for level in 1..=depth {
            let dc = &cache.dec[depth - level];
            let g_pre = relu_backward(&dc.pre, &g)?;
            let cg = conv2d_backward(&dc.cat, self.dec(level), &g_pre)?;
            grads[self.dec_index(level) + 1] = Some((cg.weights, cg.bias));
            let (g_up, g_skip) = split_channels(&cg.input, dc.up_channels)?;
            skip_concat[level - 1] = Some(g_skip);
            let ug = conv_transpose2d_backward(&dc.up_in, self.up(level), &g_up)?;
            grads[self.dec_index(level)] = Some((ug.weights, ug.bias));
            g = ug.input;
        }

        let (g_pooled, [l0, l1]) = cache
            .bottleneck
            .backward(self.bottleneck(0), self.bottleneck(1), &g, true)?;
        grads[2 * depth] = Some(l0);
        grads[2 * depth + 1] = Some(l1);
        let mut g = g_pooled.unwrap();

        let mut skips = Vec::new();
        let mut input = None;
        for level in (1..=depth).rev() {
            let ec = &cache.enc[level - 1];
            let from_pool = maxpool2x2_backward(&ec.indices, &g)?;
            let from_concat = skip_concat[level - 1].take().unwrap();
            let mut total = from_pool.clone();
            total.add_assign(&from_concat);
            let need_input = level > 1 || full;
            let (g_in, [l0, l1]) = ec
                .block
                .backward(self.enc(level, 0), self.enc(level, 1), &total, need_input)?;
            grads[2 * (level - 1)] = Some(l0);
            grads[2 * (level - 1) + 1] = Some(l1);
            if full {
                skips.push(SkipGrad {
                    level,
                    from_concat,
                    from_pool,
                    total,
                });
            }
            match g_in {
                Some(t) if level > 1 => g = t,
                other => input = other,
            }
        }
        skips.reverse();
        Ok(Backward {
            params: grads
                .into_iter()
                .flat_map(|p| {
                    let (w, b) = p.expect("every layer receives a gradient");
                    [w, b]
                })
                .collect(),
            input,
            skips,
        })
    }

    /// Logits only, without keeping activations.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch, false)?.0)
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    input: Tensor,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
    output: Tensor,
}

impl DoubleConv {
    fn run(k1: &ConvKernel, k2: &ConvKernel, input: Tensor) -> Result<(Self, Tensor)> {
        let pre1 = conv2d_forward(&input, k1)?;
        let act1 = relu_forward(&pre1);
        let pre2 = conv2d_forward(&act1, k2)?;
        let output = relu_forward(&pre2);
        let pooled_input = output.clone();
        Ok((
            Self {
                input,
                pre1,
                act1,
                pre2,
                output,
            },
            pooled_input,
        ))
    }

    #[allow(clippy::type_complexity)]
    fn backward(
        &self,
        k1: &ConvKernel,
        k2: &ConvKernel,
        grad_output: &Tensor,
        need_input: bool,
    ) -> Result<(Option<Tensor>, [(Tensor, Tensor); 2])> {
        let g = relu_backward(&self.pre2, grad_output)?;
        let c2 = conv2d_backward(&self.act1, k2, &g)?;
        let g = relu_backward(&self.pre1, &c2.input)?;
        let (gi, w1, b1) = conv2d_backward_inner(&self.input, k1, &g, need_input)?;
        Ok((gi, [(w1, b1), (c2.weights, c2.bias)]))
    }
}

#[derive(Debug, Clone)]
struct EncoderCache {
    block: DoubleConv,
    indices: PoolIndices,
}

#[derive(Debug, Clone)]
struct DecoderCache {
    up_in: Tensor,
    up_channels: usize,
    cat: Tensor,
    pre: Tensor,
}

/// Activations kept by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor,
    enc: Vec<EncoderCache>,
    bottleneck: DoubleConv,
    dec: Vec<DecoderCache>,
    head_in: Tensor,
}

impl ForwardCache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    /// Pre-pool activation of encoder `level` (1-based).
    pub fn skip(&self, level: usize) -> &Tensor {
        &self.enc[level - 1].block.output
    }
}

/// Gradient of one encoder skip tensor, split by consumer.
#[derive(Debug, Clone)]
pub struct SkipGrad {
    pub level: usize,
    /// Through the decoder concatenation.
    pub from_concat: Tensor,
    /// Through the max-pool into the next encoder level.
    pub from_pool: Tensor,
    pub total: Tensor,
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub params: Vec<Tensor>,
    pub input: Option<Tensor>,
    /// Ordered by level, shallowest first. Empty unless requested.
    pub skips: Vec<SkipGrad>,
}

/// Per-pixel labels from `[N, 2, H, W]` logits: fire (1) iff the softmax
/// fire probability is at least `threshold`.
///
/// The test runs on the logit difference against `ln(t / (1 - t))`, so
/// `threshold = 0.5` is exactly the two-class argmax with ties to fire.
pub fn predict_mask(logits: &Tensor, threshold: f64) -> Result<Vec<u8>> {
    let [n, c, h, w] = logits.dims4("predict_mask")?;
    if c != 2 {
        return Err(Error::Dimension {
            op: "predict_mask",
            axis: "C",
            expected: 2,
            actual: c,
        });
    }
    if threshold.is_nan() {
        return Err(Error::Config("threshold is NaN".into()));
    }
    let cut = if threshold <= 0.0 {
        f64::NEG_INFINITY
    } else if threshold >= 1.0 {
        f64::INFINITY
    } else {
        libm::log(threshold / (1.0 - threshold))
    };
    let plane = h * w;
    let z = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for s in 0..n {
        let (a, b) = (
            &z[s * 2 * plane..(s * 2 + 1) * plane],
            &z[(s * 2 + 1) * plane..(s * 2 + 2) * plane],
        );
        out.extend(a.iter().zip(b).map(|(&a, &b)| (b as f64 - a as f64 >= cut) as u8));
    }
    Ok(out)
}
