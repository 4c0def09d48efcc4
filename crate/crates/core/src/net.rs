//! A small convolutional embedding network with hand-derived backward pass
//! and class activation maps.
//!
//! Pipeline: `[3x3 conv (same) -> ReLU -> 2x2 max-pool] x blocks -> 1x1
//! reduction conv -> ReLU -> global average pool -> dense -> sigmoid`.
//! All arithmetic is `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::EyeImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_size: usize,
    /// Output channels of each 3x3 conv + 2x2 pool block.
    pub conv_blocks: Vec<usize>,
    pub reduce_channels: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            conv_blocks: vec![8, 16, 16],
            reduce_channels: 32,
            embed_dim: 32,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let pools = self.conv_blocks.len() as u32;
        if self.input_size == 0 || self.input_size % 2usize.pow(pools) != 0 {
            return Err(Error::invalid(format!(
                "input size {} is not divisible by 2^{pools}",
                self.input_size
            )));
        }
        if self.conv_blocks.iter().any(|&c| c == 0) || self.reduce_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.embed_dim < 2 {
            return Err(Error::invalid("embedding dimension must be at least 2"));
        }
        Ok(())
    }

    /// Spatial side of the reduction feature maps.
    pub fn feature_size(&self) -> usize {
        self.input_size >> self.conv_blocks.len()
    }
}

/// Channels x height x width, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Grayscale image scaled to `[0, 1]`.
    pub fn from_image(image: &EyeImage) -> Self {
        Self {
            channels: 1,
            height: image.height(),
            width: image.width(),
            data: image.pixels().iter().map(|&p| p as f64 / 255.0).collect(),
        }
    }
}

/// Square convolution with stride 1 and same padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    fn forward(&self, input: &FeatureMap) -> FeatureMap {
        let (h, w, k) = (input.height, input.width, self.kernel);
        let pad = k / 2;
        let mut out = FeatureMap::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let plane = out.plane_mut(o);
            plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let src = input.plane(i);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weight[((o * self.in_channels + i) * k + ky) * k + kx];
                        let (ylo, yhi) = valid_range(h, ky, pad);
                        let (xlo, xhi) = valid_range(w, kx, pad);
                        for y in ylo..yhi {
                            let sy = y + ky - pad;
                            let dst = &mut plane[y * w + xlo..y * w + xhi];
                            let s = &src[sy * w + xlo + kx - pad..sy * w + xhi + kx - pad];
                            for (d, &v) in dst.iter_mut().zip(s) {
                                *d += wv * v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight and bias gradients into `grads`; returns the input
    /// gradient when `need_input` is set.
    fn backward(
        &self,
        input: &FeatureMap,
        grad_out: &FeatureMap,
        grads: &mut Conv,
        need_input: bool,
    ) -> Option<FeatureMap> {
        let (h, w, k) = (input.height, input.width, self.kernel);
        let pad = k / 2;
        let mut grad_in = need_input.then(|| FeatureMap::zeros(self.in_channels, h, w));
        for o in 0..self.out_channels {
            let go = grad_out.plane(o);
            grads.bias[o] += go.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let src = input.plane(i);
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((o * self.in_channels + i) * k + ky) * k + kx;
                        let (ylo, yhi) = valid_range(h, ky, pad);
                        let (xlo, xhi) = valid_range(w, kx, pad);
                        let mut acc = 0.0;
                        for y in ylo..yhi {
                            let sy = y + ky - pad;
                            let g = &go[y * w + xlo..y * w + xhi];
                            let s = &src[sy * w + xlo + kx - pad..sy * w + xhi + kx - pad];
                            acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        }
                        grads.weight[widx] += acc;

                        if let Some(gi) = grad_in.as_mut() {
                            let wv = self.weight[widx];
                            let dst_plane = gi.plane_mut(i);
                            for y in ylo..yhi {
                                let sy = y + ky - pad;
                                let g = &go[y * w + xlo..y * w + xhi];
                                let d = &mut dst_plane
                                    [sy * w + xlo + kx - pad..sy * w + xhi + kx - pad];
                                for (dv, &gv) in d.iter_mut().zip(g) {
                                    *dv += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }

    fn init(&mut self, rng: &mut ChaCha8Rng) {
        let kk = self.kernel * self.kernel;
        let fan = (self.in_channels * kk + self.out_channels * kk) as f64;
        let limit = (6.0 / fan).sqrt();
        for w in &mut self.weight {
            *w = rng.gen_range(-limit..=limit);
        }
    }
}

/// Output rows `[lo, hi)` whose tap at offset `k` lands inside `0..n`.
fn valid_range(n: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad).saturating_sub(k).min(n);
    (lo, hi.max(lo))
}

fn relu_in_place(map: &mut FeatureMap) {
    for v in &mut map.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries whose forward ReLU output was not positive.
fn relu_gate(grad: &mut FeatureMap, output: &FeatureMap) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 stride-2 max pool. Returns the pooled map and, per output element,
/// the flat input index of the winning element (first maximum in scan order).
fn max_pool(input: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = FeatureMap::zeros(input.channels, h, w);
    let mut argmax = Vec::with_capacity(out.data.len());
    let plane_in = input.height * input.width;
    for c in 0..input.channels {
        for y in 0..h {
            for x in 0..w {
                let mut best_idx = c * plane_in + 2 * y * input.width + 2 * x;
                let mut best = input.data[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = c * plane_in + (2 * y + dy) * input.width + 2 * x + dx;
                    if input.data[idx] > best {
                        best = input.data[idx];
                        best_idx = idx;
                    }
                }
                out.data[(c * h + y) * w + x] = best;
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Embedding vector with components in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Trainable tensors. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub blocks: Vec<Conv>,
    pub reduce: Conv,
    /// `[embed_dim][reduce_channels]`
    pub dense_weight: Vec<f64>,
    pub dense_bias: Vec<f64>,
}

pub type ParamGrads = Params;

impl Params {
    pub fn zeros(config: &NetConfig) -> Self {
        let mut in_c = 1;
        let mut blocks = Vec::with_capacity(config.conv_blocks.len());
        for &out_c in &config.conv_blocks {
            blocks.push(Conv::zeros(in_c, out_c, 3));
            in_c = out_c;
        }
        Self {
            blocks,
            reduce: Conv::zeros(in_c, config.reduce_channels, 1),
            dense_weight: vec![0.0; config.embed_dim * config.reduce_channels],
            dense_bias: vec![0.0; config.embed_dim],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(config: &NetConfig) -> Self {
        let mut params = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for conv in &mut params.blocks {
            conv.init(&mut rng);
        }
        params.reduce.init(&mut rng);
        let limit = (6.0 / (config.embed_dim + config.reduce_channels) as f64).sqrt();
        for w in &mut params.dense_weight {
            *w = rng.gen_range(-limit..=limit);
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, t| t.fill(0.0));
        z
    }

    /// Tensors in declaration order: per block weight then bias, reduction
    /// weight and bias, dense weight and bias.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, conv) in self.blocks.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &conv.weight));
            out.push((format!("conv{i}.bias"), &conv.bias));
        }
        out.push(("reduce.weight".into(), &self.reduce.weight));
        out.push(("reduce.bias".into(), &self.reduce.bias));
        out.push(("dense.weight".into(), &self.dense_weight));
        out.push(("dense.bias".into(), &self.dense_bias));
        out
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        for (i, conv) in self.blocks.iter_mut().enumerate() {
            f(&format!("conv{i}.weight"), &mut conv.weight);
            f(&format!("conv{i}.bias"), &mut conv.bias);
        }
        f("reduce.weight", &mut self.reduce.weight);
        f("reduce.bias", &mut self.reduce.bias);
        f("dense.weight", &mut self.dense_weight);
        f("dense.bias", &mut self.dense_bias);
    }

    /// Applies `f(self_tensor, other_tensor)` pairwise over matching tensors.
    pub fn zip_tensors_mut(&mut self, other: &Params, mut f: impl FnMut(&mut [f64], &[f64])) {
        let others = other.tensors();
        let mut idx = 0;
        self.for_each_tensor_mut(|_, t| {
            f(t, others[idx].1);
            idx += 1;
        });
    }

    pub fn add_assign(&mut self, other: &Params) {
        self.zip_tensors_mut(other, |a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        });
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v *= factor));
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        self.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v = *v as f32 as f64));
    }
}

/// Everything backward and CAM extraction need from a forward pass.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    pub input: FeatureMap,
    /// Post-ReLU conv outputs of each block, before pooling.
    pub block_outputs: Vec<FeatureMap>,
    pub pooled: Vec<FeatureMap>,
    pub pool_argmax: Vec<Vec<usize>>,
    /// Post-ReLU reduction maps `A_k`.
    pub features: FeatureMap,
    /// Global average of each reduction map.
    pub gap: Vec<f64>,
    /// Pre-sigmoid dense outputs.
    pub logits: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Normalized spatial activation map on the input grid, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub size: usize,
    pub values: Vec<f64>,
}

impl CamMap {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            values: vec![0.0; size * size],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.size + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet {
    pub config: NetConfig,
    pub params: Params,
}

impl EmbeddingNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    pub fn with_params(config: NetConfig, params: Params) -> Result<Self> {
        config.validate()?;
        if params.tensors().iter().map(|(_, t)| t.len()).ne(Params::zeros(&config)
            .tensors()
            .iter()
            .map(|(_, t)| t.len()))
        {
            return Err(Error::shape("parameters do not match the network configuration"));
        }
        Ok(Self { config, params })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn forward(&self, crop: &EyeImage) -> Result<(Embedding, ActivationCache)> {
        let s = self.config.input_size;
        if crop.width() != s || crop.height() != s {
            return Err(Error::shape(format!(
                "network expects {s}x{s} crops, got {}x{}",
                crop.width(),
                crop.height()
            )));
        }
        self.forward_map(FeatureMap::from_image(crop))
    }

    /// Forward pass on an arbitrary real-valued single-channel input.
    pub fn forward_map(&self, input: FeatureMap) -> Result<(Embedding, ActivationCache)> {
        let s = self.config.input_size;
        if input.channels != 1 || input.height != s || input.width != s {
            return Err(Error::shape(format!(
                "network expects a 1x{s}x{s} input, got {}x{}x{}",
                input.channels, input.height, input.width
            )));
        }
        let p = &self.params;
        let mut block_outputs = Vec::with_capacity(p.blocks.len());
        let mut pooled = Vec::with_capacity(p.blocks.len());
        let mut pool_argmax = Vec::with_capacity(p.blocks.len());
        for (i, conv) in p.blocks.iter().enumerate() {
            let src = if i == 0 { &input } else { &pooled[i - 1] };
            let mut act = conv.forward(src);
            relu_in_place(&mut act);
            let (pool, arg) = max_pool(&act);
            block_outputs.push(act);
            pooled.push(pool);
            pool_argmax.push(arg);
        }
        let last = pooled.last().unwrap_or(&input);
        let mut features = p.reduce.forward(last);
        relu_in_place(&mut features);

        let area = (features.height * features.width) as f64;
        let gap: Vec<f64> = (0..features.channels)
            .map(|k| features.plane(k).iter().sum::<f64>() / area)
            .collect();
        let r = gap.len();
        let logits: Vec<f64> = (0..self.config.embed_dim)
            .map(|j| {
                let row = &p.dense_weight[j * r..(j + 1) * r];
                p.dense_bias[j] + row.iter().zip(&gap).map(|(w, g)| w * g).sum::<f64>()
            })
            .collect();
        let embedding: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();

        Ok((
            Embedding(embedding.clone()),
            ActivationCache {
                input,
                block_outputs,
                pooled,
                pool_argmax,
                features,
                gap,
                logits,
                embedding,
            },
        ))
    }

    /// Exact parameter gradients of `grad_embedding . embedding`.
    pub fn backward(&self, cache: &ActivationCache, grad_embedding: &[f64]) -> Result<ParamGrads> {
        let p = &self.params;
        let d = self.config.embed_dim;
        let r = self.config.reduce_channels;
        if grad_embedding.len() != d
            || cache.embedding.len() != d
            || cache.gap.len() != r
            || cache.block_outputs.len() != p.blocks.len()
        {
            return Err(Error::shape("activation cache does not match the network"));
        }
        let mut grads = p.zeros_like();

        let grad_logits: Vec<f64> = grad_embedding
            .iter()
            .zip(&cache.embedding)
            .map(|(g, e)| g * e * (1.0 - e))
            .collect();
        let mut grad_gap = vec![0.0; r];
        for j in 0..d {
            let gl = grad_logits[j];
            grads.dense_bias[j] += gl;
            for k in 0..r {
                grads.dense_weight[j * r + k] += gl * cache.gap[k];
                grad_gap[k] += gl * p.dense_weight[j * r + k];
            }
        }

        let f = &cache.features;
        let area = (f.height * f.width) as f64;
        let mut grad_features = FeatureMap::zeros(f.channels, f.height, f.width);
        for k in 0..r {
            grad_features.plane_mut(k).fill(grad_gap[k] / area);
        }
        relu_gate(&mut grad_features, f);

        let last = cache.pooled.last().unwrap_or(&cache.input);
        let need_input = !p.blocks.is_empty();
        let mut grad = p
            .reduce
            .backward(last, &grad_features, &mut grads.reduce, need_input);

        for i in (0..p.blocks.len()).rev() {
            let grad_pooled = grad.take().expect("input gradient requested");
            let act = &cache.block_outputs[i];
            let mut grad_act = FeatureMap::zeros(act.channels, act.height, act.width);
            for (g, &idx) in grad_pooled.data.iter().zip(&cache.pool_argmax[i]) {
                grad_act.data[idx] += g;
            }
            relu_gate(&mut grad_act, act);
            let src = if i == 0 { &cache.input } else { &cache.pooled[i - 1] };
            grad = p.blocks[i].backward(src, &grad_act, &mut grads.blocks[i], i > 0);
        }
        Ok(grads)
    }

    /// Class activation map weighted by the realized embedding:
    /// `w_k = sum_j W[j,k] e_j`, `M = ReLU(sum_k w_k A_k)`, bilinearly
    /// upsampled to the input grid and divided by its maximum.
    pub fn compute_cam(&self, cache: &ActivationCache, embedding: &Embedding) -> CamMap {
        let r = self.config.reduce_channels;
        let f = &cache.features;
        let channel_weights: Vec<f64> = (0..r)
            .map(|k| {
                (0..self.config.embed_dim)
                    .map(|j| self.params.dense_weight[j * r + k] * embedding.0[j])
                    .sum()
            })
            .collect();
        let mut raw = vec![0.0; f.height * f.width];
        for (k, &wk) in channel_weights.iter().enumerate() {
            for (m, &a) in raw.iter_mut().zip(f.plane(k)) {
                *m += wk * a;
            }
        }
        for m in &mut raw {
            *m = m.max(0.0);
        }
        let mut cam = upsample_bilinear(&raw, f.width, f.height, self.config.input_size);
        let peak = cam.max();
        if peak > 0.0 {
            for v in &mut cam.values {
                *v /= peak;
            }
        }
        cam
    }
}

/// Half-pixel-centred bilinear upsampling with edge clamping.
fn upsample_bilinear(src: &[f64], w: usize, h: usize, size: usize) -> CamMap {
    let mut out = CamMap::zeros(size);
    let coord = |u: usize, n: usize| -> (usize, usize, f64) {
        let s = ((u as f64 + 0.5) * n as f64 / size as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    for v in 0..size {
        let (y0, y1, fy) = coord(v, h);
        for u in 0..size {
            let (x0, x1, fx) = coord(u, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.values[v * size + u] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Step, tolerance and sampling for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Number of entries probed per tensor; `None` checks every entry.
    pub max_entries_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// `||analytic - numeric|| / (||analytic|| + ||numeric||)` over the probed entries.
    pub relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_relative_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| !t.passed)
            .map(|t| t.name.as_str())
            .collect()
    }
}

pub fn grad_check(config: &NetConfig, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let opts = GradCheckOptions {
        tolerance,
        ..Default::default()
    };
    grad_check_with(config, seed, &opts, |_| {})
}

/// Compares backward against central differences of `sum(embedding)` on a
/// random input with random parameters. `tamper` may modify the analytic
/// gradients before comparison.
pub fn grad_check_with(
    config: &NetConfig,
    seed: u64,
    opts: &GradCheckOptions,
    tamper: impl FnOnce(&mut ParamGrads),
) -> Result<GradCheckReport> {
    let mut config = config.clone();
    config.seed = seed;
    let mut net = EmbeddingNet::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    // Nonzero biases so that bias gradients are exercised away from ReLU kinks.
    net.params.for_each_tensor_mut(|name, t| {
        if name.ends_with("bias") {
            t.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    });
    let s = config.input_size;
    let input = FeatureMap {
        channels: 1,
        height: s,
        width: s,
        data: (0..s * s).map(|_| rng.gen_range(0.0..1.0)).collect(),
    };

    let probe = |net: &EmbeddingNet| -> Result<f64> {
        let (e, _) = net.forward_map(input.clone())?;
        Ok(e.0.iter().sum())
    };
    let (_, cache) = net.forward_map(input.clone())?;
    let mut analytic = net.backward(&cache, &vec![1.0; config.embed_dim])?;
    tamper(&mut analytic);

    let analytic_tensors: Vec<(String, Vec<f64>)> = analytic
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.to_vec()))
        .collect();
    let mut tensors = Vec::with_capacity(analytic_tensors.len());
    for (tensor_idx, (name, grad)) in analytic_tensors.iter().enumerate() {
        let indices: Vec<usize> = match opts.max_entries_per_tensor {
            Some(cap) if cap < grad.len() => {
                (0..cap).map(|_| rng.gen_range(0..grad.len())).collect()
            }
            _ => (0..grad.len()).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &idx in &indices {
            let numeric = {
                let mut plus = net.clone();
                nudge(&mut plus.params, tensor_idx, idx, opts.step);
                let mut minus = net.clone();
                nudge(&mut minus.params, tensor_idx, idx, -opts.step);
                (probe(&plus)? - probe(&minus)?) / (2.0 * opts.step)
            };
            let a = grad[idx];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt() + n2.sqrt();
        let relative_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        tensors.push(TensorCheck {
            name: name.clone(),
            checked: indices.len(),
            relative_error,
            passed: relative_error <= opts.tolerance,
        });
    }
    let max_relative_error = tensors.iter().map(|t| t.relative_error).fold(0.0, f64::max);
    let passed = tensors.iter().all(|t| t.passed);
    Ok(GradCheckReport {
        tensors,
        max_relative_error,
        passed,
    })
}

fn nudge(params: &mut Params, tensor_idx: usize, idx: usize, delta: f64) {
    let mut current = 0;
    params.for_each_tensor_mut(|_, t| {
        if current == tensor_idx {
            t[idx] += delta;
        }
        current += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            input_size: 8,
            conv_blocks: vec![2],
            reduce_channels: 3,
            embed_dim: 4,
            seed: 5,
        }
    }

    fn gradient_image(size: usize) -> EyeImage {
        let pixels = (0..size * size).map(|i| ((i * 37) % 256) as u8).collect();
        EyeImage::new(size, size, pixels).unwrap()
    }

    #[test]
    fn zero_network_embeds_to_one_half() {
        let cfg = tiny();
        let net = EmbeddingNet::with_params(cfg.clone(), Params::zeros(&cfg)).unwrap();
        let (e, _) = net.forward(&gradient_image(8)).unwrap();
        assert_eq!(e.0, vec![0.5; 4]);
    }

    #[test]
    fn dense_bias_shifts_one_logit() {
        let net = EmbeddingNet::new(tiny()).unwrap();
        let img = gradient_image(8);
        let (_, base) = net.forward(&img).unwrap();
        let mut bumped = net.clone();
        bumped.params.dense_bias[2] += 0.75;
        let (_, after) = bumped.forward(&img).unwrap();
        for j in 0..4 {
            let delta = after.logits[j] - base.logits[j];
            let expected = if j == 2 { 0.75 } else { 0.0 };
            assert!((delta - expected).abs() < 1e-12, "logit {j}: {delta}");
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let net = EmbeddingNet::new(NetConfig::default()).unwrap();
        let img = gradient_image(64);
        let (a, _) = net.forward(&img).unwrap();
        let (b, _) = net.forward(&img).unwrap();
        assert_eq!(a, b);
        assert!(a.0.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = EmbeddingNet::new(tiny()).unwrap();
        assert!(net.forward(&gradient_image(16)).is_err());
        assert!(NetConfig { input_size: 7, ..tiny() }.validate().is_err());
        assert!(NetConfig { embed_dim: 1, ..tiny() }.validate().is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let net = EmbeddingNet::new(tiny()).unwrap();
        let (_, cache) = net.forward(&gradient_image(8)).unwrap();
        let g = net.backward(&cache, &[0.0; 4]).unwrap();
        assert!(g.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }

    /// One pixel, one 1x1 conv channel, one dense output:
    /// `e = sigmoid(v * relu(w * x + c) + b)`.
    #[test]
    fn hand_derived_three_parameter_net() {
        let cfg = NetConfig {
            input_size: 1,
            conv_blocks: vec![],
            reduce_channels: 1,
            embed_dim: 2,
            seed: 0,
        };
        let mut params = Params::zeros(&cfg);
        let (x, w, c, v, b) = (0.6, 1.5, 0.1, -0.8, 0.3);
        params.reduce.weight[0] = w;
        params.reduce.bias[0] = c;
        params.dense_weight[0] = v;
        params.dense_bias[0] = b;
        let net = EmbeddingNet::with_params(cfg, params).unwrap();
        let input = FeatureMap {
            channels: 1,
            height: 1,
            width: 1,
            data: vec![x],
        };
        let (e, cache) = net.forward_map(input).unwrap();
        let a = w * x + c;
        let z = v * a + b;
        let s = 1.0 / (1.0 + (-z).exp());
        assert!((e.0[0] - s).abs() < 1e-15);

        let g = net.backward(&cache, &[1.0, 0.0]).unwrap();
        let ds = s * (1.0 - s);
        assert!((g.dense_bias[0] - ds).abs() < 1e-15);
        assert!((g.dense_weight[0] - ds * a).abs() < 1e-15);
        assert!((g.reduce.bias[0] - ds * v).abs() < 1e-15);
        assert!((g.reduce.weight[0] - ds * v * x).abs() < 1e-15);
        assert_eq!(g.dense_weight[1], 0.0);
    }

    #[test]
    fn grad_check_tiny_config_passes() {
        let report = grad_check(&tiny(), 11, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.tensors.len(), 6);
    }

    #[test]
    fn grad_check_locates_a_corrupted_dense_gradient() {
        let opts = GradCheckOptions::default();
        let report = grad_check_with(&tiny(), 11, &opts, |g| {
            g.dense_weight.iter_mut().for_each(|v| *v *= 2.0);
        })
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.failing(), vec!["dense.weight"]);
    }

    #[test]
    fn infinite_tolerance_always_passes() {
        let report = grad_check_with(&tiny(), 3, &GradCheckOptions { tolerance: f64::INFINITY, ..Default::default() }, |g| g.scale(-7.0)).unwrap();
        assert!(report.passed);
    }

    #[test]
    fn cam_of_zero_dense_weights_is_zero() {
        let mut net = EmbeddingNet::new(tiny()).unwrap();
        net.params.dense_weight.fill(0.0);
        let (e, cache) = net.forward(&gradient_image(8)).unwrap();
        let cam = net.compute_cam(&cache, &e);
        assert!(cam.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsampling_a_constant_is_constant() {
        let cam = upsample_bilinear(&[0.3; 4], 2, 2, 8);
        assert!(cam.values.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn valid_range_bounds() {
        assert_eq!(valid_range(5, 0, 1), (1, 5));
        assert_eq!(valid_range(5, 1, 1), (0, 5));
        assert_eq!(valid_range(5, 2, 1), (0, 4));
        assert_eq!(valid_range(1, 0, 0), (0, 1));
    }
}
