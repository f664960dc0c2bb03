//! Stochastic patch refinement of binary foreground masks.
//!
//! A small encoder-decoder sees RGB plus the current foreground plane on
//! square patches drawn at several scales. Its per-pixel foreground
//! probabilities are stacked into a [`Heatmap`] and thresholded.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::didl::{predict_mask, DidlModel};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, NamedTensor};
use crate::nn::{
    concat_channels, conv2d_backward, conv2d_forward, maxpool2x2_backward, maxpool2x2_forward,
    relu_backward, relu_inplace, softmax_channel, split_channels, transpose_conv2x2_backward,
    transpose_conv2x2_forward, weighted_cross_entropy, Conv2dSpec, Optimizer, Parameter,
    Parameterized, RmsProp, Tensor,
};
use crate::real::Real;
use crate::videoio::{
    Frame, FrameSequence, Label, LabelMask, Provenance, SyntheticObject, SyntheticSceneSpec,
};

pub const SCALES: [usize; 3] = [16, 32, 64];
pub const INPUT_CHANNELS: usize = 4;
pub const OUTPUT_CHANNELS: usize = 2;
/// Patches must be multiples of this so that three poolings stay integral.
pub const PATCH_MULTIPLE: usize = 8;
pub const DEFAULT_BASE_WIDTH: usize = 12;
pub const DEFAULT_LAYERS: usize = 32;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Background and foreground loss weights.
pub const CLASS_WEIGHTS: [f64; 2] = [0.2, 0.8];

/// `⌈HW/s²⌉·l`.
pub fn sample_count(height: usize, width: usize, scale: usize, layers: usize) -> usize {
    (height * width).div_ceil(scale * scale) * layers
}

/// A square window of the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchSample {
    pub x: usize,
    pub y: usize,
    pub scale: usize,
    /// Coverage layer at inference, 0 for training patches.
    pub layer: usize,
}

impl PatchSample {
    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x + self.scale <= width && self.y + self.scale <= height
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Conv<T> {
    weight: Parameter<T>,
    bias: Parameter<T>,
}

impl<T: Real> Conv<T> {
    fn new(rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| T::of(rng.random_range(-bound..bound)));
        Self {
            weight: Parameter::new(format!("{name}.weight"), w),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn spec(&self) -> Conv2dSpec {
        Conv2dSpec::same(self.weight.value.shape()[2])
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(x, &self.weight.value, Some(&self.bias.value), self.spec())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Up<T> {
    weight: Parameter<T>,
    bias: Parameter<T>,
}

impl<T: Real> Up<T> {
    fn new(rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        let bound = (6.0 / (cin * 4) as f64).sqrt();
        let w = Tensor::from_fn(&[cin, cout, 2, 2], |_| T::of(rng.random_range(-bound..bound)));
        Self {
            weight: Parameter::new(format!("{name}.weight"), w),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DoubleConv<T> {
    a: Conv<T>,
    b: Conv<T>,
}

struct DoubleCache<T> {
    input: Tensor<T>,
    mid: Tensor<T>,
    out: Tensor<T>,
}

impl<T: Real> DoubleConv<T> {
    fn new(rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            a: Conv::new(rng, &format!("{name}.a"), cin, cout, 3),
            b: Conv::new(rng, &format!("{name}.b"), cout, cout, 3),
        }
    }

    fn forward(&self, input: Tensor<T>) -> Result<DoubleCache<T>> {
        let mut mid = self.a.forward(&input)?;
        relu_inplace(mid.data_mut());
        let mut out = self.b.forward(&mid)?;
        relu_inplace(out.data_mut());
        Ok(DoubleCache { input, mid, out })
    }

    /// Pushes `(weight, bias)` grads for `a` then `b` and returns the input
    /// gradient. ReLU masks are read from the activations, which are
    /// positive exactly where the pre-activations are.
    fn backward(&self, c: &DoubleCache<T>, grad: &Tensor<T>, out: &mut Vec<Tensor<T>>) -> Result<Tensor<T>> {
        let g = relu_backward(&c.out, grad);
        let gb = conv2d_backward(&c.mid, &self.b.weight.value, &g, self.b.spec())?;
        let g = relu_backward(&c.mid, &gb.input);
        let ga = conv2d_backward(&c.input, &self.a.weight.value, &g, self.a.spec())?;
        out.extend([ga.weight, ga.bias, gb.weight, gb.bias]);
        Ok(ga.input)
    }

    fn params(&self) -> [&Parameter<T>; 4] {
        [&self.a.weight, &self.a.bias, &self.b.weight, &self.b.bias]
    }

    fn params_mut(&mut self) -> [&mut Parameter<T>; 4] {
        [&mut self.a.weight, &mut self.a.bias, &mut self.b.weight, &mut self.b.bias]
    }
}

/// U-shaped refine block: three pooling stages, a bottleneck and three
/// upsampling stages with skip concatenation. Widths are
/// `4 → b → 2b → 4b → 8b → 4b → 2b → b → 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineNet<T> {
    pub base: usize,
    enc: Vec<DoubleConv<T>>,
    bottleneck: DoubleConv<T>,
    up: Vec<Up<T>>,
    dec: Vec<DoubleConv<T>>,
    head: Conv<T>,
}

struct Cache<T> {
    enc: Vec<DoubleCache<T>>,
    pool: Vec<(Vec<usize>, Vec<usize>)>,
    bottleneck: DoubleCache<T>,
    up_in: Vec<Tensor<T>>,
    dec: Vec<DoubleCache<T>>,
    logits: Tensor<T>,
}

impl<T: Real> RefineNet<T> {
    pub fn build(base: usize, seed: u64) -> Self {
        assert!(base > 0, "base width must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = [base, 2 * base, 4 * base];
        let enc = vec![
            DoubleConv::new(&mut rng, "enc.0", INPUT_CHANNELS, w[0]),
            DoubleConv::new(&mut rng, "enc.1", w[0], w[1]),
            DoubleConv::new(&mut rng, "enc.2", w[1], w[2]),
        ];
        let bottleneck = DoubleConv::new(&mut rng, "mid", w[2], 8 * base);
        // Decoder stages run deepest first: index 0 upsamples the bottleneck.
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for (i, &c) in w.iter().rev().enumerate() {
            up.push(Up::new(&mut rng, &format!("up.{i}"), 2 * c, c));
            dec.push(DoubleConv::new(&mut rng, &format!("dec.{i}"), 2 * c, c));
        }
        let head = Conv::new(&mut rng, "head", base, OUTPUT_CHANNELS, 1);
        Self {
            base,
            enc,
            bottleneck,
            up,
            dec,
            head,
        }
    }

    pub fn build_default(seed: u64) -> Self {
        Self::build(DEFAULT_BASE_WIDTH, seed)
    }

    pub fn cast<U: Real>(&self) -> RefineNet<U> {
        let conv = |c: &Conv<T>| Conv {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        let dc = |d: &DoubleConv<T>| DoubleConv {
            a: conv(&d.a),
            b: conv(&d.b),
        };
        RefineNet {
            base: self.base,
            enc: self.enc.iter().map(dc).collect(),
            bottleneck: dc(&self.bottleneck),
            up: self
                .up
                .iter()
                .map(|u| Up {
                    weight: u.weight.cast(),
                    bias: u.bias.cast(),
                })
                .collect(),
            dec: self.dec.iter().map(dc).collect(),
            head: conv(&self.head),
        }
    }

    fn check_input(input: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = input.dims4()?;
        if c != INPUT_CHANNELS {
            return Err(Error::shape(format!("refine net expects 4 channels, got {c}")));
        }
        if h != w || h < PATCH_MULTIPLE || h % PATCH_MULTIPLE != 0 {
            return Err(Error::shape(format!(
                "refine net needs square patches of a multiple of 8, got {h}x{w}"
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, input: &Tensor<T>) -> Result<Cache<T>> {
        Self::check_input(input)?;
        let mut enc = Vec::with_capacity(3);
        let mut pool = Vec::with_capacity(3);
        let mut x = input.clone();
        for stage in &self.enc {
            let c = stage.forward(x)?;
            let (p, arg) = maxpool2x2_forward(&c.out)?;
            pool.push((c.out.shape().to_vec(), arg));
            enc.push(c);
            x = p;
        }
        let bottleneck = self.bottleneck.forward(x)?;
        let mut up_in = Vec::with_capacity(3);
        let mut dec: Vec<DoubleCache<T>> = Vec::with_capacity(3);
        for i in 0..3 {
            let below = if i == 0 { &bottleneck.out } else { &dec[i - 1].out };
            let u = transpose_conv2x2_forward(below, &self.up[i].weight.value, &self.up[i].bias.value)?;
            up_in.push(below.clone());
            let cat = concat_channels(&enc[2 - i].out, &u)?;
            dec.push(self.dec[i].forward(cat)?);
        }
        let logits = self.head.forward(&dec[2].out)?;
        Ok(Cache {
            enc,
            pool,
            bottleneck,
            up_in,
            dec,
            logits,
        })
    }

    /// Two-class logits, `N×2×s×s`, for `N×4×s×s` patches.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(input)?.logits)
    }

    /// Foreground probability per pixel, `N·s·s` values.
    pub fn foreground_probability(&self, input: &Tensor<T>) -> Result<Vec<T>> {
        softmax_channel(&self.forward(input)?, 1)
    }

    /// Parameter gradients in `parameters()` order.
    fn backward(&self, c: &Cache<T>, grad_logits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut head = Vec::new();
        let gh = conv2d_backward(&c.dec[2].out, &self.head.weight.value, grad_logits, self.head.spec())?;
        head.extend([gh.weight, gh.bias]);
        let mut g = gh.input;
        let mut dec_grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); 3];
        let mut up_grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); 3];
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None, None, None];
        for i in (0..3).rev() {
            let gcat = self.dec[i].backward(&c.dec[i], &g, &mut dec_grads[i])?;
            let skip_c = c.enc[2 - i].out.shape()[1];
            let (gskip, gu) = split_channels(&gcat, skip_c)?;
            skip_grads[2 - i] = Some(gskip);
            let gt = transpose_conv2x2_backward(&c.up_in[i], &self.up[i].weight.value, &gu)?;
            up_grads[i].extend([gt.weight, gt.bias]);
            g = gt.input;
        }
        let mut mid_grads = Vec::new();
        g = self.bottleneck.backward(&c.bottleneck, &g, &mut mid_grads)?;
        let mut enc_grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); 3];
        for i in (0..3).rev() {
            let (shape, arg) = &c.pool[i];
            let mut go = maxpool2x2_backward(shape, arg, &g)?;
            go.add_assign(skip_grads[i].as_ref().expect("skip gradient"));
            g = self.enc[i].backward(&c.enc[i], &go, &mut enc_grads[i])?;
        }
        let mut out: Vec<Tensor<T>> = enc_grads.into_iter().flatten().collect();
        out.extend(mid_grads);
        for i in 0..3 {
            out.append(&mut up_grads[i]);
            out.append(&mut dec_grads[i]);
        }
        out.extend(head);
        Ok(out)
    }

    /// Weighted cross-entropy of a batch and its parameter gradients.
    fn loss_and_grads(
        &self,
        input: &Tensor<T>,
        targets: &[usize],
        weights: [f64; 2],
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let cache = self.forward_cached(input)?;
        let w = [T::of(weights[0]), T::of(weights[1])];
        let (loss, grad) = weighted_cross_entropy(&cache.logits, targets, &w)?;
        Ok((loss.f64(), self.backward(&cache, &grad)?))
    }

    /// Mean weighted cross-entropy; gradients are added to the parameters.
    pub fn loss_and_backward(
        &mut self,
        input: &Tensor<T>,
        targets: &[usize],
        weights: [f64; 2],
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(input, targets, weights)?;
        self.add_grads(&grads, T::one());
        Ok(loss)
    }

    fn add_grads(&mut self, grads: &[Tensor<T>], scale: T) {
        for (p, g) in self.parameters_mut().into_iter().zip(grads) {
            for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::load_tensors(path)?)
    }

    /// Rebuilds a net whose base width is read from the first layer.
    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let first = tensors
            .iter()
            .find(|t| t.name == "enc.0.a.weight")
            .ok_or_else(|| Error::Format {
                kind: "checkpoint",
                detail: "missing parameter enc.0.a.weight".into(),
            })?;
        let base = first.tensor.shape()[0];
        let mut net = Self::build(base, 0);
        checkpoint::restore(&mut net, tensors)?;
        Ok(net)
    }
}

impl<T: Real> Parameterized<T> for RefineNet<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<&Parameter<T>> = self.enc.iter().flat_map(|d| d.params()).collect();
        v.extend(self.bottleneck.params());
        for (u, d) in self.up.iter().zip(&self.dec) {
            v.extend([&u.weight, &u.bias]);
            v.extend(d.params());
        }
        v.extend([&self.head.weight, &self.head.bias]);
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> = self.enc.iter_mut().flat_map(|d| d.params_mut()).collect();
        v.extend(self.bottleneck.params_mut());
        for (u, d) in self.up.iter_mut().zip(self.dec.iter_mut()) {
            v.extend([&mut u.weight, &mut u.bias]);
            v.extend(d.params_mut());
        }
        v.extend([&mut self.head.weight, &mut self.head.bias]);
        v
    }
}

/// An RGB image with the mask fed as the fourth channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineInput {
    pub image: Frame,
    pub mask: Vec<f32>,
}

impl RefineInput {
    pub fn new(image: &Frame, mask: &LabelMask) -> Result<Self> {
        if (image.height, image.width) != (mask.height, mask.width) {
            return Err(Error::shape(format!(
                "image {}x{} vs mask {}x{}",
                image.height, image.width, mask.height, mask.width
            )));
        }
        Ok(Self {
            image: image.to_rgb(),
            mask: mask.foreground_plane(),
        })
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    fn write_patch<T: Real>(&self, p: &PatchSample, dst: &mut [T]) {
        let (s, w) = (p.scale, self.image.width);
        let plane = s * s;
        for dy in 0..s {
            let y = p.y + dy;
            for dx in 0..s {
                let x = p.x + dx;
                let q = dy * s + dx;
                let px = &self.image.data[(y * w + x) * 3..][..3];
                for c in 0..3 {
                    dst[c * plane + q] = T::of(px[c] as f64);
                }
                dst[3 * plane + q] = T::of(self.mask[y * w + x] as f64);
            }
        }
    }
}

/// Stacks same-scale patches into an `N×4×s×s` tensor.
pub fn patch_tensor<T: Real>(input: &RefineInput, patches: &[PatchSample]) -> Result<Tensor<T>> {
    batch_tensor(&patches.iter().map(|p| (input, *p)).collect::<Vec<_>>())
}

fn batch_tensor<T: Real>(items: &[(&RefineInput, PatchSample)]) -> Result<Tensor<T>> {
    let s = items.first().ok_or(Error::Empty("patch list"))?.1.scale;
    let per = INPUT_CHANNELS * s * s;
    let mut data = vec![T::zero(); items.len() * per];
    for ((src, p), dst) in items.iter().zip(data.chunks_exact_mut(per)) {
        if p.scale != s || !p.fits(src.height(), src.width()) {
            return Err(Error::shape(format!("patch {p:?} does not fit the batch")));
        }
        src.write_patch(p, dst);
    }
    Tensor::new(&[items.len(), INPUT_CHANNELS, s, s], data)
}

/// One training image: network input plus the mask it should produce.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: RefineInput,
    /// Target class per pixel, 1 for foreground.
    pub target: Vec<u8>,
}

impl TrainingPair {
    /// Ground-truth Foreground is class 1; Background and Other are class 0.
    pub fn new(image: &Frame, input_mask: &LabelMask, gt: &LabelMask) -> Result<Self> {
        let input = RefineInput::new(image, input_mask)?;
        if (gt.height, gt.width) != (input_mask.height, input_mask.width) {
            return Err(Error::shape("ground truth and input mask differ in size"));
        }
        let target = gt
            .labels
            .iter()
            .map(|&l| u8::from(l == Label::Foreground))
            .collect();
        Ok(Self { input, target })
    }

    fn write_targets(&self, p: &PatchSample, dst: &mut Vec<usize>) {
        let w = self.input.width();
        for y in p.y..p.y + p.scale {
            dst.extend(self.target[y * w + p.x..y * w + p.x + p.scale].iter().map(|&t| t as usize));
        }
    }
}

/// Patch count and batch size for one training scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleSchedule {
    pub scale: usize,
    pub patches_per_image: usize,
    pub batch_size: usize,
}

pub fn default_schedule() -> Vec<ScaleSchedule> {
    vec![
        ScaleSchedule { scale: 64, patches_per_image: 64, batch_size: 512 },
        ScaleSchedule { scale: 32, patches_per_image: 256, batch_size: 2048 },
        ScaleSchedule { scale: 16, patches_per_image: 1024, batch_size: 8192 },
    ]
}

/// Uniformly placed fully-inside training windows. Scales that do not fit
/// the image are skipped.
pub fn sample_training_patches<R: Rng>(
    height: usize,
    width: usize,
    schedule: &[ScaleSchedule],
    rng: &mut R,
) -> Vec<PatchSample> {
    let mut out = Vec::new();
    for sc in schedule {
        if sc.scale > height || sc.scale > width {
            continue;
        }
        for _ in 0..sc.patches_per_image {
            out.push(PatchSample {
                x: rng.random_range(0..=width - sc.scale),
                y: rng.random_range(0..=height - sc.scale),
                scale: sc.scale,
                layer: 0,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbrTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub class_weights: [f64; 2],
    pub schedule: Vec<ScaleSchedule>,
    pub seed: u64,
}

impl Default for SbrTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 1,
            class_weights: CLASS_WEIGHTS,
            schedule: default_schedule(),
            seed: 0,
        }
    }
}

/// Pixels per forward pass when splitting a batch.
const CHUNK_PIXELS: usize = 16 * 1024;

/// Gradients of one mini-batch, evaluated in fixed-size chunks whose
/// results are summed in order.
fn batch_step<T: Real>(
    net: &mut RefineNet<T>,
    corpus: &[TrainingPair],
    batch: &[(usize, PatchSample)],
    weights: [f64; 2],
) -> Result<f64> {
    let s = batch[0].1.scale;
    let per_chunk = (CHUNK_PIXELS / (s * s)).max(1);
    let total = batch.len() as f64;
    let frozen: &RefineNet<T> = net;
    let parts: Vec<Result<(f64, Vec<Tensor<T>>, usize)>> = batch
        .par_chunks(per_chunk)
        .map(|chunk| {
            let items: Vec<(&RefineInput, PatchSample)> =
                chunk.iter().map(|&(i, p)| (&corpus[i].input, p)).collect();
            let x = batch_tensor::<T>(&items)?;
            let mut targets = Vec::with_capacity(chunk.len() * s * s);
            for &(i, p) in chunk {
                corpus[i].write_targets(&p, &mut targets);
            }
            let (loss, grads) = frozen.loss_and_grads(&x, &targets, weights)?;
            Ok((loss, grads, chunk.len()))
        })
        .collect();
    let mut loss = 0.0;
    net.zero_grad();
    for part in parts {
        let (l, grads, n) = part?;
        let frac = n as f64 / total;
        loss += l * frac;
        net.add_grads(&grads, T::of(frac));
    }
    Ok(loss)
}

/// RMSprop over patches pooled per scale. Returns the mean batch loss of
/// each epoch.
pub fn train_sbr<T: Real>(
    net: &mut RefineNet<T>,
    corpus: &[TrainingPair],
    config: &SbrTrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Empty("refinement corpus"));
    }
    if config.schedule.iter().any(|s| s.batch_size == 0) {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    if let Some(bad) = config
        .schedule
        .iter()
        .find(|s| s.scale < PATCH_MULTIPLE || s.scale % PATCH_MULTIPLE != 0)
    {
        return Err(Error::invalid(format!("patch scale {} is not a multiple of 8", bad.scale)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = RmsProp::new(config.learning_rate);
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut sum = 0.0;
        let mut batches = 0usize;
        for sc in &config.schedule {
            let mut pool: Vec<(usize, PatchSample)> = Vec::new();
            for (i, pair) in corpus.iter().enumerate() {
                for p in sample_training_patches(pair.input.height(), pair.input.width(), &[*sc], &mut rng) {
                    pool.push((i, p));
                }
            }
            pool.shuffle(&mut rng);
            for batch in pool.chunks(sc.batch_size) {
                sum += batch_step(net, corpus, batch, config.class_weights)?;
                opt.step(net);
                batches += 1;
            }
        }
        losses.push(if batches == 0 { 0.0 } else { sum / batches as f64 });
    }
    Ok(losses)
}

/// Salt-and-pepper noise plus random nibbling of the foreground boundary.
/// Each pixel on either side of the boundary flips with probability
/// `edge_flip`, so the boundary moves inward and outward equally often; then
/// each pixel is replaced by a fair coin with probability `noise_rate`.
pub fn corrupt_mask<R: Rng>(gt: &LabelMask, edge_flip: f64, noise_rate: f64, rng: &mut R) -> LabelMask {
    let (h, w) = (gt.height, gt.width);
    let fg: Vec<bool> = gt.labels.iter().map(|&l| l == Label::Foreground).collect();
    let mut out = fg.clone();
    for y in 0..h {
        for x in 0..w {
            let me = fg[y * w + x];
            let differs = |yy: usize, xx: usize| fg[yy * w + xx] != me;
            let edge = (y > 0 && differs(y - 1, x))
                || (y + 1 < h && differs(y + 1, x))
                || (x > 0 && differs(y, x - 1))
                || (x + 1 < w && differs(y, x + 1));
            if edge && rng.random_bool(edge_flip) {
                out[y * w + x] = !me;
            }
        }
    }
    for v in out.iter_mut() {
        if rng.random_bool(noise_rate) {
            *v = rng.random_bool(0.5);
        }
    }
    let labels = out
        .into_iter()
        .map(|f| if f { Label::Foreground } else { Label::Background })
        .collect();
    LabelMask {
        height: h,
        width: w,
        labels,
        provenance: Provenance::Predicted,
    }
}

/// Uniform random binary mask.
pub fn random_mask<R: Rng>(height: usize, width: usize, fg_probability: f64, rng: &mut R) -> LabelMask {
    let labels = (0..height * width)
        .map(|_| {
            if rng.random_bool(fg_probability) {
                Label::Foreground
            } else {
                Label::Background
            }
        })
        .collect();
    LabelMask {
        height,
        width,
        labels,
        provenance: Provenance::Predicted,
    }
}

/// Per-pixel foreground votes and the number of patches stacked there.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub vote_sum: Vec<f64>,
    pub stack_count: Vec<u32>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            vote_sum: vec![0.0; height * width],
            stack_count: vec![0; height * width],
        }
    }

    fn add_patch(&mut self, p: &PatchSample, probs: &[f64]) {
        let s = p.scale;
        for dy in 0..s {
            let row = (p.y + dy) * self.width + p.x;
            for dx in 0..s {
                self.vote_sum[row + dx] += probs[dy * s + dx];
                self.stack_count[row + dx] += 1;
            }
        }
    }

    /// `vote_sum / stack_count`, 0 where nothing was stacked.
    pub fn normalized(&self) -> Vec<f64> {
        self.vote_sum
            .iter()
            .zip(&self.stack_count)
            .map(|(&v, &c)| if c == 0 { 0.0 } else { v / c as f64 })
            .collect()
    }

    pub fn min_stack(&self) -> u32 {
        self.stack_count.iter().copied().min().unwrap_or(0)
    }

    /// Foreground wherever the normalized vote exceeds `threshold`.
    pub fn threshold(&self, threshold: f64) -> LabelMask {
        let labels = self
            .normalized()
            .into_iter()
            .map(|v| {
                if v > threshold {
                    Label::Foreground
                } else {
                    Label::Background
                }
            })
            .collect();
        LabelMask {
            height: self.height,
            width: self.width,
            labels,
            provenance: Provenance::Predicted,
        }
    }
}

/// Start positions of one tiling row: a grid shifted left by `offset`,
/// with the partial tiles at both edges clamped inward.
fn tile_starts(len: usize, scale: usize, offset: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut pos = -(offset as i64);
    while pos < len as i64 {
        let start = pos.clamp(0, (len - scale) as i64) as usize;
        if starts.last() != Some(&start) {
            starts.push(start);
        }
        pos += scale as i64;
    }
    starts
}

/// For every scale that fits and each of `layers` coverage layers, a full
/// tiling of the image at a random offset. Every pixel is covered at least
/// once per layer and scale. Offsets come from one stream per scale, so a
/// larger `layers` only appends layers.
pub fn coverage_patches(
    height: usize,
    width: usize,
    scales: &[usize],
    layers: usize,
    seed: u64,
) -> Vec<PatchSample> {
    let mut out = Vec::new();
    for &s in scales {
        if s > height || s > width {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        for layer in 0..layers {
            let ox = rng.random_range(0..s);
            let oy = rng.random_range(0..s);
            let xs = tile_starts(width, s, ox);
            for y in tile_starts(height, s, oy) {
                for &x in &xs {
                    out.push(PatchSample { x, y, scale: s, layer });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub layers: usize,
    pub scales: Vec<usize>,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            layers: DEFAULT_LAYERS,
            scales: SCALES.to_vec(),
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

/// Patches per forward pass at inference.
const INFER_CHUNK_PIXELS: usize = 64 * 1024;

/// Heatmap from stochastic tilings of `input`, accumulated in patch order.
pub fn refine_heatmap<T: Real>(
    net: &RefineNet<T>,
    input: &RefineInput,
    config: &RefineConfig,
) -> Result<Heatmap> {
    if config.layers == 0 {
        return Err(Error::invalid("coverage layers must be >= 1"));
    }
    let (h, w) = (input.height(), input.width());
    if !config.scales.iter().any(|&s| s <= h && s <= w) {
        return Err(Error::invalid(format!("no patch scale fits a {h}x{w} image")));
    }
    if let Some(bad) = config.scales.iter().find(|&&s| s < PATCH_MULTIPLE || s % PATCH_MULTIPLE != 0) {
        return Err(Error::invalid(format!("patch scale {bad} is not a multiple of 8")));
    }
    let patches = coverage_patches(h, w, &config.scales, config.layers, config.seed);
    let mut heat = Heatmap::new(h, w);
    for &s in &config.scales {
        let group: Vec<PatchSample> = patches.iter().filter(|p| p.scale == s).copied().collect();
        if group.is_empty() {
            continue;
        }
        let per = (INFER_CHUNK_PIXELS / (s * s)).max(1);
        let probs: Vec<Result<Vec<f64>>> = group
            .par_chunks(per)
            .map(|chunk| {
                let x = patch_tensor::<T>(input, chunk)?;
                Ok(net.foreground_probability(&x)?.into_iter().map(Real::f64).collect())
            })
            .collect();
        for (chunk, pr) in group.chunks(per).zip(probs) {
            let pr = pr?;
            for (p, vals) in chunk.iter().zip(pr.chunks_exact(s * s)) {
                heat.add_patch(p, vals);
            }
        }
    }
    Ok(heat)
}

/// Refines `mask` on `image`; returns the heatmap and the thresholded mask.
pub fn infer_refine<T: Real>(
    net: &RefineNet<T>,
    image: &Frame,
    mask: &LabelMask,
    config: &RefineConfig,
) -> Result<(Heatmap, LabelMask)> {
    let input = RefineInput::new(image, mask)?;
    let heat = refine_heatmap(net, &input, config)?;
    let out = heat.threshold(config.threshold);
    Ok((heat, out))
}

/// DIDL prediction of frame `t` followed by refinement.
pub fn refine_pipeline<T: Real, U: Real>(
    didl: &DidlModel<T>,
    net: &RefineNet<U>,
    seq: &FrameSequence,
    t: usize,
    config: &RefineConfig,
) -> Result<(Heatmap, LabelMask)> {
    let coarse = predict_mask(didl, seq, t)?;
    infer_refine(net, seq.frame(t), &coarse, config)
}

/// Settings for [`synthetic_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub scenes: usize,
    pub frames_per_scene: usize,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            scenes: 8,
            frames_per_scene: 4,
            height: 64,
            width: 64,
            sigma: 0.02,
            noise_rate: 0.1,
            seed: 0,
        }
    }
}

fn random_colour<R: Rng>(rng: &mut R) -> Vec<f32> {
    (0..3).map(|_| rng.random_range(0.05f32..0.95)).collect()
}

/// Scenes of randomly coloured moving rectangles over random backgrounds,
/// with static rectangles of the same palette as background clutter. Input
/// masks are ground truth corrupted with a strength drawn per pair, so
/// appearance alone never tells foreground apart.
pub fn synthetic_corpus(spec: &CorpusSpec) -> Result<Vec<TrainingPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.scenes * spec.frames_per_scene);
    let (h, w) = (spec.height, spec.width);
    let max_side = (h.min(w) / 3).max(2);
    let rect = |rng: &mut ChaCha8Rng, moving: bool| {
        let side_w = rng.random_range(2..=max_side);
        let side_h = rng.random_range(2..=max_side);
        let speed = if moving { 2.5 } else { 0.0 };
        SyntheticObject {
            x0: rng.random_range(0.0..(w - side_w) as f64),
            y0: rng.random_range(0.0..(h - side_h) as f64),
            vx: rng.random_range(-speed..=speed),
            vy: rng.random_range(-speed..=speed),
            width: side_w,
            height: side_h,
            intensity: random_colour(rng),
            bounce: true,
            foreground: moving,
        }
    };
    for _ in 0..spec.scenes {
        let mut objects = Vec::new();
        for _ in 0..rng.random_range(1..=3) {
            objects.push(rect(&mut rng, false));
        }
        for _ in 0..rng.random_range(1..=2) {
            objects.push(rect(&mut rng, true));
        }
        let scene = SyntheticSceneSpec {
            height: h,
            width: w,
            background: random_colour(&mut rng),
            objects,
            sigma: spec.sigma,
            frames: spec.frames_per_scene,
            seed: rng.random(),
        };
        let (seq, masks) = crate::videoio::generate_synthetic(&scene)?;
        for (frame, gt) in seq.frames().iter().zip(&masks) {
            let strength = rng.random_range(0.0..=1.0);
            let input = corrupt_mask(gt, 0.5 * strength, spec.noise_rate * strength, &mut rng);
            out.push(TrainingPair::new(frame, &input, gt)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_count_formula() {
        assert_eq!(sample_count(240, 360, 64, 32), 704);
        assert_eq!(sample_count(64, 64, 16, 1), 16);
        assert_eq!(sample_count(64, 64, 16, 0), 0);
    }

    #[test]
    fn default_net_fits_budget() {
        let n = RefineNet::<f32>::build_default(0).parameter_count();
        assert!((150_000..=350_000).contains(&n), "{n}");
    }

    #[test]
    fn tiles_cover_every_index() {
        for len in [16, 17, 40, 64] {
            for s in [8, 16] {
                if s > len {
                    continue;
                }
                for off in 0..s {
                    let mut hit = vec![0; len];
                    for x in tile_starts(len, s, off) {
                        assert!(x + s <= len);
                        for v in &mut hit[x..x + s] {
                            *v += 1;
                        }
                    }
                    assert!(hit.iter().all(|&c| c >= 1));
                }
            }
        }
    }

    #[test]
    fn hand_heatmap_threshold() {
        let mut h = Heatmap::new(1, 2);
        h.vote_sum = vec![3.0, 2.5];
        h.stack_count = vec![5, 5];
        let m = h.threshold(0.5);
        assert_eq!(h.normalized()[0], 0.6);
        assert_eq!(m.labels, vec![Label::Foreground, Label::Background]);
    }

    #[test]
    fn shapes_are_checked() {
        let net = RefineNet::<f64>::build(2, 0);
        assert!(net.forward(&Tensor::zeros(&[1, 4, 12, 12])).is_err());
        assert!(net.forward(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
        assert_eq!(net.forward(&Tensor::zeros(&[2, 4, 16, 16])).unwrap().shape(), &[2, 2, 16, 16]);
    }
}
