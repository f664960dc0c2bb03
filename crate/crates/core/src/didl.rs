//! Histogram classifier built on distribution layers, and the defect-driven
//! training loop that grows its training subset.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::distlayer::{
    gaussian_density, product_backward_into, product_forward_into, sum_backward_into,
    sum_forward_into, KERNEL_LEN,
};
use crate::error::{Error, Result};
use crate::hist::{extract_histograms, HistogramFrame, InstancePool, BIN_WIDTH, CHANNELS, INSTANCE_LEN, NUM_BINS};
use crate::nn::checkpoint::{self, NamedTensor};
use crate::nn::{
    fully_connected_backward, fully_connected_forward, log_softmax, log_softmax_backward,
    nll_loss, nll_loss_backward, Adam, Optimizer, Parameter, Parameterized, Tensor,
};
use crate::real::{gemm, Real};
use crate::videoio::{FrameSequence, Label, LabelMask, Provenance};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DidlArch {
    pub product_kernels: usize,
    pub sum_kernels: usize,
    pub mix_channels: usize,
    pub hidden: usize,
}

impl Default for DidlArch {
    fn default() -> Self {
        Self {
            product_kernels: 8,
            sum_kernels: 8,
            mix_channels: 10,
            hidden: 512,
        }
    }
}

impl DidlArch {
    pub fn tiny() -> Self {
        Self {
            product_kernels: 2,
            sum_kernels: 2,
            mix_channels: 3,
            hidden: 8,
        }
    }

    fn per_channel(&self) -> usize {
        self.product_kernels + self.sum_kernels
    }

    /// Feature histograms entering the mixing convolution.
    pub fn features(&self) -> usize {
        CHANNELS * self.per_channel()
    }
}

/// Parameters in a fixed order: product kernels, sum kernels, mixing conv,
/// factorized full-width conv, output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DidlModel<T> {
    pub arch: DidlArch,
    product: Vec<Parameter<T>>,
    sum: Vec<Parameter<T>>,
    mix_weight: Parameter<T>,
    mix_bias: Parameter<T>,
    fw_spatial: Parameter<T>,
    fw_channel: Parameter<T>,
    fw_bias: Parameter<T>,
    out_weight: Parameter<T>,
    out_bias: Parameter<T>,
}

impl<T: Real> Parameterized<T> for DidlModel<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<&Parameter<T>> = self.product.iter().chain(&self.sum).collect();
        v.extend([
            &self.mix_weight,
            &self.mix_bias,
            &self.fw_spatial,
            &self.fw_channel,
            &self.fw_bias,
            &self.out_weight,
            &self.out_bias,
        ]);
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> =
            self.product.iter_mut().chain(self.sum.iter_mut()).collect();
        v.extend([
            &mut self.mix_weight,
            &mut self.mix_bias,
            &mut self.fw_spatial,
            &mut self.fw_channel,
            &mut self.fw_bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ]);
        v
    }
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

fn bump_kernel<T: Real>(rng: &mut ChaCha8Rng, name: String) -> Parameter<T> {
    let centre = rng.random_range(-0.3..0.3);
    let mut e: Vec<T> = gaussian_density::<T>(centre, 0.1).density;
    e.push(T::zero());
    Parameter::new(name, Tensor::new(&[KERNEL_LEN], e).expect("kernel length"))
}

/// Gradient buffers matching `parameters()` order.
type Grads<T> = Vec<Vec<T>>;

struct ChunkGrads<T> {
    loss_sum: f64,
    grads: Grads<T>,
}

impl<T: Real> DidlModel<T> {
    pub fn build(arch: DidlArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let product = (0..arch.product_kernels)
            .map(|i| bump_kernel(&mut rng, format!("product.{i}")))
            .collect();
        let sum = (0..arch.sum_kernels)
            .map(|i| bump_kernel(&mut rng, format!("sum.{i}")))
            .collect();
        let f = arch.features();
        let (m, h) = (arch.mix_channels, arch.hidden);
        Self {
            arch,
            product,
            sum,
            mix_weight: Parameter::new("mix.weight", uniform(&mut rng, &[m, f], f)),
            mix_bias: Parameter::new("mix.bias", uniform(&mut rng, &[m], f)),
            fw_spatial: Parameter::new("fw.spatial", uniform(&mut rng, &[h, NUM_BINS], NUM_BINS)),
            fw_channel: Parameter::new("fw.channel", uniform(&mut rng, &[h, m], m)),
            fw_bias: Parameter::new("fw.bias", uniform(&mut rng, &[h], m * NUM_BINS)),
            out_weight: Parameter::new("out.weight", uniform(&mut rng, &[NUM_CLASSES, h], h)),
            out_bias: Parameter::new("out.bias", uniform(&mut rng, &[NUM_CLASSES], h)),
        }
    }

    /// Default architecture, deterministic per seed.
    pub fn build_default(seed: u64) -> Self {
        Self::build(DidlArch::default(), seed)
    }

    pub fn cast<U: Real>(&self) -> DidlModel<U> {
        DidlModel {
            arch: self.arch,
            product: self.product.iter().map(Parameter::cast).collect(),
            sum: self.sum.iter().map(Parameter::cast).collect(),
            mix_weight: self.mix_weight.cast(),
            mix_bias: self.mix_bias.cast(),
            fw_spatial: self.fw_spatial.cast(),
            fw_channel: self.fw_channel.cast(),
            fw_bias: self.fw_bias.cast(),
            out_weight: self.out_weight.cast(),
            out_bias: self.out_bias.cast(),
        }
    }

    pub fn product_kernels(&self) -> &[Parameter<T>] {
        &self.product
    }

    pub fn sum_kernels(&self) -> &[Parameter<T>] {
        &self.sum
    }

    fn check_batch(batch: &[&[f32]]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("instance batch"));
        }
        if let Some(bad) = batch.iter().find(|b| b.len() != INSTANCE_LEN) {
            return Err(Error::shape(format!(
                "instance has {} masses, expected {INSTANCE_LEN}",
                bad.len()
            )));
        }
        Ok(())
    }

    /// Per-instance log-probabilities, `N×3`.
    pub fn forward(&self, batch: &[&[f32]]) -> Result<Tensor<T>> {
        Self::check_batch(batch)?;
        let parts: Vec<Tensor<T>> = batch
            .par_chunks(CHUNK)
            .map(|c| self.forward_chunk(c).map(|cache| cache.log_probs))
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(batch.len() * NUM_CLASSES);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Tensor::new(&[batch.len(), NUM_CLASSES], data)
    }

    /// Mean NLL over `batch`; its gradient is added to the parameter buffers.
    pub fn loss_and_backward(&mut self, batch: &[&[f32]], targets: &[usize]) -> Result<f64> {
        Self::check_batch(batch)?;
        if targets.len() != batch.len() {
            return Err(Error::shape("one target per instance"));
        }
        let scale = 1.0 / batch.len() as f64;
        let model = &*self;
        let parts: Vec<ChunkGrads<T>> = batch
            .par_chunks(CHUNK)
            .zip(targets.par_chunks(CHUNK))
            .map(|(b, t)| model.chunk_gradients(b, t))
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let s = T::of(scale);
        let mut params = self.parameters_mut();
        for part in parts {
            loss += part.loss_sum;
            for (p, g) in params.iter_mut().zip(&part.grads) {
                for (d, &v) in p.grad.data_mut().iter_mut().zip(g) {
                    *d += v * s;
                }
            }
        }
        Ok(loss * scale)
    }

    fn forward_chunk(&self, batch: &[&[f32]]) -> Result<ChunkCache<T>> {
        let a = self.arch;
        let n = batch.len();
        let (f, m, h) = (a.features(), a.mix_channels, a.hidden);
        let d = T::of(BIN_WIDTH);
        let inv_d = 1.0 / BIN_WIDTH;
        let mut density = vec![T::zero(); n * INSTANCE_LEN];
        for (dst, src) in density.chunks_exact_mut(INSTANCE_LEN).zip(batch) {
            for (o, &v) in dst.iter_mut().zip(src.iter()) {
                *o = T::of(v as f64 * inv_d);
            }
        }
        let mut feats = vec![T::zero(); n * f * NUM_BINS];
        for (b, fb) in feats.chunks_exact_mut(f * NUM_BINS).enumerate() {
            for c in 0..CHANNELS {
                let x = &density[b * INSTANCE_LEN + c * NUM_BINS..][..NUM_BINS];
                let base = c * a.per_channel();
                for (k, p) in self.product.iter().enumerate() {
                    let out = &mut fb[(base + k) * NUM_BINS..][..NUM_BINS];
                    product_forward_into(x, p.value.data(), out);
                }
                for (k, s) in self.sum.iter().enumerate() {
                    let out = &mut fb[(base + a.product_kernels + k) * NUM_BINS..][..NUM_BINS];
                    sum_forward_into(x, s.value.data(), out);
                }
            }
            for v in fb.iter_mut() {
                *v *= d;
            }
        }
        let mut mixed = vec![T::zero(); n * m * NUM_BINS];
        for (mb, fb) in mixed
            .chunks_exact_mut(m * NUM_BINS)
            .zip(feats.chunks_exact(f * NUM_BINS))
        {
            for (row, &bias) in mb.chunks_exact_mut(NUM_BINS).zip(self.mix_bias.value.data()) {
                row.fill(bias);
            }
            gemm(false, false, m, NUM_BINS, f, T::one(), self.mix_weight.value.data(), fb, T::one(), mb);
        }
        // t[(b·m + c)·h + u] = Σ_k v[u][k]·mixed[b][c][k]
        let mut spatial = vec![T::zero(); n * m * h];
        gemm(false, true, n * m, h, NUM_BINS, T::one(), &mixed, self.fw_spatial.value.data(), T::zero(), &mut spatial);
        let ch = self.fw_channel.value.data();
        let fb = self.fw_bias.value.data();
        let mut pre = vec![T::zero(); n * h];
        for b in 0..n {
            let row = &mut pre[b * h..(b + 1) * h];
            row.copy_from_slice(fb);
            for c in 0..m {
                let t = &spatial[(b * m + c) * h..][..h];
                for u in 0..h {
                    row[u] += ch[u * m + c] * t[u];
                }
            }
        }
        let hidden: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();
        let hidden = Tensor::new(&[n, h], hidden)?;
        let logits = fully_connected_forward(&hidden, &self.out_weight.value, &self.out_bias.value)?;
        let log_probs = log_softmax(&logits)?;
        Ok(ChunkCache {
            density,
            feats,
            mixed,
            spatial,
            pre,
            hidden,
            log_probs,
        })
    }

    fn chunk_gradients(&self, batch: &[&[f32]], targets: &[usize]) -> Result<ChunkGrads<T>> {
        let a = self.arch;
        let n = batch.len();
        let (f, m, h) = (a.features(), a.mix_channels, a.hidden);
        let cache = self.forward_chunk(batch)?;
        let loss = nll_loss(&cache.log_probs, targets)?.f64() * n as f64;
        // Gradients of the summed (not averaged) loss.
        let mut g_lp = nll_loss_backward(&cache.log_probs, targets)?;
        for v in g_lp.data_mut() {
            *v *= T::of(n as f64);
        }
        let g_logits = log_softmax_backward(&cache.log_probs, &g_lp)?;
        let dense = fully_connected_backward(&cache.hidden, &self.out_weight.value, &g_logits)?;
        let mut g_pre = dense.input.into_data();
        for (g, &p) in g_pre.iter_mut().zip(&cache.pre) {
            if p <= T::zero() {
                *g = T::zero();
            }
        }
        let ch = self.fw_channel.value.data();
        let mut g_ch = vec![T::zero(); h * m];
        let mut g_fb = vec![T::zero(); h];
        let mut g_spatial = vec![T::zero(); n * m * h];
        for b in 0..n {
            let gp = &g_pre[b * h..(b + 1) * h];
            for (o, &g) in g_fb.iter_mut().zip(gp) {
                *o += g;
            }
            for c in 0..m {
                let t = &cache.spatial[(b * m + c) * h..][..h];
                let gt = &mut g_spatial[(b * m + c) * h..][..h];
                for u in 0..h {
                    g_ch[u * m + c] += gp[u] * t[u];
                    gt[u] = gp[u] * ch[u * m + c];
                }
            }
        }
        let mut g_v = vec![T::zero(); h * NUM_BINS];
        gemm(true, false, h, NUM_BINS, n * m, T::one(), &g_spatial, &cache.mixed, T::zero(), &mut g_v);
        let mut g_mixed = vec![T::zero(); n * m * NUM_BINS];
        gemm(false, false, n * m, NUM_BINS, h, T::one(), &g_spatial, self.fw_spatial.value.data(), T::zero(), &mut g_mixed);

        let mut g_mw = vec![T::zero(); m * f];
        let mut g_mb = vec![T::zero(); m];
        let mut g_feat = vec![T::zero(); f * NUM_BINS];
        let mut g_prod = vec![vec![T::zero(); KERNEL_LEN]; a.product_kernels];
        let mut g_sum = vec![vec![T::zero(); KERNEL_LEN]; a.sum_kernels];
        for b in 0..n {
            let gm = &g_mixed[b * m * NUM_BINS..][..m * NUM_BINS];
            let fb = &cache.feats[b * f * NUM_BINS..][..f * NUM_BINS];
            for (o, row) in g_mb.iter_mut().zip(gm.chunks_exact(NUM_BINS)) {
                *o += row.iter().copied().sum::<T>();
            }
            gemm(false, true, m, f, NUM_BINS, T::one(), gm, fb, T::one(), &mut g_mw);
            gemm(true, false, f, NUM_BINS, m, T::one(), self.mix_weight.value.data(), gm, T::zero(), &mut g_feat);
            for c in 0..CHANNELS {
                let x = &cache.density[b * INSTANCE_LEN + c * NUM_BINS..][..NUM_BINS];
                let base = c * a.per_channel();
                for (k, gk) in g_prod.iter_mut().enumerate() {
                    product_backward_into(x, &g_feat[(base + k) * NUM_BINS..][..NUM_BINS], gk);
                }
                for (k, gk) in g_sum.iter_mut().enumerate() {
                    let off = (base + a.product_kernels + k) * NUM_BINS;
                    sum_backward_into(x, &g_feat[off..][..NUM_BINS], gk);
                }
            }
        }
        let d = T::of(BIN_WIDTH);
        let mut grads: Grads<T> = Vec::with_capacity(a.per_channel() + 7);
        for mut g in g_prod.into_iter().chain(g_sum) {
            for v in &mut g {
                *v *= d;
            }
            grads.push(g);
        }
        grads.extend([
            g_mw,
            g_mb,
            g_v,
            g_ch,
            g_fb,
            dense.weight.into_data(),
            dense.bias.into_data(),
        ]);
        Ok(ChunkGrads {
            loss_sum: loss,
            grads,
        })
    }

    /// Most likely class per instance.
    pub fn classify(&self, batch: &[&[f32]]) -> Result<Vec<usize>> {
        let lp = self.forward(batch)?;
        Ok(lp
            .data()
            .chunks_exact(NUM_CLASSES)
            .map(argmax)
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::load_tensors(path)?)
    }

    /// Rebuilds a model whose architecture is inferred from stored shapes.
    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let count = |prefix: &str| tensors.iter().filter(|t| t.name.starts_with(prefix)).count();
        let shape = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.tensor.shape().to_vec())
                .ok_or_else(|| Error::Format {
                    kind: "checkpoint",
                    detail: format!("missing parameter {name}"),
                })
        };
        let mix = shape("mix.weight")?;
        let fw = shape("fw.spatial")?;
        let arch = DidlArch {
            product_kernels: count("product."),
            sum_kernels: count("sum."),
            mix_channels: mix[0],
            hidden: fw[0],
        };
        let mut model = Self::build(arch, 0);
        checkpoint::restore(&mut model, tensors)?;
        Ok(model)
    }
}

const CHUNK: usize = 256;

struct ChunkCache<T> {
    density: Vec<T>,
    feats: Vec<T>,
    mixed: Vec<T>,
    spatial: Vec<T>,
    pre: Vec<T>,
    hidden: Tensor<T>,
    log_probs: Tensor<T>,
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 3000,
        }
    }
}

fn instance_refs<'a>(pool: &'a InstancePool, idx: &[usize]) -> (Vec<&'a [f32]>, Vec<usize>) {
    idx.iter()
        .map(|&i| {
            let inst = pool.get(i);
            (inst.masses(), inst.label.class_index())
        })
        .unzip()
}

/// Adam over shuffled mini-batches of `subset`; returns the mean loss of
/// each epoch.
pub fn train_epochs<T: Real>(
    model: &mut DidlModel<T>,
    optimizer: &mut Adam<T>,
    pool: &InstancePool,
    subset: &[usize],
    epochs: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if subset.is_empty() {
        return Err(Error::Empty("training subset"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= pool.len()) {
        return Err(Error::OutOfRange {
            what: "subset index",
            index: bad,
            limit: pool.len(),
        });
    }
    optimizer.set_learning_rate(config.learning_rate);
    let mut order = subset.to_vec();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (x, y) = instance_refs(pool, batch);
            model.zero_grad();
            let loss = model.loss_and_backward(&x, &y)?;
            optimizer.step(model);
            total += loss * batch.len() as f64;
        }
        losses.push(total / order.len() as f64);
    }
    Ok(losses)
}

/// Full-pool accuracy and the indices the model gets wrong.
pub fn validate_and_collect_defects<T: Real>(
    model: &DidlModel<T>,
    pool: &InstancePool,
) -> Result<(f64, Vec<usize>)> {
    if pool.is_empty() {
        return Err(Error::Empty("validation pool"));
    }
    let refs: Vec<&[f32]> = pool.instances().iter().map(|i| i.masses()).collect();
    let predicted = model.classify(&refs)?;
    let defects: Vec<usize> = predicted
        .iter()
        .zip(pool.instances())
        .enumerate()
        .filter(|(_, (&p, inst))| p != inst.label.class_index())
        .map(|(i, _)| i)
        .collect();
    let accuracy = 1.0 - defects.len() as f64 / pool.len() as f64;
    Ok((accuracy, defects))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefectConfig {
    pub initial_fraction: f64,
    pub iterations: usize,
    pub first_epochs: usize,
    pub later_epochs: usize,
    /// Upper bound on Background per non-Background instance in the first subset.
    pub balance_ratio: f64,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for DefectConfig {
    fn default() -> Self {
        Self {
            initial_fraction: 0.1,
            iterations: 4,
            first_epochs: 120,
            later_epochs: 30,
            balance_ratio: 5.0,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean loss of every epoch, per iteration.
    pub epoch_losses: Vec<Vec<f64>>,
    /// Full-pool accuracy after each iteration's training.
    pub accuracies: Vec<f64>,
    /// Size of the subset trained on in each iteration.
    pub subset_sizes: Vec<usize>,
    /// Defects not already in the subset, per iteration.
    pub defects_added: Vec<usize>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,subset_size,accuracy\n");
        for (i, (n, a)) in self.subset_sizes.iter().zip(&self.accuracies).enumerate() {
            s.push_str(&format!("{},{},{:.6}\n", i + 1, n, a));
        }
        s
    }
}

/// Random `ceil(fraction·n)` indices; Background instances beyond
/// `ratio ×` the rest are traded for unused non-Background ones, and dropped
/// if none are left.
pub fn initial_subset(
    pool: &InstancePool,
    fraction: f64,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("initial fraction must be in (0, 1]"));
    }
    let n = pool.len();
    if n == 0 {
        return Err(Error::Empty("instance pool"));
    }
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let chosen: BTreeSet<usize> = index::sample(rng, n, k).into_iter().collect();
    let is_bg = |i: usize| pool.get(i).label == Label::Background;
    let mut bg: Vec<usize> = chosen.iter().copied().filter(|&i| is_bg(i)).collect();
    let mut rest: Vec<usize> = chosen.iter().copied().filter(|&i| !is_bg(i)).collect();
    let limit = |rest: usize| (ratio * rest as f64).floor() as usize;
    if bg.len() > limit(rest.len()) {
        let mut spare: Vec<usize> = (0..n).filter(|&i| !is_bg(i) && !chosen.contains(&i)).collect();
        spare.shuffle(rng);
        bg.shuffle(rng);
        while bg.len() > limit(rest.len()) {
            let Some(s) = spare.pop() else { break };
            bg.pop();
            rest.push(s);
        }
        if !rest.is_empty() {
            bg.truncate(limit(rest.len()));
        }
    }
    let mut out: Vec<usize> = bg.into_iter().chain(rest).collect();
    out.sort_unstable();
    Ok(out)
}

/// Trains on a first subset, then repeatedly adds the instances the model
/// misclassifies on the whole pool and continues training.
pub fn defect_iterate<T: Real>(
    pool: &InstancePool,
    config: &DefectConfig,
    arch: DidlArch,
) -> Result<(DidlModel<T>, TrainReport)> {
    if pool.is_empty() {
        return Err(Error::Empty("instance pool"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = DidlModel::<T>::build(arch, config.seed);
    let mut optimizer = Adam::new(config.train.learning_rate);
    let mut subset: BTreeSet<usize> =
        initial_subset(pool, config.initial_fraction, config.balance_ratio, &mut rng)?
            .into_iter()
            .collect();
    let mut report = TrainReport::default();
    for it in 0..config.iterations {
        let epochs = if it == 0 { config.first_epochs } else { config.later_epochs };
        let idx: Vec<usize> = subset.iter().copied().collect();
        report.subset_sizes.push(idx.len());
        let losses = train_epochs(&mut model, &mut optimizer, pool, &idx, epochs, &config.train, &mut rng)?;
        report.epoch_losses.push(losses);
        let (acc, defects) = validate_and_collect_defects(&model, pool)?;
        report.accuracies.push(acc);
        let before = subset.len();
        subset.extend(defects);
        report.defects_added.push(subset.len() - before);
    }
    Ok((model, report))
}

/// Class label of every pixel of a histogram frame.
pub fn classify_frame<T: Real>(model: &DidlModel<T>, frame: &HistogramFrame) -> Result<LabelMask> {
    let refs: Vec<&[f32]> = frame.pixels().collect();
    let classes = model.classify(&refs)?;
    let labels = classes
        .into_iter()
        .map(|c| Label::from_class_index(c).expect("class index below 3"))
        .collect();
    LabelMask::new(frame.height, frame.width, labels, Provenance::Predicted)
}

pub fn predict_mask<T: Real>(model: &DidlModel<T>, seq: &FrameSequence, t: usize) -> Result<LabelMask> {
    classify_frame(model, &extract_histograms(seq, t)?)
}
