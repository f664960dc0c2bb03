//! Product and sum distribution layers over the 201-bin difference grid, and
//! Monte Carlo estimators used to check them.

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hist::{bin_index_finite, bin_value, BinIndex, TemporalHistogram, BIN_WIDTH, NUM_BINS, ZERO_BIN};
use crate::nn::{Parameter, Tensor};
use crate::real::Real;

/// Kernel length: the grid plus one overflow slot.
pub const KERNEL_LEN: usize = NUM_BINS + 1;
pub const OVERFLOW_SLOT: usize = NUM_BINS;

/// Density samples on the grid; `Σ density·Δ` is the total mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVector<T> {
    pub density: Vec<T>,
}

impl<T: Real> DensityVector<T> {
    pub fn new(density: Vec<T>) -> Result<Self> {
        if density.len() != NUM_BINS {
            return Err(Error::shape(format!(
                "density vector needs {NUM_BINS} entries, got {}",
                density.len()
            )));
        }
        if density.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("density vector"));
        }
        Ok(Self { density })
    }

    pub fn zeros() -> Self {
        Self {
            density: vec![T::zero(); NUM_BINS],
        }
    }

    /// Density `1/Δ` at a single bin.
    pub fn delta(bin: usize) -> Self {
        let mut d = Self::zeros();
        d.density[bin] = T::of(1.0 / BIN_WIDTH);
        d
    }

    pub fn total_mass(&self) -> f64 {
        self.density.iter().map(|v| v.f64()).sum::<f64>() * BIN_WIDTH
    }

    pub fn cast<U: Real>(&self) -> DensityVector<U> {
        DensityVector {
            density: self.density.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// A learnable distribution: 201 grid densities and an overflow slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionKernel<T> {
    pub param: Parameter<T>,
}

impl<T: Real> DistributionKernel<T> {
    pub fn new(name: impl Into<String>, entries: Vec<T>) -> Result<Self> {
        if entries.len() != KERNEL_LEN {
            return Err(Error::shape(format!(
                "kernel needs {KERNEL_LEN} entries, got {}",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("distribution kernel"));
        }
        Ok(Self {
            param: Parameter::new(name, Tensor::new(&[KERNEL_LEN], entries)?),
        })
    }

    /// Grid densities from `d` with an empty overflow slot.
    pub fn from_density(name: impl Into<String>, d: &DensityVector<T>) -> Self {
        let mut e = d.density.clone();
        e.push(T::zero());
        Self::new(name, e).expect("density vector has the grid length")
    }

    /// Normal bump centred at `centre`, normalized to unit mass on the grid.
    pub fn gaussian_bump(name: impl Into<String>, centre: f64, sigma: f64) -> Self {
        Self::from_density(name, &gaussian_density(centre, sigma))
    }

    pub fn entries(&self) -> &[T] {
        self.param.value.data()
    }

    pub fn grad(&self) -> &[T] {
        self.param.grad.data()
    }

    pub fn as_density(&self) -> DensityVector<T> {
        DensityVector {
            density: self.entries()[..NUM_BINS].to_vec(),
        }
    }
}

/// Grid density of `N(centre, sigma²)` truncated to `[−1, 1]` and renormalized.
pub fn gaussian_density<T: Real>(centre: f64, sigma: f64) -> DensityVector<T> {
    let raw: Vec<f64> = (0..NUM_BINS)
        .map(|i| (-(bin_value(i) - centre).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mass: f64 = raw.iter().sum::<f64>() * BIN_WIDTH;
    DensityVector {
        density: raw.iter().map(|v| T::of(v / mass)).collect(),
    }
}

pub fn mass_to_density<T: Real>(h: &TemporalHistogram) -> DensityVector<T> {
    DensityVector {
        density: masses_to_density(&h.mass),
    }
}

pub fn masses_to_density<T: Real>(mass: &[f32]) -> Vec<T> {
    let scale = 1.0 / BIN_WIDTH;
    mass.iter().map(|&m| T::of(m as f64 * scale)).collect()
}

/// For every input bin `m`, the `(output j, kernel i)` pairs with
/// `j, i ≠ ZERO_BIN` whose ratio `z_j / w_i` rounds to `m`.
struct ProductTable {
    start: Vec<u32>,
    out_bin: Vec<u16>,
    kernel_bin: Vec<u16>,
}

/// `round(100·a/b)` with ties away from zero.
fn rounded_ratio(a: i64, b: i64) -> i64 {
    let (num, den) = (100 * a * b.signum(), b.abs());
    let q = (2 * num.abs() + den) / (2 * den);
    q * num.signum()
}

fn product_table() -> &'static ProductTable {
    static TABLE: OnceLock<ProductTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let z = ZERO_BIN as i64;
        let mut buckets: Vec<Vec<(u16, u16)>> = vec![Vec::new(); NUM_BINS];
        for j in 0..NUM_BINS as i64 {
            if j == z {
                continue;
            }
            for i in 0..NUM_BINS as i64 {
                if i == z {
                    continue;
                }
                let m = rounded_ratio(j - z, i - z) + z;
                if (0..NUM_BINS as i64).contains(&m) {
                    buckets[m as usize].push((j as u16, i as u16));
                }
            }
        }
        let mut start = Vec::with_capacity(NUM_BINS + 1);
        let (mut out_bin, mut kernel_bin) = (Vec::new(), Vec::new());
        start.push(0);
        for b in buckets {
            for (j, i) in b {
                out_bin.push(j);
                kernel_bin.push(i);
            }
            start.push(out_bin.len() as u32);
        }
        ProductTable {
            start,
            out_bin,
            kernel_bin,
        }
    })
}

/// Input bin read by output bin `j` through kernel bin `i`, if on the grid.
pub fn product_lookup(j: usize, i: usize) -> Option<usize> {
    if j == ZERO_BIN || i == ZERO_BIN || j >= NUM_BINS || i >= NUM_BINS {
        return None;
    }
    let z = ZERO_BIN as i64;
    let m = rounded_ratio(j as i64 - z, i as i64 - z) + z;
    (0..NUM_BINS as i64).contains(&m).then_some(m as usize)
}

/// `Δ / |v_i|` for every bin (zero at the zero bin).
fn inverse_abs() -> &'static [f64] {
    static COEF: OnceLock<Vec<f64>> = OnceLock::new();
    COEF.get_or_init(|| {
        (0..NUM_BINS)
            .map(|i| {
                if i == ZERO_BIN {
                    0.0
                } else {
                    1.0 / (i as f64 - ZERO_BIN as f64).abs()
                }
            })
            .collect()
    })
}

#[inline]
fn coef<T: Real>() -> impl Fn(usize) -> T {
    let c = inverse_abs();
    move |i| T::of(c[i])
}

/// `Σ_{k≠0} x_k Δ/|v_k|`, the grid estimate of `E(1/|x|)`.
fn inverse_moment<T: Real>(x: &[T]) -> T {
    let c = coef::<T>();
    x.iter()
        .enumerate()
        .filter(|&(k, v)| k != ZERO_BIN && *v != T::zero())
        .map(|(k, &v)| v * c(k))
        .sum()
}

fn check_finite<T: Real>(v: &[T], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Unchecked product layer on raw slices: `x` has 201 entries, `w` at least
/// 201 (the overflow slot is ignored), `out` 201 and is overwritten.
pub fn product_forward_into<T: Real>(x: &[T], w: &[T], out: &mut [T]) {
    let t = product_table();
    let c = coef::<T>();
    out[..NUM_BINS].fill(T::zero());
    let mut wc = [T::zero(); NUM_BINS];
    for i in 0..NUM_BINS {
        wc[i] = w[i] * c(i);
    }
    for (m, &xm) in x.iter().enumerate().take(NUM_BINS) {
        if xm == T::zero() {
            continue;
        }
        let (a, b) = (t.start[m] as usize, t.start[m + 1] as usize);
        for (&j, &i) in t.out_bin[a..b].iter().zip(&t.kernel_bin[a..b]) {
            out[j as usize] += wc[i as usize] * xm;
        }
    }
    let inv_x = inverse_moment(&x[..NUM_BINS]);
    let inv_w: T = wc.iter().copied().sum();
    let (w0, x0) = (w[ZERO_BIN], x[ZERO_BIN]);
    out[ZERO_BIN] = w0 * inv_x + x0 * inv_w + w0 * x0 * T::of(1.0 / BIN_WIDTH);
}

/// Accumulates the product-layer kernel gradient into `grad_w` (202 entries).
pub fn product_backward_into<T: Real>(x: &[T], grad_z: &[T], grad_w: &mut [T]) {
    let t = product_table();
    let c = coef::<T>();
    let mut acc = [T::zero(); NUM_BINS];
    for (m, &xm) in x.iter().enumerate().take(NUM_BINS) {
        if xm == T::zero() {
            continue;
        }
        let (a, b) = (t.start[m] as usize, t.start[m + 1] as usize);
        for (&j, &i) in t.out_bin[a..b].iter().zip(&t.kernel_bin[a..b]) {
            acc[i as usize] += grad_z[j as usize] * xm;
        }
    }
    let g0 = grad_z[ZERO_BIN];
    let x0 = x[ZERO_BIN];
    for i in 0..NUM_BINS {
        if i != ZERO_BIN {
            grad_w[i] += (acc[i] + g0 * x0) * c(i);
        }
    }
    grad_w[ZERO_BIN] += g0 * (inverse_moment(&x[..NUM_BINS]) + x0 * T::of(1.0 / BIN_WIDTH));
}

pub fn product_forward<T: Real>(
    x: &DensityVector<T>,
    w: &DistributionKernel<T>,
) -> Result<DensityVector<T>> {
    check_finite(&x.density, "product_forward input")?;
    check_finite(w.entries(), "product_forward kernel")?;
    let mut out = vec![T::zero(); NUM_BINS];
    product_forward_into(&x.density, w.entries(), &mut out);
    Ok(DensityVector { density: out })
}

/// Kernel gradient (202 entries) of `⟨product_forward(x, w), grad_z⟩`.
pub fn product_backward_kernel<T: Real>(
    x: &DensityVector<T>,
    grad_z: &DensityVector<T>,
) -> Vec<T> {
    let mut g = vec![T::zero(); KERNEL_LEN];
    product_backward_into(&x.density, &grad_z.density, &mut g);
    g
}

/// Unchecked sum layer; returns the mass that left the grid.
pub fn sum_forward_into<T: Real>(x: &[T], b: &[T], out: &mut [T]) -> T {
    let d = T::of(BIN_WIDTH);
    out[..NUM_BINS].fill(T::zero());
    let mut bd = [T::zero(); NUM_BINS];
    for (v, &bk) in bd.iter_mut().zip(b) {
        *v = bk * d;
    }
    let mut spill = T::zero();
    for (m, &xm) in x.iter().enumerate().take(NUM_BINS) {
        if xm == T::zero() {
            continue;
        }
        // j = m + k − 100 stays on the grid for k in lo..hi.
        let lo = ZERO_BIN.saturating_sub(m);
        let hi = (NUM_BINS + ZERO_BIN - m).min(NUM_BINS);
        for &v in bd[..lo].iter().chain(&bd[hi..]) {
            spill += v * xm;
        }
        let base = m + lo - ZERO_BIN;
        for (o, &v) in out[base..base + (hi - lo)].iter_mut().zip(&bd[lo..hi]) {
            *o += v * xm;
        }
    }
    spill * d
}

pub fn sum_backward_into<T: Real>(x: &[T], grad_z: &[T], grad_b: &mut [T]) {
    let d = T::of(BIN_WIDTH);
    for (m, &xm) in x.iter().enumerate().take(NUM_BINS) {
        if xm == T::zero() {
            continue;
        }
        let xd = xm * d;
        let lo = ZERO_BIN.saturating_sub(m);
        let hi = (NUM_BINS + ZERO_BIN - m).min(NUM_BINS);
        let base = m + lo - ZERO_BIN;
        for (gb, &g) in grad_b[lo..hi].iter_mut().zip(&grad_z[base..base + (hi - lo)]) {
            *gb += g * xd;
        }
    }
}

pub fn sum_forward<T: Real>(
    x: &DensityVector<T>,
    b: &DistributionKernel<T>,
) -> Result<DensityVector<T>> {
    Ok(sum_forward_with_overflow(x, b)?.0)
}

/// Sum-layer output and the mass whose shifted coordinate left `[−1, 1]`.
pub fn sum_forward_with_overflow<T: Real>(
    x: &DensityVector<T>,
    b: &DistributionKernel<T>,
) -> Result<(DensityVector<T>, T)> {
    check_finite(&x.density, "sum_forward input")?;
    check_finite(b.entries(), "sum_forward kernel")?;
    let mut out = vec![T::zero(); NUM_BINS];
    let spill = sum_forward_into(&x.density, b.entries(), &mut out);
    Ok((DensityVector { density: out }, spill))
}

pub fn sum_backward_kernel<T: Real>(x: &DensityVector<T>, grad_z: &DensityVector<T>) -> Vec<T> {
    let mut g = vec![T::zero(); KERNEL_LEN];
    sum_backward_into(&x.density, &grad_z.density, &mut g);
    g
}

/// Scalar random sources for the Monte Carlo estimators.
#[derive(Debug, Clone)]
pub enum Sampler {
    Constant(f64),
    Normal { mean: f64, sd: f64 },
    /// Alternates between two sources, so an even number of draws splits
    /// exactly in half.
    Halves {
        first: Box<Sampler>,
        second: Box<Sampler>,
        toggle: bool,
    },
    /// Picks a bin in proportion to its mass, then a uniform point inside it.
    Grid { cumulative: Vec<f64> },
}

impl Sampler {
    pub fn normal(mean: f64, sd: f64) -> Self {
        Sampler::Normal { mean, sd }
    }

    pub fn halves(first: Sampler, second: Sampler) -> Self {
        Sampler::Halves {
            first: Box::new(first),
            second: Box::new(second),
            toggle: false,
        }
    }

    pub fn from_density<T: Real>(d: &DensityVector<T>) -> Result<Self> {
        let mut cumulative = Vec::with_capacity(NUM_BINS);
        let mut acc = 0.0;
        for v in &d.density {
            let v = v.f64();
            if v < 0.0 || !v.is_finite() {
                return Err(Error::invalid("sampling density must be finite and non-negative"));
            }
            acc += v;
            cumulative.push(acc);
        }
        if acc <= 0.0 {
            return Err(Error::Empty("sampling density"));
        }
        Ok(Sampler::Grid { cumulative })
    }

    pub fn sample<R: Rng>(&mut self, rng: &mut R) -> f64 {
        match self {
            Sampler::Constant(v) => *v,
            Sampler::Normal { mean, sd } => Normal::new(*mean, *sd)
                .expect("finite normal parameters")
                .sample(rng),
            Sampler::Halves {
                first,
                second,
                toggle,
            } => {
                *toggle = !*toggle;
                if *toggle {
                    first.sample(rng)
                } else {
                    second.sample(rng)
                }
            }
            Sampler::Grid { cumulative } => {
                let total = *cumulative.last().expect("non-empty grid");
                let u = rng.random::<f64>() * total;
                let bin = cumulative.partition_point(|&c| c <= u).min(NUM_BINS - 1);
                bin_value(bin) + (rng.random::<f64>() - 0.5) * BIN_WIDTH
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloProduct {
    /// Density of the binned products.
    pub product: DensityVector<f64>,
    /// Density of the binned `x` draws.
    pub x_density: DensityVector<f64>,
    /// Sample mean of `1/|w|`.
    pub mean_inverse_abs_w: f64,
    /// Products that fell outside the grid.
    pub overflow: u64,
}

/// Draws `n` pairs `(x, w)` from one seeded stream and histograms `x·w`.
pub fn monte_carlo_product(
    x: &mut Sampler,
    w: &mut Sampler,
    n_samples: u64,
    seed: u64,
) -> Result<MonteCarloProduct> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z_counts = vec![0u64; NUM_BINS];
    let mut x_counts = vec![0u64; NUM_BINS];
    let mut overflow = 0u64;
    let mut inv_sum = 0.0f64;
    for _ in 0..n_samples {
        let xv = x.sample(&mut rng);
        let wv = w.sample(&mut rng);
        inv_sum += 1.0 / wv.abs();
        match bin_index_finite(xv * wv) {
            BinIndex::Bin(b) => z_counts[b] += 1,
            BinIndex::Overflow => overflow += 1,
        }
        if let BinIndex::Bin(b) = bin_index_finite(xv) {
            x_counts[b] += 1;
        }
    }
    let scale = 1.0 / (n_samples as f64 * BIN_WIDTH);
    let to_density = |c: &[u64]| DensityVector {
        density: c.iter().map(|&v| v as f64 * scale).collect(),
    };
    Ok(MonteCarloProduct {
        product: to_density(&z_counts),
        x_density: to_density(&x_counts),
        mean_inverse_abs_w: inv_sum / n_samples as f64,
        overflow,
    })
}

#[derive(Debug, Clone)]
pub struct ZeroBinReport {
    pub samples: u64,
    pub seed: u64,
    pub measured_zero_density: f64,
    /// Measured zero-bin density of `x`.
    pub x_zero_density: f64,
    pub mean_inverse_abs_w: f64,
    pub predicted_zero_density: f64,
    pub relative_error: f64,
    pub product: DensityVector<f64>,
}

/// `x ~ N(0,1)`, `w` half `N(−4,1)` and half `N(4,1)`: compares the
/// measured zero-bin density of `x·w` with `f_X(0)·E(1/|w|)`.
pub fn verify_zero_bin_rule(n_samples: u64, seed: u64) -> Result<ZeroBinReport> {
    if n_samples < 100_000 {
        return Err(Error::invalid("verify_zero_bin_rule needs at least 1e5 samples"));
    }
    let mut x = Sampler::normal(0.0, 1.0);
    let mut w = Sampler::halves(Sampler::normal(-4.0, 1.0), Sampler::normal(4.0, 1.0));
    let mc = monte_carlo_product(&mut x, &mut w, n_samples, seed)?;
    let measured = mc.product.density[ZERO_BIN];
    let fx0 = mc.x_density.density[ZERO_BIN];
    let predicted = fx0 * mc.mean_inverse_abs_w;
    Ok(ZeroBinReport {
        samples: n_samples,
        seed,
        measured_zero_density: measured,
        x_zero_density: fx0,
        mean_inverse_abs_w: mc.mean_inverse_abs_w,
        predicted_zero_density: predicted,
        relative_error: (measured - predicted).abs() / predicted.abs(),
        product: mc.product,
    })
}

#[derive(Debug, Clone)]
pub struct DivergenceReport {
    pub zero_density: f64,
    pub median_density: f64,
    pub ratio: f64,
    pub product: DensityVector<f64>,
}

/// `x, w ~ N(0,1)`: zero-bin density against the median of the other
/// occupied bins.
pub fn divergence_experiment(n_samples: u64, seed: u64) -> Result<DivergenceReport> {
    let mut x = Sampler::normal(0.0, 1.0);
    let mut w = Sampler::normal(0.0, 1.0);
    let mc = monte_carlo_product(&mut x, &mut w, n_samples, seed)?;
    let zero = mc.product.density[ZERO_BIN];
    let mut rest: Vec<f64> = mc
        .product
        .density
        .iter()
        .enumerate()
        .filter(|&(i, &v)| i != ZERO_BIN && v > 0.0)
        .map(|(_, &v)| v)
        .collect();
    if rest.is_empty() {
        return Err(Error::Empty("non-zero product bins"));
    }
    rest.sort_by(f64::total_cmp);
    let median = if rest.len() % 2 == 1 {
        rest[rest.len() / 2]
    } else {
        0.5 * (rest[rest.len() / 2 - 1] + rest[rest.len() / 2])
    };
    Ok(DivergenceReport {
        zero_density: zero,
        median_density: median,
        ratio: zero / median,
        product: mc.product,
    })
}

/// `Σ |a − b|·Δ` over the grid, optionally skipping the zero bin.
pub fn l1_distance<T: Real>(a: &DensityVector<T>, b: &DensityVector<T>, skip_zero_bin: bool) -> f64 {
    a.density
        .iter()
        .zip(&b.density)
        .enumerate()
        .filter(|&(i, _)| !(skip_zero_bin && i == ZERO_BIN))
        .map(|(_, (x, y))| (x.f64() - y.f64()).abs())
        .sum::<f64>()
        * BIN_WIDTH
}

pub fn write_density_csv<T: Real>(d: &DensityVector<T>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "bin_value,density")?;
    for (i, v) in d.density.iter().enumerate() {
        writeln!(f, "{:.2},{}", bin_value(i), v.f64())?;
    }
    f.flush()?;
    Ok(())
}
