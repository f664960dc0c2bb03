#![allow(dead_code)]

use lts_core::distlayer::{gaussian_density, DensityVector, DistributionKernel};
use lts_core::hist::{BIN_WIDTH, NUM_BINS, ZERO_BIN};
use lts_core::nn::{Parameter, Parameterized};
use rand::Rng;

/// Smooth input bump centred in `[−0.5, 0.5]`.
pub fn smooth_input<R: Rng>(rng: &mut R) -> DensityVector<f64> {
    gaussian_density(rng.random_range(-0.5..0.5), rng.random_range(0.1..0.2))
}

/// Smooth kernel bump centred at `±[0.5, 0.8]` with an empty zero bin.
pub fn smooth_kernel<R: Rng>(rng: &mut R) -> DensityVector<f64> {
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut d = gaussian_density(sign * rng.random_range(0.5..0.8), rng.random_range(0.05..0.1));
    d.density[ZERO_BIN] = 0.0;
    let mass: f64 = d.density.iter().sum::<f64>() * BIN_WIDTH;
    for v in &mut d.density {
        *v /= mass;
    }
    d
}

/// Arbitrary non-negative grid values.
pub fn random_density<R: Rng>(rng: &mut R) -> DensityVector<f64> {
    DensityVector::new((0..NUM_BINS).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap()
}

pub fn random_kernel<R: Rng>(rng: &mut R, name: &str) -> DistributionKernel<f64> {
    let mut e: Vec<f64> = (0..NUM_BINS + 1).map(|_| rng.random_range(0.0..3.0)).collect();
    e[NUM_BINS] = rng.random_range(0.0..1.0);
    DistributionKernel::new(name, e).unwrap()
}

pub fn random_cotangent<R: Rng>(rng: &mut R) -> DensityVector<f64> {
    DensityVector::new((0..NUM_BINS).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// One kernel exposed as a parameterized model.
pub struct KernelModel<T> {
    pub kernel: DistributionKernel<T>,
}

impl<T: lts_core::Real> Parameterized<T> for KernelModel<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        vec![&self.kernel.param]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.kernel.param]
    }
}

pub fn dot(a: &DensityVector<f64>, b: &DensityVector<f64>) -> f64 {
    a.density.iter().zip(&b.density).map(|(x, y)| x * y).sum()
}

/// Brute-force discrete convolution of the sum layer.
pub fn convolution_oracle(x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; NUM_BINS];
    for (j, o) in out.iter_mut().enumerate() {
        for k in 0..NUM_BINS {
            let idx = j as i64 - k as i64 + ZERO_BIN as i64;
            if (0..NUM_BINS as i64).contains(&idx) {
                *o += b[k] * x[idx as usize] * BIN_WIDTH;
            }
        }
    }
    out
}
