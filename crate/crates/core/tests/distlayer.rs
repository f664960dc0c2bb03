mod common;

use common::*;
use lts_core::distlayer::*;
use lts_core::hist::{NUM_BINS, ZERO_BIN};
use lts_core::nn::gradcheck::{gradcheck, GradcheckOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .filter(|e| e.is_finite())
        .fold(0.0, f64::max)
}

#[test]
fn sum_layer_matches_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let x = random_density(&mut rng);
        let b = random_kernel(&mut rng, "b");
        let z = sum_forward(&x, &b).unwrap();
        let oracle = convolution_oracle(&x.density, b.entries());
        assert!(max_rel(&z.density, &oracle) <= 1e-12);
    }
}

#[test]
fn product_kernel_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..3 {
        let x = random_density(&mut rng);
        let g = random_cotangent(&mut rng);
        let mut m = KernelModel { kernel: random_kernel(&mut rng, "w") };
        let report = gradcheck(
            &mut m,
            |m: &mut KernelModel<f64>| {
                let grad = product_backward_kernel(&x, &g);
                m.kernel.param.grad.data_mut().copy_from_slice(&grad);
                dot(&product_forward(&x, &m.kernel).unwrap(), &g)
            },
            |m: &KernelModel<f64>| dot(&product_forward(&x, &m.kernel).unwrap(), &g),
            GradcheckOptions { max_entries: 202, ..Default::default() },
        );
        assert_eq!(report.entries.len(), KERNEL_LEN);
        assert!(report.passes(1e-5), "{:?}", report.worst());
    }
}

#[test]
fn sum_kernel_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_density(&mut rng);
    let g = random_cotangent(&mut rng);
    let mut m = KernelModel { kernel: random_kernel(&mut rng, "b") };
    let report = gradcheck(
        &mut m,
        |m: &mut KernelModel<f64>| {
            let grad = sum_backward_kernel(&x, &g);
            m.kernel.param.grad.data_mut().copy_from_slice(&grad);
            dot(&sum_forward(&x, &m.kernel).unwrap(), &g)
        },
        |m: &KernelModel<f64>| dot(&sum_forward(&x, &m.kernel).unwrap(), &g),
        GradcheckOptions { max_entries: 202, ..Default::default() },
    );
    assert!(report.passes(1e-5), "{:?}", report.worst());
}

#[test]
fn single_precision_gradients_match_double_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_density(&mut rng);
    let g = random_cotangent(&mut rng);
    let kernel = random_kernel(&mut rng, "w");
    let (x32, g32) = (x.cast::<f32>(), g.cast::<f32>());
    for product in [true, false] {
        let grad32 = if product {
            product_backward_kernel(&x32, &g32)
        } else {
            sum_backward_kernel(&x32, &g32)
        };
        let loss = |k: &DistributionKernel<f64>| {
            let z = if product { product_forward(&x, k) } else { sum_forward(&x, k) };
            dot(&z.unwrap(), &g)
        };
        for i in 0..KERNEL_LEN {
            let mut plus = kernel.clone();
            plus.param.value.data_mut()[i] += 1e-4;
            let mut minus = kernel.clone();
            minus.param.value.data_mut()[i] -= 1e-4;
            let numeric = (loss(&plus) - loss(&minus)) / 2e-4;
            let a = grad32[i] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-3, "product={product} entry {i}: {a} vs {numeric}");
        }
    }
}

#[test]
fn overflow_slot_never_reaches_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random_density(&mut rng);
    let mut k = random_kernel(&mut rng, "w");
    let before_p = product_forward(&x, &k).unwrap();
    let before_s = sum_forward(&x, &k).unwrap();
    k.param.value.data_mut()[OVERFLOW_SLOT] += 5.0;
    assert_eq!(product_forward(&x, &k).unwrap(), before_p);
    assert_eq!(sum_forward(&x, &k).unwrap(), before_s);
}

#[test]
fn layers_leave_inputs_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random_density(&mut rng);
    let k = random_kernel(&mut rng, "w");
    let (x0, k0) = (x.clone(), k.clone());
    product_forward(&x, &k).unwrap();
    sum_forward(&x, &k).unwrap();
    product_backward_kernel(&x, &x);
    sum_backward_kernel(&x, &x);
    assert_eq!(x, x0);
    assert_eq!(k, k0);
}

#[test]
fn product_matches_monte_carlo_on_smooth_densities() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..3 {
        let x = smooth_input(&mut rng);
        let w = smooth_kernel(&mut rng);
        let z = product_forward(&x, &DistributionKernel::from_density("w", &w)).unwrap();
        let mc = monte_carlo_product(
            &mut Sampler::from_density(&x).unwrap(),
            &mut Sampler::from_density(&w).unwrap(),
            1_000_000,
            trial,
        )
        .unwrap();
        let d = l1_distance(&z, &mc.product, false);
        assert!(d <= 0.1, "trial {trial}: L1 {d}");
    }
}

#[test]
fn zero_bin_is_symmetric_in_its_arguments() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..10 {
        let a = random_density(&mut rng);
        let b = random_density(&mut rng);
        let ab = product_forward(&a, &DistributionKernel::from_density("k", &b)).unwrap();
        let ba = product_forward(&b, &DistributionKernel::from_density("k", &a)).unwrap();
        let (p, q) = (ab.density[ZERO_BIN], ba.density[ZERO_BIN]);
        assert!((p - q).abs() <= 1e-9 * p.abs().max(1.0));
    }
}

#[test]
fn zero_bin_rule_reduces_to_scaled_input_when_kernel_has_no_zero_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = random_density(&mut rng);
    let w = smooth_kernel(&mut rng);
    let z = product_forward(&x, &DistributionKernel::from_density("w", &w)).unwrap();
    let inv: f64 = (0..NUM_BINS)
        .filter(|&i| i != ZERO_BIN)
        .map(|i| w.density[i] * 0.01 / (i as f64 * 0.01 - 1.0).abs())
        .sum();
    assert!((z.density[ZERO_BIN] - x.density[ZERO_BIN] * inv).abs() < 1e-9);
}

fn grid_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..2.0, NUM_BINS)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sum_adjoint_identity(x in grid_vec(), b in grid_vec(), g in prop::collection::vec(-1.0f64..1.0, NUM_BINS)) {
        let x = DensityVector::new(x).unwrap();
        let g = DensityVector::new(g).unwrap();
        let k = DistributionKernel::from_density("b", &DensityVector::new(b.clone()).unwrap());
        let lhs = dot(&sum_forward(&x, &k).unwrap(), &g);
        let grad = sum_backward_kernel(&x, &g);
        let rhs: f64 = b.iter().zip(&grad).map(|(p, q)| p * q).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn product_adjoint_identity(x in grid_vec(), w in grid_vec(), g in prop::collection::vec(-1.0f64..1.0, NUM_BINS)) {
        let x = DensityVector::new(x).unwrap();
        let g = DensityVector::new(g).unwrap();
        let k = DistributionKernel::from_density("w", &DensityVector::new(w.clone()).unwrap());
        let lhs = dot(&product_forward(&x, &k).unwrap(), &g);
        let grad = product_backward_kernel(&x, &g);
        let rhs: f64 = w.iter().zip(&grad).map(|(p, q)| p * q).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn backward_is_linear_in_cotangent(x in grid_vec(), g in prop::collection::vec(-1.0f64..1.0, NUM_BINS), a in -3.0f64..3.0) {
        let x = DensityVector::new(x).unwrap();
        let g = DensityVector::new(g).unwrap();
        let ag = DensityVector::new(g.density.iter().map(|v| a * v).collect()).unwrap();
        for (p, q) in product_backward_kernel(&x, &ag).iter().zip(product_backward_kernel(&x, &g)) {
            prop_assert!((p - a * q).abs() <= 1e-9 * p.abs().max(1.0));
        }
        for (p, q) in sum_backward_kernel(&x, &ag).iter().zip(sum_backward_kernel(&x, &g)) {
            prop_assert!((p - a * q).abs() <= 1e-9 * p.abs().max(1.0));
        }
    }

    #[test]
    fn mass_conversion_preserves_total(m in prop::collection::vec(0.0f32..1.0, NUM_BINS)) {
        let total: f64 = m.iter().map(|&v| v as f64).sum();
        let d = DensityVector::new(masses_to_density::<f64>(&m)).unwrap();
        prop_assert!((d.total_mass() - total).abs() < 1e-6);
    }
}
