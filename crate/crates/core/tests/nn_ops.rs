use lts_core::nn::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central-difference gradient of `f` at `x`.
fn numeric(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        assert!(err < 1e-5, "{what}[{i}]: analytic {a}, numeric {n}");
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, spec) in [(3, Conv2dSpec::same(3)), (1, Conv2dSpec::same(1)), (3, Conv2dSpec { stride: 2, padding: 0 })] {
        let x = random(&[2, 3, 5, 5], &mut rng);
        let w = random(&[4, 3, k, k], &mut rng);
        let b = random(&[4], &mut rng);
        let y = conv2d_forward(&x, &w, Some(&b), spec).unwrap();
        let r = random(y.shape(), &mut rng);
        let g = conv2d_backward(&x, &w, &r, spec).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            dot(&conv2d_forward(x, w, Some(b), spec).unwrap(), &r)
        };
        assert_close(g.input.data(), &numeric(&x, |x| loss(x, &w, &b)), "conv dx");
        assert_close(g.weight.data(), &numeric(&w, |w| loss(&x, w, &b)), "conv dw");
        assert_close(g.bias.data(), &numeric(&b, |b| loss(&x, &w, b)), "conv db");
    }
}

#[test]
fn maxpool_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[1, 2, 4, 6], &mut rng);
    let (y, arg) = maxpool2x2_forward(&x).unwrap();
    let r = random(y.shape(), &mut rng);
    let dx = maxpool2x2_backward(x.shape(), &arg, &r).unwrap();
    let n = numeric(&x, |x| dot(&maxpool2x2_forward(x).unwrap().0, &r));
    assert_close(dx.data(), &n, "pool dx");
}

#[test]
fn transpose_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 3, 2], &mut rng);
    let w = random(&[3, 2, 2, 2], &mut rng);
    let b = random(&[2], &mut rng);
    let y = transpose_conv2x2_forward(&x, &w, &b).unwrap();
    assert_eq!(y.shape(), &[2, 2, 6, 4]);
    let r = random(y.shape(), &mut rng);
    let g = transpose_conv2x2_backward(&x, &w, &r).unwrap();
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        dot(&transpose_conv2x2_forward(x, w, b).unwrap(), &r)
    };
    assert_close(g.input.data(), &numeric(&x, |x| loss(x, &w, &b)), "tconv dx");
    assert_close(g.weight.data(), &numeric(&w, |w| loss(&x, w, &b)), "tconv dw");
    assert_close(g.bias.data(), &numeric(&b, |b| loss(&x, &w, b)), "tconv db");
}

#[test]
fn dense_and_relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 5], &mut rng);
    let w = random(&[4, 5], &mut rng);
    let b = random(&[4], &mut rng);
    let r = random(&[3, 4], &mut rng);
    let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        let pre = fully_connected_forward(x, w, b).unwrap();
        dot(&relu_forward(&pre), &r)
    };
    let pre = fully_connected_forward(&x, &w, &b).unwrap();
    let gpre = relu_backward(&pre, &r);
    let g = fully_connected_backward(&x, &w, &gpre).unwrap();
    assert_close(g.input.data(), &numeric(&x, |x| f(x, &w, &b)), "fc dx");
    assert_close(g.weight.data(), &numeric(&w, |w| f(&x, w, &b)), "fc dw");
    assert_close(g.bias.data(), &numeric(&b, |b| f(&x, &w, b)), "fc db");
}

#[test]
fn concat_split_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 2, 3, 3], &mut rng);
    let b = random(&[2, 3, 3, 3], &mut rng);
    let r = random(&[2, 5, 3, 3], &mut rng);
    let (da, db) = split_channels(&r, 2).unwrap();
    assert_close(da.data(), &numeric(&a, |a| dot(&concat_channels(a, &b).unwrap(), &r)), "cat da");
    assert_close(db.data(), &numeric(&b, |b| dot(&concat_channels(&a, b).unwrap(), &r)), "cat db");
}

#[test]
fn log_softmax_nll_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = random(&[4, 3], &mut rng);
    let t = [0usize, 2, 1, 2];
    let lp = log_softmax(&z).unwrap();
    let g = log_softmax_backward(&lp, &nll_loss_backward(&lp, &t).unwrap()).unwrap();
    let n = numeric(&z, |z| nll_loss(&log_softmax(z).unwrap(), &t).unwrap());
    assert_close(g.data(), &n, "nll dz");
}

#[test]
fn weighted_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = random(&[2, 2, 3, 3], &mut rng);
    let t: Vec<usize> = (0..18).map(|i| (i * 5 % 7) % 2).collect();
    let w = [0.2, 0.8];
    let (_, g) = weighted_cross_entropy(&z, &t, &w).unwrap();
    let n = numeric(&z, |z| weighted_cross_entropy(z, &t, &w).unwrap().0);
    assert_close(g.data(), &n, "wce dz");
}
