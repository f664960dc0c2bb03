use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::real::Real;

/// Row-wise log-softmax of an `N×C` tensor.
pub fn log_softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

/// Gradient with respect to the logits, given `log_softmax` output and the
/// gradient with respect to it.
pub fn log_softmax_backward<T: Real>(log_probs: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = log_probs.dims2()?;
    if grad.shape() != log_probs.shape() {
        return Err(Error::shape("log_softmax_backward: grad shape"));
    }
    let mut out = grad.clone();
    for (g, lp) in out.data_mut().chunks_exact_mut(c).zip(log_probs.data().chunks_exact(c)) {
        let s: T = g.iter().copied().sum();
        for (gv, &l) in g.iter_mut().zip(lp) {
            *gv -= l.exp() * s;
        }
    }
    Ok(out)
}

fn check_targets<T: Real>(log_probs: &Tensor<T>, targets: &[usize]) -> Result<(usize, usize)> {
    let (n, c) = log_probs.dims2()?;
    if targets.len() != n {
        return Err(Error::shape(format!(
            "nll_loss: {} targets for {n} rows",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::OutOfRange {
            what: "target class",
            index: bad,
            limit: c,
        });
    }
    Ok((n, c))
}

/// Mean negative log-likelihood of the target classes.
pub fn nll_loss<T: Real>(log_probs: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let (n, c) = check_targets(log_probs, targets)?;
    let total: T = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -log_probs.data()[i * c + t])
        .sum();
    Ok(total / T::of(n as f64))
}

pub fn nll_loss_backward<T: Real>(log_probs: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
    let (n, c) = check_targets(log_probs, targets)?;
    let mut g = Tensor::zeros(log_probs.shape());
    let v = -T::one() / T::of(n as f64);
    for (i, &t) in targets.iter().enumerate() {
        g.data_mut()[i * c + t] = v;
    }
    Ok(g)
}

/// Per-pixel cross-entropy over the channel axis of `N×C×H×W` logits, each
/// pixel scaled by the weight of its target class, averaged over all pixels.
/// Returns the loss and its gradient with respect to the logits.
pub fn weighted_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    class_weights: &[T],
) -> Result<(T, Tensor<T>)> {
    let (n, c, h, w) = logits.dims4()?;
    if class_weights.len() != c {
        return Err(Error::shape("weighted_cross_entropy: one weight per class"));
    }
    if class_weights.iter().any(|&w| !(w > T::zero())) {
        return Err(Error::invalid("class weights must be positive"));
    }
    let hw = h * w;
    if targets.len() != n * hw {
        return Err(Error::shape("weighted_cross_entropy: one target per pixel"));
    }
    let count = T::of((n * hw) as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    let src = logits.data();
    let dst = grad.data_mut();
    let mut probs = vec![T::zero(); c];
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let t = targets[ni * hw + p];
            if t >= c {
                return Err(Error::OutOfRange {
                    what: "target class",
                    index: t,
                    limit: c,
                });
            }
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(src[base + k * hw + p]);
            }
            let mut s = T::zero();
            for k in 0..c {
                probs[k] = (src[base + k * hw + p] - m).exp();
                s += probs[k];
            }
            let lse = m + s.ln();
            let wt = class_weights[t];
            total += wt * (lse - src[base + t * hw + p]);
            for k in 0..c {
                let onehot = if k == t { T::one() } else { T::zero() };
                dst[base + k * hw + p] = wt * (probs[k] / s - onehot) / count;
            }
        }
    }
    Ok((total / count, grad))
}

/// Softmax probability of class `class` at every pixel of `N×C×H×W` logits.
pub fn softmax_channel<T: Real>(logits: &Tensor<T>, class: usize) -> Result<Vec<T>> {
    let (n, c, h, w) = logits.dims4()?;
    if class >= c {
        return Err(Error::OutOfRange {
            what: "class",
            index: class,
            limit: c,
        });
    }
    let hw = h * w;
    let src = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let m = (0..c).map(|k| src[base + k * hw + p]).fold(T::neg_infinity(), T::max);
            let s: T = (0..c).map(|k| (src[base + k * hw + p] - m).exp()).sum();
            out.push((src[base + class * hw + p] - m).exp() / s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let logits = Tensor::new(&[1, 3], vec![40.0f64, 0.0, 0.0]).unwrap();
        let lp = log_softmax(&logits).unwrap();
        assert!(nll_loss(&lp, &[0]).unwrap() < 1e-15);
    }

    #[test]
    fn uniform_three_class_loss_is_ln3() {
        let logits = Tensor::new(&[2, 3], vec![0.7f64; 6]).unwrap();
        let lp = log_softmax(&logits).unwrap();
        let l = nll_loss(&lp, &[0, 2]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!((l - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn log_probs_normalize() {
        let logits = Tensor::new(&[2, 3], vec![1.0f64, -2.0, 0.3, 100.0, 99.0, -50.0]).unwrap();
        let lp = log_softmax(&logits).unwrap();
        for row in lp.data().chunks(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_rejects_bad_target() {
        let lp = log_softmax(&Tensor::new(&[1, 3], vec![0.0f64; 3]).unwrap()).unwrap();
        assert!(matches!(nll_loss(&lp, &[3]), Err(Error::OutOfRange { .. })));
    }

    fn ce_fixture() -> (Tensor<f64>, Vec<usize>) {
        let logits = Tensor::from_fn(&[2, 2, 2, 3], |i| ((i * 7 % 5) as f64 - 2.0) * 0.4);
        let targets = vec![0, 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 0];
        (logits, targets)
    }

    #[test]
    fn equal_weights_halve_standard_ce() {
        let (logits, targets) = ce_fixture();
        let (half, _) = weighted_cross_entropy(&logits, &targets, &[0.5, 0.5]).unwrap();
        let (full, _) = weighted_cross_entropy(&logits, &targets, &[1.0, 1.0]).unwrap();
        assert!((half - 0.5 * full).abs() < 1e-14);
    }

    #[test]
    fn all_background_scales_by_background_weight() {
        let (logits, _) = ce_fixture();
        let targets = vec![0; 12];
        let (wl, _) = weighted_cross_entropy(&logits, &targets, &[0.2, 0.8]).unwrap();
        let (ul, _) = weighted_cross_entropy(&logits, &targets, &[1.0, 1.0]).unwrap();
        assert!((wl - 0.2 * ul).abs() < 1e-14);
        assert!(wl >= 0.0);
        assert!(weighted_cross_entropy(&logits, &targets, &[0.0, 1.0]).is_err());
    }
}
