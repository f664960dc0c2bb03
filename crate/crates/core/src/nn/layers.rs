use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::real::{gemm, Real};

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    relu_inplace(y.data_mut());
    y
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient of ReLU given its pre-activation input (zero at and below 0).
pub fn relu_backward<T: Real>(pre: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let mut g = grad.clone();
    relu_backward_inplace(pre.data(), g.data_mut());
    g
}

pub fn relu_backward_inplace<T: Real>(pre: &[T], grad: &mut [T]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn dense_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, i) = x.dims2()?;
    let (o, wi) = w.dims2()?;
    if wi != i {
        return Err(Error::shape(format!(
            "fully_connected: input width {i}, weight expects {wi}"
        )));
    }
    Ok((n, i, o))
}

/// `y = x·Wᵀ + b` for `x: N×in`, `W: out×in`.
pub fn fully_connected_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, i, o) = dense_dims(x, w)?;
    if b.len() != o {
        return Err(Error::shape("fully_connected: bias length"));
    }
    let mut y = Tensor::zeros(&[n, o]);
    for row in y.data_mut().chunks_exact_mut(o) {
        row.copy_from_slice(b.data());
    }
    gemm(false, true, n, o, i, T::one(), x.data(), w.data(), T::one(), y.data_mut());
    y.debug_check("fully_connected_forward");
    Ok(y)
}

pub fn fully_connected_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n, i, o) = dense_dims(x, w)?;
    if grad.shape() != [n, o] {
        return Err(Error::shape("fully_connected_backward: grad shape"));
    }
    let mut dx = Tensor::zeros(&[n, i]);
    gemm(false, false, n, i, o, T::one(), grad.data(), w.data(), T::zero(), dx.data_mut());
    let mut dw = Tensor::zeros(&[o, i]);
    gemm(true, false, o, i, n, T::one(), grad.data(), x.data(), T::zero(), dw.data_mut());
    let mut db = Tensor::zeros(&[o]);
    for row in grad.data().chunks_exact(o) {
        for (d, &g) in db.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok(DenseGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}
