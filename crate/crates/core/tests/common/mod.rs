#![allow(dead_code)]

//! Shared test oracles: central finite differences and relative-error
//! comparison. Kept independent of the library's backward implementations;
//! everything here goes through forward evaluations only.

use transplant_core::tensor::{Element, Shape, Tensor};

/// Central finite-difference gradient of `f` at `x`, step `h`.
pub fn fd_gradient<E: Element>(
    f: &mut dyn FnMut(&Tensor<E>) -> f64,
    x: &Tensor<E>,
    h: f64,
) -> Tensor<E> {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += E::from_f64(h);
        let mut minus = x.clone();
        minus.data_mut()[i] -= E::from_f64(h);
        let df = (f(&plus) - f(&minus)) / (2.0 * h);
        grad.data_mut()[i] = E::from_f64(df);
    }
    grad
}

/// Norm-relative error between two gradient tensors.
pub fn rel_error<E: Element>(got: &Tensor<E>, want: &Tensor<E>) -> f64 {
    assert_eq!(got.shape(), want.shape());
    let mut diff2 = 0.0f64;
    let mut ref2 = 0.0f64;
    for (a, b) in got.data().iter().zip(want.data()) {
        let d = a.to_f64() - b.to_f64();
        diff2 += d * d;
        ref2 += b.to_f64() * b.to_f64();
    }
    (diff2.sqrt()) / ref2.sqrt().max(1e-12)
}

/// Pushes values away from zero so kinked activations stay differentiable at
/// the probe points.
pub fn away_from_zero<E: Element>(t: &mut Tensor<E>, margin: f64) {
    for v in t.data_mut() {
        let x = v.to_f64();
        if x.abs() < margin {
            *v = E::from_f64(if x >= 0.0 { x + margin } else { x - margin });
        }
    }
}

/// Separates values inside a tensor so max-pool argmax positions are stable
/// under finite-difference probing.
pub fn spread_ties<E: Element>(t: &mut Tensor<E>) {
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += E::from_f64((i % 23) as f64 * 1e-2);
    }
}

pub fn shape(dims: &[usize]) -> Shape {
    Shape::new(dims.to_vec())
}
