//! Minimal neural-network plumbing: deterministic matmul kernels, dense
//! and convolution layers with hand-written backward passes, and Adam.
//!
//! Parallel loops always partition output elements and reduce in a fixed
//! order, so results are bit-identical regardless of thread count.

pub mod adam;
pub mod conv;
pub mod dense;
pub mod matmul;

use crate::scalar::Scalar;

pub fn relu<T: Scalar>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// dL/dx given the pre-activation input and dL/dy, in place on `dy`.
pub fn relu_backward<T: Scalar>(x: &[T], dy: &mut [T]) {
    for (g, &v) in dy.iter_mut().zip(x.iter()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Scalar>(x: &mut [T]) {
    for v in x.iter_mut() {
        *v = *v * sigmoid(*v);
    }
}

pub fn silu_backward<T: Scalar>(x: &[T], dy: &mut [T]) {
    for (g, &v) in dy.iter_mut().zip(x.iter()) {
        let s = sigmoid(v);
        *g = *g * (s * (T::one() + v * (T::one() - s)));
    }
}
