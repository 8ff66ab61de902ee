//! Overflow-safe scalar activations shared by forward and backward passes.

use super::real::Real;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn mish<T: Real>(x: T) -> T {
    x * softplus(x).tanh()
}

#[inline]
pub fn mish_grad<T: Real>(x: T) -> T {
    let t = softplus(x).tanh();
    t + x * (T::one() - t * t) * sigmoid(x)
}
