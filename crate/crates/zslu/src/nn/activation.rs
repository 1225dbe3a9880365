//! Elementwise activations; `backward` takes the cached pre-activation.

use crate::mat::Mat;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    LeakyRelu(f64),
    Relu,
    Tanh,
}

impl Act {
    pub fn apply<F: Scalar>(&self, x: &Mat<F>) -> Mat<F> {
        match *self {
            Act::LeakyRelu(slope) => {
                let s = F::from_f64(slope);
                x.map(|v| if v > F::zero() { v } else { v * s })
            }
            Act::Relu => x.map(|v| if v > F::zero() { v } else { F::zero() }),
            Act::Tanh => x.map(|v| v.tanh()),
        }
    }

    pub fn backward<F: Scalar>(&self, x_pre: &Mat<F>, dy: &Mat<F>) -> Mat<F> {
        debug_assert_eq!(x_pre.rows(), dy.rows());
        debug_assert_eq!(x_pre.cols(), dy.cols());
        let mut dx = dy.clone();
        match *self {
            Act::LeakyRelu(slope) => {
                let s = F::from_f64(slope);
                for (d, &x) in dx.data_mut().iter_mut().zip(x_pre.data()) {
                    if x <= F::zero() {
                        *d *= s;
                    }
                }
            }
            Act::Relu => {
                for (d, &x) in dx.data_mut().iter_mut().zip(x_pre.data()) {
                    if x <= F::zero() {
                        *d = F::zero();
                    }
                }
            }
            Act::Tanh => {
                for (d, &x) in dx.data_mut().iter_mut().zip(x_pre.data()) {
                    let t = x.tanh();
                    *d *= F::one() - t * t;
                }
            }
        }
        dx
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
