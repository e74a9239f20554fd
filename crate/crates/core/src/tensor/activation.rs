use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Elementwise nonlinearity applied after a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Sigmoid,
    /// `max(0, min(1, (x + 1) / 2))`
    HardSigmoid,
}

impl Activation {
    /// `1 / E[f(z)^2]` for `z ~ N(0, 1)`: the weight-variance factor that keeps
    /// the second moment of activations constant through a stack of layers.
    pub fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => 2.0,
            Activation::Silu => 2.810_761_124,
            Activation::Identity | Activation::Sigmoid | Activation::HardSigmoid => 1.0,
        }
    }
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn hard_sigmoid_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    ((x + T::one()) * half).max(T::zero()).min(T::one())
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x * sigmoid_scalar(x),
            Activation::Sigmoid => sigmoid_scalar(x),
            Activation::HardSigmoid => hard_sigmoid_scalar(x),
        }
    }

    /// Derivative at pre-activation `x`. At kinks relu'(0) = 0 and
    /// hard_sigmoid' is 1/2 only strictly inside (-1, 1).
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = sigmoid_scalar(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid_scalar(x);
                s * (T::one() - s)
            }
            Activation::HardSigmoid => {
                if x > -T::one() && x < T::one() {
                    T::from_f64(0.5)
                } else {
                    T::zero()
                }
            }
        }
    }
}

pub fn activate<T: Real>(x: &Tensor<T>, act: Activation) -> Tensor<T> {
    match act {
        Activation::Identity => x.clone(),
        _ => x.map(|v| act.apply(v)),
    }
}

/// Gradient through `act` given the pre-activation input and upstream gradient.
pub fn activate_backward<T: Real>(
    pre: &Tensor<T>,
    grad_out: &Tensor<T>,
    act: Activation,
) -> Result<Tensor<T>> {
    if pre.shape() != grad_out.shape() {
        return Err(Error::shape("activate_backward", pre.shape(), grad_out.shape()));
    }
    if act == Activation::Identity {
        return Ok(grad_out.clone());
    }
    pre.zip_map(grad_out, |x, g| g * act.derivative(x))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    activate(x, Activation::Relu)
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    activate(x, Activation::Silu)
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    activate(x, Activation::Sigmoid)
}

pub fn hard_sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    activate(x, Activation::HardSigmoid)
}
