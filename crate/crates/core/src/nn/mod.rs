//! Parameter containers and the small set of layers the detector is assembled from.

mod adam;
mod blocks;

pub use adam::{Adam, AdamConfig};
pub use blocks::{Bottleneck, BottleneckCache, C3Cache, C3};

use rand::Rng;

use crate::error::Result;
use crate::tensor::{
    activate, activate_backward, conv2d_backward, conv2d_forward, Activation, ConvParams, Real,
    Tensor,
};

/// Anything holding named, trainable tensors.
///
/// Visitation order is stable and defines the order used by optimizers and
/// checkpoints.
pub trait Module<T: Real> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, t| t.zero_grad());
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, _| names.push(name.to_string()));
        names
    }
}

/// `prefix.name`, or `name` when the prefix is empty.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real> Module<T> for ConvParams<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Convolution followed by an activation, the basic unit of every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit<T> {
    pub conv: ConvParams<T>,
    pub act: Activation,
}

/// Saved activations of one [`ConvUnit`] forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
}

impl<T: Real> ConvUnit<T> {
    /// Kaiming-initialized (gain matched to `act`) `k x k` unit with "same"-style padding `k/2`.
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        ConvUnit {
            conv: ConvParams::kaiming_for(act, cout, cin, kernel, stride, kernel / 2, 1, rng),
            act,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(activate(&conv2d_forward(x, &self.conv)?, self.act))
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let pre = conv2d_forward(x, &self.conv)?;
        let out = activate(&pre, self.act);
        Ok((
            out,
            ConvCache {
                input: x.clone(),
                pre,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let d_pre = activate_backward(&cache.pre, grad_out, self.act)?;
        let g = conv2d_backward(&cache.input, &self.conv, &d_pre)?;
        self.conv.weight.accumulate_grad(g.weight.data());
        self.conv.bias.accumulate_grad(g.bias.data());
        Ok(g.input)
    }
}

impl<T: Real> Module<T> for ConvUnit<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv.visit_params(prefix, f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_params_mut(prefix, f);
    }
}
