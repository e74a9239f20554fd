use rand::Rng;

use super::{join, ConvCache, ConvUnit, Module};
use crate::error::Result;
use crate::tensor::{concat_channels, split_channels, Activation, Real, Tensor};

/// 1x1 reduce, 3x3 expand, optional identity shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck<T> {
    pub cv1: ConvUnit<T>,
    pub cv2: ConvUnit<T>,
    pub shortcut: bool,
}

#[derive(Clone, Debug)]
pub struct BottleneckCache<T> {
    c1: ConvCache<T>,
    c2: ConvCache<T>,
}

impl<T: Real> Bottleneck<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, shortcut: bool, rng: &mut R) -> Self {
        Bottleneck {
            cv1: ConvUnit::new(channels, channels, 1, 1, Activation::Silu, rng),
            cv2: ConvUnit::new(channels, channels, 3, 1, Activation::Silu, rng),
            shortcut,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.cv2.forward(&self.cv1.forward(x)?)?;
        if self.shortcut {
            y.add(x)
        } else {
            Ok(y)
        }
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BottleneckCache<T>)> {
        let (a, c1) = self.cv1.forward_train(x)?;
        let (mut y, c2) = self.cv2.forward_train(&a)?;
        if self.shortcut {
            y.add_assign(x)?;
        }
        Ok((y, BottleneckCache { c1, c2 }))
    }

    pub fn backward(&mut self, cache: &BottleneckCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let da = self.cv2.backward(&cache.c2, grad_out)?;
        let mut dx = self.cv1.backward(&cache.c1, &da)?;
        if self.shortcut {
            dx.add_assign(grad_out)?;
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for Bottleneck<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        self.cv2.visit_params(&join(prefix, "cv2"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f);
    }
}

/// CSP block with three convolutions: two parallel 1x1 stems (one through a
/// bottleneck chain), channel concat, 1x1 fuse.
#[derive(Clone, Debug, PartialEq)]
pub struct C3<T> {
    pub cv1: ConvUnit<T>,
    pub cv2: ConvUnit<T>,
    pub cv3: ConvUnit<T>,
    pub m: Vec<Bottleneck<T>>,
    hidden: usize,
}

#[derive(Clone, Debug)]
pub struct C3Cache<T> {
    c1: ConvCache<T>,
    c2: ConvCache<T>,
    c3: ConvCache<T>,
    m: Vec<BottleneckCache<T>>,
}

impl<T: Real> C3<T> {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        depth: usize,
        shortcut: bool,
        rng: &mut R,
    ) -> Self {
        let hidden = (cout / 2).max(1);
        C3 {
            cv1: ConvUnit::new(cin, hidden, 1, 1, Activation::Silu, rng),
            cv2: ConvUnit::new(cin, hidden, 1, 1, Activation::Silu, rng),
            m: (0..depth).map(|_| Bottleneck::new(hidden, shortcut, rng)).collect(),
            cv3: ConvUnit::new(2 * hidden, cout, 1, 1, Activation::Silu, rng),
            hidden,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut a = self.cv1.forward(x)?;
        for b in &self.m {
            a = b.forward(&a)?;
        }
        let b = self.cv2.forward(x)?;
        self.cv3.forward(&concat_channels(&[&a, &b])?)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, C3Cache<T>)> {
        let (mut a, c1) = self.cv1.forward_train(x)?;
        let mut m = Vec::with_capacity(self.m.len());
        for b in &self.m {
            let (y, c) = b.forward_train(&a)?;
            a = y;
            m.push(c);
        }
        let (b, c2) = self.cv2.forward_train(x)?;
        let (y, c3) = self.cv3.forward_train(&concat_channels(&[&a, &b])?)?;
        Ok((y, C3Cache { c1, c2, c3, m }))
    }

    pub fn backward(&mut self, cache: &C3Cache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let dcat = self.cv3.backward(&cache.c3, grad_out)?;
        let mut parts = split_channels(&dcat, &[self.hidden, self.hidden])?.into_iter();
        let (mut da, db) = (parts.next().unwrap(), parts.next().unwrap());
        for (b, c) in self.m.iter_mut().zip(&cache.m).rev() {
            da = b.backward(c, &da)?;
        }
        let mut dx = self.cv1.backward(&cache.c1, &da)?;
        dx.add_assign(&self.cv2.backward(&cache.c2, &db)?)?;
        Ok(dx)
    }
}

impl<T: Real> Module<T> for C3<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        self.cv2.visit_params(&join(prefix, "cv2"), f);
        for (i, b) in self.m.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("m{i}")), f);
        }
        self.cv3.visit_params(&join(prefix, "cv3"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f);
        for (i, b) in self.m.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("m{i}")), f);
        }
        self.cv3.visit_params_mut(&join(prefix, "cv3"), f);
    }
}
