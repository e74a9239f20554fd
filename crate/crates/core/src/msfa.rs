//! Multi-scale feature aggregation: parallel dilated 3x3 branches, each refined
//! by a 1x1 convolution, summed.
//!
//! `out = P1(B1(x)) + P2(B2(x)) + P3(B3(x))` where `Bi` is a 3x3 convolution
//! with dilation `di` (padding `di`, so spatial size is preserved) followed by
//! SiLU, and `Pi` is a linear 1x1 convolution to the shared output width.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, ConvCache, ConvUnit, Module};
use crate::tensor::{Activation, ConvParams, Real, Tensor};

pub const DEFAULT_DILATIONS: [usize; 3] = [1, 3, 5];

#[derive(Clone, Debug, PartialEq)]
pub struct MsfaBlock<T> {
    pub branch_convs: Vec<ConvUnit<T>>,
    pub point_convs: Vec<ConvUnit<T>>,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct MsfaCache<T> {
    branches: Vec<(ConvCache<T>, ConvCache<T>)>,
}

impl<T: Real> MsfaBlock<T> {
    /// Kaiming-initialized block with one branch per dilation rate.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        mid_channels: usize,
        out_channels: usize,
        dilations: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || mid_channels == 0 || out_channels == 0 {
            return Err(Error::invalid("msfa", "channel counts must be positive"));
        }
        if dilations.is_empty() || dilations.contains(&0) {
            return Err(Error::invalid("msfa", format!("invalid dilations {dilations:?}")));
        }
        let mut branch_convs = Vec::new();
        let mut point_convs = Vec::new();
        for &d in dilations {
            branch_convs.push(ConvUnit {
                conv: ConvParams::kaiming_for(Activation::Silu, mid_channels, in_channels, 3, 1, d, d, rng),
                act: Activation::Silu,
            });
            point_convs.push(ConvUnit {
                conv: ConvParams::kaiming_for(Activation::Identity, out_channels, mid_channels, 1, 1, 0, 1, rng),
                act: Activation::Identity,
            });
        }
        Ok(MsfaBlock {
            branch_convs,
            point_convs,
            in_channels,
            mid_channels,
            out_channels,
        })
    }

    /// Rates 1/3/5 with the bottleneck width `in_channels / 2`.
    pub fn with_defaults<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Result<Self> {
        Self::new(in_channels, (in_channels / 2).max(1), out_channels, &DEFAULT_DILATIONS, rng)
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.branch_convs.iter().map(|b| b.conv.dilation).collect()
    }

    fn check_input(&self, x: &Tensor<T>, op: &'static str) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::invalid(
                op,
                format!(
                    "input shape {:?} has {c} channels, block expects {}",
                    x.shape(),
                    self.in_channels
                ),
            ));
        }
        Ok(())
    }

    /// Output of a single branch `P_i(B_i(x))`.
    pub fn branch_forward(&self, branch: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x, "msfa_branch")?;
        self.point_convs[branch].forward(&self.branch_convs[branch].forward(x)?)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x, "msfa_forward")?;
        let mut acc: Option<Tensor<T>> = None;
        for b in 0..self.branch_convs.len() {
            let y = self.point_convs[b].forward(&self.branch_convs[b].forward(x)?)?;
            match acc.as_mut() {
                None => acc = Some(y),
                Some(a) => a.add_assign(&y)?,
            }
        }
        Ok(acc.expect("at least one branch"))
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MsfaCache<T>)> {
        self.check_input(x, "msfa_forward")?;
        let mut acc: Option<Tensor<T>> = None;
        let mut branches = Vec::with_capacity(self.branch_convs.len());
        for (bc, pc) in self.branch_convs.iter().zip(&self.point_convs) {
            let (h, c1) = bc.forward_train(x)?;
            let (y, c2) = pc.forward_train(&h)?;
            branches.push((c1, c2));
            match acc.as_mut() {
                None => acc = Some(y),
                Some(a) => a.add_assign(&y)?,
            }
        }
        Ok((acc.expect("at least one branch"), MsfaCache { branches }))
    }

    /// Accumulates parameter gradients; the input gradient is the sum over branches.
    pub fn backward(&mut self, cache: &MsfaCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut dx: Option<Tensor<T>> = None;
        for ((bc, pc), (c1, c2)) in self
            .branch_convs
            .iter_mut()
            .zip(self.point_convs.iter_mut())
            .zip(&cache.branches)
        {
            let dh = pc.backward(c2, grad_out)?;
            let d = bc.backward(c1, &dh)?;
            match dx.as_mut() {
                None => dx = Some(d),
                Some(a) => a.add_assign(&d)?,
            }
        }
        Ok(dx.expect("at least one branch"))
    }
}

impl<T: Real> Module<T> for MsfaBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, (b, p)) in self.branch_convs.iter().zip(&self.point_convs).enumerate() {
            b.visit_params(&join(prefix, &format!("branch{i}")), f);
            p.visit_params(&join(prefix, &format!("point{i}")), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, (b, p)) in self
            .branch_convs
            .iter_mut()
            .zip(self.point_convs.iter_mut())
            .enumerate()
        {
            b.visit_params_mut(&join(prefix, &format!("branch{i}")), f);
            p.visit_params_mut(&join(prefix, &format!("point{i}")), f);
        }
    }
}

pub fn msfa_forward<T: Real>(input: &Tensor<T>, block: &MsfaBlock<T>) -> Result<Tensor<T>> {
    block.forward(input)
}

/// Input gradient and named parameter gradients of [`msfa_forward`].
pub fn msfa_backward<T: Real>(
    input: &Tensor<T>,
    block: &MsfaBlock<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<(String, Tensor<T>)>)> {
    let (y, cache) = block.forward_train(input)?;
    if y.shape() != grad_out.shape() {
        return Err(Error::shape("msfa_backward", y.shape(), grad_out.shape()));
    }
    let mut work = block.clone();
    work.visit_params_mut("", &mut |_, t| t.clear_grad());
    let dx = work.backward(&cache, grad_out)?;
    let mut grads = Vec::new();
    work.visit_params("", &mut |name, t| {
        let g = t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); t.len()]);
        grads.push((
            name.to_string(),
            Tensor::from_vec(t.shape(), g).expect("gradient matches parameter shape"),
        ));
    });
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dirac_block(c: usize) -> MsfaBlock<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = MsfaBlock::<f64>::new(c, c, c, &DEFAULT_DILATIONS, &mut rng).unwrap();
        for (bc, pc) in b.branch_convs.iter_mut().zip(b.point_convs.iter_mut()) {
            bc.act = Activation::Identity;
            let w = bc.conv.weight.data_mut();
            w.iter_mut().for_each(|v| *v = 0.0);
            for ch in 0..c {
                w[(ch * c + ch) * 9 + 4] = 1.0;
            }
            let p = pc.conv.weight.data_mut();
            p.iter_mut().for_each(|v| *v = 0.0);
            for ch in 0..c {
                p[ch * c + ch] = 1.0;
            }
        }
        b
    }

    #[test]
    fn dirac_branches_triple_the_input() {
        let b = dirac_block(3);
        let x = Tensor::from_vec(&[1, 3, 5, 5], (0..75).map(|i| (i as f64).sin()).collect()).unwrap();
        let y = b.forward(&x).unwrap();
        let expected = x.scale(3.0);
        assert!(y.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = MsfaBlock::<f64>::with_defaults(4, 6, &mut rng).unwrap();
        let y = b.forward(&Tensor::zeros(&[2, 4, 7, 7])).unwrap();
        assert_eq!(y.shape(), &[2, 6, 7, 7]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = MsfaBlock::<f32>::with_defaults(4, 4, &mut rng).unwrap();
        assert!(b.forward(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
        let (y, _) = b.forward_train(&Tensor::zeros(&[1, 4, 8, 8])).unwrap();
        assert!(msfa_backward(&Tensor::zeros(&[1, 4, 8, 8]), &b, &Tensor::zeros(&[1, 4, 4, 4])).is_err());
        assert_eq!(y.shape(), &[1, 4, 8, 8]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = MsfaBlock::<f64>::with_defaults(4, 4, &mut rng).unwrap();
        let x = Tensor::full(&[1, 4, 6, 6], 0.5);
        let (dx, grads) = msfa_backward(&x, &b, &Tensor::zeros(&[1, 4, 6, 6])).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(grads.iter().all(|(_, g)| g.data().iter().all(|&v| v == 0.0)));
        assert_eq!(grads.len(), 12);
    }
}
