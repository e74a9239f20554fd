use rand::Rng;
use rayon::prelude::*;

use super::{matmul, Activation, Real, Tensor};
use crate::error::{Error, Result};

/// Weights and geometry of one 2-D convolution (cross-correlation, no kernel flip).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `(Cout, Cin, Kh, Kw)`
    pub weight: Tensor<T>,
    /// `(Cout)`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

/// Output spatial extent `floor((size + 2p - d(k-1) - 1)/s) + 1`, or `None` when < 1.
pub fn conv_output_extent(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation * (kernel.max(1) - 1) + 1;
    let padded = size + 2 * padding;
    if stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl<T: Real> ConvParams<T> {
    /// Zero-initialized square-kernel convolution.
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        ConvParams {
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
            dilation,
        }
    }

    /// Kaiming-uniform (fan-in, ReLU gain) weights, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        Self::kaiming_for(Activation::Relu, out_channels, in_channels, kernel, stride, padding, dilation, rng)
    }

    /// Kaiming-uniform weights with weight variance `act.init_gain() / fan_in`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn kaiming_for<R: Rng + ?Sized>(
        act: Activation,
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(out_channels, in_channels, kernel, stride, padding, dilation);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (3.0 * act.init_gain() / fan_in).sqrt();
        for w in p.weight.data_mut() {
            *w = T::from_f64(rng.random_range(-bound..bound));
        }
        p
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Output `(H, W)` for an input of the given spatial size.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        Some((
            conv_output_extent(h, kh, self.stride, self.padding, self.dilation)?,
            conv_output_extent(w, kw, self.stride, self.padding, self.dilation)?,
        ))
    }

    fn geometry(&self, input: &Tensor<T>, op: &'static str) -> Result<Geometry> {
        let (n, c, h, w) = input.dims4()?;
        let ws = self.weight.shape();
        if ws.len() != 4 || self.bias.shape() != [ws[0]] {
            return Err(Error::invalid(
                op,
                format!(
                    "weight {:?} / bias {:?} are not a (Cout,Cin,Kh,Kw)/(Cout) pair",
                    ws,
                    self.bias.shape()
                ),
            ));
        }
        if c != ws[1] {
            return Err(Error::invalid(
                op,
                format!(
                    "input shape {:?} has {} channels but weight shape {:?} expects {}",
                    input.shape(),
                    c,
                    ws,
                    ws[1]
                ),
            ));
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid(op, "stride and dilation must be positive"));
        }
        let (ho, wo) = self.output_hw(h, w).ok_or_else(|| {
            Error::invalid(
                op,
                format!(
                    "input shape {:?} too small for weight shape {:?} (padding {}, dilation {}, stride {})",
                    input.shape(),
                    ws,
                    self.padding,
                    self.dilation,
                    self.stride
                ),
            )
        })?;
        Ok(Geometry {
            n,
            cin: c,
            h,
            w,
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            ho,
            wo,
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Range of output columns `ox` whose input column `ox*s - p + off` is inside `[0, len)`.
    fn valid_range(&self, off: usize, len: usize, out_len: usize) -> (usize, usize) {
        let p = self.padding as isize;
        let s = self.stride as isize;
        let off = off as isize;
        let len = len as isize;
        // ox*s - p + off >= 0  =>  ox >= ceil((p - off)/s)
        let lo = if p - off <= 0 { 0 } else { (p - off + s - 1) / s };
        // ox*s - p + off <= len-1  =>  ox <= floor((len - 1 + p - off)/s)
        let hi_num = len - 1 + p - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.clamp(0, out_len as isize) as usize;
        let hi = (hi + 1).clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo))
    }
}

fn im2col<T: Real>(g: &Geometry, x: &[T], col: &mut [T]) {
    let cols = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ky * g.dilation, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_range(kx * g.dilation, g.w, g.wo);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                dst.iter_mut().for_each(|v| *v = T::zero());
                if ox_lo == ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky * g.dilation - g.padding;
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx * g.dilation - g.padding;
                        dst_row[ox_lo..ox_hi]
                            .copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst_row[ox] = src_row[ox * g.stride + kx * g.dilation - g.padding];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &Geometry, col: &[T], dx: &mut [T]) {
    let cols = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ky * g.dilation, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid_range(kx * g.dilation, g.w, g.wo);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky * g.dilation - g.padding;
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        dst_row[ox * g.stride + kx * g.dilation - g.padding] += src_row[ox];
                    }
                }
            }
        }
    }
}

/// Forward 2-D cross-correlation with stride, zero padding and dilation.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = params.geometry(input, "conv2d_forward")?;
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * g.cols();
    let weight = params.weight.data();
    let bias = params.bias.data();
    let x = input.data();

    let mut out = vec![T::zero(); g.n * out_per];
    out.par_chunks_mut(out_per.max(1))
        .enumerate()
        .for_each(|(n, y)| {
            let xs = &x[n * in_per..(n + 1) * in_per];
            if g.is_pointwise() {
                matmul(g.cout, g.rows(), g.cols(), weight, false, xs, false, y, false);
            } else {
                let mut col = vec![T::zero(); g.rows() * g.cols()];
                im2col(&g, xs, &mut col);
                matmul(g.cout, g.rows(), g.cols(), weight, false, &col, false, y, false);
            }
            for (co, chunk) in y.chunks_mut(g.cols()).enumerate() {
                let b = bias[co];
                chunk.iter_mut().for_each(|v| *v += b);
            }
        });
    Tensor::from_vec(&[g.n, g.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv2d_forward`] with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = params.geometry(input, "conv2d_backward")?;
    let expected = [g.n, g.cout, g.ho, g.wo];
    if grad_out.shape() != expected {
        return Err(Error::shape("conv2d_backward", &expected, grad_out.shape()));
    }
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * g.cols();
    let wlen = params.weight.len();
    let weight = params.weight.data();
    let x = input.data();
    let dy = grad_out.data();

    let mut dx = vec![T::zero(); g.n * in_per];
    let partials: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(in_per.max(1))
        .enumerate()
        .map(|(n, dxs)| {
            let xs = &x[n * in_per..(n + 1) * in_per];
            let dys = &dy[n * out_per..(n + 1) * out_per];
            let mut dw = vec![T::zero(); wlen];
            let db: Vec<T> = dys
                .chunks(g.cols().max(1))
                .map(|c| c.iter().copied().sum())
                .collect();
            if g.is_pointwise() {
                // dW = dY * X^T ; dX = W^T * dY
                matmul(g.cout, g.cols(), g.rows(), dys, false, xs, true, &mut dw, false);
                matmul(g.rows(), g.cout, g.cols(), weight, true, dys, false, dxs, false);
            } else {
                let mut col = vec![T::zero(); g.rows() * g.cols()];
                im2col(&g, xs, &mut col);
                matmul(g.cout, g.cols(), g.rows(), dys, false, &col, true, &mut dw, false);
                matmul(g.rows(), g.cout, g.cols(), weight, true, dys, false, &mut col, false);
                col2im(&g, &col, dxs);
            }
            (dw, db)
        })
        .collect();

    let mut dw = vec![T::zero(); wlen];
    let mut db = vec![T::zero(); g.cout];
    for (pw, pb) in &partials {
        for (a, &b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, &b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), dx)?,
        weight: Tensor::from_vec(params.weight.shape(), dw)?,
        bias: Tensor::from_vec(&[g.cout], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_kernel() -> ConvParams<f64> {
        let mut p = ConvParams::zeros(1, 1, 3, 1, 1, 1);
        p.weight.data_mut().iter_mut().for_each(|v| *v = 1.0);
        p
    }

    #[test]
    fn counts_overlapping_ones() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &ones_kernel()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
    }

    #[test]
    fn pointwise_identity() {
        let x = Tensor::<f64>::from_f64(&[2, 1, 2, 3], &[1., -2., 3., 4., 5., 6., 0.5, 7., 8., 9., -1., 2.]).unwrap();
        let mut p = ConvParams::zeros(1, 1, 1, 1, 0, 1);
        p.weight.data_mut()[0] = 1.0;
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.data(), x.data());
        let g = conv2d_backward(&x, &p, &y).unwrap();
        assert_eq!(g.input.data(), y.data());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = Tensor::<f64>::full(&[1, 2, 5, 5], 0.3);
        let mut p = ConvParams::<f64>::zeros(3, 2, 3, 2, 1, 2);
        p.weight.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        let y = conv2d_forward(&x, &p).unwrap();
        let g = conv2d_backward(&x, &p, &Tensor::zeros(y.shape())).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_channel_mismatch_naming_both_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let p = ConvParams::<f32>::zeros(2, 2, 3, 1, 1, 1);
        let err = conv2d_forward(&x, &p).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 4, 4]") && err.contains("[2, 2, 3, 3]"), "{err}");
    }

    #[test]
    fn rejects_empty_output() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let p = ConvParams::<f32>::zeros(1, 1, 3, 1, 0, 3);
        assert!(conv2d_forward(&x, &p).is_err());
        assert_eq!(conv_output_extent(4, 3, 1, 0, 3), None);
        assert_eq!(conv_output_extent(16, 3, 1, 5, 5), Some(16));
        assert_eq!(conv_output_extent(256, 3, 2, 1, 1), Some(128));
    }

    #[test]
    fn bias_gradient_is_upstream_sum() {
        let x = Tensor::<f64>::full(&[2, 1, 4, 4], 1.0);
        let p = ConvParams::<f64>::zeros(2, 1, 3, 1, 1, 1);
        let dy = Tensor::from_vec(&[2, 2, 4, 4], (0..64).map(|i| i as f64).collect()).unwrap();
        let g = conv2d_backward(&x, &p, &dy).unwrap();
        let c0: f64 = (0..16).chain(32..48).map(|i| i as f64).sum();
        let c1: f64 = (16..32).chain(48..64).map(|i| i as f64).sum();
        assert_eq!(g.bias.data(), &[c0, c1]);
    }
}
