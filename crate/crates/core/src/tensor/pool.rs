use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Per-channel spatial mean, `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if h * w == 0 {
        return Err(Error::invalid("global_avg_pool", "empty spatial extent"));
    }
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let data = input
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

/// Spreads an `(N, C)` gradient uniformly back over `(N, C, H, W)`.
pub fn global_avg_pool_backward<T: Real>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::invalid("global_avg_pool_backward", "expected NCHW input shape"));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::shape("global_avg_pool_backward", &[n, c], grad_out.shape()));
    }
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut out = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::from_vec(input_shape, out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 0 {
        return Err(Error::invalid("upsample_nearest", "factor must be positive"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for (src, dst) in input.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for y in 0..ho {
            let srow = &src[(y / factor) * w..(y / factor + 1) * w];
            let drow = &mut dst[y * wo..(y + 1) * wo];
            for (x, v) in drow.iter_mut().enumerate() {
                *v = srow[x / factor];
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

/// Adjoint of [`upsample_nearest`]: sums each `factor x factor` block.
pub fn upsample_nearest_backward<T: Real>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, ho, wo) = grad_out.dims4()?;
    if factor == 0 || ho % factor != 0 || wo % factor != 0 {
        return Err(Error::invalid(
            "upsample_nearest_backward",
            format!("shape {:?} not divisible by factor {factor}", grad_out.shape()),
        ));
    }
    let (h, w) = (ho / factor, wo / factor);
    let mut out = vec![T::zero(); n * c * h * w];
    for (src, dst) in grad_out.data().chunks(ho * wo).zip(out.chunks_mut(h * w)) {
        for y in 0..ho {
            for x in 0..wo {
                dst[(y / factor) * w + x / factor] += src[y * wo + x];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

/// Non-overlapping average pooling with a `factor x factor` window and stride.
pub fn avg_pool2x<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(
            "avg_pool",
            format!("shape {:?} not divisible by factor {factor}", input.shape()),
        ));
    }
    let pooled = upsample_nearest_backward(input, factor)?;
    let inv = T::from_f64(1.0 / (factor * factor) as f64);
    debug_assert_eq!(pooled.shape(), &[n, c, h / factor, w / factor]);
    Ok(pooled.scale(inv))
}

pub fn avg_pool2x_backward<T: Real>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let inv = T::from_f64(1.0 / (factor * factor) as f64);
    Ok(upsample_nearest(grad_out, factor)?.scale(inv))
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape("concat_channels", first.shape(), p.shape()));
        }
        total_c += pc;
    }
    let mut out = Vec::with_capacity(n * total_c * h * w);
    for i in 0..n {
        for p in parts {
            out.extend_from_slice(p.sample(i));
        }
    }
    Tensor::from_vec(&[n, total_c, h, w], out)
}

/// Inverse of [`concat_channels`]: splits along channels into the given widths.
pub fn split_channels<T: Real>(input: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = input.dims4()?;
    if widths.iter().sum::<usize>() != c {
        return Err(Error::invalid(
            "split_channels",
            format!("widths {widths:?} do not sum to {c} channels"),
        ));
    }
    let mut outs: Vec<Vec<T>> = widths.iter().map(|&k| Vec::with_capacity(n * k * h * w)).collect();
    for i in 0..n {
        let s = input.sample(i);
        let mut off = 0;
        for (o, &k) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&s[off * h * w..(off + k) * h * w]);
            off += k;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &k)| Tensor::from_vec(&[n, k, h, w], d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_of_constant_and_ramp() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 5], 1.75);
        assert!(global_avg_pool(&x).unwrap().data().iter().all(|&v| v == 1.75));
        let r = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(global_avg_pool(&r).unwrap().data(), &[2.5]);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let up = upsample_nearest(&x, 2).unwrap();
        assert_eq!(up.shape(), &[1, 2, 4, 4]);
        assert_eq!(avg_pool2x(&up, 2).unwrap(), x);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::<f32>::full(&[2, 1, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[2, 3, 2, 2], 2.0);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 4, 2, 2]);
        let parts = split_channels(&cat, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
