use super::{Real, Tensor};
use crate::error::{Error, Result};

#[inline]
fn corner<T: Real>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Bilinear read of `plane` (`h x w`, row-major) at fractional `(y, x)`, zero outside.
///
/// Returns the value and its partial derivatives with respect to `y` and `x`.
#[inline]
pub(crate) fn bilinear_at<T: Real>(plane: &[T], h: usize, w: usize, y: T, x: T) -> (T, T, T) {
    let yf = y.floor();
    let xf = x.floor();
    let ty = y - yf;
    let tx = x - xf;
    let (Some(y0), Some(x0)) = (yf.to_isize(), xf.to_isize()) else {
        return (T::zero(), T::zero(), T::zero());
    };
    let v00 = corner(plane, h, w, y0, x0);
    let v01 = corner(plane, h, w, y0, x0 + 1);
    let v10 = corner(plane, h, w, y0 + 1, x0);
    let v11 = corner(plane, h, w, y0 + 1, x0 + 1);
    let one = T::one();
    let top = v00 * (one - tx) + v01 * tx;
    let bottom = v10 * (one - tx) + v11 * tx;
    let value = top * (one - ty) + bottom * ty;
    let dy = bottom - top;
    let dx = (v01 - v00) * (one - ty) + (v11 - v10) * ty;
    (value, dy, dx)
}

/// Adjoint of [`bilinear_at`] with respect to the plane values.
#[inline]
pub(crate) fn bilinear_scatter<T: Real>(dplane: &mut [T], h: usize, w: usize, y: T, x: T, g: T) {
    let yf = y.floor();
    let xf = x.floor();
    let ty = y - yf;
    let tx = x - xf;
    let (Some(y0), Some(x0)) = (yf.to_isize(), xf.to_isize()) else {
        return;
    };
    let one = T::one();
    let taps = [
        (y0, x0, (one - ty) * (one - tx)),
        (y0, x0 + 1, (one - ty) * tx),
        (y0 + 1, x0, ty * (one - tx)),
        (y0 + 1, x0 + 1, ty * tx),
    ];
    for (yy, xx, wgt) in taps {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            dplane[yy as usize * w + xx as usize] += g * wgt;
        }
    }
}

fn check_points<T: Real>(input: &Tensor<T>, points: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    let (n, _, _, _) = input.dims4()?;
    match points.shape() {
        [pn, ho, wo, 2] if *pn == n => Ok((*ho, *wo)),
        other => Err(Error::invalid(
            op,
            format!(
                "points shape {other:?} must be (N, Ho, Wo, 2) with N matching input shape {:?}",
                input.shape()
            ),
        )),
    }
}

/// Samples every channel of `input` (NCHW) at per-location fractional `(y, x)` points.
///
/// `points` has shape `(N, Ho, Wo, 2)`; the result is `(N, C, Ho, Wo)`.
pub fn bilinear_sample<T: Real>(input: &Tensor<T>, points: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (ho, wo) = check_points(input, points, "bilinear_sample")?;
    let mut out = vec![T::zero(); n * c * ho * wo];
    let pts = points.data();
    for b in 0..n {
        let x = input.sample(b);
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[(b * c + ch) * ho * wo..(b * c + ch + 1) * ho * wo];
            for (p, v) in dst.iter_mut().enumerate() {
                let base = (b * ho * wo + p) * 2;
                *v = bilinear_at(plane, h, w, pts[base], pts[base + 1]).0;
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

/// Gradients of [`bilinear_sample`] with respect to input values and point coordinates.
#[derive(Clone, Debug)]
pub struct SampleGrads<T> {
    pub input: Tensor<T>,
    pub points: Tensor<T>,
}

pub fn bilinear_sample_backward<T: Real>(
    input: &Tensor<T>,
    points: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<SampleGrads<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (ho, wo) = check_points(input, points, "bilinear_sample_backward")?;
    if grad_out.shape() != [n, c, ho, wo] {
        return Err(Error::shape("bilinear_sample_backward", &[n, c, ho, wo], grad_out.shape()));
    }
    let pts = points.data();
    let g = grad_out.data();
    let mut dx = vec![T::zero(); input.len()];
    let mut dp = vec![T::zero(); points.len()];
    for b in 0..n {
        let x = input.sample(b);
        for ch in 0..c {
            let off = (b * c + ch) * h * w;
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for p in 0..ho * wo {
                let up = g[(b * c + ch) * ho * wo + p];
                let base = (b * ho * wo + p) * 2;
                let (py, px) = (pts[base], pts[base + 1]);
                let (_, dvy, dvx) = bilinear_at(plane, h, w, py, px);
                dp[base] += up * dvy;
                dp[base + 1] += up * dvx;
                bilinear_scatter(&mut dx[off..off + h * w], h, w, py, px, up);
            }
        }
    }
    Ok(SampleGrads {
        input: Tensor::from_vec(input.shape(), dx)?,
        points: Tensor::from_vec(points.shape(), dp)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch() -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, 2, 2], &[0., 1., 2., 3.]).unwrap()
    }

    #[test]
    fn integer_points_read_stored_values() {
        let pts = Tensor::from_f64(&[1, 2, 2, 2], &[0., 0., 0., 1., 1., 0., 1., 1.]).unwrap();
        assert_eq!(bilinear_sample(&patch(), &pts).unwrap().data(), &[0., 1., 2., 3.]);
    }

    #[test]
    fn center_is_corner_average() {
        let pts = Tensor::from_f64(&[1, 1, 1, 2], &[0.5, 0.5]).unwrap();
        assert_eq!(bilinear_sample(&patch(), &pts).unwrap().data(), &[1.5]);
    }

    #[test]
    fn outside_reads_zero_padding() {
        let pts = Tensor::from_f64(&[1, 1, 3, 2], &[-1.0, -1.0, 5.0, 0.0, -0.5, 0.0]).unwrap();
        let v = bilinear_sample(&patch(), &pts).unwrap();
        assert_eq!(v.data()[0], 0.0);
        assert_eq!(v.data()[1], 0.0);
        assert_eq!(v.data()[2], 0.0);
    }

    #[test]
    fn non_finite_points_read_zero() {
        let (v, dy, dx) = bilinear_at(patch().data(), 2, 2, f64::NAN, 0.0);
        assert_eq!((v, dy, dx), (0.0, 0.0, 0.0));
    }
}
