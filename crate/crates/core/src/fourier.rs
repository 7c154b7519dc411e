//! Centered, orthonormal 2D Fourier transforms.
//!
//! `fft2c` places the DC component at the grid center (`H/2`, `W/2`) and
//! scales by `1/sqrt(H*W)` so the transform is unitary: Parseval holds
//! and white noise keeps its statistics across domains.

use ndarray::Array2;
use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::ComplexImage;
use crate::scalar::Scalar;

fn check_finite<T: Scalar>(a: &Array2<Complex<T>>, what: &str) -> Result<()> {
    if a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite entries")))
    }
}

/// Circular shift moving index `s` to index 0 along both axes.
fn roll2<T: Scalar>(a: &Array2<Complex<T>>, sy: usize, sx: usize) -> Array2<Complex<T>> {
    let (h, w) = (a.nrows(), a.ncols());
    Array2::from_shape_fn((h, w), |(r, c)| a[[(r + sy) % h, (c + sx) % w]])
}

fn fftshift<T: Scalar>(a: &Array2<Complex<T>>) -> Array2<Complex<T>> {
    let (h, w) = (a.nrows(), a.ncols());
    // move index 0 to H/2: equivalent to rolling by H - H/2
    roll2(a, h - h / 2, w - w / 2)
}

fn ifftshift<T: Scalar>(a: &Array2<Complex<T>>) -> Array2<Complex<T>> {
    let (h, w) = (a.nrows(), a.ncols());
    roll2(a, h / 2, w / 2)
}

fn fft2_inplace<T: Scalar>(a: &mut Array2<Complex<T>>, inverse: bool) {
    let (h, w) = (a.nrows(), a.ncols());
    let mut planner = FftPlanner::<T>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };

    let mut buf = vec![Complex::new(T::zero(), T::zero()); w.max(h)];
    for mut row in a.rows_mut() {
        for (b, v) in buf[..w].iter_mut().zip(row.iter()) {
            *b = *v;
        }
        row_fft.process(&mut buf[..w]);
        for (v, b) in row.iter_mut().zip(buf[..w].iter()) {
            *v = *b;
        }
    }
    for mut col in a.columns_mut() {
        for (b, v) in buf[..h].iter_mut().zip(col.iter()) {
            *b = *v;
        }
        col_fft.process(&mut buf[..h]);
        for (v, b) in col.iter_mut().zip(buf[..h].iter()) {
            *v = *b;
        }
    }
}

/// Forward transform on a raw array; used internally where the input is
/// already k-space-like and carries no image invariants.
pub fn fft2c_arr<T: Scalar>(x: &Array2<Complex<T>>) -> Array2<Complex<T>> {
    let n = T::from_f64_c((x.nrows() * x.ncols()) as f64);
    let mut k = ifftshift(x);
    fft2_inplace(&mut k, false);
    let scale = n.sqrt().recip();
    k.mapv_inplace(|z| z * scale);
    fftshift(&k)
}

pub fn ifft2c_arr<T: Scalar>(k: &Array2<Complex<T>>) -> Array2<Complex<T>> {
    let n = T::from_f64_c((k.nrows() * k.ncols()) as f64);
    let mut x = ifftshift(k);
    fft2_inplace(&mut x, true);
    let scale = n.sqrt().recip();
    x.mapv_inplace(|z| z * scale);
    fftshift(&x)
}

/// Centered orthonormal 2D DFT of an image.
pub fn fft2c<T: Scalar>(x: &ComplexImage<T>) -> Result<Array2<Complex<T>>> {
    check_finite(x.data(), "fft2c input")?;
    Ok(fft2c_arr(x.data()))
}

/// Inverse of [`fft2c`].
pub fn ifft2c<T: Scalar>(k: &Array2<Complex<T>>) -> Result<ComplexImage<T>> {
    check_finite(k, "ifft2c input")?;
    ComplexImage::new(ifft2c_arr(k))
}
