//! The acquisition operator `A = M F S` and its adjoint.
//!
//! `S` multiplies by per-coil sensitivities, `F` is the centered
//! orthonormal Fourier transform and `M` zeroes unsampled k-space.

use ndarray::{Array2, Array3};
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coils::CoilSensitivities;
use crate::error::{Error, Result};
use crate::fourier::{fft2c_arr, ifft2c_arr};
use crate::image::ComplexImage;
use crate::mask::SamplingMask;
use crate::scalar::Scalar;

/// Multi-coil k-space data, zero at every unsampled location.
#[derive(Debug, Clone)]
pub struct KSpaceMeasurement<T: Scalar> {
    pub data: Array3<Complex<T>>,
    pub mask: SamplingMask,
}

impl<T: Scalar> KSpaceMeasurement<T> {
    pub fn new(data: Array3<Complex<T>>, mask: SamplingMask) -> Result<Self> {
        let (h, w) = mask.shape();
        if data.shape()[1] != h || data.shape()[2] != w {
            return Err(Error::invalid(format!(
                "k-space shape {:?} does not match mask {h}x{w}",
                data.shape()
            )));
        }
        let zero = T::zero();
        for j in 0..data.shape()[0] {
            for ((r, c), &m) in mask.keep.indexed_iter() {
                if m == 0 {
                    let z = data[[j, r, c]];
                    if z.re != zero || z.im != zero {
                        return Err(Error::invalid(format!(
                            "unsampled k-space entry ({j},{r},{c}) is non-zero"
                        )));
                    }
                }
            }
        }
        Ok(Self { data, mask })
    }

    pub fn num_coils(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    pub fn norm_l2(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, z| acc + z.norm_sqr())
            .sqrt()
    }

    /// Real part of the standard complex inner product.
    pub fn real_dot(&self, other: &Self) -> T {
        debug_assert_eq!(self.data.shape(), other.data.shape());
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (a, b)| acc + a.re * b.re + a.im * b.im)
    }

    pub fn cast<U: Scalar>(&self) -> KSpaceMeasurement<U> {
        KSpaceMeasurement {
            data: self.data.mapv(|z| {
                Complex::new(U::from_f64_c(z.re.to_f64_c()), U::from_f64_c(z.im.to_f64_c()))
            }),
            mask: self.mask.clone(),
        }
    }
}

fn check_shapes<T: Scalar>(
    image_shape: (usize, usize),
    coils: &CoilSensitivities<T>,
    mask: &SamplingMask,
) -> Result<()> {
    if coils.image_shape() != image_shape {
        return Err(Error::invalid(format!(
            "coil maps {:?} do not match image {:?}",
            coils.image_shape(),
            image_shape
        )));
    }
    if mask.shape() != image_shape {
        return Err(Error::invalid(format!(
            "mask {:?} does not match image {:?}",
            mask.shape(),
            image_shape
        )));
    }
    Ok(())
}

/// `y_j = M .* F(S_j .* x)` for every coil `j`.
pub fn apply_forward<T: Scalar>(
    x: &ComplexImage<T>,
    coils: &CoilSensitivities<T>,
    mask: &SamplingMask,
) -> Result<KSpaceMeasurement<T>> {
    check_shapes(x.shape(), coils, mask)?;
    let (h, w) = x.shape();
    let j = coils.num_coils();
    let mut data = Array3::from_elem((j, h, w), Complex::new(T::zero(), T::zero()));
    for coil in 0..j {
        let weighted = Array2::from_shape_fn((h, w), |(r, c)| {
            x.data()[[r, c]] * coils.maps[[coil, r, c]]
        });
        let k = fft2c_arr(&weighted);
        for ((r, c), &m) in mask.keep.indexed_iter() {
            if m != 0 {
                data[[coil, r, c]] = k[[r, c]];
            }
        }
    }
    KSpaceMeasurement::new(data, mask.clone())
}

/// `x = sum_j conj(S_j) .* F^-1(M .* y_j)`, the exact adjoint of
/// [`apply_forward`] under the real inner product.
pub fn apply_adjoint<T: Scalar>(
    y: &KSpaceMeasurement<T>,
    coils: &CoilSensitivities<T>,
    mask: &SamplingMask,
) -> Result<ComplexImage<T>> {
    check_shapes(y.image_shape(), coils, mask)?;
    if y.num_coils() != coils.num_coils() {
        return Err(Error::invalid(format!(
            "k-space has {} coils, maps have {}",
            y.num_coils(),
            coils.num_coils()
        )));
    }
    let (h, w) = y.image_shape();
    let mut out = Array2::from_elem((h, w), Complex::new(T::zero(), T::zero()));
    for coil in 0..y.num_coils() {
        let mut masked = Array2::from_elem((h, w), Complex::new(T::zero(), T::zero()));
        for ((r, c), &m) in mask.keep.indexed_iter() {
            if m != 0 {
                masked[[r, c]] = y.data[[coil, r, c]];
            }
        }
        let img = ifft2c_arr(&masked);
        for r in 0..h {
            for c in 0..w {
                out[[r, c]] += coils.maps[[coil, r, c]].conj() * img[[r, c]];
            }
        }
    }
    ComplexImage::new(out)
}

/// Adds i.i.d. complex Gaussian noise (std `sigma` per real/imaginary
/// component) at sampled locations only. Deterministic given `seed`.
pub fn add_noise<T: Scalar>(
    y: &KSpaceMeasurement<T>,
    sigma: T,
    seed: u64,
) -> Result<KSpaceMeasurement<T>> {
    if sigma < T::zero() || !sigma.is_finite() {
        return Err(Error::config("noise sigma must be finite and non-negative"));
    }
    if sigma == T::zero() {
        return Ok(y.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = y.data.clone();
    for coil in 0..y.num_coils() {
        for ((r, c), &m) in y.mask.keep.indexed_iter() {
            if m != 0 {
                let re = T::standard_normal(&mut rng) * sigma;
                let im = T::standard_normal(&mut rng) * sigma;
                data[[coil, r, c]] += Complex::new(re, im);
            }
        }
    }
    KSpaceMeasurement::new(data, y.mask.clone())
}

/// `A^H y` with zero-filled unsampled entries; the standard naive
/// reconstruction baseline.
pub fn zero_filled_recon<T: Scalar>(
    y: &KSpaceMeasurement<T>,
    coils: &CoilSensitivities<T>,
) -> Result<ComplexImage<T>> {
    apply_adjoint(y, coils, &y.mask.clone())
}

/// L2 norm of the sampled-entry residual `M .* (A x - y)`.
pub fn kspace_residual_l2<T: Scalar>(
    x: &ComplexImage<T>,
    y: &KSpaceMeasurement<T>,
    coils: &CoilSensitivities<T>,
) -> Result<T> {
    let ax = apply_forward(x, coils, &y.mask)?;
    let mut acc = T::zero();
    for j in 0..y.num_coils() {
        for ((r, c), &m) in y.mask.keep.indexed_iter() {
            if m != 0 {
                acc += (ax.data[[j, r, c]] - y.data[[j, r, c]]).norm_sqr();
            }
        }
    }
    Ok(acc.sqrt())
}
