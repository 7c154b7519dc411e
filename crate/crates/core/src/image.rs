use ndarray::Array2;
use num_complex::Complex;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A complex-valued H×W image. All entries are finite; the reconstruction
/// pipeline assumes grids of at least 8×8 but the container itself only
/// requires a non-empty shape so that small fixtures stay usable.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage<T: Scalar> {
    data: Array2<Complex<T>>,
}

impl<T: Scalar> ComplexImage<T> {
    pub fn new(data: Array2<Complex<T>>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::invalid("image must be non-empty"));
        }
        if !data.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::invalid("image contains non-finite entries"));
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Array2::from_elem((h, w), Complex::new(T::zero(), T::zero())),
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl FnMut((usize, usize)) -> Complex<T>) -> Self {
        Self {
            data: Array2::from_shape_fn((h, w), f),
        }
    }

    /// i.i.d. standard complex Gaussian image (unit variance per
    /// real/imaginary component), drawn row-major.
    pub fn standard_normal<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Self {
        Self::from_fn(h, w, |_| {
            let re = T::standard_normal(rng);
            let im = T::standard_normal(rng);
            Complex::new(re, im)
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.data.nrows(), self.data.ncols())
    }

    pub fn data(&self) -> &Array2<Complex<T>> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<Complex<T>> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<Complex<T>> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn magnitude(&self) -> Array2<T> {
        self.data.mapv(|z| z.norm())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, z| m.max(z.norm()))
    }

    pub fn norm_l2(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, z| acc + z.norm_sqr())
            .sqrt()
    }

    /// Real part of the standard complex inner product `<self, other>`.
    pub fn real_dot(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (a, b)| acc + a.re * b.re + a.im * b.im)
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            data: self.data.mapv(|z| z * s),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            data: &self.data + &other.data,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            data: &self.data - &other.data,
        }
    }

    /// self + s * other, the workhorse of the sampling updates.
    pub fn axpy(&self, s: T, other: &Self) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            data: ndarray::Zip::from(&self.data)
                .and(&other.data)
                .map_collect(|a, b| a + b * s),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ComplexImage<U> {
        ComplexImage {
            data: self
                .data
                .mapv(|z| Complex::new(U::from_f64_c(z.re.to_f64_c()), U::from_f64_c(z.im.to_f64_c()))),
        }
    }
}
