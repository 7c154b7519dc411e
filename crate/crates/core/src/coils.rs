//! Simulated receive-coil sensitivity maps.

use ndarray::{Array2, Array3};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// J complex sensitivity maps with sum-of-squares normalization on the
/// support: `sum_j |S_j(p)|^2 = 1` wherever `support == 1`.
#[derive(Debug, Clone)]
pub struct CoilSensitivities<T: Scalar> {
    pub maps: Array3<Complex<T>>,
    pub support: Array2<u8>,
}

impl<T: Scalar> CoilSensitivities<T> {
    pub fn num_coils(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.maps.shape()[1], self.maps.shape()[2])
    }

    /// Identity maps for the single-channel convention.
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            maps: Array3::from_elem((1, h, w), Complex::new(T::one(), T::zero())),
            support: Array2::from_elem((h, w), 1),
        }
    }

    pub fn sos(&self) -> Array2<T> {
        let (h, w) = self.image_shape();
        let mut out = Array2::from_elem((h, w), T::zero());
        for j in 0..self.num_coils() {
            for r in 0..h {
                for c in 0..w {
                    out[[r, c]] += self.maps[[j, r, c]].norm_sqr();
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let sos = self.sos();
        let tol = T::from_f64_c(1e-6);
        for ((r, c), &s) in self.support.indexed_iter() {
            if s != 0 && (sos[[r, c]] - T::one()).abs() > tol {
                return Err(Error::invalid(format!(
                    "SOS normalization violated at ({r},{c}): {}",
                    sos[[r, c]]
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> CoilSensitivities<U> {
        CoilSensitivities {
            maps: self.maps.mapv(|z| {
                Complex::new(U::from_f64_c(z.re.to_f64_c()), U::from_f64_c(z.im.to_f64_c()))
            }),
            support: self.support.clone(),
        }
    }
}

/// Gaussian-lobe coil magnitudes at equally spaced angles around the
/// field of view, each with a smooth linear phase, then SOS-normalized.
pub fn simulate_coils<T: Scalar>(
    j: usize,
    shape: (usize, usize),
    seed: u64,
) -> Result<CoilSensitivities<T>> {
    if j < 1 {
        return Err(Error::config("coil count must be at least 1"));
    }
    let (h, w) = shape;
    if h < 8 || w < 8 {
        return Err(Error::config("coil maps need a grid of at least 8x8"));
    }
    if j == 1 {
        return Ok(CoilSensitivities::identity(h, w));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let ring = 0.55 * h.min(w) as f64;
    let sigma = 0.55 * h.min(w) as f64;
    let angle0: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    let mut maps = Array3::from_elem((j, h, w), Complex::new(0.0f64, 0.0));
    for coil in 0..j {
        let theta = angle0 + std::f64::consts::TAU * coil as f64 / j as f64;
        let (ly, lx) = (cy + ring * theta.sin(), cx + ring * theta.cos());
        // gentle linear phase, at most one cycle across the FOV
        let slope_y: f64 = rng.random_range(-1.0..1.0);
        let slope_x: f64 = rng.random_range(-1.0..1.0);
        let phase0: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 - ly).powi(2) + (c as f64 - lx).powi(2);
                let mag = (-d2 / (2.0 * sigma * sigma)).exp();
                let ph = phase0
                    + std::f64::consts::TAU
                        * (slope_y * r as f64 / h as f64 + slope_x * c as f64 / w as f64);
                maps[[coil, r, c]] = Complex::from_polar(mag, ph);
            }
        }
    }

    // normalize so the sum of squared magnitudes is exactly 1 on support
    let mut support = Array2::from_elem((h, w), 0u8);
    let mut sos = Array2::from_elem((h, w), 0.0f64);
    for coil in 0..j {
        for r in 0..h {
            for c in 0..w {
                sos[[r, c]] += maps[[coil, r, c]].norm_sqr();
            }
        }
    }
    let max_sos = sos.iter().cloned().fold(0.0f64, f64::max);
    for r in 0..h {
        for c in 0..w {
            if sos[[r, c]] > 1e-6 * max_sos {
                support[[r, c]] = 1;
                let scale = sos[[r, c]].sqrt().recip();
                for coil in 0..j {
                    maps[[coil, r, c]] *= scale;
                }
            } else {
                for coil in 0..j {
                    maps[[coil, r, c]] = Complex::new(0.0, 0.0);
                }
            }
        }
    }

    let maps = maps.mapv(|z| Complex::new(T::from_f64_c(z.re), T::from_f64_c(z.im)));
    let coils = CoilSensitivities { maps, support };
    coils.validate()?;
    Ok(coils)
}
