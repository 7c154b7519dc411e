//! Synthetic complex-valued phantoms and train/test datasets.

use ndarray::Array2;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ComplexImage;
use crate::scalar::Scalar;
use crate::tensorio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
    SmoothBlobs,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp_logan" => Ok(Self::SheppLogan),
            "random_ellipses" => Ok(Self::RandomEllipses),
            "smooth_blobs" => Ok(Self::SmoothBlobs),
            other => Err(Error::config(format!("unknown phantom kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Zero,
    SmoothRandom,
}

impl std::str::FromStr for PhaseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "smooth" | "smooth_random" => Ok(Self::SmoothRandom),
            other => Err(Error::config(format!("unknown phase kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub size: (usize, usize),
    pub seed: u64,
    pub phase: PhaseKind,
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, size: (usize, usize), seed: u64, phase: PhaseKind) -> Self {
        Self {
            kind,
            size,
            seed,
            phase,
        }
    }
}

struct Ellipse {
    intensity: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi_deg: f64,
}

/// Modified Shepp-Logan ellipse table (Toft's contrast-enhanced variant)
/// on the [-1,1]^2 square.
const SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse { intensity: 1.0, a: 0.69, b: 0.92, x0: 0.0, y0: 0.0, phi_deg: 0.0 },
    Ellipse { intensity: -0.8, a: 0.6624, b: 0.874, x0: 0.0, y0: -0.0184, phi_deg: 0.0 },
    Ellipse { intensity: -0.2, a: 0.11, b: 0.31, x0: 0.22, y0: 0.0, phi_deg: -18.0 },
    Ellipse { intensity: -0.2, a: 0.16, b: 0.41, x0: -0.22, y0: 0.0, phi_deg: 18.0 },
    Ellipse { intensity: 0.1, a: 0.21, b: 0.25, x0: 0.0, y0: 0.35, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: 0.1, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: -0.1, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.046, b: 0.023, x0: -0.08, y0: -0.605, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.023, b: 0.023, x0: 0.0, y0: -0.606, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.023, b: 0.046, x0: 0.06, y0: -0.605, phi_deg: 0.0 },
];

fn render_ellipses(h: usize, w: usize, ellipses: &[Ellipse]) -> Array2<f64> {
    let mut img = Array2::zeros((h, w));
    for e in ellipses {
        let phi = e.phi_deg.to_radians();
        let (sin_p, cos_p) = phi.sin_cos();
        for r in 0..h {
            // y runs bottom-up over [-1, 1]
            let y = 1.0 - 2.0 * (r as f64 + 0.5) / h as f64;
            for c in 0..w {
                let x = 2.0 * (c as f64 + 0.5) / w as f64 - 1.0;
                let xr = (x - e.x0) * cos_p + (y - e.y0) * sin_p;
                let yr = -(x - e.x0) * sin_p + (y - e.y0) * cos_p;
                if (xr / e.a).powi(2) + (yr / e.b).powi(2) <= 1.0 {
                    img[[r, c]] += e.intensity;
                }
            }
        }
    }
    img
}

fn normalize_unit_max(img: &mut Array2<f64>) {
    for v in img.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let max = img.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        img.mapv_inplace(|v| v / max);
    }
}

fn random_ellipses(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = rng.random_range(3..=8);
    let ellipses: Vec<Ellipse> = (0..n)
        .map(|_| Ellipse {
            intensity: rng.random_range(0.2..1.0),
            a: rng.random_range(0.08..0.5),
            b: rng.random_range(0.08..0.5),
            x0: rng.random_range(-0.6..0.6),
            y0: rng.random_range(-0.6..0.6),
            phi_deg: rng.random_range(0.0..180.0),
        })
        .collect();
    render_ellipses(h, w, &ellipses)
}

fn smooth_blobs(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = rng.random_range(4..=8);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.random_range(0.3..1.0),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(0.1..0.3),
            )
        })
        .collect();
    let mut img = Array2::zeros((h, w));
    for r in 0..h {
        let y = 1.0 - 2.0 * (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = 2.0 * (c as f64 + 0.5) / w as f64 - 1.0;
            let mut v = 0.0;
            for &(amp, bx, by, sigma) in &blobs {
                let d2 = (x - bx).powi(2) + (y - by).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            img[[r, c]] = v;
        }
    }
    img
}

/// Low-order polynomial phase over [-1,1]^2; coefficients are small so
/// the phase gradient stays below a cycle across the field of view.
fn smooth_phase(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let coef: Vec<f64> = (0..6).map(|_| rng.random_range(-0.8..0.8)).collect();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let y = 1.0 - 2.0 * (r as f64 + 0.5) / h as f64;
        let x = 2.0 * (c as f64 + 0.5) / w as f64 - 1.0;
        coef[0] + coef[1] * y + coef[2] * x + coef[3] * y * y + coef[4] * x * y + coef[5] * x * x
    })
}

pub fn make_phantom<T: Scalar>(spec: &PhantomSpec) -> Result<ComplexImage<T>> {
    let (h, w) = spec.size;
    if h < 8 || w < 8 {
        return Err(Error::config("phantom size must be at least 8x8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mag = match spec.kind {
        PhantomKind::SheppLogan => render_ellipses(h, w, &SHEPP_LOGAN),
        PhantomKind::RandomEllipses => random_ellipses(h, w, &mut rng),
        PhantomKind::SmoothBlobs => smooth_blobs(h, w, &mut rng),
    };
    normalize_unit_max(&mut mag);

    let data = match spec.phase {
        PhaseKind::Zero => mag.mapv(|m| Complex::new(T::from_f64_c(m), T::zero())),
        PhaseKind::SmoothRandom => {
            let phase = smooth_phase(h, w, &mut rng);
            Array2::from_shape_fn((h, w), |(r, c)| {
                let z = Complex::from_polar(mag[[r, c]], phase[[r, c]]);
                Complex::new(T::from_f64_c(z.re), T::from_f64_c(z.im))
            })
        }
    };
    ComplexImage::new(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetEntry {
    pub split: Split,
    pub index: usize,
    pub spec: PhantomSpec,
    pub file: String,
}

#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub train: Vec<ComplexImage<T>>,
    pub test: Vec<ComplexImage<T>>,
    pub manifest: Vec<DatasetEntry>,
}

/// Builds `n_train + n_test` phantoms from the template with disjoint
/// per-image seeds derived from `seed`.
pub fn build_dataset<T: Scalar>(
    n_train: usize,
    n_test: usize,
    template: &PhantomSpec,
    seed: u64,
) -> Result<Dataset<T>> {
    if n_train < 1 || n_test < 1 {
        return Err(Error::config("dataset needs at least one train and one test image"));
    }
    let mut manifest = Vec::with_capacity(n_train + n_test);
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    for i in 0..n_train + n_test {
        let split = if i < n_train { Split::Train } else { Split::Test };
        let index = if i < n_train { i } else { i - n_train };
        let spec = PhantomSpec {
            seed: seed.wrapping_add(i as u64),
            ..*template
        };
        let img = make_phantom::<T>(&spec)?;
        let file = match split {
            Split::Train => format!("train_{index:04}.ct1"),
            Split::Test => format!("test_{index:04}.ct1"),
        };
        manifest.push(DatasetEntry {
            split,
            index,
            spec,
            file,
        });
        match split {
            Split::Train => train.push(img),
            Split::Test => test.push(img),
        }
    }
    Ok(Dataset {
        train,
        test,
        manifest,
    })
}

impl<T: Scalar> Dataset<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(dir, format!("creating dataset dir: {e}")))?;
        for entry in &self.manifest {
            let img = match entry.split {
                Split::Train => &self.train[entry.index],
                Split::Test => &self.test[entry.index],
            };
            tensorio::save_complex_image(&dir.join(&entry.file), img)?;
        }
        let manifest_path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::io(&manifest_path, e.to_string()))?;
        std::fs::write(&manifest_path, text)
            .map_err(|e| Error::io(&manifest_path, e.to_string()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(&manifest_path, e.to_string()))?;
        let manifest: Vec<DatasetEntry> = serde_json::from_str(&text)
            .map_err(|e| Error::io(&manifest_path, format!("malformed manifest: {e}")))?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for entry in &manifest {
            let img = tensorio::load_complex_image(&dir.join(&entry.file))?;
            match entry.split {
                Split::Train => train.push(img),
                Split::Test => test.push(img),
            }
        }
        Ok(Self {
            train,
            test,
            manifest,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: PhantomKind, seed: u64) -> PhantomSpec {
        PhantomSpec::new(kind, (64, 64), seed, PhaseKind::Zero)
    }

    #[test]
    fn shepp_logan_zero_phase_is_real() {
        let img = make_phantom::<f64>(&spec(PhantomKind::SheppLogan, 0)).unwrap();
        assert!(img.data().iter().all(|z| z.im == 0.0));
        let max = img.max_abs();
        assert!((max - 1.0).abs() < 1e-9);
    }

    #[test]
    fn phantoms_are_deterministic() {
        let a = make_phantom::<f64>(&spec(PhantomKind::RandomEllipses, 1)).unwrap();
        let b = make_phantom::<f64>(&spec(PhantomKind::RandomEllipses, 1)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn normalization_hits_unit_max() {
        for seed in 0..100 {
            let img = make_phantom::<f64>(&spec(PhantomKind::RandomEllipses, seed)).unwrap();
            assert!(
                (img.max_abs() - 1.0).abs() <= 1e-6,
                "seed {seed}: max {}",
                img.max_abs()
            );
        }
    }

    #[test]
    fn smooth_phase_preserves_magnitude() {
        let s = PhantomSpec::new(PhantomKind::SmoothBlobs, (32, 32), 3, PhaseKind::SmoothRandom);
        let img = make_phantom::<f64>(&s).unwrap();
        let zero = PhantomSpec {
            phase: PhaseKind::Zero,
            ..s
        };
        let reference = make_phantom::<f64>(&zero).unwrap();
        for (a, b) in img.magnitude().iter().zip(reference.magnitude().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(img.data().iter().any(|z| z.im.abs() > 1e-6));
    }

    #[test]
    fn dataset_images_unique_and_deterministic() {
        let template = spec(PhantomKind::RandomEllipses, 0);
        let ds = build_dataset::<f64>(100, 10, &template, 0).unwrap();
        assert_eq!(ds.train.len(), 100);
        assert_eq!(ds.test.len(), 10);
        // pairwise distinctness via a cheap content fingerprint
        let mut prints: Vec<u64> = ds
            .train
            .iter()
            .chain(ds.test.iter())
            .map(|img| {
                img.data()
                    .iter()
                    .fold(0u64, |acc, z| {
                        acc.wrapping_mul(31).wrapping_add(z.re.to_bits())
                    })
            })
            .collect();
        prints.sort_unstable();
        prints.dedup();
        assert_eq!(prints.len(), 110, "duplicate images in dataset");

        let ds2 = build_dataset::<f64>(100, 10, &template, 0).unwrap();
        assert_eq!(ds.manifest, ds2.manifest);
    }

    #[test]
    fn empty_test_split_rejected() {
        let template = spec(PhantomKind::RandomEllipses, 0);
        assert!(build_dataset::<f64>(10, 0, &template, 0).is_err());
    }

    #[test]
    fn unknown_small_size_rejected() {
        let s = PhantomSpec::new(PhantomKind::SheppLogan, (4, 4), 0, PhaseKind::Zero);
        assert!(make_phantom::<f64>(&s).is_err());
    }
}
