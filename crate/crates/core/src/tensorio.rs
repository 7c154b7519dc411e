//! The "ct1" tensor container: a JSON header describing shape/dtype plus
//! a sibling raw file of little-endian values at `<header>.raw`.
//!
//! Complex entries are stored interleaved (real, imaginary) as 32-bit
//! floats; masks are stored as bytes. Round trips are bit-exact.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use num_complex::Complex;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::coils::CoilSensitivities;
use crate::error::{Error, Result};
use crate::forward::KSpaceMeasurement;
use crate::image::ComplexImage;
use crate::mask::{MaskPattern, SamplingMask};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "c8")]
    Complex64,
    #[serde(rename = "f4")]
    Float32,
    #[serde(rename = "u1")]
    Uint8,
}

impl Dtype {
    fn bytes_per_entry(self) -> usize {
        match self {
            Dtype::Complex64 => 8,
            Dtype::Float32 => 4,
            Dtype::Uint8 => 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Ct1Header {
    shape: Vec<usize>,
    dtype: Dtype,
    order: String,
}

/// A loaded tensor in one of the three supported dtypes.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Complex(ArrayD<Complex<f32>>),
    Real(ArrayD<f32>),
    Byte(ArrayD<u8>),
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::Complex(a) => a.shape(),
            Tensor::Real(a) => a.shape(),
            Tensor::Byte(a) => a.shape(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            Tensor::Complex(_) => Dtype::Complex64,
            Tensor::Real(_) => Dtype::Float32,
            Tensor::Byte(_) => Dtype::Uint8,
        }
    }
}

fn raw_path(header: &Path) -> PathBuf {
    let mut s = header.as_os_str().to_owned();
    s.push(".raw");
    PathBuf::from(s)
}

pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent, format!("creating directory: {e}")))?;
        }
    }
    let header = Ct1Header {
        shape: tensor.shape().to_vec(),
        dtype: tensor.dtype(),
        order: "row-major".to_string(),
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e.to_string()))?;

    let mut bytes: Vec<u8> = Vec::new();
    match tensor {
        Tensor::Complex(a) => {
            bytes.reserve(a.len() * 8);
            for z in a.iter() {
                bytes.extend_from_slice(&z.re.to_le_bytes());
                bytes.extend_from_slice(&z.im.to_le_bytes());
            }
        }
        Tensor::Real(a) => {
            bytes.reserve(a.len() * 4);
            for v in a.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Tensor::Byte(a) => bytes.extend(a.iter()),
    }
    let rp = raw_path(path);
    std::fs::write(&rp, bytes).map_err(|e| Error::io(&rp, e.to_string()))?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path, format!("reading header: {e}")))?;
    let header: Ct1Header = serde_json::from_str(&text)
        .map_err(|e| Error::io(path, format!("malformed header: {e}")))?;
    if header.order != "row-major" {
        return Err(Error::io(path, format!("unsupported order `{}`", header.order)));
    }
    let n: usize = header.shape.iter().product();
    let rp = raw_path(path);
    let bytes = std::fs::read(&rp).map_err(|e| Error::io(&rp, format!("reading raw data: {e}")))?;
    let expected = n * header.dtype.bytes_per_entry();
    if bytes.len() != expected {
        return Err(Error::io(
            &rp,
            format!("raw file holds {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let shape = IxDyn(&header.shape);
    let tensor = match header.dtype {
        Dtype::Complex64 => {
            let data: Vec<Complex<f32>> = bytes
                .chunks_exact(8)
                .map(|c| {
                    Complex::new(
                        f32::from_le_bytes(c[0..4].try_into().unwrap()),
                        f32::from_le_bytes(c[4..8].try_into().unwrap()),
                    )
                })
                .collect();
            Tensor::Complex(ArrayD::from_shape_vec(shape, data).expect("shape checked"))
        }
        Dtype::Float32 => {
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::Real(ArrayD::from_shape_vec(shape, data).expect("shape checked"))
        }
        Dtype::Uint8 => Tensor::Byte(ArrayD::from_shape_vec(shape, bytes).expect("shape checked")),
    };
    Ok(tensor)
}

pub fn save_complex_image<T: Scalar>(path: &Path, img: &ComplexImage<T>) -> Result<()> {
    let data = img
        .data()
        .mapv(|z| Complex::new(z.re.to_f64_c() as f32, z.im.to_f64_c() as f32))
        .into_dyn();
    save_tensor(path, &Tensor::Complex(data))
}

pub fn load_complex_image<T: Scalar>(path: &Path) -> Result<ComplexImage<T>> {
    match load_tensor(path)? {
        Tensor::Complex(a) if a.ndim() == 2 => {
            let a: Array2<Complex<f32>> = a.into_dimensionality().expect("2d checked");
            ComplexImage::new(a.mapv(|z| {
                Complex::new(T::from_f64_c(z.re as f64), T::from_f64_c(z.im as f64))
            }))
        }
        t => Err(Error::io(
            path,
            format!("expected a 2D complex image, found {:?} {:?}", t.shape(), kind_name(&t)),
        )),
    }
}

fn kind_name(t: &Tensor) -> &'static str {
    match t {
        Tensor::Complex(_) => "c8",
        Tensor::Real(_) => "f4",
        Tensor::Byte(_) => "u1",
    }
}

/// Masks carry their generation parameters in a sidecar JSON block so a
/// round trip restores the full value, not just the keep array.
#[derive(Debug, Serialize, Deserialize)]
struct MaskMeta {
    pattern: MaskPattern,
    r: f64,
    acs: usize,
    seed: u64,
}

pub fn save_mask(path: &Path, mask: &SamplingMask) -> Result<()> {
    save_tensor(path, &Tensor::Byte(mask.keep.clone().into_dyn()))?;
    let meta = MaskMeta {
        pattern: mask.pattern,
        r: mask.r,
        acs: mask.acs,
        seed: mask.seed,
    };
    let mp = meta_path(path);
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e.to_string()))?;
    Ok(())
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn load_mask(path: &Path) -> Result<SamplingMask> {
    let keep = match load_tensor(path)? {
        Tensor::Byte(a) if a.ndim() == 2 => {
            let a: Array2<u8> = a.into_dimensionality().expect("2d checked");
            if !a.iter().all(|&v| v <= 1) {
                return Err(Error::io(path, "mask entries must be 0 or 1"));
            }
            a
        }
        _ => return Err(Error::io(path, "expected a 2D u1 mask")),
    };
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e.to_string()))?;
    let meta: MaskMeta =
        serde_json::from_str(&text).map_err(|e| Error::io(&mp, format!("malformed meta: {e}")))?;
    let mask = SamplingMask {
        keep,
        pattern: meta.pattern,
        r: meta.r,
        acs: meta.acs,
        seed: meta.seed,
    };
    mask.validate()?;
    Ok(mask)
}

pub fn save_coils<T: Scalar>(path: &Path, coils: &CoilSensitivities<T>) -> Result<()> {
    let maps = coils
        .maps
        .mapv(|z| Complex::new(z.re.to_f64_c() as f32, z.im.to_f64_c() as f32))
        .into_dyn();
    save_tensor(path, &Tensor::Complex(maps))?;
    let sp = support_path(path);
    save_tensor(&sp, &Tensor::Byte(coils.support.clone().into_dyn()))
}

fn support_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".support");
    PathBuf::from(s)
}

pub fn load_coils<T: Scalar>(path: &Path) -> Result<CoilSensitivities<T>> {
    let maps = match load_tensor(path)? {
        Tensor::Complex(a) if a.ndim() == 3 => {
            let a: Array3<Complex<f32>> = a.into_dimensionality().expect("3d checked");
            a.mapv(|z| Complex::new(T::from_f64_c(z.re as f64), T::from_f64_c(z.im as f64)))
        }
        _ => return Err(Error::io(path, "expected 3D complex coil maps")),
    };
    let support = match load_tensor(&support_path(path))? {
        Tensor::Byte(a) if a.ndim() == 2 => a.into_dimensionality().expect("2d checked"),
        _ => return Err(Error::io(path, "expected 2D u1 coil support")),
    };
    let coils = CoilSensitivities { maps, support };
    coils.validate()?;
    Ok(coils)
}

pub fn save_kspace<T: Scalar>(path: &Path, y: &KSpaceMeasurement<T>) -> Result<()> {
    let data = y
        .data
        .mapv(|z| Complex::new(z.re.to_f64_c() as f32, z.im.to_f64_c() as f32))
        .into_dyn();
    save_tensor(path, &Tensor::Complex(data))
}

/// K-space data is validated against the mask on load: entries outside
/// the mask must be exactly zero.
pub fn load_kspace<T: Scalar>(path: &Path, mask: &SamplingMask) -> Result<KSpaceMeasurement<T>> {
    let data = match load_tensor(path)? {
        Tensor::Complex(a) if a.ndim() == 3 => {
            let a: Array3<Complex<f32>> = a.into_dimensionality().expect("3d checked");
            a.mapv(|z| Complex::new(T::from_f64_c(z.re as f64), T::from_f64_c(z.im as f64)))
        }
        _ => return Err(Error::io(path, "expected 3D complex k-space data")),
    };
    KSpaceMeasurement::new(data, mask.clone())
}

/// Self-describing parameter container for model checkpoints: a JSON
/// header with free-form metadata plus named f32 arrays packed into one
/// sibling raw blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

pub fn save_params(
    path: &Path,
    meta: serde_json::Value,
    params: &[(&str, Vec<usize>, Vec<f32>)],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent, format!("creating directory: {e}")))?;
        }
    }
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, shape, data) in params {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "parameter `{name}`: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.clone(),
            offset: blob.len() / 4,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = ParamHeader {
        meta,
        params: entries,
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e.to_string()))?;
    let rp = raw_path(path);
    std::fs::write(&rp, blob).map_err(|e| Error::io(&rp, e.to_string()))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(serde_json::Value, Vec<(ParamEntry, Vec<f32>)>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e.to_string()))?;
    let header: ParamHeader = serde_json::from_str(&text)
        .map_err(|e| Error::io(path, format!("malformed checkpoint header: {e}")))?;
    let rp = raw_path(path);
    let bytes = std::fs::read(&rp).map_err(|e| Error::io(&rp, e.to_string()))?;
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut out = Vec::new();
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n;
        if end > floats.len() {
            return Err(Error::io(
                &rp,
                format!("parameter `{}` extends past the raw blob", entry.name),
            ));
        }
        let data = floats[entry.offset..end].to_vec();
        out.push((entry, data));
    }
    Ok((header.meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn complex_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = ComplexImage::<f32>::standard_normal(64, 64, &mut rng);
        let p = dir.path().join("img.ct1");
        save_complex_image(&p, &img).unwrap();
        let back: ComplexImage<f32> = load_complex_image(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
    }

    #[test]
    fn wrong_raw_length_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ct1");
        std::fs::write(&p, r#"{"shape":[64,64],"dtype":"c8","order":"row-major"}"#).unwrap();
        std::fs::write(raw_path(&p), vec![0u8; 100]).unwrap();
        let err = load_tensor(&p).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn mask_roundtrip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let mask =
            crate::mask::make_mask(crate::mask::MaskPattern::Random1d, (64, 64), 4.0, 8, 1).unwrap();
        let p = dir.path().join("mask.ct1");
        save_mask(&p, &mask).unwrap();
        let back = load_mask(&p).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn param_container_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let meta = serde_json::json!({"kind": "test", "width": 3});
        let params = vec![
            ("a", vec![2usize, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ("b", vec![2usize], vec![-1.0f32, 0.5]),
        ];
        let borrowed: Vec<(&str, Vec<usize>, Vec<f32>)> = params.clone();
        save_params(&p, meta.clone(), &borrowed).unwrap();
        let (meta2, loaded) = load_params(&p).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].1, params[0].2);
        assert_eq!(loaded[1].1, params[1].2);
        assert_eq!(loaded[1].0.shape, vec![2]);
    }

    proptest::proptest! {
        #[test]
        fn real_tensor_roundtrip(values in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.ct1");
            let n = values.len();
            let t = Tensor::Real(ArrayD::from_shape_vec(IxDyn(&[n]), values).unwrap());
            save_tensor(&p, &t).unwrap();
            let back = load_tensor(&p).unwrap();
            proptest::prop_assert_eq!(t, back);
        }
    }
}
