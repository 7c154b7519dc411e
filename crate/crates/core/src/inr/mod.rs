//! Hash-encoded coordinate network representing a complex image, with
//! two-stage fitting: embed a prior image under an L2 loss, then refine
//! against acquired k-space under a sampled-entry L1 loss.
//!
//! The encoding is a multiresolution feature grid: per level, the four
//! cell corners are mapped to table slots by a spatial hash and their
//! features bilinearly blended; levels are concatenated and fed to two
//! small MLP heads (real and imaginary channels) that share the tables.

use ndarray::Array2;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::coils::CoilSensitivities;
use crate::error::{Error, Result};
use crate::forward::KSpaceMeasurement;
use crate::fourier::{fft2c_arr, ifft2c_arr};
use crate::image::ComplexImage;
use crate::mask::SamplingMask;
use crate::nn::adam::Adam;
use crate::nn::dense::Dense;
use crate::nn::{relu, relu_backward};
use crate::scalar::Scalar;
use crate::tensorio;

const HASH_PI1: u32 = 1;
const HASH_PI2: u32 = 2654435761;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashEncodingConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub table_size_log2: usize,
    pub base_resolution: usize,
    pub finest_resolution: usize,
}

impl HashEncodingConfig {
    /// Canonical multiresolution-grid defaults with the finest level
    /// matched to the image side.
    pub fn default_for_side(side: usize) -> Self {
        Self {
            levels: 16,
            features_per_level: 2,
            table_size_log2: 19,
            base_resolution: 16,
            finest_resolution: side.max(16),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::config("hash encoding needs at least one level"));
        }
        if self.features_per_level < 1 {
            return Err(Error::config("features_per_level must be at least 1"));
        }
        if self.base_resolution < 2 || self.finest_resolution < self.base_resolution {
            return Err(Error::config(
                "resolutions must satisfy 2 <= base <= finest",
            ));
        }
        if self.table_size_log2 < 4 || self.table_size_log2 > 24 {
            return Err(Error::config("table_size_log2 out of the supported 4..=24"));
        }
        Ok(())
    }

    /// Per-level geometric growth `exp((ln finest - ln base) / (L - 1))`.
    pub fn growth_factor(&self) -> f64 {
        if self.levels == 1 {
            1.0
        } else {
            (((self.finest_resolution as f64).ln() - (self.base_resolution as f64).ln())
                / (self.levels as f64 - 1.0))
                .exp()
        }
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        let r = self.base_resolution as f64 * self.growth_factor().powi(level as i32);
        (r.floor() as usize).clamp(self.base_resolution, self.finest_resolution)
    }

    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }

    /// Encoded output width `levels * features_per_level`.
    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    /// Total trainable table entries across levels.
    pub fn table_params(&self) -> usize {
        self.levels * self.table_size() * self.features_per_level
    }
}

/// Pixel-center coordinates in [0,1]^2, row-major; column 0 is x (image
/// column direction), column 1 is y (row direction).
#[derive(Debug, Clone)]
pub struct CoordinateGrid<T: Scalar> {
    coords: Array2<T>,
    h: usize,
    w: usize,
}

impl<T: Scalar> CoordinateGrid<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let coords = Array2::from_shape_fn((h * w, 2), |(i, axis)| {
            let (r, c) = (i / w, i % w);
            if axis == 0 {
                T::from_f64_c((c as f64 + 0.5) / w as f64)
            } else {
                T::from_f64_c((r as f64 + 0.5) / h as f64)
            }
        });
        Self { coords, h, w }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn coords(&self) -> &Array2<T> {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn hash_slot(vx: u32, vy: u32, mask: u32) -> u32 {
    (vx.wrapping_mul(HASH_PI1) ^ vy.wrapping_mul(HASH_PI2)) & mask
}

/// Precomputed gather plan: per level and pixel, the four corner feature
/// offsets and their bilinear weights. Coordinates are fixed during a
/// fit, so this is built once per training run.
///
/// Touched table slots are additionally remapped to a compact array so
/// the per-iteration working set stays cache-resident instead of
/// striding across the full tables.
pub struct EncodeCache<T: Scalar> {
    /// feature-base offsets into the full table vector, 4 per pixel per level
    slots: Vec<u32>,
    /// feature-base offsets into the compact array, aligned with `slots`
    compact: Vec<u32>,
    weights: Vec<T>,
    /// sorted unique touched feature-base offsets (full-table indexing)
    touched_bases: Vec<u32>,
    levels: usize,
    features: usize,
    n_px: usize,
}

impl<T: Scalar> EncodeCache<T> {
    pub fn build(coords: &CoordinateGrid<T>, config: &HashEncodingConfig) -> Result<Self> {
        config.validate()?;
        let n_px = coords.len();
        let f = config.features_per_level;
        let mask = (config.table_size() - 1) as u32;
        let mut slots = vec![0u32; config.levels * n_px * 4];
        let mut weights = vec![T::zero(); config.levels * n_px * 4];
        let mut touched_set = std::collections::BTreeSet::new();
        for level in 0..config.levels {
            let res = config.level_resolution(level);
            let scale = T::from_f64_c((res - 1) as f64);
            let level_base = (level * config.table_size() * f) as u32;
            for p in 0..n_px {
                let x = coords.coords()[[p, 0]] * scale;
                let y = coords.coords()[[p, 1]] * scale;
                let x0 = x.floor();
                let y0 = y.floor();
                let fx = x - x0;
                let fy = y - y0;
                let (x0, y0) = (x0.to_f64_c() as u32, y0.to_f64_c() as u32);
                let x1 = (x0 + 1).min(res as u32 - 1);
                let y1 = (y0 + 1).min(res as u32 - 1);
                let one = T::one();
                let corner = [
                    (x0, y0, (one - fx) * (one - fy)),
                    (x1, y0, fx * (one - fy)),
                    (x0, y1, (one - fx) * fy),
                    (x1, y1, fx * fy),
                ];
                let base = (level * n_px + p) * 4;
                for (k, &(vx, vy, wgt)) in corner.iter().enumerate() {
                    let slot = level_base + hash_slot(vx, vy, mask) * f as u32;
                    slots[base + k] = slot;
                    weights[base + k] = wgt;
                    touched_set.insert(slot);
                }
            }
        }
        let touched_bases: Vec<u32> = touched_set.into_iter().collect();
        let rank: std::collections::HashMap<u32, u32> = touched_bases
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, (i * f) as u32))
            .collect();
        let compact = slots.iter().map(|s| rank[s]).collect();
        Ok(Self {
            slots,
            compact,
            weights,
            touched_bases,
            levels: config.levels,
            features: f,
            n_px,
        })
    }

    pub fn n_compact(&self) -> usize {
        self.touched_bases.len() * self.features
    }

    /// Copies the touched table entries into a compact working array.
    fn extract_compact(&self, tables: &[T]) -> Vec<T> {
        let f = self.features;
        let mut out = Vec::with_capacity(self.n_compact());
        for &base in &self.touched_bases {
            for ff in 0..f {
                out.push(tables[base as usize + ff]);
            }
        }
        out
    }

    /// Writes a compact working array back into the full tables.
    fn write_back(&self, compact: &[T], tables: &mut [T]) {
        let f = self.features;
        for (i, &base) in self.touched_bases.iter().enumerate() {
            for ff in 0..f {
                tables[base as usize + ff] = compact[i * f + ff];
            }
        }
    }

    /// Gather features for all pixels from the compact array; output is
    /// (n_px, levels * f) row-major. Parallel over pixel chunks.
    fn gather(&self, compact_tables: &[T]) -> Vec<T> {
        let f = self.features;
        let width = self.levels * f;
        let mut out = vec![T::zero(); self.n_px * width];
        let n_px = self.n_px;
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(p, row)| {
                for level in 0..self.levels {
                    let base = (level * n_px + p) * 4;
                    let dst = level * f;
                    for k in 0..4 {
                        let slot = self.compact[base + k] as usize;
                        let wgt = self.weights[base + k];
                        for ff in 0..f {
                            row[dst + ff] = row[dst + ff] + wgt * compact_tables[slot + ff];
                        }
                    }
                }
            });
        out
    }

    /// Scatter feature gradients into the compact gradient buffer.
    /// Serial per level; levels could collide in the compact space, so
    /// the loop stays sequential to keep accumulation order fixed.
    fn scatter_grads(&self, d_features: &[T], d_compact: &mut [T]) {
        let f = self.features;
        let width = self.levels * f;
        for level in 0..self.levels {
            for p in 0..self.n_px {
                let base = (level * self.n_px + p) * 4;
                let src = p * width + level * f;
                for k in 0..4 {
                    let slot = self.compact[base + k] as usize;
                    let wgt = self.weights[base + k];
                    for ff in 0..f {
                        d_compact[slot + ff] = d_compact[slot + ff] + wgt * d_features[src + ff];
                    }
                }
            }
        }
    }

    /// Gather directly from the full tables (one-shot evaluation path).
    fn gather_full(&self, tables: &[T]) -> Vec<T> {
        let f = self.features;
        let width = self.levels * f;
        let mut out = vec![T::zero(); self.n_px * width];
        for level in 0..self.levels {
            for p in 0..self.n_px {
                let base = (level * self.n_px + p) * 4;
                let dst = p * width + level * f;
                for k in 0..4 {
                    let slot = self.slots[base + k] as usize;
                    let wgt = self.weights[base + k];
                    for ff in 0..f {
                        out[dst + ff] = out[dst + ff] + wgt * tables[slot + ff];
                    }
                }
            }
        }
        out
    }
}

/// Public encoding entry point; validates the coordinate domain.
pub fn hash_encode<T: Scalar>(
    coords: &CoordinateGrid<T>,
    config: &HashEncodingConfig,
    tables: &[T],
) -> Result<Array2<T>> {
    if tables.len() != config.table_params() {
        return Err(Error::invalid(format!(
            "table vector holds {} entries, config implies {}",
            tables.len(),
            config.table_params()
        )));
    }
    for v in coords.coords().iter() {
        let v = v.to_f64_c();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid("coordinates must lie in [0,1]^2"));
        }
    }
    let cache = EncodeCache::build(coords, config)?;
    let flat = cache.gather_full(tables);
    Ok(Array2::from_shape_vec((coords.len(), config.output_dim()), flat)
        .expect("shape consistent"))
}

const HIDDEN: usize = 64;

/// Two-hidden-layer ReLU MLP head with a linear scalar output.
#[derive(Debug, Clone)]
pub struct MlpHead<T: Scalar> {
    l1: Dense<T>,
    l2: Dense<T>,
    l3: Dense<T>,
}

struct HeadStash<T: Scalar> {
    z1: Vec<T>,
    a1: Vec<T>,
    z2: Vec<T>,
    a2: Vec<T>,
}

impl<T: Scalar> MlpHead<T> {
    fn init<R: Rng + ?Sized>(in_dim: usize, rng: &mut R) -> Self {
        Self {
            l1: Dense::init_he(in_dim, HIDDEN, rng),
            l2: Dense::init_he(HIDDEN, HIDDEN, rng),
            l3: Dense::init_he(HIDDEN, 1, rng),
        }
    }

    fn forward(&self, x: &[T], batch: usize) -> Vec<T> {
        let mut a1 = self.l1.forward(x, batch);
        relu(&mut a1);
        let mut a2 = self.l2.forward(&a1, batch);
        relu(&mut a2);
        self.l3.forward(&a2, batch)
    }

    fn forward_cached(&self, x: &[T], batch: usize) -> (Vec<T>, HeadStash<T>) {
        let z1 = self.l1.forward(x, batch);
        let mut a1 = z1.clone();
        relu(&mut a1);
        let z2 = self.l2.forward(&a1, batch);
        let mut a2 = z2.clone();
        relu(&mut a2);
        let out = self.l3.forward(&a2, batch);
        (out, HeadStash { z1, a1, z2, a2 })
    }

    /// Accumulates parameter grads into `grad`; returns d_input.
    fn backward_into(
        &self,
        x: &[T],
        stash: &HeadStash<T>,
        d_out: &[T],
        batch: usize,
        grad: &mut MlpHead<T>,
    ) -> Vec<T> {
        let (mut da2, dw3, db3) = self.l3.backward(&stash.a2, d_out, batch);
        acc(&mut grad.l3.w, &dw3);
        acc(&mut grad.l3.b, &db3);
        relu_backward(&stash.z2, &mut da2);
        let (mut da1, dw2, db2) = self.l2.backward(&stash.a1, &da2, batch);
        acc(&mut grad.l2.w, &dw2);
        acc(&mut grad.l2.b, &db2);
        relu_backward(&stash.z1, &mut da1);
        let (dx, dw1, db1) = self.l1.backward(x, &da1, batch);
        acc(&mut grad.l1.w, &dw1);
        acc(&mut grad.l1.b, &db1);
        dx
    }

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for d in [&mut z.l1, &mut z.l2, &mut z.l3] {
            d.w.fill(T::zero());
            d.b.fill(T::zero());
        }
        z
    }

    fn n_params(&self) -> usize {
        self.l1.n_params() + self.l2.n_params() + self.l3.n_params()
    }

    fn for_each_param(&self, f: &mut impl FnMut(&Vec<T>)) {
        for d in [&self.l1, &self.l2, &self.l3] {
            f(&d.w);
            f(&d.b);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut impl FnMut(&mut Vec<T>)) {
        for d in [&mut self.l1, &mut self.l2, &mut self.l3] {
            f(&mut d.w);
            f(&mut d.b);
        }
    }
}

fn acc<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src.iter()) {
        *a = *a + b;
    }
}

/// Hash tables plus the two MLP heads; represents one complex image of a
/// fixed target shape.
#[derive(Debug, Clone)]
pub struct INRField<T: Scalar> {
    pub config: HashEncodingConfig,
    pub tables: Vec<T>,
    pub head_re: MlpHead<T>,
    pub head_im: MlpHead<T>,
    shape: (usize, usize),
}

impl<T: Scalar> INRField<T> {
    pub fn init(config: HashEncodingConfig, shape: (usize, usize), seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = (0..config.table_params())
            .map(|_| T::from_f64_c(rng.random_range(-1e-4..1e-4)))
            .collect();
        let in_dim = config.output_dim();
        let head_re = MlpHead::init(in_dim, &mut rng);
        let head_im = MlpHead::init(in_dim, &mut rng);
        Ok(Self {
            config,
            tables,
            head_re,
            head_im,
            shape,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn n_params(&self) -> usize {
        self.tables.len() + self.head_re.n_params() + self.head_im.n_params()
    }

    fn mlp_param_count(&self) -> usize {
        self.head_re.n_params() + self.head_im.n_params()
    }

    fn collect_mlp_params(&self) -> Vec<T> {
        let mut flat = Vec::with_capacity(self.mlp_param_count());
        self.head_re.for_each_param(&mut |v| flat.extend_from_slice(v));
        self.head_im.for_each_param(&mut |v| flat.extend_from_slice(v));
        flat
    }

    fn set_mlp_params(&mut self, flat: &[T]) {
        let mut off = 0;
        let mut take = |v: &mut Vec<T>| {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        };
        self.head_re.for_each_param_mut(&mut take);
        self.head_im.for_each_param_mut(&mut take);
        debug_assert_eq!(off, flat.len());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "inr-field",
            "config": self.config,
            "shape": [self.shape.0, self.shape.1],
        });
        let to32 = |v: &Vec<T>| -> Vec<f32> { v.iter().map(|x| x.to_f64_c() as f32).collect() };
        let mut params: Vec<(&str, Vec<usize>, Vec<f32>)> =
            vec![("tables", vec![self.tables.len()], to32(&self.tables))];
        let mut named: Vec<(String, Vec<f32>)> = Vec::new();
        let mut idx = 0;
        self.head_re.for_each_param(&mut |v| {
            named.push((format!("head_re.{idx}"), to32(v)));
            idx += 1;
        });
        idx = 0;
        self.head_im.for_each_param(&mut |v| {
            named.push((format!("head_im.{idx}"), to32(v)));
            idx += 1;
        });
        let holder: Vec<(String, Vec<usize>, Vec<f32>)> = named
            .into_iter()
            .map(|(n, d)| (n, vec![d.len()], d))
            .collect();
        params.extend(holder.iter().map(|(n, s, d)| (n.as_str(), s.clone(), d.clone())));
        tensorio::save_params(path, meta, &params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = tensorio::load_params(path)?;
        let config: HashEncodingConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::io(path, format!("bad field config: {e}")))?;
        let shape: (usize, usize) = serde_json::from_value(meta["shape"].clone())
            .map_err(|e| Error::io(path, format!("bad field shape: {e}")))?;
        let mut field = Self::init(config, shape, 0)?;
        let mut iter = params.into_iter();
        let (entry, tables) = iter
            .next()
            .ok_or_else(|| Error::io(path, "checkpoint holds no tables"))?;
        if entry.name != "tables" || tables.len() != field.tables.len() {
            return Err(Error::io(path, "table entry mismatch"));
        }
        field.tables = tables.iter().map(|&v| T::from_f64_c(v as f64)).collect();
        let mut flat: Vec<T> = Vec::with_capacity(field.mlp_param_count());
        for (_, data) in iter {
            flat.extend(data.iter().map(|&v| T::from_f64_c(v as f64)));
        }
        if flat.len() != field.mlp_param_count() {
            return Err(Error::io(path, "MLP parameter count mismatch"));
        }
        field.set_mlp_params(&flat);
        Ok(field)
    }
}

/// Evaluates the field on a grid: `re(p) + i*im(p)` reshaped to (H, W).
pub fn inr_forward<T: Scalar>(
    field: &INRField<T>,
    grid: &CoordinateGrid<T>,
) -> Result<ComplexImage<T>> {
    if grid.shape() != field.shape {
        return Err(Error::invalid(format!(
            "grid {:?} does not match field target {:?}",
            grid.shape(),
            field.shape
        )));
    }
    let cache = EncodeCache::build(grid, &field.config)?;
    let features = cache.gather_full(&field.tables);
    let n = grid.len();
    let re = field.head_re.forward(&features, n);
    let im = field.head_im.forward(&features, n);
    let (h, w) = grid.shape();
    ComplexImage::new(Array2::from_shape_fn((h, w), |(r, c)| {
        Complex::new(re[r * w + c], im[r * w + c])
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub iterations: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InrConfig {
    pub hash: HashEncodingConfig,
    pub prior: StageConfig,
    pub dc: StageConfig,
}

impl InrConfig {
    pub fn default_for_side(side: usize) -> Self {
        Self {
            hash: HashEncodingConfig::default_for_side(side),
            prior: StageConfig {
                iterations: 250,
                learning_rate: 1e-3,
            },
            dc: StageConfig {
                iterations: 250,
                learning_rate: 1e-5,
            },
        }
    }
}

/// Training-time view of a field: the touched table entries remapped to
/// a compact cache-resident array, plus optimizer state.
struct FieldTrainer<T: Scalar> {
    compact: Vec<T>,
    d_compact: Vec<T>,
    table_opt: Adam<T>,
    mlp_opt: Adam<T>,
}

impl<T: Scalar> FieldTrainer<T> {
    fn new(field: &INRField<T>, cache: &EncodeCache<T>, lr: f64) -> Self {
        let compact = cache.extract_compact(&field.tables);
        Self {
            d_compact: vec![T::zero(); compact.len()],
            table_opt: Adam::new(compact.len(), T::from_f64_c(lr)),
            mlp_opt: Adam::new(field.mlp_param_count(), T::from_f64_c(lr)),
            compact,
        }
    }

    /// One shared optimization step. `d_re`/`d_im` are the loss
    /// cotangents w.r.t. the two head outputs.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        field: &mut INRField<T>,
        cache: &EncodeCache<T>,
        features: &[T],
        stash_re: &HeadStash<T>,
        stash_im: &HeadStash<T>,
        d_re: &[T],
        d_im: &[T],
    ) {
        let n = cache.n_px;
        let mut grad_re = field.head_re.zeroed();
        let mut grad_im = field.head_im.zeroed();
        let mut d_feat = field
            .head_re
            .backward_into(features, stash_re, d_re, n, &mut grad_re);
        let d_feat_im = field
            .head_im
            .backward_into(features, stash_im, d_im, n, &mut grad_im);
        acc(&mut d_feat, &d_feat_im);

        cache.scatter_grads(&d_feat, &mut self.d_compact);
        self.table_opt.step(&mut self.compact, &self.d_compact);
        self.d_compact.fill(T::zero());

        let mut mlp_flat = field.collect_mlp_params();
        let mut mlp_grad = Vec::with_capacity(mlp_flat.len());
        grad_re.for_each_param(&mut |v| mlp_grad.extend_from_slice(v));
        grad_im.for_each_param(&mut |v| mlp_grad.extend_from_slice(v));
        self.mlp_opt.step(&mut mlp_flat, &mlp_grad);
        field.set_mlp_params(&mlp_flat);
    }
}

/// Stage-1 objective: mean squared complex error against the prior
/// image. Returns the trained field and the per-iteration loss trace.
pub fn prior_embed<T: Scalar>(
    prior: &ComplexImage<T>,
    config: &InrConfig,
    seed: u64,
) -> Result<(INRField<T>, Vec<f64>)> {
    if !prior.is_finite() {
        return Err(Error::invalid("prior image contains non-finite entries"));
    }
    let field = INRField::init(config.hash.clone(), prior.shape(), seed)?;
    prior_embed_from(field, prior, &config.prior)
}

/// Stage-1 fitting from an existing field (used for warm starts).
pub fn prior_embed_from<T: Scalar>(
    mut field: INRField<T>,
    prior: &ComplexImage<T>,
    stage: &StageConfig,
) -> Result<(INRField<T>, Vec<f64>)> {
    if prior.shape() != field.shape() {
        return Err(Error::invalid("prior image does not match field shape"));
    }
    let (h, w) = prior.shape();
    let grid = CoordinateGrid::new(h, w);
    let cache = EncodeCache::build(&grid, &field.config)?;
    let n = grid.len();
    let n_t = T::from_f64_c(n as f64);
    let mut trainer = FieldTrainer::new(&field, &cache, stage.learning_rate);
    let mut trace = Vec::with_capacity(stage.iterations);

    let target_re: Vec<T> = prior.data().iter().map(|z| z.re).collect();
    let target_im: Vec<T> = prior.data().iter().map(|z| z.im).collect();

    for iter in 0..stage.iterations {
        let features = cache.gather(&trainer.compact);
        let (out_re, stash_re) = field.head_re.forward_cached(&features, n);
        let (out_im, stash_im) = field.head_im.forward_cached(&features, n);

        let mut loss = T::zero();
        let mut d_re = vec![T::zero(); n];
        let mut d_im = vec![T::zero(); n];
        let two = T::from_f64_c(2.0);
        for p in 0..n {
            let er = out_re[p] - target_re[p];
            let ei = out_im[p] - target_im[p];
            loss += er * er + ei * ei;
            d_re[p] = two * er / n_t;
            d_im[p] = two * ei / n_t;
        }
        let loss = (loss / n_t).to_f64_c();
        if !loss.is_finite() {
            return Err(Error::training(format!(
                "prior embedding diverged at iteration {iter}"
            )));
        }
        trace.push(loss);
        trainer.step(&mut field, &cache, &features, &stash_re, &stash_im, &d_re, &d_im);
    }
    cache.write_back(&trainer.compact, &mut field.tables);
    Ok((field, trace))
}

/// Mean squared complex error of the field against a reference.
pub fn fit_mse<T: Scalar>(field: &INRField<T>, reference: &ComplexImage<T>) -> Result<f64> {
    let (h, w) = reference.shape();
    let out = inr_forward(field, &CoordinateGrid::new(h, w))?;
    let d = out.sub(reference);
    Ok(d.real_dot(&d).to_f64_c() / (h * w) as f64)
}

/// Sampled-entry L1 data-consistency loss of an image against `y`.
///
/// Only entries kept by the mask are ever read, so values at unsampled
/// locations cannot influence the result.
pub fn dc_loss_l1<T: Scalar>(
    img: &ComplexImage<T>,
    y: &KSpaceMeasurement<T>,
    coils: &CoilSensitivities<T>,
    mask: &SamplingMask,
) -> Result<f64> {
    let kept = mask.kept_positions();
    if kept.is_empty() {
        return Err(Error::config("mask keeps no k-space entries"));
    }
    let (h, w) = img.shape();
    let mut total = T::zero();
    for j in 0..coils.num_coils() {
        let weighted = Array2::from_shape_fn((h, w), |(r, c)| {
            img.data()[[r, c]] * coils.maps[[j, r, c]]
        });
        let k = fft2c_arr(&weighted);
        for &(r, c) in &kept {
            total += (k[[r, c]] - y.data[[j, r, c]]).norm();
        }
    }
    Ok(total.to_f64_c() / (kept.len() * coils.num_coils()) as f64)
}

/// Stage-2 refinement: minimizes the sampled-entry L1 k-space residual
/// starting from a prior-embedded field. Returns the best iterate seen
/// (by loss) and the loss trace; the trace's last entry is the loss of
/// the returned field.
pub fn dc_refine<T: Scalar>(
    field: &INRField<T>,
    y: &KSpaceMeasurement<T>,
    coils: &CoilSensitivities<T>,
    mask: &SamplingMask,
    stage: &StageConfig,
) -> Result<(INRField<T>, Vec<f64>)> {
    let (h, w) = field.shape();
    if y.image_shape() != (h, w) || coils.image_shape() != (h, w) || mask.shape() != (h, w) {
        return Err(Error::invalid("operator shapes do not match the field"));
    }
    if y.num_coils() != coils.num_coils() {
        return Err(Error::invalid("coil count mismatch"));
    }
    let kept = mask.kept_positions();
    if kept.is_empty() {
        return Err(Error::config("mask keeps no k-space entries; nothing to refine"));
    }
    if stage.iterations == 0 {
        return Ok((field.clone(), Vec::new()));
    }

    let grid = CoordinateGrid::new(h, w);
    let cache = EncodeCache::build(&grid, &field.config)?;
    let n = grid.len();
    let n_coils = coils.num_coils();
    let norm = T::from_f64_c((kept.len() * n_coils) as f64);
    let tiny = T::from_f64_c(1e-12);

    let mut field = field.clone();
    let mut trainer = FieldTrainer::new(&field, &cache, stage.learning_rate);
    let mut trace = Vec::with_capacity(stage.iterations + 1);

    // best-iterate bookkeeping: only touched table entries ever change,
    // so a snapshot is the compact array plus the (small) MLP weights
    let mut best_loss = f64::INFINITY;
    let mut best: (Vec<T>, Vec<T>) = (trainer.compact.clone(), field.collect_mlp_params());

    for iter in 0..=stage.iterations {
        let features = cache.gather(&trainer.compact);
        let (out_re, stash_re) = field.head_re.forward_cached(&features, n);
        let (out_im, stash_im) = field.head_im.forward_cached(&features, n);
        let img = Array2::from_shape_fn((h, w), |(r, c)| {
            Complex::new(out_re[r * w + c], out_im[r * w + c])
        });

        let mut loss = T::zero();
        let mut d_img = Array2::from_elem((h, w), Complex::new(T::zero(), T::zero()));
        for j in 0..n_coils {
            let weighted = Array2::from_shape_fn((h, w), |(r, c)| {
                img[[r, c]] * coils.maps[[j, r, c]]
            });
            let k = fft2c_arr(&weighted);
            let mut cot = Array2::from_elem((h, w), Complex::new(T::zero(), T::zero()));
            for &(r, c) in &kept {
                let resid = k[[r, c]] - y.data[[j, r, c]];
                let mag = resid.norm();
                loss += mag;
                // subgradient of |z| is z/|z|
                cot[[r, c]] = resid * (mag.max(tiny).recip() / norm);
            }
            let back = ifft2c_arr(&cot);
            for r in 0..h {
                for c in 0..w {
                    d_img[[r, c]] += coils.maps[[j, r, c]].conj() * back[[r, c]];
                }
            }
        }
        let loss = (loss / norm).to_f64_c();
        if !loss.is_finite() {
            return Err(Error::training(format!(
                "dc refinement diverged at iteration {iter}"
            )));
        }
        trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = (trainer.compact.clone(), field.collect_mlp_params());
        }
        if iter == stage.iterations {
            break;
        }

        let d_re: Vec<T> = d_img.iter().map(|z| z.re).collect();
        let d_im: Vec<T> = d_img.iter().map(|z| z.im).collect();
        trainer.step(&mut field, &cache, &features, &stash_re, &stash_im, &d_re, &d_im);
    }

    cache.write_back(&best.0, &mut field.tables);
    field.set_mlp_params(&best.1);
    trace.push(best_loss);
    Ok((field, trace))
}

/// Full analytic gradients of the stage-1 objective at `field`,
/// without taking a step. Used by the gradient-correctness checks.
fn stage1_loss_and_grads<T: Scalar>(
    field: &INRField<T>,
    target: &ComplexImage<T>,
) -> Result<(f64, Vec<T>, Vec<T>)> {
    let (h, w) = target.shape();
    let grid = CoordinateGrid::new(h, w);
    let cache = EncodeCache::build(&grid, &field.config)?;
    let n = grid.len();
    let features = cache.gather_full(&field.tables);
    let (out_re, stash_re) = field.head_re.forward_cached(&features, n);
    let (out_im, stash_im) = field.head_im.forward_cached(&features, n);
    let n_t = T::from_f64_c(n as f64);
    let two = T::from_f64_c(2.0);
    let mut loss = T::zero();
    let mut d_re = vec![T::zero(); n];
    let mut d_im = vec![T::zero(); n];
    for p in 0..n {
        let (r, c) = (p / w, p % w);
        let er = out_re[p] - target.data()[[r, c]].re;
        let ei = out_im[p] - target.data()[[r, c]].im;
        loss += er * er + ei * ei;
        d_re[p] = two * er / n_t;
        d_im[p] = two * ei / n_t;
    }
    let (dt, dm) = full_grads(field, &cache, &features, &stash_re, &stash_im, &d_re, &d_im);
    Ok(((loss / n_t).to_f64_c(), dt, dm))
}

/// Full analytic gradients of the stage-2 objective at `field`.
fn stage2_loss_and_grads<T: Scalar>(
    field: &INRField<T>,
    y: &KSpaceMeasurement<T>,
    coils: &CoilSensitivities<T>,
    mask: &SamplingMask,
) -> Result<(f64, Vec<T>, Vec<T>)> {
    let (h, w) = field.shape();
    let grid = CoordinateGrid::new(h, w);
    let cache = EncodeCache::build(&grid, &field.config)?;
    let n = grid.len();
    let kept = mask.kept_positions();
    let norm = T::from_f64_c((kept.len() * coils.num_coils()) as f64);
    let tiny = T::from_f64_c(1e-12);
    let features = cache.gather_full(&field.tables);
    let (out_re, stash_re) = field.head_re.forward_cached(&features, n);
    let (out_im, stash_im) = field.head_im.forward_cached(&features, n);
    let img = Array2::from_shape_fn((h, w), |(r, c)| {
        Complex::new(out_re[r * w + c], out_im[r * w + c])
    });
    let mut loss = T::zero();
    let mut d_img = Array2::from_elem((h, w), Complex::new(T::zero(), T::zero()));
    for j in 0..coils.num_coils() {
        let weighted =
            Array2::from_shape_fn((h, w), |(r, c)| img[[r, c]] * coils.maps[[j, r, c]]);
        let k = fft2c_arr(&weighted);
        let mut cot = Array2::from_elem((h, w), Complex::new(T::zero(), T::zero()));
        for &(r, c) in &kept {
            let resid = k[[r, c]] - y.data[[j, r, c]];
            let mag = resid.norm();
            loss += mag;
            cot[[r, c]] = resid * (mag.max(tiny).recip() / norm);
        }
        let back = ifft2c_arr(&cot);
        for r in 0..h {
            for c in 0..w {
                d_img[[r, c]] += coils.maps[[j, r, c]].conj() * back[[r, c]];
            }
        }
    }
    let d_re: Vec<T> = d_img.iter().map(|z| z.re).collect();
    let d_im: Vec<T> = d_img.iter().map(|z| z.im).collect();
    let (dt, dm) = full_grads(field, &cache, &features, &stash_re, &stash_im, &d_re, &d_im);
    Ok(((loss / norm).to_f64_c(), dt, dm))
}

fn full_grads<T: Scalar>(
    field: &INRField<T>,
    cache: &EncodeCache<T>,
    features: &[T],
    stash_re: &HeadStash<T>,
    stash_im: &HeadStash<T>,
    d_re: &[T],
    d_im: &[T],
) -> (Vec<T>, Vec<T>) {
    let n = cache.n_px;
    let mut grad_re = field.head_re.zeroed();
    let mut grad_im = field.head_im.zeroed();
    let mut d_feat = field
        .head_re
        .backward_into(features, stash_re, d_re, n, &mut grad_re);
    let d_feat_im = field
        .head_im
        .backward_into(features, stash_im, d_im, n, &mut grad_im);
    acc(&mut d_feat, &d_feat_im);
    let mut d_compact = vec![T::zero(); cache.n_compact()];
    cache.scatter_grads(&d_feat, &mut d_compact);
    let mut d_tables = vec![T::zero(); field.tables.len()];
    cache.write_back(&d_compact, &mut d_tables);
    let mut d_mlp = Vec::with_capacity(field.mlp_param_count());
    grad_re.for_each_param(&mut |v| d_mlp.extend_from_slice(v));
    grad_im.for_each_param(&mut |v| d_mlp.extend_from_slice(v));
    (d_tables, d_mlp)
}

fn check_against_fd(
    field: &INRField<f64>,
    d_tables: &[f64],
    d_mlp: &[f64],
    loss_only: &dyn Fn(&INRField<f64>) -> f64,
    n_probes: usize,
) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let grid = CoordinateGrid::<f64>::new(field.shape().0, field.shape().1);
    let cache = EncodeCache::build(&grid, &field.config).expect("config validated");
    let f = cache.features as u32;
    let touched: Vec<u32> = cache
        .touched_bases
        .iter()
        .flat_map(|&b| (0..f).map(move |ff| b + ff))
        .collect();
    let n_table = n_probes / 2;
    let stride = (touched.len() / n_table).max(1);
    for &ti in touched.iter().step_by(stride).take(n_table) {
        let i = ti as usize;
        let mut fp = field.clone();
        let mut fm = field.clone();
        fp.tables[i] += h;
        fm.tables[i] -= h;
        let fd = (loss_only(&fp) - loss_only(&fm)) / (2.0 * h);
        worst = worst.max((fd - d_tables[i]).abs() / fd.abs().max(1e-10));
    }
    let mlp_flat = field.collect_mlp_params();
    let n_mlp = n_probes - n_table;
    let stride = (mlp_flat.len() / n_mlp).max(1);
    for i in (0..mlp_flat.len()).step_by(stride).take(n_mlp) {
        let mut fp = field.clone();
        let mut fm = field.clone();
        let mut pp = mlp_flat.clone();
        let mut pm = mlp_flat.clone();
        pp[i] += h;
        pm[i] -= h;
        fp.set_mlp_params(&pp);
        fm.set_mlp_params(&pm);
        let fd = (loss_only(&fp) - loss_only(&fm)) / (2.0 * h);
        worst = worst.max((fd - d_mlp[i]).abs() / fd.abs().max(1e-10));
    }
    worst
}

/// Verifies the stage-1 analytic gradients against central finite
/// differences on `n_probes` parameters; returns (pass, worst relative
/// error). Probe the field at a generic point: near-zero tables sit on
/// the ReLU kinks where finite differences are meaningless.
pub fn gradient_check_stage1(
    field: &INRField<f64>,
    target: &ComplexImage<f64>,
    n_probes: usize,
    tol: f64,
) -> (bool, f64) {
    let (_, dt, dm) = stage1_loss_and_grads(field, target).expect("loss evaluates");
    let target = target.clone();
    let loss = move |f: &INRField<f64>| stage1_loss_and_grads(f, &target).expect("loss").0;
    let worst = check_against_fd(field, &dt, &dm, &loss, n_probes);
    (worst <= tol, worst)
}

/// Stage-2 counterpart of [`gradient_check_stage1`].
pub fn gradient_check_stage2(
    field: &INRField<f64>,
    y: &KSpaceMeasurement<f64>,
    coils: &CoilSensitivities<f64>,
    mask: &SamplingMask,
    n_probes: usize,
    tol: f64,
) -> (bool, f64) {
    let (_, dt, dm) = stage2_loss_and_grads(field, y, coils, mask).expect("loss evaluates");
    let loss = |f: &INRField<f64>| stage2_loss_and_grads(f, y, coils, mask).expect("loss").0;
    let worst = check_against_fd(field, &dt, &dm, &loss, n_probes);
    (worst <= tol, worst)
}
