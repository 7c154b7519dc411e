//! Trainable noise-prediction network: a small 4-level U-Net over the
//! (real, imaginary) channels with sinusoidal timestep conditioning.
//!
//! The backward pass is written by hand and propagates to the input as
//! well as the parameters, so the same machinery serves training and
//! gradient-guided sampling.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use super::{NoiseSchedule, ScheduleSpec, ScoreModel};
use crate::error::{Error, Result};
use crate::image::ComplexImage;
use crate::nn::conv::{
    avg_pool2, avg_pool2_backward, concat_channels, split_channels, upsample_nearest2,
    upsample_nearest2_backward, Conv1x1, Conv3x3, FeatureMap,
};
use crate::nn::dense::Dense;
use crate::nn::{silu, silu_backward};
use crate::phantom::Dataset;
use crate::scalar::Scalar;
use crate::tensorio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mults: vec![1, 2, 3, 4],
            time_embed_dim: 64,
        }
    }
}

impl DenoiserConfig {
    fn channels(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }
}

/// Residual block: conv, add time bias, SiLU, conv, plus a skip
/// projection when the channel count changes.
#[derive(Debug, Clone)]
struct Block<T: Scalar> {
    conv1: Conv3x3<T>,
    temb: Dense<T>,
    conv2: Conv3x3<T>,
    skip: Option<Conv1x1<T>>,
}

struct BlockStash<T: Scalar> {
    x: FeatureMap<T>,
    h_pre: FeatureMap<T>,
    h_act: FeatureMap<T>,
}

impl<T: Scalar> Block<T> {
    fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, tdim: usize, rng: &mut R) -> Self {
        let mut conv2 = Conv3x3::init_he(c_out, c_out, rng);
        // damp the residual branch so activations stay on the input
        // scale through the block cascade
        for w in conv2.w.iter_mut() {
            *w = *w * T::from_f64_c(0.1);
        }
        Self {
            conv1: Conv3x3::init_he(c_in, c_out, rng),
            temb: Dense::init_he(tdim, c_out, rng),
            conv2,
            skip: (c_in != c_out).then(|| Conv1x1::init_he(c_in, c_out, rng)),
        }
    }

    fn forward(&self, x: &FeatureMap<T>, emb: &[T]) -> FeatureMap<T> {
        self.forward_cached(x, emb).0
    }

    fn forward_cached(&self, x: &FeatureMap<T>, emb: &[T]) -> (FeatureMap<T>, BlockStash<T>) {
        let mut h = self.conv1.forward(x);
        let bias = self.temb.forward(emb, 1);
        for row in h.data.chunks_mut(h.c) {
            for (v, &b) in row.iter_mut().zip(bias.iter()) {
                *v = *v + b;
            }
        }
        let h_pre = h.clone();
        silu(&mut h.data);
        let h_act = h.clone();
        let mut y = self.conv2.forward(&h);
        match &self.skip {
            Some(p) => {
                let s = p.forward(x);
                for (v, &sv) in y.data.iter_mut().zip(s.data.iter()) {
                    *v = *v + sv;
                }
            }
            None => {
                for (v, &sv) in y.data.iter_mut().zip(x.data.iter()) {
                    *v = *v + sv;
                }
            }
        }
        (
            y,
            BlockStash {
                x: x.clone(),
                h_pre,
                h_act,
            },
        )
    }

    /// Accumulates parameter gradients into `grad` (a zeroed clone of
    /// the block) and the time-embedding gradient into `demb`; returns
    /// the input gradient.
    fn backward_into(
        &self,
        stash: &BlockStash<T>,
        emb: &[T],
        dy: &FeatureMap<T>,
        grad: &mut Block<T>,
        demb: &mut [T],
    ) -> FeatureMap<T> {
        let (mut dh_act, dw2, db2) = self.conv2.backward(&stash.h_act, dy);
        acc(&mut grad.conv2.w, &dw2);
        acc(&mut grad.conv2.b, &db2);

        silu_backward(&stash.h_pre.data, &mut dh_act.data);
        let dh_pre = dh_act;

        // time bias is broadcast over pixels: gradient is the per-channel sum
        let mut dbias = vec![T::zero(); dh_pre.c];
        for row in dh_pre.data.chunks(dh_pre.c) {
            for (d, &g) in dbias.iter_mut().zip(row.iter()) {
                *d = *d + g;
            }
        }
        let (demb_part, dwt, dbt) = self.temb.backward(emb, &dbias, 1);
        acc(&mut grad.temb.w, &dwt);
        acc(&mut grad.temb.b, &dbt);
        acc(demb, &demb_part);

        let (mut dx, dw1, db1) = self.conv1.backward(&stash.x, &dh_pre);
        acc(&mut grad.conv1.w, &dw1);
        acc(&mut grad.conv1.b, &db1);

        match (&self.skip, &mut grad.skip) {
            (Some(p), Some(gp)) => {
                let (dxs, dwp, dbp) = p.backward(&stash.x, dy);
                acc(&mut gp.w, &dwp);
                acc(&mut gp.b, &dbp);
                for (a, &b) in dx.data.iter_mut().zip(dxs.data.iter()) {
                    *a = *a + b;
                }
            }
            (None, None) => {
                for (a, &b) in dx.data.iter_mut().zip(dy.data.iter()) {
                    *a = *a + b;
                }
            }
            _ => unreachable!("gradient buffer mirrors the model"),
        }
        dx
    }

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.conv1.w.fill(T::zero());
        z.conv1.b.fill(T::zero());
        z.temb.w.fill(T::zero());
        z.temb.b.fill(T::zero());
        z.conv2.w.fill(T::zero());
        z.conv2.b.fill(T::zero());
        if let Some(p) = &mut z.skip {
            p.w.fill(T::zero());
            p.b.fill(T::zero());
        }
        z
    }

    fn n_params(&self) -> usize {
        self.conv1.n_params()
            + self.temb.n_params()
            + self.conv2.n_params()
            + self.skip.as_ref().map_or(0, |p| p.n_params())
    }
}

fn acc<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (a, &b) in dst.iter_mut().zip(src.iter()) {
        *a = *a + b;
    }
}

/// Noise-prediction U-Net over 2-channel (re, im) images.
#[derive(Debug, Clone)]
pub struct DenoiserModel<T: Scalar> {
    pub config: DenoiserConfig,
    time_mlp: Dense<T>,
    conv_in: Conv3x3<T>,
    down: Vec<Block<T>>,
    mid: Block<T>,
    up: Vec<Block<T>>,
    conv_out: Conv3x3<T>,
}

struct UNetStash<T: Scalar> {
    input: FeatureMap<T>,
    emb_pre: Vec<T>,
    emb: Vec<T>,
    down_stash: Vec<BlockStash<T>>,
    down_out: Vec<FeatureMap<T>>,
    mid_stash: BlockStash<T>,
    up_stash: Vec<BlockStash<T>>,
    up_in: Vec<FeatureMap<T>>,
    last: FeatureMap<T>,
}

impl<T: Scalar> DenoiserModel<T> {
    pub fn init(config: DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.channels();
        let tdim = config.time_embed_dim;
        let levels = config.levels();

        let conv_in = Conv3x3::init_he(2, ch[0], &mut rng);
        let mut down = Vec::new();
        for i in 0..levels {
            let c_in = if i == 0 { ch[0] } else { ch[i - 1] };
            down.push(Block::init(c_in, ch[i], tdim, &mut rng));
        }
        let mid = Block::init(ch[levels - 1], ch[levels - 1], tdim, &mut rng);
        let mut up = Vec::new();
        for i in (0..levels - 1).rev() {
            // upsampled ch[i+1] concatenated with the level-i skip
            up.push(Block::init(ch[i + 1] + ch[i], ch[i], tdim, &mut rng));
        }
        // zero-initialized head: the untrained model predicts zero
        // noise, so the initial epsilon loss sits at the draw variance
        let mut conv_out = Conv3x3::init_he(ch[0], 2, &mut rng);
        conv_out.w.fill(T::zero());
        let time_mlp = Dense::init_he(tdim, tdim, &mut rng);

        Self {
            config,
            time_mlp,
            conv_in,
            down,
            mid,
            up,
            conv_out,
        }
    }

    pub fn n_params(&self) -> usize {
        self.time_mlp.n_params()
            + self.conv_in.n_params()
            + self.down.iter().map(|b| b.n_params()).sum::<usize>()
            + self.mid.n_params()
            + self.up.iter().map(|b| b.n_params()).sum::<usize>()
            + self.conv_out.n_params()
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << (self.config.levels() - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::invalid(format!(
                "denoiser input {h}x{w} must be divisible by {div}"
            )));
        }
        Ok(())
    }

    fn sinusoid(&self, t: usize) -> Vec<T> {
        let dim = self.config.time_embed_dim;
        let half = dim / 2;
        let mut out = vec![T::zero(); dim];
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[2 * i] = T::from_f64_c(arg.sin());
            out[2 * i + 1] = T::from_f64_c(arg.cos());
        }
        out
    }

    fn embed(&self, t: usize) -> (Vec<T>, Vec<T>) {
        let raw = self.sinusoid(t);
        let pre = self.time_mlp.forward(&raw, 1);
        let mut emb = pre.clone();
        silu(&mut emb);
        (pre, emb)
    }

    fn forward_features(&self, input: &FeatureMap<T>, t: usize) -> FeatureMap<T> {
        let (_, emb) = self.embed(t);
        let levels = self.config.levels();
        let x0 = self.conv_in.forward(input);
        let mut skips: Vec<FeatureMap<T>> = Vec::with_capacity(levels - 1);
        let mut cur = x0;
        for (i, block) in self.down.iter().enumerate() {
            cur = block.forward(&cur, &emb);
            if i < levels - 1 {
                skips.push(cur.clone());
                cur = avg_pool2(&cur);
            }
        }
        cur = self.mid.forward(&cur, &emb);
        for (k, block) in self.up.iter().enumerate() {
            let skip = &skips[levels - 2 - k];
            let upsampled = upsample_nearest2(&cur);
            let cat = concat_channels(&upsampled, skip);
            cur = block.forward(&cat, &emb);
        }
        self.conv_out.forward(&cur)
    }

    fn forward_cached(&self, input: &FeatureMap<T>, t: usize) -> (FeatureMap<T>, UNetStash<T>) {
        let raw = self.sinusoid(t);
        let emb_pre = self.time_mlp.forward(&raw, 1);
        let mut emb = emb_pre.clone();
        silu(&mut emb);

        let levels = self.config.levels();
        let mut down_stash = Vec::with_capacity(levels);
        let mut down_out = Vec::with_capacity(levels);
        let mut cur = self.conv_in.forward(input);
        for (i, block) in self.down.iter().enumerate() {
            let (out, st) = block.forward_cached(&cur, &emb);
            down_stash.push(st);
            down_out.push(out.clone());
            cur = if i < levels - 1 { avg_pool2(&out) } else { out };
        }
        let (mid_out, mid_stash) = self.mid.forward_cached(&cur, &emb);
        cur = mid_out;
        let mut up_stash = Vec::with_capacity(levels - 1);
        let mut up_in = Vec::with_capacity(levels - 1);
        for (k, block) in self.up.iter().enumerate() {
            let skip = &down_out[levels - 2 - k];
            let upsampled = upsample_nearest2(&cur);
            let cat = concat_channels(&upsampled, skip);
            up_in.push(cat.clone());
            let (out, st) = block.forward_cached(&cat, &emb);
            up_stash.push(st);
            cur = out;
        }
        let last = cur.clone();
        let out = self.conv_out.forward(&cur);
        (
            out,
            UNetStash {
                input: input.clone(),
                emb_pre,
                emb,
                down_stash,
                down_out,
                mid_stash,
                up_stash,
                up_in,
                last,
            },
        )
    }

    /// Backpropagates `d_out`, accumulating parameter gradients into
    /// `grad` and returning the gradient w.r.t. the 2-channel input.
    fn backward_into(
        &self,
        stash: &UNetStash<T>,
        t: usize,
        d_out: &FeatureMap<T>,
        grad: &mut DenoiserModel<T>,
    ) -> FeatureMap<T> {
        let levels = self.config.levels();
        let mut demb = vec![T::zero(); self.config.time_embed_dim];

        let (mut cur_grad, dw, db) = self.conv_out.backward(&stash.last, d_out);
        acc(&mut grad.conv_out.w, &dw);
        acc(&mut grad.conv_out.b, &db);

        // up path in reverse
        let mut down_grads: Vec<Option<FeatureMap<T>>> = vec![None; levels];
        for k in (0..levels - 1).rev() {
            let dcat = self.up[k].backward_into(
                &stash.up_stash[k],
                &stash.emb,
                &cur_grad,
                &mut grad.up[k],
                &mut demb,
            );
            let skip_level = levels - 2 - k;
            let up_ch = stash.up_in[k].c - stash.down_out[skip_level].c;
            let (dup, dskip) = split_channels(&dcat, up_ch);
            down_grads[skip_level] = Some(dskip);
            cur_grad = upsample_nearest2_backward(&dup);
        }

        cur_grad = self.mid.backward_into(
            &stash.mid_stash,
            &stash.emb,
            &cur_grad,
            &mut grad.mid,
            &mut demb,
        );

        for i in (0..levels).rev() {
            if i < levels - 1 {
                let (h, w) = (stash.down_out[i].h, stash.down_out[i].w);
                let mut d = avg_pool2_backward(&cur_grad, h, w);
                if let Some(ds) = &down_grads[i] {
                    acc(&mut d.data, &ds.data);
                }
                cur_grad = d;
            }
            cur_grad = self.down[i].backward_into(
                &stash.down_stash[i],
                &stash.emb,
                &cur_grad,
                &mut grad.down[i],
                &mut demb,
            );
        }

        let (dinput, dw_in, db_in) = self.conv_in.backward(&stash.input, &cur_grad);
        acc(&mut grad.conv_in.w, &dw_in);
        acc(&mut grad.conv_in.b, &db_in);

        // through the shared embedding MLP
        silu_backward(&stash.emb_pre, &mut demb);
        let raw = self.sinusoid(t);
        let (_, dwt, dbt) = self.time_mlp.backward(&raw, &demb, 1);
        acc(&mut grad.time_mlp.w, &dwt);
        acc(&mut grad.time_mlp.b, &dbt);

        dinput
    }

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.time_mlp.w.fill(T::zero());
        z.time_mlp.b.fill(T::zero());
        z.conv_in.w.fill(T::zero());
        z.conv_in.b.fill(T::zero());
        z.conv_out.w.fill(T::zero());
        z.conv_out.b.fill(T::zero());
        z.down = z.down.iter().map(|b| b.zeroed()).collect();
        z.mid = z.mid.zeroed();
        z.up = z.up.iter().map(|b| b.zeroed()).collect();
        z
    }

    /// Visits every parameter tensor in a fixed order.
    fn for_each_param(&self, f: &mut impl FnMut(String, &Vec<T>)) {
        f("time_mlp.w".into(), &self.time_mlp.w);
        f("time_mlp.b".into(), &self.time_mlp.b);
        f("conv_in.w".into(), &self.conv_in.w);
        f("conv_in.b".into(), &self.conv_in.b);
        for (i, b) in self.down.iter().enumerate() {
            visit_block(&format!("down{i}"), b, f);
        }
        visit_block("mid", &self.mid, f);
        for (i, b) in self.up.iter().enumerate() {
            visit_block(&format!("up{i}"), b, f);
        }
        f("conv_out.w".into(), &self.conv_out.w);
        f("conv_out.b".into(), &self.conv_out.b);
    }

    fn for_each_param_mut(&mut self, f: &mut impl FnMut(&mut Vec<T>)) {
        f(&mut self.time_mlp.w);
        f(&mut self.time_mlp.b);
        f(&mut self.conv_in.w);
        f(&mut self.conv_in.b);
        for b in self.down.iter_mut() {
            visit_block_mut(b, f);
        }
        visit_block_mut(&mut self.mid, f);
        for b in self.up.iter_mut() {
            visit_block_mut(b, f);
        }
        f(&mut self.conv_out.w);
        f(&mut self.conv_out.b);
    }

    pub fn collect_params(&self) -> Vec<T> {
        let mut flat = Vec::with_capacity(self.n_params());
        self.for_each_param(&mut |_, v| flat.extend_from_slice(v));
        flat
    }

    pub fn set_params(&mut self, flat: &[T]) {
        let mut off = 0;
        self.for_each_param_mut(&mut |v| {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        debug_assert_eq!(off, flat.len());
    }

    /// Noise prediction on a complex image.
    pub fn predict_eps(&self, x: &ComplexImage<T>, t: usize) -> Result<ComplexImage<T>> {
        let (h, w) = x.shape();
        self.check_input(h, w)?;
        let out = self.forward_features(&to_features(x), t);
        from_features(&out)
    }

    pub fn save(&self, path: &Path, schedule: &ScheduleSpec) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "denoiser-unet",
            "config": self.config,
            "schedule": schedule,
        });
        let mut params: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        self.for_each_param(&mut |name, v| {
            params.push((
                name,
                vec![v.len()],
                v.iter().map(|x| x.to_f64_c() as f32).collect(),
            ));
        });
        let borrowed: Vec<(&str, Vec<usize>, Vec<f32>)> = params
            .iter()
            .map(|(n, s, d)| (n.as_str(), s.clone(), d.clone()))
            .collect();
        tensorio::save_params(path, meta, &borrowed)
    }

    pub fn load(path: &Path) -> Result<(Self, ScheduleSpec)> {
        let (meta, params) = tensorio::load_params(path)?;
        let config: DenoiserConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::io(path, format!("bad denoiser config: {e}")))?;
        let schedule: ScheduleSpec = serde_json::from_value(meta["schedule"].clone())
            .map_err(|e| Error::io(path, format!("bad schedule spec: {e}")))?;
        let mut model = Self::init(config, 0);
        let mut flat: Vec<T> = Vec::with_capacity(model.n_params());
        for (_, data) in &params {
            flat.extend(data.iter().map(|&v| T::from_f64_c(v as f64)));
        }
        if flat.len() != model.n_params() {
            return Err(Error::io(
                path,
                format!(
                    "checkpoint holds {} parameters, architecture needs {}",
                    flat.len(),
                    model.n_params()
                ),
            ));
        }
        model.set_params(&flat);
        Ok((model, schedule))
    }
}

fn visit_block<T: Scalar>(prefix: &str, b: &Block<T>, f: &mut impl FnMut(String, &Vec<T>)) {
    f(format!("{prefix}.conv1.w"), &b.conv1.w);
    f(format!("{prefix}.conv1.b"), &b.conv1.b);
    f(format!("{prefix}.temb.w"), &b.temb.w);
    f(format!("{prefix}.temb.b"), &b.temb.b);
    f(format!("{prefix}.conv2.w"), &b.conv2.w);
    f(format!("{prefix}.conv2.b"), &b.conv2.b);
    if let Some(p) = &b.skip {
        f(format!("{prefix}.skip.w"), &p.w);
        f(format!("{prefix}.skip.b"), &p.b);
    }
}

fn visit_block_mut<T: Scalar>(b: &mut Block<T>, f: &mut impl FnMut(&mut Vec<T>)) {
    f(&mut b.conv1.w);
    f(&mut b.conv1.b);
    f(&mut b.temb.w);
    f(&mut b.temb.b);
    f(&mut b.conv2.w);
    f(&mut b.conv2.b);
    if let Some(p) = &mut b.skip {
        f(&mut p.w);
        f(&mut p.b);
    }
}

pub fn to_features<T: Scalar>(x: &ComplexImage<T>) -> FeatureMap<T> {
    let (h, w) = x.shape();
    let mut fm = FeatureMap::zeros(h, w, 2);
    for ((r, c), z) in x.data().indexed_iter() {
        fm.data[(r * w + c) * 2] = z.re;
        fm.data[(r * w + c) * 2 + 1] = z.im;
    }
    fm
}

pub fn from_features<T: Scalar>(fm: &FeatureMap<T>) -> Result<ComplexImage<T>> {
    debug_assert_eq!(fm.c, 2);
    let (h, w) = (fm.h, fm.w);
    ComplexImage::new(ndarray::Array2::from_shape_fn((h, w), |(r, c)| {
        Complex::new(fm.data[(r * w + c) * 2], fm.data[(r * w + c) * 2 + 1])
    }))
}

impl<T: Scalar> ScoreModel<T> for DenoiserModel<T> {
    fn eps(
        &self,
        x: &ComplexImage<T>,
        t: usize,
        _schedule: &NoiseSchedule<T>,
    ) -> Result<ComplexImage<T>> {
        self.predict_eps(x, t)
    }

    fn eps_vjp(
        &self,
        x: &ComplexImage<T>,
        t: usize,
        _schedule: &NoiseSchedule<T>,
        cotangent: &ComplexImage<T>,
    ) -> Result<ComplexImage<T>> {
        let (h, w) = x.shape();
        self.check_input(h, w)?;
        let (_, stash) = self.forward_cached(&to_features(x), t);
        let mut grad = self.zeroed();
        let dx = self.backward_into(&stash, t, &to_features(cotangent), &mut grad);
        from_features(&dx)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Validation loss cadence in steps.
    pub val_every: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 2,
            learning_rate: 2e-4,
            val_every: 250,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainTrace {
    pub train_loss: Vec<f64>,
    /// (step, loss) pairs; step 0 is the untrained model.
    pub val_loss: Vec<(usize, f64)>,
}

impl TrainTrace {
    pub fn initial_val(&self) -> f64 {
        self.val_loss.first().map(|&(_, l)| l).unwrap_or(f64::NAN)
    }

    pub fn final_val(&self) -> f64 {
        self.val_loss.last().map(|&(_, l)| l).unwrap_or(f64::NAN)
    }
}

/// Epsilon-prediction training: sample a timestep and a noise draw per
/// image, diffuse, and regress the draw with mean squared error.
pub fn train_denoiser<T: Scalar>(
    dataset: &Dataset<T>,
    schedule: &NoiseSchedule<T>,
    schedule_spec: &ScheduleSpec,
    arch: DenoiserConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<(DenoiserModel<T>, TrainTrace)> {
    if dataset.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let (h, w) = dataset.train[0].shape();
    let model_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut model = DenoiserModel::<T>::init(arch, model_seed);
    model.check_input(h, w)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = crate::nn::adam::Adam::new(model.n_params(), T::from_f64_c(config.learning_rate));
    let mut flat = model.collect_params();

    // frozen validation draws so the validation loss is comparable
    // across steps and across runs
    let mut val_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5555_5555_5555_5555);
    let val_set: Vec<(usize, ComplexImage<T>, ComplexImage<T>)> = dataset
        .test
        .iter()
        .map(|img| {
            let t = val_rng.random_range(1..=schedule.len());
            let eps = ComplexImage::standard_normal(h, w, &mut val_rng);
            (t, img.clone(), eps)
        })
        .collect();

    let validate = |model: &DenoiserModel<T>| -> Result<f64> {
        let mut total = 0.0;
        for (t, img, eps) in &val_set {
            let xt = super::forward_diffuse(img, *t, eps, schedule)?;
            let pred = model.predict_eps(&xt, *t)?;
            let diff = pred.sub(eps);
            total += diff.real_dot(&diff).to_f64_c() / (2.0 * (h * w) as f64);
        }
        Ok(total / val_set.len() as f64)
    };

    let mut trace = TrainTrace {
        train_loss: Vec::with_capacity(config.steps),
        val_loss: vec![(0, validate(&model)?)],
    };

    let n_px = T::from_f64_c(2.0 * (h * w) as f64);
    for step in 1..=config.steps {
        let mut grads = model.zeroed();
        let mut loss = T::zero();
        for _ in 0..config.batch_size {
            let idx = rng.random_range(0..dataset.train.len());
            let t = rng.random_range(1..=schedule.len());
            let eps = ComplexImage::standard_normal(h, w, &mut rng);
            let xt = super::forward_diffuse(&dataset.train[idx], t, &eps, schedule)?;

            let (pred, stash) = model.forward_cached(&to_features(&xt), t);
            let eps_fm = to_features(&eps);
            // L = mean (pred - eps)^2, dL/dpred = 2 (pred - eps) / n
            let mut d_out = FeatureMap::zeros(h, w, 2);
            let mut sample_loss = T::zero();
            let scale = T::from_f64_c(2.0) / n_px;
            for i in 0..pred.data.len() {
                let d = pred.data[i] - eps_fm.data[i];
                sample_loss += d * d;
                d_out.data[i] = d * scale;
            }
            loss += sample_loss / n_px;
            model.backward_into(&stash, t, &d_out, &mut grads);
        }
        let batch = T::from_f64_c(config.batch_size as f64);
        let loss = (loss / batch).to_f64_c();
        if !loss.is_finite() {
            return Err(Error::training(format!(
                "loss diverged to {loss} at step {step}"
            )));
        }
        trace.train_loss.push(loss);

        let mut gflat = grads.collect_params();
        for g in gflat.iter_mut() {
            *g = *g / batch;
        }
        opt.step(&mut flat, &gflat);
        model.set_params(&flat);

        if step % config.val_every == 0 || step == config.steps {
            trace.val_loss.push((step, validate(&model)?));
        }
    }

    if let Some(path) = &config.checkpoint {
        model.save(path, schedule_spec)?;
    }
    Ok((model, trace))
}
