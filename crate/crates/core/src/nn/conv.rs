//! 2D feature maps in HWC layout and the convolution/resampling ops the
//! denoiser is built from. Convolutions go through im2col so everything
//! reduces to the matmul kernels.

use rand::Rng;
use rayon::prelude::*;

use super::matmul::{matmul, matmul_a_bt, matmul_at_b};
use crate::scalar::Scalar;

/// Dense H×W×C feature map, `data[(y*w + x)*c + ch]`.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Scalar> {
    pub data: Vec<T>,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            data: vec![T::zero(); h * w * c],
            h,
            w,
            c,
        }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// 3x3 same-padding convolution; weights (9*c_in, c_out), bias (c_out).
#[derive(Debug, Clone)]
pub struct Conv3x3<T: Scalar> {
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub c_in: usize,
    pub c_out: usize,
}

impl<T: Scalar> Conv3x3<T> {
    pub fn init_he<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let fan_in = 9 * c_in;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * c_out)
            .map(|_| T::from_f64_c(rng.random_range(-bound..bound)))
            .collect();
        Self {
            w,
            b: vec![T::zero(); c_out],
            c_in,
            c_out,
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Direct NHWC convolution. Weights are laid out as
    /// `w[(patch * c_in + ci) * c_out + co]` with patches in (dy, dx)
    /// row-major order.
    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        debug_assert_eq!(x.c, self.c_in);
        let (h, w, cin, cout) = (x.h, x.w, self.c_in, self.c_out);
        let mut out = FeatureMap::zeros(h, w, cout);
        out.data
            .par_chunks_mut(w * cout)
            .enumerate()
            .for_each(|(y, band)| {
                for xc in 0..w {
                    let acc = &mut band[xc * cout..(xc + 1) * cout];
                    acc.copy_from_slice(&self.b);
                    for (patch, (dy, dx)) in OFFSETS.iter().enumerate() {
                        let yy = y as i64 + dy;
                        let xx = xc as i64 + dx;
                        if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                            continue;
                        }
                        let src = ((yy as usize) * w + xx as usize) * cin;
                        let wbase = patch * cin * cout;
                        for ci in 0..cin {
                            let v = x.data[src + ci];
                            let wrow = &self.w[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow.iter()) {
                                *a = *a + v * wv;
                            }
                        }
                    }
                }
            });
        out
    }

    /// Returns (dx, dw, db), all computed with direct loops.
    pub fn backward(
        &self,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
    ) -> (FeatureMap<T>, Vec<T>, Vec<T>) {
        debug_assert_eq!(dy.c, self.c_out);
        let (h, w, cin, cout) = (x.h, x.w, self.c_in, self.c_out);

        // dx[y,x,ci] = sum over patches of W_patch[ci,:] . dy[y-dy, x-dx, :]
        let mut dx = FeatureMap::zeros(h, w, cin);
        dx.data
            .par_chunks_mut(w * cin)
            .enumerate()
            .for_each(|(y, band)| {
                for xc in 0..w {
                    let acc = &mut band[xc * cin..(xc + 1) * cin];
                    for (patch, (dyo, dxo)) in OFFSETS.iter().enumerate() {
                        let oy = y as i64 - dyo;
                        let ox = xc as i64 - dxo;
                        if oy < 0 || oy >= h as i64 || ox < 0 || ox >= w as i64 {
                            continue;
                        }
                        let src = ((oy as usize) * w + ox as usize) * cout;
                        let g = &dy.data[src..src + cout];
                        let wbase = patch * cin * cout;
                        for (ci, a) in acc.iter_mut().enumerate() {
                            let wrow = &self.w[wbase + ci * cout..wbase + (ci + 1) * cout];
                            let mut s = T::zero();
                            for (&wv, &gv) in wrow.iter().zip(g.iter()) {
                                s = s + wv * gv;
                            }
                            *a = *a + s;
                        }
                    }
                }
            });

        // dW accumulated over fixed row-band chunks, reduced in order
        let n_chunks = 8.min(h);
        let bands: Vec<Vec<T>> = (0..n_chunks)
            .into_par_iter()
            .map(|chunk| {
                let y0 = chunk * h / n_chunks;
                let y1 = (chunk + 1) * h / n_chunks;
                let mut dw = vec![T::zero(); 9 * cin * cout];
                for y in y0..y1 {
                    for xc in 0..w {
                        let g = &dy.data[(y * w + xc) * cout..(y * w + xc + 1) * cout];
                        for (patch, (dyo, dxo)) in OFFSETS.iter().enumerate() {
                            let yy = y as i64 + dyo;
                            let xx = xc as i64 + dxo;
                            if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                                continue;
                            }
                            let src = ((yy as usize) * w + xx as usize) * cin;
                            let wbase = patch * cin * cout;
                            for ci in 0..cin {
                                let v = x.data[src + ci];
                                let drow = &mut dw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                for (d, &gv) in drow.iter_mut().zip(g.iter()) {
                                    *d = *d + v * gv;
                                }
                            }
                        }
                    }
                }
                dw
            })
            .collect();
        let mut dw = vec![T::zero(); 9 * cin * cout];
        for band in &bands {
            for (d, &b) in dw.iter_mut().zip(band.iter()) {
                *d = *d + b;
            }
        }

        let mut db = vec![T::zero(); cout];
        for row in dy.data.chunks(cout) {
            for (d, &g) in db.iter_mut().zip(row.iter()) {
                *d = *d + g;
            }
        }
        (dx, dw, db)
    }
}

/// 3x3 patch offsets in (dy, dx) row-major order.
const OFFSETS: [(i64, i64); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// 1x1 convolution, i.e. a per-pixel linear map.
#[derive(Debug, Clone)]
pub struct Conv1x1<T: Scalar> {
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub c_in: usize,
    pub c_out: usize,
}

impl<T: Scalar> Conv1x1<T> {
    pub fn init_he<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / c_in as f64).sqrt();
        let w = (0..c_in * c_out)
            .map(|_| T::from_f64_c(rng.random_range(-bound..bound)))
            .collect();
        Self {
            w,
            b: vec![T::zero(); c_out],
            c_in,
            c_out,
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let mut out = FeatureMap::zeros(x.h, x.w, self.c_out);
        matmul(&x.data, &self.w, &mut out.data, x.pixels(), self.c_in, self.c_out);
        for row in out.data.chunks_mut(self.c_out) {
            for (v, &bv) in row.iter_mut().zip(self.b.iter()) {
                *v = *v + bv;
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
    ) -> (FeatureMap<T>, Vec<T>, Vec<T>) {
        let px = x.pixels();
        let mut dw = vec![T::zero(); self.c_in * self.c_out];
        matmul_at_b(&x.data, &dy.data, &mut dw, px, self.c_in, self.c_out);
        let mut db = vec![T::zero(); self.c_out];
        for row in dy.data.chunks(self.c_out) {
            for (d, &g) in db.iter_mut().zip(row.iter()) {
                *d = *d + g;
            }
        }
        let mut dx = FeatureMap::zeros(x.h, x.w, self.c_in);
        matmul_a_bt(&dy.data, &self.w, &mut dx.data, px, self.c_out, self.c_in);
        (dx, dw, db)
    }
}

pub fn avg_pool2<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    debug_assert!(x.h % 2 == 0 && x.w % 2 == 0);
    let (oh, ow, c) = (x.h / 2, x.w / 2, x.c);
    let quarter = T::from_f64_c(0.25);
    let mut out = FeatureMap::zeros(oh, ow, c);
    for y in 0..oh {
        for xc in 0..ow {
            for ch in 0..c {
                let mut acc = T::zero();
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc = acc + x.data[((2 * y + dy) * x.w + 2 * xc + dx) * c + ch];
                    }
                }
                out.data[(y * ow + xc) * c + ch] = acc * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(dy: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let c = dy.c;
    let quarter = T::from_f64_c(0.25);
    let mut dx = FeatureMap::zeros(h, w, c);
    for y in 0..h {
        for xc in 0..w {
            for ch in 0..c {
                dx.data[(y * w + xc) * c + ch] =
                    dy.data[((y / 2) * dy.w + xc / 2) * c + ch] * quarter;
            }
        }
    }
    dx
}

pub fn upsample_nearest2<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (oh, ow, c) = (x.h * 2, x.w * 2, x.c);
    let mut out = FeatureMap::zeros(oh, ow, c);
    for y in 0..oh {
        for xc in 0..ow {
            let src = ((y / 2) * x.w + xc / 2) * c;
            let dst = (y * ow + xc) * c;
            out.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
        }
    }
    out
}

pub fn upsample_nearest2_backward<T: Scalar>(dy: &FeatureMap<T>) -> FeatureMap<T> {
    debug_assert!(dy.h % 2 == 0 && dy.w % 2 == 0);
    let (oh, ow, c) = (dy.h / 2, dy.w / 2, dy.c);
    let mut dx = FeatureMap::zeros(oh, ow, c);
    for y in 0..dy.h {
        for xc in 0..dy.w {
            let dst = ((y / 2) * ow + xc / 2) * c;
            let src = (y * dy.w + xc) * c;
            for ch in 0..c {
                dx.data[dst + ch] = dx.data[dst + ch] + dy.data[src + ch];
            }
        }
    }
    dx
}

pub fn concat_channels<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let c = a.c + b.c;
    let mut out = FeatureMap::zeros(a.h, a.w, c);
    for p in 0..a.pixels() {
        out.data[p * c..p * c + a.c].copy_from_slice(&a.data[p * a.c..(p + 1) * a.c]);
        out.data[p * c + a.c..(p + 1) * c].copy_from_slice(&b.data[p * b.c..(p + 1) * b.c]);
    }
    out
}

pub fn split_channels<T: Scalar>(
    x: &FeatureMap<T>,
    c_first: usize,
) -> (FeatureMap<T>, FeatureMap<T>) {
    let c_second = x.c - c_first;
    let mut a = FeatureMap::zeros(x.h, x.w, c_first);
    let mut b = FeatureMap::zeros(x.h, x.w, c_second);
    for p in 0..x.pixels() {
        a.data[p * c_first..(p + 1) * c_first]
            .copy_from_slice(&x.data[p * x.c..p * x.c + c_first]);
        b.data[p * c_second..(p + 1) * c_second]
            .copy_from_slice(&x.data[p * x.c + c_first..(p + 1) * x.c]);
    }
    (a, b)
}
