//! Cartesian k-space under-sampling masks.
//!
//! All patterns are deterministic functions of `(pattern, shape, R, acs,
//! seed)`. Acceleration is counted over every k-space entry, with the
//! autocalibration region included in the kept budget.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPattern {
    Random1d,
    Gaussian1d,
    Gaussian2d,
    Poisson2d,
    PartialFourier,
}

impl std::str::FromStr for MaskPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random1d" => Ok(Self::Random1d),
            "gaussian1d" => Ok(Self::Gaussian1d),
            "gaussian2d" => Ok(Self::Gaussian2d),
            "poisson2d" => Ok(Self::Poisson2d),
            "partial_fourier" => Ok(Self::PartialFourier),
            other => Err(Error::config(format!("unknown mask pattern `{other}`"))),
        }
    }
}

impl std::fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Random1d => "random1d",
            Self::Gaussian1d => "gaussian1d",
            Self::Gaussian2d => "gaussian2d",
            Self::Poisson2d => "poisson2d",
            Self::PartialFourier => "partial_fourier",
        };
        f.write_str(s)
    }
}

/// Binary sampling mask over an H×W k-space grid.
///
/// Rows are phase-encode lines: 1D patterns keep or drop whole rows.
/// `acs` counts fully sampled central lines for 1D patterns and the side
/// of the fully sampled central square for 2D patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub keep: Array2<u8>,
    pub pattern: MaskPattern,
    pub r: f64,
    pub acs: usize,
    pub seed: u64,
}

/// Relative tolerance on the achieved acceleration.
pub const R_TOLERANCE: f64 = 0.05;

impl SamplingMask {
    pub fn shape(&self) -> (usize, usize) {
        (self.keep.nrows(), self.keep.ncols())
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&v| v != 0).count()
    }

    /// Achieved acceleration: total entries over kept entries.
    pub fn r_effective(&self) -> f64 {
        let (h, w) = self.shape();
        (h * w) as f64 / self.kept_count() as f64
    }

    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.keep[[row, col]] != 0
    }

    /// Row-major list of kept positions.
    pub fn kept_positions(&self) -> Vec<(usize, usize)> {
        self.keep
            .indexed_iter()
            .filter(|(_, &v)| v != 0)
            .map(|(p, _)| p)
            .collect()
    }

    /// Checks every type invariant; used by tests and by loaders.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.shape();
        if !self.keep.iter().all(|&v| v == 0 || v == 1) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        match self.pattern {
            MaskPattern::Random1d | MaskPattern::Gaussian1d | MaskPattern::PartialFourier => {
                for row in self.keep.rows() {
                    let first = row[0];
                    if !row.iter().all(|&v| v == first) {
                        return Err(Error::invalid("1D mask must be constant along rows"));
                    }
                }
                for r in acs_range(h, self.acs) {
                    if self.keep[[r, 0]] == 0 {
                        return Err(Error::invalid("ACS line not sampled"));
                    }
                }
            }
            MaskPattern::Gaussian2d | MaskPattern::Poisson2d => {
                for r in acs_range(h, self.acs) {
                    for c in acs_range(w, self.acs) {
                        if self.keep[[r, c]] == 0 {
                            return Err(Error::invalid("ACS region not sampled"));
                        }
                    }
                }
            }
        }
        let reff = self.r_effective();
        let target = self.r;
        if (reff - target).abs() / target > R_TOLERANCE + 1e-12 {
            return Err(Error::invalid(format!(
                "achieved acceleration {reff:.4} misses target {target:.4}"
            )));
        }
        Ok(())
    }
}

/// Central index range of length `acs` (centered on index `n/2`, the DC
/// location of the centered FFT convention).
pub fn acs_range(n: usize, acs: usize) -> std::ops::Range<usize> {
    if acs == 0 {
        return n / 2..n / 2;
    }
    let start = (n / 2).saturating_sub(acs / 2);
    let start = start.min(n - acs.min(n));
    start..(start + acs.min(n))
}

pub fn make_mask(
    pattern: MaskPattern,
    shape: (usize, usize),
    r: f64,
    acs: usize,
    seed: u64,
) -> Result<SamplingMask> {
    let (h, w) = shape;
    if h < 8 || w < 8 {
        return Err(Error::config("mask shape must be at least 8x8"));
    }
    if !r.is_finite() || r < 1.0 {
        return Err(Error::config("acceleration R must be >= 1"));
    }

    let keep = match pattern {
        MaskPattern::Random1d => lines_mask(h, w, r, acs, seed, LineWeights::Uniform)?,
        MaskPattern::Gaussian1d => lines_mask(h, w, r, acs, seed, LineWeights::Gaussian)?,
        MaskPattern::Gaussian2d => gaussian2d_mask(h, w, r, acs, seed)?,
        MaskPattern::Poisson2d => poisson2d_mask(h, w, r, acs, seed)?,
        MaskPattern::PartialFourier => partial_fourier_mask(h, w, acs)?,
    };

    let mask = SamplingMask {
        keep,
        pattern,
        r: if pattern == MaskPattern::PartialFourier {
            let kept = h.div_ceil(2);
            h as f64 / kept as f64
        } else {
            r
        },
        acs,
        seed,
    };
    mask.validate().map_err(|e| Error::config(e.to_string()))?;
    Ok(mask)
}

enum LineWeights {
    Uniform,
    Gaussian,
}

fn full_mask(h: usize, w: usize) -> Array2<u8> {
    Array2::from_elem((h, w), 1)
}

fn lines_mask(
    h: usize,
    w: usize,
    r: f64,
    acs: usize,
    seed: u64,
    weights: LineWeights,
) -> Result<Array2<u8>> {
    if r == 1.0 {
        return Ok(full_mask(h, w));
    }
    if acs as f64 > h as f64 / r {
        return Err(Error::config(format!(
            "ACS of {acs} lines exceeds the budget of {:.1} lines at R={r}",
            h as f64 / r
        )));
    }
    let n_lines = (h as f64 / r).round().max(1.0) as usize;
    let achieved = h as f64 / n_lines as f64;
    if (achieved - r).abs() / r > R_TOLERANCE {
        return Err(Error::config(format!(
            "no whole-line budget achieves R={r} within {:.0}% on {h} lines",
            R_TOLERANCE * 100.0
        )));
    }
    if n_lines < acs {
        return Err(Error::config("ACS alone exceeds the line budget"));
    }

    let acs_rows = acs_range(h, acs);
    let candidates: Vec<usize> = (0..h).filter(|row| !acs_rows.contains(row)).collect();
    let extra = n_lines - acs;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = match weights {
        LineWeights::Uniform => weighted_sample_without_replacement(
            &candidates,
            |_| 1.0,
            extra,
            &mut rng,
        ),
        LineWeights::Gaussian => {
            let sigma = h as f64 / 6.0;
            let center = (h / 2) as f64;
            weighted_sample_without_replacement(
                &candidates,
                |&row| {
                    let d = row as f64 - center;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                },
                extra,
                &mut rng,
            )
        }
    };

    let mut keep = Array2::zeros((h, w));
    for row in acs_rows.chain(chosen) {
        keep.row_mut(row).fill(1);
    }
    Ok(keep)
}

/// Weighted sampling without replacement via exponential keys: taking
/// the `k` largest `ln(u)/w` is distributed as sequential draws with
/// probability proportional to `w`. Ties are broken by index so the
/// result is a pure function of the generator stream.
fn weighted_sample_without_replacement<I: Copy>(
    items: &[I],
    weight: impl Fn(&I) -> f64,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<I> {
    let mut keyed: Vec<(f64, usize)> = items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let u: f64 = rng.random();
            let w = weight(it).max(f64::MIN_POSITIVE);
            ((1.0 - u).ln() / w, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    keyed.truncate(k);
    keyed.into_iter().map(|(_, i)| items[i]).collect()
}

fn check_2d_budget(h: usize, w: usize, r: f64, acs: usize) -> Result<usize> {
    let budget = (h * w) as f64 / r;
    if (acs * acs) as f64 > budget {
        return Err(Error::config(format!(
            "ACS square {acs}x{acs} exceeds the sampling budget of {budget:.0} points at R={r}"
        )));
    }
    let n_keep = budget.round().max(1.0) as usize;
    let achieved = (h * w) as f64 / n_keep as f64;
    if (achieved - r).abs() / r > R_TOLERANCE {
        return Err(Error::config(format!(
            "no point budget achieves R={r} within tolerance on a {h}x{w} grid"
        )));
    }
    Ok(n_keep)
}

fn gaussian2d_mask(h: usize, w: usize, r: f64, acs: usize, seed: u64) -> Result<Array2<u8>> {
    if r == 1.0 {
        return Ok(full_mask(h, w));
    }
    let n_keep = check_2d_budget(h, w, r, acs)?;
    let acs_r = acs_range(h, acs);
    let acs_c = acs_range(w, acs);
    let n_acs = acs_r.len() * acs_c.len();
    if n_keep < n_acs {
        return Err(Error::config("ACS alone exceeds the point budget"));
    }

    let candidates: Vec<(usize, usize)> = (0..h)
        .flat_map(|row| (0..w).map(move |col| (row, col)))
        .filter(|(row, col)| !(acs_r.contains(row) && acs_c.contains(col)))
        .collect();

    let (sy, sx) = (h as f64 / 6.0, w as f64 / 6.0);
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = weighted_sample_without_replacement(
        &candidates,
        |&(row, col)| {
            let dy = row as f64 - cy;
            let dx = col as f64 - cx;
            (-dy * dy / (2.0 * sy * sy) - dx * dx / (2.0 * sx * sx)).exp()
        },
        n_keep - n_acs,
        &mut rng,
    );

    let mut keep = Array2::zeros((h, w));
    for row in acs_r {
        for col in acs_c.clone() {
            keep[[row, col]] = 1;
        }
    }
    for (row, col) in chosen {
        keep[[row, col]] = 1;
    }
    Ok(keep)
}

/// Variable-density Poisson-disc points: spacing grows with distance
/// from the k-space center. `scale` is the center spacing in pixels.
fn poisson_disc_points(h: usize, w: usize, scale: f64, seed: u64) -> Vec<(f64, f64)> {
    const ATTEMPTS: usize = 30;
    const DENSITY_SLOPE: f64 = 2.5;

    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let dmax = (cy * cy + cx * cx).sqrt().max(1.0);
    let radius = |y: f64, x: f64| -> f64 {
        let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / dmax;
        scale * (1.0 + DENSITY_SLOPE * d)
    };

    let cell = scale / std::f64::consts::SQRT_2;
    let gh = (h as f64 / cell).ceil() as usize + 1;
    let gw = (w as f64 / cell).ceil() as usize + 1;
    let mut grid: Vec<Option<u32>> = vec![None; gh * gw];
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut active: Vec<u32> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let insert = |p: (f64, f64), points: &mut Vec<(f64, f64)>, grid: &mut Vec<Option<u32>>| {
        let gy = (p.0 / cell) as usize;
        let gx = (p.1 / cell) as usize;
        points.push(p);
        grid[gy * gw + gx] = Some(points.len() as u32 - 1);
    };

    insert((cy, cx), &mut points, &mut grid);
    active.push(0);

    // how many grid cells the largest spacing can span
    let reach = ((scale * (1.0 + DENSITY_SLOPE)) / cell).ceil() as isize + 1;

    while !active.is_empty() {
        let slot = rng.random_range(0..active.len());
        let base = points[active[slot] as usize];
        let rb = radius(base.0, base.1);
        let mut found = false;
        for _ in 0..ATTEMPTS {
            let rho = rb * (1.0 + rng.random::<f64>());
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let cand = (base.0 + rho * theta.sin(), base.1 + rho * theta.cos());
            if cand.0 < 0.0 || cand.0 >= h as f64 || cand.1 < 0.0 || cand.1 >= w as f64 {
                continue;
            }
            let rc = radius(cand.0, cand.1);
            let gy = (cand.0 / cell) as isize;
            let gx = (cand.1 / cell) as isize;
            let mut ok = true;
            'scan: for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (ny, nx) = (gy + dy, gx + dx);
                    if ny < 0 || nx < 0 || ny >= gh as isize || nx >= gw as isize {
                        continue;
                    }
                    if let Some(idx) = grid[ny as usize * gw + nx as usize] {
                        let q = points[idx as usize];
                        let dist = ((q.0 - cand.0).powi(2) + (q.1 - cand.1).powi(2)).sqrt();
                        let rq = radius(q.0, q.1);
                        if dist < 0.5 * (rc + rq) {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
            }
            if ok {
                insert(cand, &mut points, &mut grid);
                active.push(points.len() as u32 - 1);
                found = true;
                break;
            }
        }
        if !found {
            active.swap_remove(slot);
        }
    }
    points
}

fn poisson2d_mask(h: usize, w: usize, r: f64, acs: usize, seed: u64) -> Result<Array2<u8>> {
    if r == 1.0 {
        return Ok(full_mask(h, w));
    }
    check_2d_budget(h, w, r, acs)?;

    let acs_r = acs_range(h, acs);
    let acs_c = acs_range(w, acs);
    let rasterize = |scale: f64| -> Array2<u8> {
        let mut keep = Array2::zeros((h, w));
        for (y, x) in poisson_disc_points(h, w, scale, seed) {
            keep[[y as usize, x as usize]] = 1;
        }
        for row in acs_r.clone() {
            for col in acs_c.clone() {
                keep[[row, col]] = 1;
            }
        }
        keep
    };
    let reff_of = |keep: &Array2<u8>| -> f64 {
        (h * w) as f64 / keep.iter().filter(|&&v| v != 0).count() as f64
    };

    // Spacing is searched by bisection: larger spacing keeps fewer
    // points, so the achieved acceleration is monotone in `scale` up to
    // process noise. The generator is re-seeded per trial, making the
    // whole search a pure function of (shape, R, acs, seed).
    let mut lo = 0.7_f64;
    let mut hi = (h.min(w) as f64) / 3.0;
    let mut best: Option<(f64, Array2<u8>)> = None;
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        let keep = rasterize(mid);
        let reff = reff_of(&keep);
        let miss = (reff - r).abs() / r;
        if best.as_ref().map_or(true, |(m, _)| miss < *m) {
            best = Some((miss, keep));
        }
        if miss <= R_TOLERANCE * 0.6 {
            break;
        }
        if reff < r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (miss, keep) = best.expect("at least one bisection trial");
    if miss > R_TOLERANCE {
        return Err(Error::config(format!(
            "poisson2d could not reach R={r} within tolerance on a {h}x{w} grid"
        )));
    }
    Ok(keep)
}

/// Contiguous half of the phase-encode lines. The block is anchored so
/// that it contains both the center line and the full ACS region.
fn partial_fourier_mask(h: usize, w: usize, acs: usize) -> Result<Array2<u8>> {
    let kept = h.div_ceil(2);
    if acs > kept {
        return Err(Error::config("ACS exceeds the half-Fourier line count"));
    }
    let start = (h / 2 - acs / 2).min(h - kept);
    let mut keep = Array2::zeros((h, w));
    for row in start..start + kept {
        keep.row_mut(row).fill(1);
    }
    Ok(keep)
}
