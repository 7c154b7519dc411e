//! Variance-preserving diffusion: the discrete noise schedule, Tweedie
//! posterior-mean denoising, ancestral reverse steps and renoising, plus
//! the two score providers (an exact Gaussian-mixture oracle and a small
//! trainable noise-prediction network).
//!
//! Timesteps are 1-based: `t` runs over `1..=T`, and `alpha_bar(0) = 1`
//! so renoising at index 0 is the identity.

pub mod denoiser;
pub mod gmm;

pub use denoiser::{train_denoiser, DenoiserConfig, DenoiserModel, TrainConfig, TrainTrace};
pub use gmm::GmmPrior;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ComplexImage;
use crate::scalar::Scalar;

/// Discretized VP-SDE schedule: per-step `beta_t` and the cumulative
/// products `alpha_bar_t`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<T: Scalar> {
    betas: Vec<T>,
    alpha_bars: Vec<T>,
}

/// Serializable description of a linear-ramp schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleSpec {
    /// Reference schedule at T = 2000 is a linear 1e-4..0.02 ramp; when
    /// T shrinks, the ramp scales by 2000/T so the terminal noise level
    /// stays put.
    pub fn scaled_default(t_steps: usize) -> Self {
        let factor = 2000.0 / t_steps as f64;
        Self {
            t_steps,
            beta_min: 1e-4 * factor,
            beta_max: (0.02 * factor).min(0.999),
        }
    }

    pub fn build<T: Scalar>(&self) -> Result<NoiseSchedule<T>> {
        make_vp_schedule(self.t_steps, self.beta_min, self.beta_max)
    }
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`, with the `alpha_bar_0 = 1`
    /// convention.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )))
        } else {
            Ok(())
        }
    }

    /// True when the ramp is strong enough for sampling: nearly
    /// noise-free at t=1 and nearly pure noise at t=T.
    pub fn is_well_conditioned(&self) -> bool {
        self.alpha_bar(1) >= T::from_f64_c(0.99)
            && self.alpha_bar(self.len()) <= T::from_f64_c(1e-3)
    }
}

/// Linear beta ramp from `beta_min` to `beta_max` over `t_steps` steps.
pub fn make_vp_schedule<T: Scalar>(
    t_steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule<T>> {
    if t_steps < 10 {
        return Err(Error::config("schedule needs at least 10 steps"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::config(format!(
            "beta range ({beta_min}, {beta_max}) must satisfy 0 < min <= max < 1"
        )));
    }
    let mut betas = Vec::with_capacity(t_steps);
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0f64;
    for i in 0..t_steps {
        let frac = if t_steps == 1 {
            0.0
        } else {
            i as f64 / (t_steps - 1) as f64
        };
        let beta = beta_min + (beta_max - beta_min) * frac;
        prod *= 1.0 - beta;
        betas.push(T::from_f64_c(beta));
        alpha_bars.push(T::from_f64_c(prod));
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

/// Common interface of every score provider. `eps` predicts the noise
/// component of `x_t`; `score` is the gradient of the log-density of the
/// noised distribution. They are linked by
/// `eps(x,t) = -sqrt(1 - alpha_bar_t) * score(x,t)`.
pub trait ScoreModel<T: Scalar> {
    fn eps(&self, x: &ComplexImage<T>, t: usize, schedule: &NoiseSchedule<T>)
        -> Result<ComplexImage<T>>;

    fn score(
        &self,
        x: &ComplexImage<T>,
        t: usize,
        schedule: &NoiseSchedule<T>,
    ) -> Result<ComplexImage<T>> {
        let scale = -(T::one() - schedule.alpha_bar(t)).sqrt().recip();
        Ok(self.eps(x, t, schedule)?.scaled(scale))
    }

    /// Vector-Jacobian product of `eps` at `x`: given a cotangent with
    /// the same shape, returns `J_eps(x)^T cot` in the real pairing of
    /// (re, im) components. Needed by gradient-guided samplers.
    fn eps_vjp(
        &self,
        x: &ComplexImage<T>,
        t: usize,
        schedule: &NoiseSchedule<T>,
        cotangent: &ComplexImage<T>,
    ) -> Result<ComplexImage<T>>;
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`
pub fn forward_diffuse<T: Scalar>(
    x0: &ComplexImage<T>,
    t: usize,
    eps: &ComplexImage<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<ComplexImage<T>> {
    schedule.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::invalid("noise draw shape mismatch"));
    }
    let ab = schedule.alpha_bar(t);
    Ok(x0.scaled(ab.sqrt()).axpy((T::one() - ab).sqrt(), eps))
}

/// Posterior-mean estimate of the clean image:
/// `x_{0|t} = (x_t - sqrt(1 - alpha_bar_t) eps(x_t, t)) / sqrt(alpha_bar_t)`
pub fn tweedie_denoise<T: Scalar>(
    x_t: &ComplexImage<T>,
    t: usize,
    model: &dyn ScoreModel<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<ComplexImage<T>> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let eps = model.eps(x_t, t, schedule)?;
    Ok(x_t
        .axpy(-(T::one() - ab).sqrt(), &eps)
        .scaled(ab.sqrt().recip()))
}

/// One reverse (ancestral) step:
/// `x_{t-1} = (1 + beta_t/2) x_t + beta_t score(x_t, t) + sqrt(beta_t) eps`,
/// with no noise on the final step (t = 1).
pub fn ancestral_step<T: Scalar>(
    x_t: &ComplexImage<T>,
    t: usize,
    model: &dyn ScoreModel<T>,
    schedule: &NoiseSchedule<T>,
    noise: Option<&ComplexImage<T>>,
) -> Result<ComplexImage<T>> {
    schedule.check_t(t)?;
    let beta = schedule.beta(t);
    let half = T::from_f64_c(0.5);
    let score = model.score(x_t, t, schedule)?;
    let mut next = x_t.scaled(T::one() + half * beta).axpy(beta, &score);
    if t > 1 {
        if let Some(n) = noise {
            if n.shape() != x_t.shape() {
                return Err(Error::invalid("noise draw shape mismatch"));
            }
            next = next.axpy(beta.sqrt(), n);
        }
    }
    Ok(next)
}

/// Maps a clean estimate back onto the diffusion trajectory at index
/// `t_minus_1`; at index 0 this is the identity.
pub fn renoise<T: Scalar>(
    x0_hat: &ComplexImage<T>,
    t_minus_1: usize,
    schedule: &NoiseSchedule<T>,
    noise: Option<&ComplexImage<T>>,
) -> Result<ComplexImage<T>> {
    if t_minus_1 > schedule.len() {
        return Err(Error::invalid(format!(
            "renoise index {t_minus_1} outside 0..={}",
            schedule.len()
        )));
    }
    if t_minus_1 == 0 {
        return Ok(x0_hat.clone());
    }
    let ab = schedule.alpha_bar(t_minus_1);
    let mut out = x0_hat.scaled(ab.sqrt());
    if let Some(n) = noise {
        if n.shape() != x0_hat.shape() {
            return Err(Error::invalid("noise draw shape mismatch"));
        }
        out = out.axpy((T::one() - ab).sqrt(), n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_schedule_is_well_conditioned() {
        let s: NoiseSchedule<f64> = make_vp_schedule(2000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(2000) < 1e-3);
        assert!(s.alpha_bar(1) >= 0.99);
        assert!(s.is_well_conditioned());
    }

    #[test]
    fn scaled_default_stays_well_conditioned() {
        for t in [100, 200, 500, 2000] {
            let s: NoiseSchedule<f64> = ScheduleSpec::scaled_default(t).build().unwrap();
            assert!(s.is_well_conditioned(), "T={t}");
        }
    }

    #[test]
    fn constant_beta_gives_powers() {
        let b = 0.05;
        let s: NoiseSchedule<f64> = make_vp_schedule(10, b, b).unwrap();
        for t in 1..=10 {
            let want = (1.0 - b).powi(t as i32);
            assert!((s.alpha_bar(t) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_beta_ranges_rejected() {
        assert!(make_vp_schedule::<f64>(100, 0.02, 1e-4).is_err());
        assert!(make_vp_schedule::<f64>(100, 0.0, 0.02).is_err());
        assert!(make_vp_schedule::<f64>(100, 1e-4, 1.0).is_err());
        assert!(make_vp_schedule::<f64>(5, 1e-4, 0.02).is_err());
    }

    #[test]
    fn forward_diffuse_endpoints() {
        let s: NoiseSchedule<f64> = make_vp_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = ComplexImage::standard_normal(8, 8, &mut rng);
        let zero = ComplexImage::zeros(8, 8);
        // eps = 0 contracts by sqrt(alpha_bar)
        let xt = forward_diffuse(&x0, 50, &zero, &s).unwrap();
        let want = x0.scaled(s.alpha_bar(50).sqrt());
        assert!(xt.sub(&want).norm_l2() < 1e-12);
        // out-of-range t
        assert!(forward_diffuse(&x0, 0, &zero, &s).is_err());
        assert!(forward_diffuse(&x0, 101, &zero, &s).is_err());
    }

    #[test]
    fn forward_diffuse_variance_monte_carlo() {
        let s: NoiseSchedule<f64> = make_vp_schedule(100, 1e-3, 0.2).unwrap();
        let t = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = ComplexImage::standard_normal(4, 4, &mut rng);
        let scaled = x0.scaled(s.alpha_bar(t).sqrt());
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0usize;
        // 4x4 complex image = 32 real components per draw
        for _ in 0..4000 {
            let eps = ComplexImage::standard_normal(4, 4, &mut rng);
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let d = xt.sub(&scaled);
            for z in d.data().iter() {
                sum += z.re + z.im;
                sumsq += z.re * z.re + z.im * z.im;
                count += 2;
            }
        }
        let mean = sum / count as f64;
        let var = sumsq / count as f64 - mean * mean;
        let want = 1.0 - s.alpha_bar(t);
        assert!(
            (var - want).abs() / want < 0.02,
            "sample var {var}, want {want}"
        );
    }

    /// Provider with identically zero score, for the algebraic-form
    /// checks of the reverse step.
    struct ZeroScore;

    impl ScoreModel<f64> for ZeroScore {
        fn eps(
            &self,
            x: &ComplexImage<f64>,
            _t: usize,
            _s: &NoiseSchedule<f64>,
        ) -> Result<ComplexImage<f64>> {
            let (h, w) = x.shape();
            Ok(ComplexImage::zeros(h, w))
        }

        fn eps_vjp(
            &self,
            x: &ComplexImage<f64>,
            _t: usize,
            _s: &NoiseSchedule<f64>,
            _cot: &ComplexImage<f64>,
        ) -> Result<ComplexImage<f64>> {
            let (h, w) = x.shape();
            Ok(ComplexImage::zeros(h, w))
        }
    }

    #[test]
    fn ancestral_step_zero_score_form() {
        let s: NoiseSchedule<f64> = make_vp_schedule(50, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = ComplexImage::standard_normal(8, 8, &mut rng);
        let t = 20;
        let out = ancestral_step(&x, t, &ZeroScore, &s, None).unwrap();
        let want = x.scaled(1.0 + 0.5 * s.beta(t));
        assert!(out.sub(&want).norm_l2() < 1e-14);
        // the final step ignores the noise draw
        let n = ComplexImage::standard_normal(8, 8, &mut rng);
        let last = ancestral_step(&x, 1, &ZeroScore, &s, Some(&n)).unwrap();
        let want = x.scaled(1.0 + 0.5 * s.beta(1));
        assert!(last.sub(&want).norm_l2() < 1e-14);
        assert!(ancestral_step(&x, 0, &ZeroScore, &s, None).is_err());
    }

    #[test]
    fn ancestral_step_small_beta_is_near_identity() {
        // beta -> 0 limit: the noiseless update tends to the identity
        let s: NoiseSchedule<f64> = make_vp_schedule(50, 1e-9, 1e-9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ComplexImage::standard_normal(8, 8, &mut rng);
        let out = ancestral_step(&x, 10, &ZeroScore, &s, None).unwrap();
        let rel = out.sub(&x).norm_l2() / x.norm_l2();
        assert!(rel < 1e-8, "relative deviation {rel}");
    }

    #[test]
    fn tweedie_with_zero_eps_rescales() {
        let s: NoiseSchedule<f64> = make_vp_schedule(50, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ComplexImage::standard_normal(8, 8, &mut rng);
        let t = 30;
        let out = tweedie_denoise(&x, t, &ZeroScore, &s).unwrap();
        let want = x.scaled(s.alpha_bar(t).sqrt().recip());
        assert!(out.sub(&want).norm_l2() < 1e-12);
    }

    #[test]
    fn renoise_at_zero_is_identity() {
        let s: NoiseSchedule<f64> = make_vp_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = ComplexImage::standard_normal(8, 8, &mut rng);
        let n = ComplexImage::standard_normal(8, 8, &mut rng);
        let out = renoise(&x, 0, &s, Some(&n)).unwrap();
        assert_eq!(x.data(), out.data());
        assert!(renoise(&x, 101, &s, None).is_err());
    }
}
