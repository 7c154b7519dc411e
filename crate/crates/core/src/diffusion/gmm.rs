//! Exact score oracle for Gaussian-mixture priors.
//!
//! Under the VP forward process a mixture component N(mu, sigma^2 I)
//! diffuses to N(sqrt(alpha_bar) mu, (alpha_bar sigma^2 + 1 - alpha_bar) I),
//! so the noised density, its score and its Hessian all have closed
//! forms. Complex images are treated as stacked real (re, im) vectors.

use num_complex::Complex;

use super::{NoiseSchedule, ScoreModel};
use crate::error::{Error, Result};
use crate::image::ComplexImage;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GmmPrior<T: Scalar> {
    weights: Vec<T>,
    means: Vec<ComplexImage<T>>,
    variances: Vec<T>,
}

impl<T: Scalar> GmmPrior<T> {
    pub fn new(
        weights: Vec<T>,
        means: Vec<ComplexImage<T>>,
        variances: Vec<T>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(Error::config("mixture components must align"));
        }
        if weights.iter().any(|&w| w <= T::zero()) {
            return Err(Error::config("mixture weights must be positive"));
        }
        let sum: T = weights.iter().fold(T::zero(), |a, &b| a + b);
        if (sum - T::one()).abs() > T::from_f64_c(1e-9) {
            return Err(Error::config(format!("mixture weights sum to {sum}, not 1")));
        }
        if variances.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::config("component variances must be positive and finite"));
        }
        let shape = means[0].shape();
        if means.iter().any(|m| m.shape() != shape) {
            return Err(Error::config("component means must share one shape"));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// Standard complex Gaussian prior: a single zero-mean component of
    /// unit variance per real component.
    pub fn unit(h: usize, w: usize) -> Self {
        Self {
            weights: vec![T::one()],
            means: vec![ComplexImage::zeros(h, w)],
            variances: vec![T::one()],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.means[0].shape()
    }

    fn check_shape(&self, x: &ComplexImage<T>) -> Result<()> {
        if x.shape() != self.shape() {
            return Err(Error::invalid(format!(
                "probe shape {:?} does not match prior {:?}",
                x.shape(),
                self.shape()
            )));
        }
        Ok(())
    }

    /// Per-component diffused log-likelihoods `ln w_i + ln N_i(x)`.
    fn component_logs(&self, x: &ComplexImage<T>, t: usize, schedule: &NoiseSchedule<T>) -> Vec<T> {
        let ab = if t == 0 { T::one() } else { schedule.alpha_bar(t) };
        let d = T::from_f64_c(2.0 * (x.shape().0 * x.shape().1) as f64);
        let two_pi = T::from_f64_c(std::f64::consts::TAU);
        let half = T::from_f64_c(0.5);
        self.weights
            .iter()
            .zip(self.means.iter())
            .zip(self.variances.iter())
            .map(|((&w, mu), &s2)| {
                let v = ab * s2 + (T::one() - ab);
                let diff = x.axpy(-ab.sqrt(), mu);
                let sq = diff.real_dot(&diff);
                w.ln() - half * sq / v - half * d * (two_pi * v).ln()
            })
            .collect()
    }

    /// Log-density of the noised mixture at `x`, stabilized by
    /// log-sum-exp.
    pub fn log_density(&self, x: &ComplexImage<T>, t: usize, schedule: &NoiseSchedule<T>) -> Result<T> {
        self.check_shape(x)?;
        let logs = self.component_logs(x, t, schedule);
        Ok(logsumexp(&logs))
    }

    fn responsibilities(&self, logs: &[T]) -> Vec<T> {
        let lse = logsumexp(logs);
        logs.iter().map(|&l| (l - lse).exp()).collect()
    }

    /// Exact score of the noised mixture.
    pub fn score_at(
        &self,
        x: &ComplexImage<T>,
        t: usize,
        schedule: &NoiseSchedule<T>,
    ) -> Result<ComplexImage<T>> {
        self.check_shape(x)?;
        let ab = schedule.alpha_bar(t);
        let logs = self.component_logs(x, t, schedule);
        let resp = self.responsibilities(&logs);
        let (h, w) = x.shape();
        let mut out = ComplexImage::zeros(h, w);
        for ((&r, mu), &s2) in resp.iter().zip(self.means.iter()).zip(self.variances.iter()) {
            let v = ab * s2 + (T::one() - ab);
            // r * (sqrt(ab) mu - x) / v
            let g = mu.scaled(ab.sqrt()).sub(x).scaled(r / v);
            out = out.add(&g);
        }
        Ok(out)
    }

    /// Hessian-vector product of the log-density:
    /// `H u = sum_i r_i (g_i <g_i,u> - u/v_i) - s <s,u>`.
    pub fn score_hvp(
        &self,
        x: &ComplexImage<T>,
        t: usize,
        schedule: &NoiseSchedule<T>,
        u: &ComplexImage<T>,
    ) -> Result<ComplexImage<T>> {
        self.check_shape(x)?;
        self.check_shape(u)?;
        let ab = schedule.alpha_bar(t);
        let logs = self.component_logs(x, t, schedule);
        let resp = self.responsibilities(&logs);
        let (h, w) = x.shape();
        let mut out = ComplexImage::zeros(h, w);
        let mut score = ComplexImage::zeros(h, w);
        for ((&r, mu), &s2) in resp.iter().zip(self.means.iter()).zip(self.variances.iter()) {
            let v = ab * s2 + (T::one() - ab);
            let g = mu.scaled(ab.sqrt()).sub(x).scaled(v.recip());
            let gu = g.real_dot(u);
            out = out.add(&g.scaled(r * gu)).axpy(-r / v, u);
            score = score.add(&g.scaled(r));
        }
        let su = score.real_dot(u);
        Ok(out.axpy(-su, &score))
    }
}

fn logsumexp<T: Scalar>(logs: &[T]) -> T {
    let m = logs.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    let sum = logs.iter().fold(T::zero(), |a, &b| a + (b - m).exp());
    m + sum.ln()
}

impl<T: Scalar> ScoreModel<T> for GmmPrior<T> {
    fn eps(
        &self,
        x: &ComplexImage<T>,
        t: usize,
        schedule: &NoiseSchedule<T>,
    ) -> Result<ComplexImage<T>> {
        let scale = -(T::one() - schedule.alpha_bar(t)).sqrt();
        Ok(self.score_at(x, t, schedule)?.scaled(scale))
    }

    fn score(
        &self,
        x: &ComplexImage<T>,
        t: usize,
        schedule: &NoiseSchedule<T>,
    ) -> Result<ComplexImage<T>> {
        self.score_at(x, t, schedule)
    }

    fn eps_vjp(
        &self,
        x: &ComplexImage<T>,
        t: usize,
        schedule: &NoiseSchedule<T>,
        cotangent: &ComplexImage<T>,
    ) -> Result<ComplexImage<T>> {
        // J_eps = -sqrt(1 - alpha_bar) H, and H is symmetric
        let scale = -(T::one() - schedule.alpha_bar(t)).sqrt();
        Ok(self.score_hvp(x, t, schedule, cotangent)?.scaled(scale))
    }
}

/// Parses a model spec of the form `gmm:unit` (unit Gaussian) or
/// `gmm:file=PATH` (components from a JSON file with constant means).
pub fn parse_gmm_spec<T: Scalar>(spec: &str, shape: (usize, usize)) -> Result<GmmPrior<T>> {
    let rest = spec
        .strip_prefix("gmm:")
        .ok_or_else(|| Error::config(format!("not a gmm spec: `{spec}`")))?;
    if rest == "unit" {
        return Ok(GmmPrior::unit(shape.0, shape.1));
    }
    if let Some(path) = rest.strip_prefix("file=") {
        #[derive(serde::Deserialize)]
        struct Component {
            weight: f64,
            mean: f64,
            variance: f64,
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e.to_string()))?;
        let comps: Vec<Component> = serde_json::from_str(&text)
            .map_err(|e| Error::io(path, format!("malformed gmm file: {e}")))?;
        let weights = comps.iter().map(|c| T::from_f64_c(c.weight)).collect();
        let means = comps
            .iter()
            .map(|c| {
                ComplexImage::from_fn(shape.0, shape.1, |_| {
                    Complex::new(T::from_f64_c(c.mean), T::zero())
                })
            })
            .collect();
        let variances = comps.iter().map(|c| T::from_f64_c(c.variance)).collect();
        return GmmPrior::new(weights, means, variances);
    }
    Err(Error::config(format!("unrecognized gmm spec `{spec}`")))
}
