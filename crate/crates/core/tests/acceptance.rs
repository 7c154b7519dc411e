//! Acceptance suite: every shipping criterion runs here and prints one
//! PASS/FAIL line. The final criterion reruns the whole set with the
//! same seeds and demands bit-identical reports.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to watch the
//! per-criterion lines; the slow end-to-end criteria dominate runtime.

use ndarray::Array3;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::time::Instant;

use mrilab_core::coils::{simulate_coils, CoilSensitivities};
use mrilab_core::diffusion::{
    make_vp_schedule, train_denoiser, tweedie_denoise, DenoiserConfig, GmmPrior, ScheduleSpec,
    ScoreModel, TrainConfig,
};
use mrilab_core::forward::{
    add_noise, apply_adjoint, apply_forward, zero_filled_recon, KSpaceMeasurement,
};
use mrilab_core::fourier::fft2c;
use mrilab_core::image::ComplexImage;
use mrilab_core::inr::{
    dc_loss_l1, dc_refine, inr_forward, prior_embed, CoordinateGrid, HashEncodingConfig,
    InrConfig, StageConfig,
};
use mrilab_core::mask::{acs_range, make_mask, MaskPattern};
use mrilab_core::metrics::psnr;
use mrilab_core::phantom::{build_dataset, make_phantom, PhantomKind, PhantomSpec, PhaseKind};
use mrilab_core::samplers::{diffinr_sample, dps_sample, unconditional_sample, Method, SamplerConfig};

struct Criterion {
    id: usize,
    name: &'static str,
    run: fn() -> (bool, serde_json::Value),
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "operator suite", run: criterion_1 },
    Criterion { id: 2, name: "diffusion oracle suite", run: criterion_2 },
    Criterion { id: 3, name: "inr gradient suite", run: criterion_3 },
    Criterion { id: 4, name: "inr capability", run: criterion_4 },
    Criterion { id: 5, name: "dc behavior", run: criterion_5 },
    Criterion { id: 6, name: "end-to-end scaled reconstruction", run: criterion_6 },
    Criterion { id: 7, name: "full-data sanity", run: criterion_7 },
];

/// Adjointness, Parseval, and mask invariants.
fn criterion_1() -> (bool, serde_json::Value) {
    let mut pass = true;

    // adjointness over 100 random instances at 16x16, 3 coils
    let coils = simulate_coils::<f64>(3, (16, 16), 2).unwrap();
    let mask = make_mask(MaskPattern::Gaussian2d, (16, 16), 2.0, 4, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst_adjoint = 0.0f64;
    for _ in 0..100 {
        let x = ComplexImage::<f64>::standard_normal(16, 16, &mut rng);
        let mut ydata = Array3::from_shape_fn((3, 16, 16), |_| {
            Complex::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        for j in 0..3 {
            for ((r, c), &m) in mask.keep.indexed_iter() {
                if m == 0 {
                    ydata[[j, r, c]] = Complex::new(0.0, 0.0);
                }
            }
        }
        let y = KSpaceMeasurement::new(ydata, mask.clone()).unwrap();
        let ax = apply_forward(&x, &coils, &mask).unwrap();
        let aty = apply_adjoint(&y, &coils, &mask).unwrap();
        let mismatch =
            (ax.real_dot(&y) - x.real_dot(&aty)).abs() / (ax.norm_l2() * y.norm_l2());
        worst_adjoint = worst_adjoint.max(mismatch);
    }
    pass &= worst_adjoint <= 1e-5;

    // Parseval by direct summation on random images
    let mut worst_parseval = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let x = ComplexImage::<f64>::standard_normal(32, 32, &mut rng);
        let k = fft2c(&x).unwrap();
        let nx: f64 = x.data().iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let nk: f64 = k.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        worst_parseval = worst_parseval.max((nx - nk).abs() / nx);
    }
    pass &= worst_parseval <= 1e-6;

    // mask invariants: exact line count at the reference setting, ACS
    // coverage and acceleration tolerance across patterns
    let m = make_mask(MaskPattern::Random1d, (320, 320), 8.0, 12, 0).unwrap();
    let lines = (0..320).filter(|&r| m.keep[[r, 0]] == 1).count();
    pass &= lines == 40;
    let mut mask_ok = true;
    for (pattern, r) in [
        (MaskPattern::Random1d, 4.0),
        (MaskPattern::Gaussian1d, 8.0),
        (MaskPattern::Gaussian2d, 15.0),
        (MaskPattern::Poisson2d, 18.0),
        (MaskPattern::PartialFourier, 2.0),
    ] {
        let m = make_mask(pattern, (64, 64), r, 8, 5).unwrap();
        mask_ok &= m.validate().is_ok();
        let reff = m.r_effective();
        mask_ok &= (reff - m.r).abs() / m.r <= 0.05;
    }
    for row in acs_range(320, 12) {
        mask_ok &= m.keep[[row, 0]] == 1;
    }
    pass &= mask_ok;

    (
        pass,
        json!({
            "worst_adjoint_mismatch": worst_adjoint,
            "worst_parseval_rel": worst_parseval,
            "lines_at_r8_acs12": lines,
            "mask_invariants_ok": mask_ok,
        }),
    )
}

/// Exact-oracle checks for the diffusion core plus sampling
/// stationarity under the unit-Gaussian analytic score.
fn criterion_2() -> (bool, serde_json::Value) {
    let mut pass = true;
    let schedule = make_vp_schedule::<f64>(100, 1e-3, 0.2).unwrap();

    // gmm score vs central finite differences of an independent
    // log-density evaluation, 50 random probes
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mu1 = ComplexImage::<f64>::standard_normal(4, 4, &mut rng).scaled(0.5);
    let mu2 = ComplexImage::<f64>::standard_normal(4, 4, &mut rng).scaled(0.5);
    let weights = [0.3, 0.7];
    let variances = [0.8, 1.5];
    let prior = GmmPrior::new(weights.to_vec(), vec![mu1.clone(), mu2.clone()], variances.to_vec())
        .unwrap();
    let naive_logp = |x: &ComplexImage<f64>, ab: f64| -> f64 {
        let d = 2.0 * 16.0;
        let mut p = 0.0;
        for (i, mu) in [&mu1, &mu2].into_iter().enumerate() {
            let v = ab * variances[i] + 1.0 - ab;
            let diff = x.axpy(-ab.sqrt(), mu);
            p += weights[i] * (-0.5 * diff.real_dot(&diff) / v).exp()
                / (std::f64::consts::TAU * v).powf(d / 2.0);
        }
        p.ln()
    };
    let mut worst_score = 0.0f64;
    let h = 1e-5;
    for probe in 0..50 {
        let t = 1 + (probe * 7) % 100;
        let x = ComplexImage::<f64>::standard_normal(4, 4, &mut rng);
        let ab = schedule.alpha_bar(t);
        let score = prior.score_at(&x, t, &schedule).unwrap();
        let mut fd = ComplexImage::<f64>::zeros(4, 4);
        for r in 0..4 {
            for c in 0..4 {
                for comp in 0..2 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    if comp == 0 {
                        xp.data_mut()[[r, c]].re += h;
                        xm.data_mut()[[r, c]].re -= h;
                    } else {
                        xp.data_mut()[[r, c]].im += h;
                        xm.data_mut()[[r, c]].im -= h;
                    }
                    let g = (naive_logp(&xp, ab) - naive_logp(&xm, ab)) / (2.0 * h);
                    if comp == 0 {
                        fd.data_mut()[[r, c]].re = g;
                    } else {
                        fd.data_mut()[[r, c]].im = g;
                    }
                }
            }
        }
        let rel = fd.sub(&score).norm_l2() / score.norm_l2();
        worst_score = worst_score.max(rel);
    }
    pass &= worst_score <= 1e-4;

    // Tweedie vs the closed-form Gaussian posterior mean
    let mut worst_tweedie = 0.0f64;
    let mu = ComplexImage::<f64>::standard_normal(6, 6, &mut rng).scaled(0.7);
    let s2 = 0.9;
    let single = GmmPrior::new(vec![1.0], vec![mu.clone()], vec![s2]).unwrap();
    for t in [3, 15, 40, 70, 100] {
        let xt = ComplexImage::<f64>::standard_normal(6, 6, &mut rng);
        let ab = schedule.alpha_bar(t);
        let gain = ab.sqrt() * s2 / (ab * s2 + 1.0 - ab);
        let want = mu.add(&xt.axpy(-ab.sqrt(), &mu).scaled(gain));
        let got = tweedie_denoise(&xt, t, &single, &schedule).unwrap();
        worst_tweedie = worst_tweedie.max(got.sub(&want).norm_l2() / want.norm_l2());
    }
    pass &= worst_tweedie <= 1e-5;

    // eps/score identity for the mixture provider
    let mut worst_identity = 0.0f64;
    for t in [1, 20, 60, 100] {
        let x = ComplexImage::<f64>::standard_normal(4, 4, &mut rng);
        let eps = prior.eps(&x, t, &schedule).unwrap();
        let score = ScoreModel::score(&prior, &x, t, &schedule).unwrap();
        let resid = eps
            .axpy((1.0 - schedule.alpha_bar(t)).sqrt(), &score)
            .norm_l2();
        worst_identity = worst_identity.max(resid);
    }
    pass &= worst_identity <= 1e-6;

    // stationarity: 500 chains at 8x8 under the unit-Gaussian score
    let unit = GmmPrior::<f64>::unit(8, 8);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut count = 0usize;
    for seed in 0..500 {
        let x = unconditional_sample(&unit, &schedule, (8, 8), 3000 + seed).unwrap();
        for z in x.data().iter() {
            sum += z.re + z.im;
            sumsq += z.re * z.re + z.im * z.im;
            count += 2;
        }
    }
    let mean = sum / count as f64;
    let var = sumsq / count as f64 - mean * mean;
    pass &= mean.abs() <= 0.05 && (var - 1.0).abs() <= 0.1;

    (
        pass,
        json!({
            "worst_score_fd_rel": worst_score,
            "worst_tweedie_rel": worst_tweedie,
            "worst_eps_score_identity": worst_identity,
            "sampling_mean": mean,
            "sampling_var": var,
        }),
    )
}

/// Analytic vs finite-difference gradients for both INR stage losses.
fn criterion_3() -> (bool, serde_json::Value) {
    let hash = HashEncodingConfig {
        levels: 4,
        features_per_level: 2,
        table_size_log2: 10,
        base_resolution: 4,
        finest_resolution: 16,
    };
    let spec = PhantomSpec::new(PhantomKind::SheppLogan, (16, 16), 0, PhaseKind::SmoothRandom);
    let target = make_phantom::<f64>(&spec).unwrap();
    let coils = simulate_coils::<f64>(2, (16, 16), 3).unwrap();
    let mask = make_mask(MaskPattern::Gaussian2d, (16, 16), 2.0, 4, 4).unwrap();
    let y = apply_forward(&target, &coils, &mask).unwrap();

    // a generic probe point: near-zero tables park the ReLUs at kinks
    let mut field = mrilab_core::inr::INRField::<f64>::init(hash, (16, 16), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for v in field.tables.iter_mut() {
        *v = rng.random_range(-0.5..0.5);
    }

    let (ok, worst) = mrilab_core::inr::gradient_check_stage1(&field, &target, 24, 1e-3);
    let (ok2, worst2) =
        mrilab_core::inr::gradient_check_stage2(&field, &y, &coils, &mask, 24, 1e-3);

    (
        ok && ok2,
        json!({
            "stage1_worst_rel": worst,
            "stage2_worst_rel": worst2,
            "probes_per_stage": 24,
        }),
    )
}

/// Prior-embedding quality floor on the reference phantom.
fn criterion_4() -> (bool, serde_json::Value) {
    let spec = PhantomSpec::new(PhantomKind::SheppLogan, (64, 64), 0, PhaseKind::Zero);
    let target = make_phantom::<f32>(&spec).unwrap();
    let cfg = InrConfig::default_for_side(64);
    let (field, _) = prior_embed(&target, &cfg, 0).unwrap();
    let fitted = inr_forward(&field, &CoordinateGrid::new(64, 64)).unwrap();
    let p = psnr(&fitted, &target).unwrap();
    (p >= 35.0, json!({ "fit_psnr_db": p, "iterations": cfg.prior.iterations }))
}

/// DC refinement must descend on every acceptance cell, and the loss
/// must ignore unsampled k-space bit-for-bit.
fn criterion_5() -> (bool, serde_json::Value) {
    let template = PhantomSpec::new(PhantomKind::RandomEllipses, (64, 64), 0, PhaseKind::SmoothRandom);
    let ds = build_dataset::<f32>(ACCEPT_TRAIN, 8, &template, 0).unwrap();
    let coils = CoilSensitivities::<f32>::identity(64, 64);
    let mut pass = true;
    let mut cells = Vec::new();
    // embedding here only prepares a plausible starting field; the
    // property under test is the refinement stage
    let inr = InrConfig {
        prior: StageConfig { iterations: 100, learning_rate: 1e-3 },
        ..InrConfig::default_for_side(64)
    };
    for (i, truth) in ds.test.iter().take(5).enumerate() {
        let mask = make_mask(MaskPattern::Random1d, (64, 64), 4.0, 8, 100 + i as u64).unwrap();
        let y = apply_forward(truth, &coils, &mask).unwrap();
        let (field, _) = prior_embed(truth, &inr, i as u64).unwrap();
        let before = {
            let img = inr_forward(&field, &CoordinateGrid::new(64, 64)).unwrap();
            dc_loss_l1(&img, &y, &coils, &mask).unwrap()
        };
        let (refined, trace) = dc_refine(&field, &y, &coils, &mask, &inr.dc).unwrap();
        let after = *trace.last().unwrap();
        pass &= after < before;

        // bit-identical loss when unsampled k-space is perturbed
        let img = inr_forward(&refined, &CoordinateGrid::new(64, 64)).unwrap();
        let l0 = dc_loss_l1(&img, &y, &coils, &mask).unwrap();
        let mut perturbed = y.clone();
        for ((r, c), &m) in mask.keep.indexed_iter() {
            if m == 0 {
                perturbed.data[[0, r, c]] = Complex::new(42.0, -17.0);
            }
        }
        let l1 = dc_loss_l1(&img, &perturbed, &coils, &mask).unwrap();
        pass &= l0.to_bits() == l1.to_bits();
        cells.push(json!({ "cell": i, "before": before, "after": after }));
    }
    (pass, json!({ "cells": cells }))
}

// Desk-scale experiment knobs shared by criteria 5-7. The sampler grid
// (T=200, t*=120, k=10) preserves the reference ratios; the DC stage
// uses the embedding-scale step size because the toy prior's estimates
// start much farther from the data manifold than a fully trained one.
const ACCEPT_TRAIN: usize = 60;
const ACCEPT_STEPS: usize = 2500;
const ACCEPT_DC: StageConfig = StageConfig { iterations: 250, learning_rate: 1e-3 };

struct ToyFixture {
    dataset: mrilab_core::phantom::Dataset<f32>,
    model: mrilab_core::diffusion::DenoiserModel<f32>,
    schedule: mrilab_core::diffusion::NoiseSchedule<f32>,
    val_initial: f64,
    val_final: f64,
}

/// The trained toy prior is shared between criteria 6 and 7 within a
/// pass; the reproducibility pass trains its own copy from the same
/// seeds so training determinism is exercised end to end.
static FIXTURES: [std::sync::OnceLock<ToyFixture>; 2] =
    [std::sync::OnceLock::new(), std::sync::OnceLock::new()];
static RERUN_PASS: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

fn toy_fixture() -> &'static ToyFixture {
    let idx = RERUN_PASS.load(std::sync::atomic::Ordering::SeqCst) as usize;
    FIXTURES[idx].get_or_init(|| {
        let template =
            PhantomSpec::new(PhantomKind::RandomEllipses, (64, 64), 0, PhaseKind::SmoothRandom);
        let dataset = build_dataset::<f32>(ACCEPT_TRAIN, 8, &template, 0).unwrap();
        // desk ramp with a standard-conditioned terminal noise level
        let spec = ScheduleSpec { t_steps: 200, beta_min: 1e-3, beta_max: 0.1 };
        let schedule = spec.build::<f32>().unwrap();
        let arch = DenoiserConfig {
            base_channels: 24,
            channel_mults: vec![1, 2, 3, 4],
            time_embed_dim: 64,
        };
        let cfg = TrainConfig {
            steps: ACCEPT_STEPS,
            batch_size: 2,
            learning_rate: 2e-4,
            val_every: 500,
            checkpoint: None,
        };
        let (model, trace) = train_denoiser(&dataset, &schedule, &spec, arch, &cfg, 42).unwrap();
        ToyFixture {
            dataset,
            model,
            schedule,
            val_initial: trace.initial_val(),
            val_final: trace.final_val(),
        }
    })
}

fn accept_sampler(method: Method, seed: u64) -> SamplerConfig {
    SamplerConfig {
        t_total: 200,
        t_star: 120,
        k_interval: 10,
        method,
        dps_zeta: ACCEPT_DPS_ZETA,
        seed,
        record_trace: false,
        inr: InrConfig {
            dc: ACCEPT_DC,
            ..InrConfig::default_for_side(64)
        },
        warm_start: false,
        interleave_projection: false,
    }
}

const ACCEPT_DPS_ZETA: f64 = 0.3;

/// End-to-end desk-scale reconstruction ordering.
fn criterion_6() -> (bool, serde_json::Value) {
    let fx = toy_fixture();
    let (ds, model, schedule) = (&fx.dataset, &fx.model, &fx.schedule);
    let (val0, val1) = (fx.val_initial, fx.val_final);
    let coils = CoilSensitivities::<f32>::identity(64, 64);

    let mut zf = Vec::new();
    let mut dps = Vec::new();
    let mut diffinr = Vec::new();
    for (i, truth) in ds.test.iter().take(5).enumerate() {
        let mask = make_mask(MaskPattern::Random1d, (64, 64), 4.0, 8, 100 + i as u64).unwrap();
        let y = add_noise(&apply_forward(truth, &coils, &mask).unwrap(), 0.0, 0).unwrap();

        let z = zero_filled_recon(&y, &coils).unwrap();
        zf.push(psnr(&z, truth).unwrap());

        let seed = 7000 + i as u64;
        let d = dps_sample(&y, &coils, &mask, model, schedule, &accept_sampler(Method::Dps, seed))
            .unwrap();
        dps.push(psnr(&d.image, truth).unwrap());

        let g = diffinr_sample(
            &y,
            &coils,
            &mask,
            model,
            schedule,
            &accept_sampler(Method::Diffinr, seed),
        )
        .unwrap();
        diffinr.push(psnr(&g.image, truth).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (zf_m, dps_m, di_m) = (mean(&zf), mean(&dps), mean(&diffinr));
    let pass = di_m >= zf_m + 5.0 && di_m >= dps_m && val1 < 0.1 * val0;
    (
        pass,
        json!({
            "zero_filled_psnr": zf, "zero_filled_mean": zf_m,
            "dps_psnr": dps, "dps_mean": dps_m,
            "diffinr_psnr": diffinr, "diffinr_mean": di_m,
            "margin_over_zf_db": di_m - zf_m,
            "margin_over_dps_db": di_m - dps_m,
            "denoiser_val_initial": val0, "denoiser_val_final": val1,
        }),
    )
}

/// Fully sampled data must reconstruct the smoke phantom nearly
/// exactly.
fn criterion_7() -> (bool, serde_json::Value) {
    let fx = toy_fixture();
    let truth = make_phantom::<f32>(&PhantomSpec::new(
        PhantomKind::SheppLogan,
        (64, 64),
        0,
        PhaseKind::Zero,
    ))
    .unwrap();
    let coils = CoilSensitivities::<f32>::identity(64, 64);
    let mask = make_mask(MaskPattern::Random1d, (64, 64), 1.0, 0, 0).unwrap();
    let y = apply_forward(&truth, &coils, &mask).unwrap();
    let out = diffinr_sample(
        &y,
        &coils,
        &mask,
        &fx.model,
        &fx.schedule,
        &accept_sampler(Method::Diffinr, 99),
    )
    .unwrap();
    let p = psnr(&out.image, &truth).unwrap();
    (p >= 40.0, json!({ "psnr_db": p }))
}

#[test]
fn acceptance() {
    let mut all_pass = true;
    let mut reports = Vec::new();
    for criterion in CRITERIA {
        let started = Instant::now();
        let (pass, report) = (criterion.run)();
        let secs = started.elapsed().as_secs_f64();
        println!(
            "{} criterion {}: {} ({:.1}s) {}",
            if pass { "PASS" } else { "FAIL" },
            criterion.id,
            criterion.name,
            secs,
            report
        );
        all_pass &= pass;
        reports.push(report);
    }

    // criterion 8: rerun everything with identical seeds; the reports
    // must agree bit for bit
    let started = Instant::now();
    RERUN_PASS.store(true, std::sync::atomic::Ordering::SeqCst);
    let mut repro = true;
    for (criterion, first) in CRITERIA.iter().zip(reports.iter()) {
        let (_, second) = (criterion.run)();
        if serde_json::to_string(first).unwrap() != serde_json::to_string(&second).unwrap() {
            repro = false;
            println!(
                "FAIL criterion 8: criterion {} report changed on rerun",
                criterion.id
            );
        }
    }
    println!(
        "{} criterion 8: reproducibility ({:.1}s)",
        if repro { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    all_pass &= repro;
    assert!(all_pass, "acceptance criteria failed; see the lines above");
}
