use mrilab_core::coils::CoilSensitivities;
use mrilab_core::diffusion::*;
use mrilab_core::forward::{apply_forward, zero_filled_recon};
use mrilab_core::inr::{InrConfig, StageConfig};
use mrilab_core::mask::{make_mask, MaskPattern};
use mrilab_core::metrics::psnr;
use mrilab_core::phantom::*;
use mrilab_core::samplers::*;
use std::time::Instant;

fn main() {
    let template = PhantomSpec::new(PhantomKind::RandomEllipses, (64, 64), 0, PhaseKind::SmoothRandom);
    let ds = build_dataset::<f32>(60, 8, &template, 0).unwrap();
    let spec = ScheduleSpec { t_steps: 200, beta_min: 1e-3, beta_max: 0.1 };
    let schedule = spec.build::<f32>().unwrap();

    let arch = DenoiserConfig { base_channels: 24, channel_mults: vec![1,2,3,4], time_embed_dim: 64 };
    let cfg = TrainConfig { steps: 3000, batch_size: 1, learning_rate: 3e-4, val_every: 500,
        checkpoint: Some("/tmp/toy_denoiser.ckpt".into()) };
    let t0 = Instant::now();
    let (model, trace) = train_denoiser(&ds, &schedule, &spec, arch, &cfg, 42).unwrap();
    println!("training took {:.1} min; val trace: {:?}", t0.elapsed().as_secs_f64()/60.0, trace.val_loss);

    let coils = CoilSensitivities::<f32>::identity(64, 64);
    let truth = &ds.test[0];
    let mask = make_mask(MaskPattern::Random1d, (64, 64), 4.0, 8, 100).unwrap();
    let y = apply_forward(truth, &coils, &mask).unwrap();
    let zf = zero_filled_recon(&y, &coils).unwrap();
    println!("zero-filled psnr: {:.2}", psnr(&zf, truth).unwrap());

    for zeta in [0.1, 0.3, 1.0, 3.0, 10.0] {
        let cfg = SamplerConfig { t_total: 200, t_star: 120, k_interval: 10, method: Method::Dps,
            dps_zeta: zeta, seed: 7, record_trace: false,
            inr: InrConfig::default_for_side(64), warm_start: false, interleave_projection: false };
        let t0 = Instant::now();
        match dps_sample(&y, &coils, &mask, &model, &schedule, &cfg) {
            Ok(out) => println!("dps zeta={zeta}: psnr {:.2} ({:.1}s)", psnr(&out.image, truth).unwrap(), t0.elapsed().as_secs_f64()),
            Err(e) => println!("dps zeta={zeta}: diverged ({e})"),
        }
    }

    for lr_dc in [1e-5, 1e-4, 1e-3] {
        let cfg = SamplerConfig { t_total: 200, t_star: 120, k_interval: 10, method: Method::Diffinr,
            dps_zeta: 0.3, seed: 7, record_trace: false,
            inr: InrConfig { dc: StageConfig { iterations: 250, learning_rate: lr_dc },
                             ..InrConfig::default_for_side(64) },
            warm_start: false, interleave_projection: false };
        let t0 = Instant::now();
        let out = diffinr_sample(&y, &coils, &mask, &model, &schedule, &cfg).unwrap();
        println!("diffinr lr_dc={lr_dc:.0e}: psnr {:.2} ({:.1} min)", psnr(&out.image, truth).unwrap(), t0.elapsed().as_secs_f64()/60.0);
    }

    let proj_cfg = SamplerConfig { t_total: 200, t_star: 120, k_interval: 10, method: Method::Projection,
        dps_zeta: 0.3, seed: 7, record_trace: false,
        inr: InrConfig::default_for_side(64), warm_start: false, interleave_projection: false };
    let out = projection_sample(&y, &coils, &mask, &model, &schedule, &proj_cfg).unwrap();
    println!("projection: psnr {:.2}", psnr(&out.image, truth).unwrap());

    // unconditional sample quality peek
    let u = unconditional_sample(&model, &schedule, (64, 64), 5).unwrap();
    println!("unconditional sample: max |x| = {:.3}, mean |x| = {:.3}", u.max_abs(),
        u.magnitude().iter().sum::<f32>() / 4096.0);
}
