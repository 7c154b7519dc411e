//! `mrilab`: simulate Cartesian MRI acquisitions, train the toy
//! diffusion prior, reconstruct with posterior samplers, and evaluate.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use mrilab_core::coils::{simulate_coils, CoilSensitivities};
use mrilab_core::diffusion::{
    train_denoiser, DenoiserConfig, DenoiserModel, ScheduleSpec, TrainConfig,
};
use mrilab_core::error::{Error, Result};
use mrilab_core::experiment::run_experiment;
use mrilab_core::forward::{add_noise, apply_forward};
use mrilab_core::inr::{HashEncodingConfig, InrConfig, StageConfig};
use mrilab_core::mask::{make_mask, MaskPattern};
use mrilab_core::metrics::{error_map, psnr, ssim, SsimParams};
use mrilab_core::phantom::{build_dataset, make_phantom, Dataset, PhantomKind, PhantomSpec, PhaseKind};
use mrilab_core::samplers::{reconstruct, Method, SamplerConfig};
use mrilab_core::tensorio;

#[derive(Parser)]
#[command(name = "mrilab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic complex phantom image.
    Phantom {
        #[arg(long)]
        kind: PhantomKind,
        /// Grid size as H W.
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "zero")]
        phase: PhaseKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a k-space under-sampling mask.
    Mask {
        #[arg(long)]
        pattern: MaskPattern,
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        size: Vec<usize>,
        #[arg(long = "R", default_value_t = 4.0)]
        r: f64,
        #[arg(long, default_value_t = 8)]
        acs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate receive-coil sensitivity maps.
    Coils {
        #[arg(long = "J")]
        j: usize,
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the forward model to an image and add measurement noise.
    Simulate {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        coils: Option<PathBuf>,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a train/test phantom dataset directory.
    Dataset {
        #[arg(long)]
        kind: PhantomKind,
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        n_train: usize,
        #[arg(long, default_value_t = 10)]
        n_test: usize,
        #[arg(long, default_value = "zero")]
        phase: PhaseKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the noise-prediction network on a dataset directory.
    TrainDenoiser {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "T", default_value_t = 2000)]
        t_steps: usize,
        #[arg(long)]
        beta_min: Option<f64>,
        #[arg(long)]
        beta_max: Option<f64>,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        base_channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct an image from under-sampled k-space.
    Recon {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        coils: Option<PathBuf>,
        /// Denoiser checkpoint path, `gmm:unit`, or `gmm:file=PATH`.
        #[arg(long)]
        model: String,
        /// Total reverse steps; defaults to the checkpoint schedule (or
        /// 2000 for analytic models).
        #[arg(long = "T")]
        t_steps: Option<usize>,
        #[arg(long, default_value_t = 1200)]
        t_star: usize,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 250)]
        inr_iters_prior: usize,
        #[arg(long, default_value_t = 250)]
        inr_iters_dc: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr_prior: f64,
        #[arg(long, default_value_t = 1e-5)]
        lr_dc: f64,
        #[arg(long, default_value_t = 0.3)]
        dps_zeta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Record per-step diagnostics in the trace file.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a reconstruction against a reference image.
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value = "psnr,ssim")]
        metrics: String,
        #[arg(long)]
        error_map_scale: Option<u32>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a full experiment grid from a config file.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_size(size: &[usize]) -> Result<(usize, usize)> {
    if size.len() != 2 {
        return Err(Error::config("--size takes exactly two values: H W"));
    }
    Ok((size[0], size[1]))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom {
            kind,
            size,
            seed,
            phase,
            out,
        } => {
            let size = parse_size(&size)?;
            let spec = PhantomSpec::new(kind, size, seed, phase);
            let img = make_phantom::<f32>(&spec)?;
            tensorio::save_complex_image(&out, &img)?;
            println!("wrote {}x{} phantom to {}", size.0, size.1, out.display());
        }
        Command::Mask {
            pattern,
            size,
            r,
            acs,
            seed,
            out,
        } => {
            let size = parse_size(&size)?;
            let mask = make_mask(pattern, size, r, acs, seed)?;
            tensorio::save_mask(&out, &mask)?;
            println!(
                "wrote {pattern} mask to {} (target R {r}, achieved {:.3})",
                out.display(),
                mask.r_effective()
            );
        }
        Command::Coils { j, size, seed, out } => {
            let size = parse_size(&size)?;
            let coils = simulate_coils::<f32>(j, size, seed)?;
            tensorio::save_coils(&out, &coils)?;
            println!("wrote {j} coil maps to {}", out.display());
        }
        Command::Simulate {
            image,
            coils,
            mask,
            sigma,
            seed,
            out,
        } => {
            let img = tensorio::load_complex_image::<f32>(&image)?;
            let mask = tensorio::load_mask(&mask)?;
            let coils = match coils {
                Some(p) => tensorio::load_coils::<f32>(&p)?,
                None => CoilSensitivities::identity(img.shape().0, img.shape().1),
            };
            let clean = apply_forward(&img, &coils, &mask)?;
            let y = add_noise(&clean, sigma as f32, seed)?;
            tensorio::save_kspace(&out, &y)?;
            println!(
                "wrote {}-coil k-space to {} ({} sampled entries)",
                y.num_coils(),
                out.display(),
                mask.kept_count()
            );
        }
        Command::Dataset {
            kind,
            size,
            n_train,
            n_test,
            phase,
            seed,
            out,
        } => {
            let size = parse_size(&size)?;
            let template = PhantomSpec::new(kind, size, 0, phase);
            let ds = build_dataset::<f32>(n_train, n_test, &template, seed)?;
            ds.save(&out)?;
            println!(
                "wrote {n_train} train / {n_test} test images to {}",
                out.display()
            );
        }
        Command::TrainDenoiser {
            data,
            t_steps,
            beta_min,
            beta_max,
            steps,
            batch,
            lr,
            base_channels,
            seed,
            out,
        } => {
            let dataset: Dataset<f32> = Dataset::load(&data)?;
            let default = ScheduleSpec::scaled_default(t_steps);
            let spec = ScheduleSpec {
                t_steps,
                beta_min: beta_min.unwrap_or(default.beta_min),
                beta_max: beta_max.unwrap_or(default.beta_max),
            };
            let schedule = spec.build::<f32>()?;
            let arch = DenoiserConfig {
                base_channels,
                ..DenoiserConfig::default()
            };
            let cfg = TrainConfig {
                steps,
                batch_size: batch,
                learning_rate: lr,
                val_every: (steps / 10).max(1),
                checkpoint: Some(out.clone()),
            };
            let (model, trace) = train_denoiser(&dataset, &schedule, &spec, arch, &cfg, seed)?;
            println!(
                "trained {} parameters for {steps} steps; val loss {:.4} -> {:.4}; checkpoint {}",
                model.n_params(),
                trace.initial_val(),
                trace.final_val(),
                out.display()
            );
        }
        Command::Recon {
            method,
            y,
            mask,
            coils,
            model,
            t_steps,
            t_star,
            k,
            inr_iters_prior,
            inr_iters_dc,
            lr_prior,
            lr_dc,
            dps_zeta,
            seed,
            trace,
            out,
        } => {
            let mask = tensorio::load_mask(&mask)?;
            let (h, w) = mask.shape();
            let y = tensorio::load_kspace::<f32>(&y, &mask)?;
            let coils = match coils {
                Some(p) => tensorio::load_coils::<f32>(&p)?,
                None => CoilSensitivities::identity(h, w),
            };

            let (prior, schedule) = load_model(&model, (h, w), t_steps)?;
            let cfg = SamplerConfig {
                t_total: schedule.len(),
                t_star,
                k_interval: k,
                method,
                dps_zeta,
                seed,
                record_trace: trace,
                inr: InrConfig {
                    hash: HashEncodingConfig::default_for_side(h.max(w)),
                    prior: StageConfig {
                        iterations: inr_iters_prior,
                        learning_rate: lr_prior,
                    },
                    dc: StageConfig {
                        iterations: inr_iters_dc,
                        learning_rate: lr_dc,
                    },
                },
                warm_start: false,
                interleave_projection: false,
            };
            let result = reconstruct(&y, &coils, &mask, prior.as_ref(), &schedule, &cfg)?;
            tensorio::save_complex_image(&out, &result.image)?;
            let trace_path = sibling(&out, ".trace.json");
            let text = serde_json::to_string_pretty(&result)
                .map_err(|e| Error::io(&trace_path, e.to_string()))?;
            std::fs::write(&trace_path, text).map_err(|e| Error::io(&trace_path, e.to_string()))?;
            let final_resid = result
                .diagnostics
                .last()
                .map(|d| d.kspace_residual_l2)
                .unwrap_or(f64::NAN);
            println!(
                "wrote {method} reconstruction to {} (final k-space residual {final_resid:.4e})",
                out.display()
            );
        }
        Command::Eval {
            recon,
            reference,
            metrics,
            error_map_scale,
            report,
        } => {
            let x = tensorio::load_complex_image::<f64>(&recon)?;
            let r = tensorio::load_complex_image::<f64>(&reference)?;
            let mut out = serde_json::Map::new();
            for metric in metrics.split(',') {
                match metric.trim() {
                    "psnr" => {
                        let p = psnr(&x, &r)?;
                        out.insert("identical".into(), serde_json::json!(p.is_infinite()));
                        out.insert(
                            "psnr_db".into(),
                            if p.is_finite() {
                                serde_json::json!(p)
                            } else {
                                serde_json::Value::Null
                            },
                        );
                    }
                    "ssim" => {
                        let s = ssim(&x, &r, &SsimParams::default())?;
                        out.insert("ssim".into(), serde_json::json!(s));
                    }
                    other => return Err(Error::config(format!("unknown metric `{other}`"))),
                }
            }
            if let Some(scale) = error_map_scale {
                let png = sibling(&report, ".errmap.png");
                error_map(&x, &r, scale as f64, &png)?;
                out.insert(
                    "error_map".into(),
                    serde_json::json!(png.display().to_string()),
                );
            }
            let text = serde_json::to_string_pretty(&serde_json::Value::Object(out.clone()))
                .expect("report serializes");
            if let Some(parent) = report.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)
                        .map_err(|e| Error::io(parent, e.to_string()))?;
                }
            }
            std::fs::write(&report, &text).map_err(|e| Error::io(&report, e.to_string()))?;
            println!("{text}");
        }
        Command::Experiment { config, out } => {
            let report = run_experiment(&config, &out)?;
            println!(
                "{} cells -> {}; aggregate PSNR {:.2} +- {:.2} dB, SSIM {:.4} +- {:.4}",
                report.rows.len(),
                out.join("report.json").display(),
                report.aggregate.psnr_mean,
                report.aggregate.psnr_std,
                report.aggregate.ssim_mean,
                report.aggregate.ssim_std
            );
            for (method, agg) in &report.per_method {
                println!(
                    "  {method}: PSNR {:.2} +- {:.2} dB, SSIM {:.4} +- {:.4} (n={})",
                    agg.psnr_mean, agg.psnr_std, agg.ssim_mean, agg.ssim_std, agg.n
                );
            }
            let failed: Vec<&str> = report
                .rows
                .iter()
                .filter(|r| r.error.is_some())
                .map(|r| r.cell.as_str())
                .collect();
            if !failed.is_empty() {
                eprintln!("{} cells failed: {}", failed.len(), failed.join(", "));
            }
        }
    }
    Ok(())
}

fn sibling(path: &std::path::Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_model(
    spec: &str,
    shape: (usize, usize),
    t_override: Option<usize>,
) -> Result<(Box<dyn mrilab_core::diffusion::ScoreModel<f32>>, mrilab_core::diffusion::NoiseSchedule<f32>)>
{
    if spec.starts_with("gmm:") {
        let prior = mrilab_core::diffusion::gmm::parse_gmm_spec::<f32>(spec, shape)?;
        let schedule = ScheduleSpec::scaled_default(t_override.unwrap_or(2000)).build()?;
        Ok((Box::new(prior), schedule))
    } else {
        let (model, ckpt_schedule) = DenoiserModel::<f32>::load(std::path::Path::new(spec))?;
        let schedule_spec = match t_override {
            Some(t) if t != ckpt_schedule.t_steps => ScheduleSpec::scaled_default(t),
            _ => ckpt_schedule,
        };
        Ok((Box::new(model), schedule_spec.build()?))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
