mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use wskp::bench::{bench_reconstruction, default_sweep, write_bench_csv, TrackingAllocator};
use wskp::datagen::{write_dataset, NoiseModel, SceneConfig};
use wskp::decoder::FusionConfig;
use wskp::metrics::{evaluate_sequence, write_report};
use wskp::network::{
    load_model, sample_dataset, save_model, train, write_loss_curve, Architecture, LossSpace, Model,
    ModelConfig, TrainConfig,
};
use wskp::preprocess::{prepare_dataset, tone_map, DEFAULT_GAMMA};
use wskp::tensor::{write_pfm, write_png};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser, Debug)]
#[command(name = "wskp", version, about = "Weight-sharing kernel-prediction denoiser")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset
    Datagen(DatagenArgs),
    /// Train a model on a dataset
    Train(TrainArgs),
    /// Denoise every frame of a dataset
    Denoise(DenoiseArgs),
    /// Compare denoised frames against references
    Eval(EvalArgs),
    /// Time the streaming reconstruction over kernel counts
    Bench(BenchArgs),
    /// Fold RepVGG branches into single convolutions
    Reparam(ReparamArgs),
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match (parse(w), parse(h)) {
        (Some(w), Some(h)) => Ok((w, h)),
        _ => Err(format!("expected positive WxH, got {s:?}")),
    }
}

#[derive(Args, Debug)]
struct DatagenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value = "256x256", value_parser = parse_size)]
    size: (usize, usize),
    /// exp or gauss
    #[arg(long, default_value = "exp")]
    noise: NoiseModel,
    /// Pixels per frame
    #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
    camera_speed: i32,
    #[arg(long, default_value_t = 8.0)]
    texture_freq: f32,
    /// Seed for the noise alone (defaults to --seed)
    #[arg(long)]
    noise_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// 6layer, 3layer or mr
    #[arg(long, default_value = "6layer")]
    arch: Architecture,
    /// Kernel count M (default 6, or 2 for mr)
    #[arg(long)]
    kernels: Option<usize>,
    #[arg(long, default_value_t = 3)]
    kb: usize,
    #[arg(long, default_value_t = 2)]
    ks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 128)]
    patch: usize,
    #[arg(long, default_value_t = 80)]
    train_patches: usize,
    #[arg(long, default_value_t = 20)]
    val_patches: usize,
    /// Channel width of every block
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// radiance or irradiance
    #[arg(long, default_value = "radiance", value_parser = parse_loss_space)]
    loss_space: LossSpace,
    /// Plain 5x5 conv blocks instead of RepVGG blocks
    #[arg(long)]
    no_repvgg: bool,
    #[arg(long)]
    no_temporal: bool,
}

fn parse_loss_space(s: &str) -> std::result::Result<LossSpace, String> {
    match s {
        "radiance" => Ok(LossSpace::Radiance),
        "irradiance" => Ok(LossSpace::Irradiance),
        _ => Err(format!("expected radiance or irradiance, got {s:?}")),
    }
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_temporal: bool,
    /// Run re-parameterized single-conv inference
    #[arg(long)]
    fused: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    denoised: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f32,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// "default" (M = 1..6) or a comma list of kernel counts
    #[arg(long, default_value = "default")]
    sweep: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "256x256", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

#[derive(Args, Debug)]
struct ReparamArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn json_path(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_datagen(a: DatagenArgs) -> Result<()> {
    let cfg = SceneConfig {
        seed: a.seed,
        width: a.size.0,
        height: a.size.1,
        frames: a.frames,
        noise_model: a.noise,
        camera_speed: a.camera_speed,
        texture_freq: a.texture_freq,
        noise_seed: a.noise_seed,
    };
    let meta = write_dataset(&cfg, &a.out)?;
    eprintln!("wrote {} frames of {}x{} to {}", meta.frames, meta.width, meta.height, a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let base = ModelConfig::for_arch(a.arch);
    let kernels = a.kernels.unwrap_or(base.fusion.kernel_count);
    let mut cfg = base
        .with_fusion(FusionConfig::new(kernels, a.kb, a.ks)?)
        .with_widths(vec![a.width; ModelConfig::for_arch(a.arch).widths.len()]);
    cfg.multi_branch = !a.no_repvgg;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        patch_size: a.patch,
        train_patches_per_frame: a.train_patches,
        val_patches_per_frame: a.val_patches,
        loss_space: a.loss_space,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let frames = prepare_dataset(&a.data, !a.no_temporal)?;
    let (train_set, val_set) = sample_dataset(&frames, &tc)?;
    let mut model = Model::new(cfg, a.seed)?;
    eprintln!(
        "training {} ({} parameters) on {} patches, validating on {}",
        a.arch,
        model.param_count(),
        train_set.len(),
        val_set.len()
    );
    let report = train(&mut model, &train_set, &val_set, &tc, |r| {
        eprintln!("epoch {:>3}  train {:.5}  val {:.5}", r.epoch, r.train_loss, r.val_loss)
    })?;
    save_model(&model, &a.out)?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_loss_curve(dir.join("loss_curve.csv"), &report.curve)?;
    write_json(
        &json_path(&a.out, ".train.json"),
        &serde_json::json!({
            "data": a.data,
            "temporal": !a.no_temporal,
            "train": tc,
            "model": model.config,
            "best_epoch": report.best_epoch,
            "best_val_loss": report.best_val_loss,
        }),
    )?;
    eprintln!("best epoch {} (val {:.5}), saved {}", report.best_epoch, report.best_val_loss, a.out.display());
    Ok(())
}

fn cmd_denoise(a: DenoiseArgs) -> Result<()> {
    let mut model = load_model(&a.model)?;
    if a.fused {
        model.reparameterize()?;
    }
    let frames = prepare_dataset(&a.data, !a.no_temporal)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for f in &frames {
        let out = model.denoise_frame(f)?;
        let stem = format!("frame_{:04}", f.frame_index);
        write_pfm(&out, a.out.join(format!("{stem}.pfm")))?;
        write_png(&tone_map(&out.map(|v| v.max(0.0)), DEFAULT_GAMMA)?, a.out.join(format!("{stem}.png")))?;
    }
    write_json(
        &a.out.join("denoise.json"),
        &serde_json::json!({
            "model": a.model,
            "data": a.data,
            "temporal": !a.no_temporal,
            "fused": a.fused || model.is_fused(),
            "frames": frames.len(),
            "config": model.config,
        }),
    )?;
    eprintln!("denoised {} frames into {}", frames.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let report = evaluate_sequence(&a.denoised, &a.reference, a.gamma)?;
    write_report(&report, &a.out)?;
    let g = &report.aggregate;
    match g.psnr_db {
        Some(p) => eprintln!("psnr {p:.3} dB  ssim {:.4}  smape {:.5}", g.ssim, g.smape),
        None => eprintln!("psnr inf (identical)  ssim {:.4}  smape {:.5}", g.ssim, g.smape),
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let sweep = if a.sweep == "default" {
        default_sweep()
    } else {
        a.sweep
            .split(',')
            .map(|m| {
                let m: usize = m.trim().parse().with_context(|| format!("bad kernel count {m:?}"))?;
                Ok(FusionConfig::new(m, 3, 2)?)
            })
            .collect::<Result<Vec<_>>>()?
    };
    let result = bench_reconstruction(a.size.0, a.size.1, &sweep, a.reps)?;
    write_bench_csv(&result, &a.out)?;
    write_json(&json_path(&a.out, ".json"), &serde_json::to_value(&result)?)?;
    for r in &result.rows {
        eprintln!("{:<12} {:>10.3} ms  {:>12} B", r.label, r.wall_ms, r.peak_aux_bytes);
    }
    Ok(())
}

fn cmd_reparam(a: ReparamArgs) -> Result<()> {
    let mut model = load_model(&a.model)?;
    model.reparameterize()?;
    save_model(&model, &a.out)?;
    eprintln!("wrote fused model {}", a.out.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("WSKP_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).with_context(|| format!("WSKP_THREADS={v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen(a) => cmd_datagen(a),
        Command::Train(a) => cmd_train(a),
        Command::Denoise(a) => cmd_denoise(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Reparam(a) => cmd_reparam(a),
    }
}

fn main() -> ExitCode {
    let args = match config::expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("256x128"), Ok((256, 128)));
        assert!(parse_size("256").is_err());
        assert!(parse_size("0x4").is_err());
        assert!(parse_size("ax4").is_err());
    }

    #[test]
    fn clap_definition_is_valid() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

}
