//! Operator surface for the dynamic-splatting pipeline: synthetic data
//! generation, two-phase training, zero-shot stylized rendering, and the
//! spatio-temporal consistency protocol.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dynsplat::codec::{train_codec, Codec, CodecSpec, CodecTrainConfig};
use dynsplat::dataio::{
    load_checkpoint, load_dataset, load_manifest, look_at_camera, save_png, camera_from_entry,
    generate_synthetic, SyntheticSpec,
};
use dynsplat::deform::{DeformConfig, TimeStamp};
use dynsplat::eval::{
    consistency_suite, format_report_table, mean_over_styles, Axis, ProtocolConfig, RangeKind,
    StylizeMethod, TrainedModel,
};
use dynsplat::gradops::grad_ops;
use dynsplat::style::{
    interpolate_styles, style_code_from_image, stylize_gaussians, render_feature_frame, StyleCode,
};
use dynsplat::train::{run_training, TrainConfig};
use dynsplat::Camera;

#[derive(Parser)]
#[command(name = "dynsplat", version, about = "Dynamic Gaussian splatting with zero-shot feature stylization", long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view video dataset.
    Synth(SynthArgs),
    /// Train the codec and the dynamic scene on a dataset.
    Train(TrainArgs),
    /// Render a trained scene with an unseen style image (zero-shot).
    Stylize(StylizeArgs),
    /// Run the spatio-temporal consistency protocol.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Seed for the generated scene and motion.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    blobs: u32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    cameras: u32,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u32).range(1..))]
    frames: u32,
    /// Square image resolution in pixels.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    res: u32,
    /// Splats per blob.
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u32).range(1..))]
    splats_per_blob: u32,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from `synth` or matching its layout).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and loss log.
    #[arg(long)]
    out: PathBuf,
    /// TOML config file; values layer between defaults and flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from an existing checkpoint (also reuses its codec).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    pretrain_iters: Option<u64>,
    #[arg(long)]
    joint_iters: Option<u64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// D-SSIM mixing weight λ.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Camera index excluded from training and reported as PSNR.
    #[arg(long)]
    holdout_camera: Option<usize>,
    #[arg(long)]
    initial_gaussians: Option<usize>,
    /// Drop the D-SSIM term from the joint phase.
    #[arg(long, default_value_t = false)]
    no_joint_dssim: bool,
    /// Deform position only (keep rotation and scale canonical).
    #[arg(long, default_value_t = false)]
    no_deform_rotation_scale: bool,
    /// Codec pretraining iterations.
    #[arg(long, default_value_t = 2000)]
    codec_iters: usize,
    #[arg(long, default_value_t = 2e-3)]
    codec_lr: f64,
}

#[derive(Args)]
struct StylizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Style image (8-bit RGB).
    #[arg(long)]
    style: PathBuf,
    /// Second style image for interpolation.
    #[arg(long)]
    style_b: Option<PathBuf>,
    /// Interpolation weight in [0,1] toward --style-b.
    #[arg(long)]
    interp: Option<f64>,
    /// Camera path file (TOML, `mode = "hold" | "orbit"`).
    #[arg(long)]
    camera_path: PathBuf,
    /// Timestamps: either a count `N` (uniform in [0,1]) or a comma list.
    #[arg(long)]
    times: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of style images (PNG).
    #[arg(long)]
    styles: PathBuf,
    /// Dataset directory providing the evaluation cameras and timestamps.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "both", value_parser = ["both", "fixed-camera", "fixed-time"])]
    protocol: String,
    /// Content normalization: tracked running statistics or per-frame.
    #[arg(long, default_value = "running", value_parser = ["running", "naive"])]
    normalization: String,
    /// Also evaluate the per-frame pixel-space baseline.
    #[arg(long, default_value_t = false)]
    include_pixel_baseline: bool,
    #[arg(long, default_value_t = 0)]
    reference_camera: usize,
    /// Frame gap of the fixed-camera long range.
    #[arg(long, default_value_t = 7)]
    long_gap: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Stylize(args) => cmd_stylize(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<dynsplat::Error>(),
            Some(dynsplat::Error::Usage(_)) | Some(dynsplat::Error::Dataset(_))
        )
    })
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        blobs: args.blobs as usize,
        gaussians_per_blob: args.splats_per_blob as usize,
        cameras: args.cameras as usize,
        frames: args.frames as usize,
        width: args.res as usize,
        height: args.res as usize,
    };
    generate_synthetic(args.seed, &spec, &args.out)?;
    println!(
        "wrote dataset: {} cameras x {} frames at {}x{} -> {}",
        spec.cameras,
        spec.frames,
        spec.width,
        spec.height,
        args.out.display()
    );
    Ok(())
}

/// defaults < config file < explicit flags.
fn layered_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut value =
        toml::Value::try_from(TrainConfig::default()).context("serializing defaults")?;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let over: toml::Value = toml::from_str(&text).context("parsing config file")?;
        merge_toml(&mut value, over);
    }
    let mut cfg: TrainConfig = value.try_into().context("config file has invalid fields")?;
    if let Some(v) = args.pretrain_iters {
        cfg.pretrain_iters = v;
    }
    if let Some(v) = args.joint_iters {
        cfg.joint_iters = v;
    }
    if let Some(v) = args.feature_dim {
        cfg.feature_dim = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.holdout_camera {
        cfg.holdout_camera = Some(v);
    }
    if let Some(v) = args.initial_gaussians {
        cfg.initial_gaussians = v;
    }
    if args.no_joint_dssim {
        cfg.dssim_in_joint = false;
    }
    if args.no_deform_rotation_scale {
        cfg.deform_rotation_scale = false;
    }
    Ok(cfg)
}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = layered_train_config(&args)?;
    cfg.validate()?;
    let dataset = load_dataset(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;

    let (codec, resume) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            println!("resuming from iteration {}", ckpt.meta.iteration);
            (ckpt.codec.clone(), Some(ckpt))
        }
        None => {
            let corpus: Vec<_> = dynsplat::train::train_frame_indices(&dataset, &cfg)
                .into_iter()
                .map(|i| dataset.frames[i].image.clone())
                .collect();
            let mut codec = Codec::new_seeded(CodecSpec::desk_default(cfg.feature_dim, cfg.seed));
            let report = train_codec(
                &mut codec,
                &corpus,
                &CodecTrainConfig {
                    iterations: args.codec_iters,
                    learning_rate: args.codec_lr,
                    seed: cfg.seed,
                    ..Default::default()
                },
            )?;
            println!(
                "codec: {} iterations, reconstruction psnr {:.2} dB over {} held-out frames",
                report.iterations, report.holdout_psnr, report.holdout_count
            );
            (codec, None)
        }
    };

    let out = run_training(&dataset, &codec, &cfg, Some(&args.out), resume.as_ref())?;
    let last = out.reports.last();
    println!(
        "trained {} iterations, {} splats, final loss {:.5}",
        out.state.iteration,
        out.state.scene.len(),
        last.map(|r| r.total).unwrap_or(f64::NAN)
    );
    match out.final_psnr {
        Some(p) => println!("holdout psnr: {:.2} dB", p),
        None => println!("holdout psnr: n/a (no holdout camera configured)"),
    }
    println!(
        "checkpoint: {}",
        out.checkpoint_path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    Ok(())
}

#[derive(Debug, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
enum CameraPath {
    /// Use one camera of an existing dataset manifest.
    Hold { manifest_dir: PathBuf, camera: usize },
    /// Parametric arc around the origin.
    Orbit {
        width: usize,
        height: usize,
        focal: f64,
        radius: f64,
        #[serde(default)]
        height_offset: f64,
        angle_start_deg: f64,
        angle_end_deg: f64,
    },
}

/// Cameras for each requested timestamp.
fn resolve_cameras(path: &Path, n: usize) -> Result<Vec<Camera>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading camera path {}", path.display()))?;
    let parsed: CameraPath = toml::from_str(&text).context("parsing camera path file")?;
    match parsed {
        CameraPath::Hold { manifest_dir, camera } => {
            let manifest = load_manifest(&manifest_dir)?;
            let entry = manifest
                .cameras
                .get(camera)
                .ok_or_else(|| anyhow!("camera {} not in manifest", camera))?;
            let cam = camera_from_entry(entry)?;
            Ok(vec![cam; n])
        }
        CameraPath::Orbit {
            width,
            height,
            focal,
            radius,
            height_offset,
            angle_start_deg,
            angle_end_deg,
        } => Ok((0..n)
            .map(|i| {
                let s = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                let theta = (angle_start_deg + s * (angle_end_deg - angle_start_deg)).to_radians();
                let pos = nalgebra_pos(radius, theta, height_offset);
                look_at_camera(pos, Default::default(), focal, width, height)
            })
            .collect()),
    }
}

fn nalgebra_pos(radius: f64, theta: f64, height: f64) -> nalgebra::Vector3<f64> {
    nalgebra::Vector3::new(radius * theta.sin(), height, -radius * theta.cos())
}

fn parse_times(spec: &str) -> Result<Vec<f64>> {
    if let Ok(n) = spec.trim().parse::<usize>() {
        if n == 0 {
            bail!("time count must be positive");
        }
        return Ok((0..n)
            .map(|i| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 })
            .collect());
    }
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad timestamp {:?}", s))
        })
        .collect()
}

fn cmd_stylize(args: StylizeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)
        .with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    if !ckpt.meta.has_feature_stage {
        return Err(dynsplat::Error::Usage(
            "checkpoint has no features (trained without a joint phase); stylization needs them"
                .into(),
        )
        .into());
    }
    let times = parse_times(&args.times)?;
    let cameras = resolve_cameras(&args.camera_path, times.len())?;

    let style_a = style_code_from_image(&ckpt.codec, &dynsplat::dataio::load_png(&args.style)?)?;
    let style = match (&args.style_b, args.interp) {
        (None, None) => style_a,
        (Some(b_path), Some(w)) => {
            let style_b =
                style_code_from_image(&ckpt.codec, &dynsplat::dataio::load_png(b_path)?)?;
            interpolate_styles(&style_a, &style_b, w)?
        }
        (Some(_), None) => bail!("--style-b requires --interp"),
        (None, Some(_)) => bail!("--interp requires --style-b"),
    };

    let dcfg = DeformConfig {
        deform_rotation_scale: ckpt.meta.deform_rotation_scale,
    };
    let grad_ops_before = grad_ops();
    // The affine is applied once; rendering reuses the transformed scene.
    let stylized = stylize_gaussians(&ckpt.scene, &ckpt.running_stats, &style)?;
    fs::create_dir_all(&args.out)?;
    for (i, (&t, cam)) in times.iter().zip(&cameras).enumerate() {
        let frame = render_feature_frame(
            &stylized,
            &ckpt.field,
            &ckpt.head,
            &dcfg,
            cam,
            TimeStamp::new(t)?,
            &ckpt.codec,
        )?;
        save_png(&frame, &args.out.join(format!("frame_{:04}.png", i)))?;
    }
    assert_eq!(
        grad_ops(),
        grad_ops_before,
        "stylization must not run any backward pass"
    );
    println!(
        "rendered {} stylized frames (zero-shot, no gradient ops) -> {}",
        times.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)
        .with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    if !ckpt.meta.has_feature_stage {
        return Err(dynsplat::Error::Usage(
            "checkpoint has no features; evaluate needs a joint-trained model".into(),
        )
        .into());
    }
    let manifest = load_manifest(&args.data)?;
    let cameras: Vec<Camera> = manifest
        .cameras
        .iter()
        .map(camera_from_entry)
        .collect::<dynsplat::Result<_>>()?;
    let mut times: Vec<f64> = manifest
        .frames
        .iter()
        .filter(|f| f.camera == args.reference_camera)
        .map(|f| f.time)
        .collect();
    times.dedup();
    if times.is_empty() {
        return Err(dynsplat::Error::Usage(format!(
            "reference camera {} has no frames",
            args.reference_camera
        ))
        .into());
    }

    // Style codes from every PNG in the styles directory, sorted by name.
    let mut style_files: Vec<PathBuf> = fs::read_dir(&args.styles)
        .with_context(|| format!("reading styles dir {}", args.styles.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    style_files.sort();
    if style_files.len() < 2 {
        return Err(dynsplat::Error::Usage(format!(
            "styles dir has {} png files; the protocol needs at least 2",
            style_files.len()
        ))
        .into());
    }
    let styles: Vec<(String, StyleCode)> = style_files
        .iter()
        .map(|p| {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            let code = style_code_from_image(&ckpt.codec, &dynsplat::dataio::load_png(p)?)?;
            Ok((name, code))
        })
        .collect::<Result<_>>()?;

    let dcfg = DeformConfig {
        deform_rotation_scale: ckpt.meta.deform_rotation_scale,
    };
    let model = TrainedModel {
        scene: &ckpt.scene,
        field: &ckpt.field,
        head: &ckpt.head,
        dcfg,
        rs: &ckpt.running_stats,
        codec: &ckpt.codec,
    };

    let method = match args.normalization.as_str() {
        "running" => StylizeMethod::PerGaussianRunning,
        _ => StylizeMethod::FeatureMapPerFrame,
    };
    let base_cfg = ProtocolConfig {
        reference_camera: args.reference_camera,
        long_gap: args.long_gap,
        method,
        include_fixed_camera: args.protocol != "fixed-time",
        include_fixed_time: args.protocol != "fixed-camera",
    };

    let mut reports = consistency_suite(&model, &cameras, &times, &styles, &base_cfg)?;
    if args.include_pixel_baseline {
        let baseline_cfg = ProtocolConfig {
            method: StylizeMethod::PixelAdainPerFrame,
            ..base_cfg.clone()
        };
        reports.extend(consistency_suite(&model, &cameras, &times, &styles, &baseline_cfg)?);
    }

    fs::create_dir_all(&args.out)?;
    let mut jsonl = String::new();
    for r in &reports {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    fs::write(args.out.join("consistency.jsonl"), jsonl)?;
    let table = format_report_table(&reports);
    fs::write(args.out.join("consistency_table.txt"), &table)?;
    println!("{}", table);
    for axis in [Axis::FixedCamera, Axis::FixedTime] {
        for range in [RangeKind::Short, RangeKind::Long] {
            if let Some((rmse, perc)) = mean_over_styles(
                &reports
                    .iter()
                    .filter(|r| r.method == method)
                    .cloned()
                    .collect::<Vec<_>>(),
                axis,
                range,
            ) {
                println!(
                    "mean over styles  {:?}/{:?}: wrmse {:.3} (x10^3), perceptual {:.3} (x10^3)",
                    axis,
                    range,
                    rmse * 1e3,
                    perc * 1e3
                );
            }
        }
    }
    println!("reports -> {}", args.out.display());
    Ok(())
}
