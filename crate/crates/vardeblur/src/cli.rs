//! The `vardeblur` command line: dataset synthesis, deblurring runs, and
//! metric tables. Exit codes: 0 success, 2 usage/config, 3 I/O,
//! 4 numerical abort.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dataset::{generate_dataset, write_dataset, DatasetManifest, Scene, SceneSpec};
use crate::error::Error;
use crate::grid::Image;
use crate::io::{load_png, read_flo, save_png, write_flo, write_pfm};
use crate::metrics::{epe, psnr, ssim};
use crate::pipeline::{deblur_sequence_logged, PipelineConfig};

#[derive(Parser)]
#[command(name = "vardeblur", version, about = "Joint video deblurring, optical flow, and defocus-scale estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural scene and average it into a blur dataset
    Synth(SynthArgs),
    /// Deblur an image sequence
    Deblur(DeblurArgs),
    /// Score a result directory against ground truth
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec (JSON)
    #[arg(long)]
    spec: PathBuf,
    /// Subframes averaged per blurry frame (odd)
    #[arg(long)]
    k: usize,
    /// Uniform Gaussian blur applied to the averaged subframes
    #[arg(long = "pre-blur", default_value_t = 0.0)]
    pre_blur: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DeblurArgs {
    /// Input directory (a dataset dir with blurry/, or a flat dir of PNGs)
    #[arg(long = "in")]
    in_dir: PathBuf,
    /// Pipeline config (JSON); missing keys take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Treat the defocus kernel as identity
    #[arg(long = "no-defocus")]
    no_defocus: bool,
    /// Override the pyramid level count
    #[arg(long)]
    levels: Option<usize>,
    /// Stream per-step energy records to <out>/energy_log.jsonl
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Result directory (deblur output with latent/, or a flat dir of PNGs)
    #[arg(long)]
    result: PathBuf,
    /// Ground-truth directory (dataset dir with sharp/, or flat PNGs)
    #[arg(long)]
    gt: PathBuf,
    /// Where to write the metrics JSON (default: <result>/metrics.json)
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    inputs: Vec<String>,
    output: String,
    energy_log: Option<String>,
    wall_ms: f64,
    version: String,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidParam(_)
        | Error::EmptyInput(_)
        | Error::DimensionMismatch { .. }
        | Error::Format(_) => 2,
        Error::Io(_) | Error::Image(_) => 3,
        Error::NonFinite(_) | Error::CgDivergence { .. } => 4,
    }
}

pub fn run() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Deblur(args) => cmd_deblur(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("VARDEBLUR_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn list_pngs(dir: &Path) -> crate::error::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// PNGs from `dir/<preferred>/` when that subdirectory exists, else from
/// `dir` itself.
fn load_frames(dir: &Path, preferred: &str) -> crate::error::Result<(Vec<Image>, PathBuf)> {
    let sub = dir.join(preferred);
    let src = if sub.is_dir() { sub } else { dir.to_path_buf() };
    let paths = list_pngs(&src)?;
    let frames = paths
        .iter()
        .map(|p| load_png(p))
        .collect::<crate::error::Result<Vec<_>>>()?;
    Ok((frames, src))
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> crate::error::Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> crate::error::Result<()> {
    let t0 = Instant::now();
    let spec_text = std::fs::read_to_string(&args.spec)?;
    let spec: SceneSpec = serde_json::from_str(&spec_text)
        .map_err(|e| Error::Config(format!("scene spec: {e}")))?;
    let scene = Scene::new(spec)?;
    let pairs = generate_dataset(&scene, args.k, args.pre_blur)?;
    if pairs.is_empty() {
        return Err(Error::Config(
            "scene has fewer subframes than one averaging window".into(),
        ));
    }
    std::fs::create_dir_all(&args.out)?;
    let manifest = DatasetManifest {
        k: args.k,
        tau: 0.5,
        pre_blur_sigma: args.pre_blur,
        frames: pairs.len(),
        scene: scene.spec().clone(),
    };
    write_dataset(&args.out, &pairs, &manifest)?;
    write_manifest(
        &args.out,
        &RunManifest {
            command: "synth".into(),
            config: serde_json::to_value(&manifest).unwrap_or_default(),
            inputs: vec![args.spec.display().to_string()],
            output: args.out.display().to_string(),
            energy_log: None,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            version: env!("CARGO_PKG_VERSION").into(),
        },
    )?;
    println!(
        "wrote {} blur pairs ({}x{}) to {}",
        pairs.len(),
        pairs[0].blurry.width(),
        pairs[0].blurry.height(),
        args.out.display()
    );
    Ok(())
}

fn cmd_deblur(args: DeblurArgs) -> crate::error::Result<()> {
    let t0 = Instant::now();
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<PipelineConfig>(&text)
                .map_err(|e| Error::Config(format!("config: {e}")))?
        }
        None => PipelineConfig::default(),
    };
    if args.no_defocus {
        config.enable_defocus = false;
    }
    if let Some(levels) = args.levels {
        config.num_levels = levels;
    }
    config.validate()?;

    let (frames, src) = load_frames(&args.in_dir, "blurry")?;
    if frames.len() < 2 {
        return Err(Error::Config(format!(
            "deblurring needs at least 2 frames, found {} in {}",
            frames.len(),
            src.display()
        )));
    }

    std::fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("energy_log.jsonl");
    let mut log_file = if args.verbose {
        Some(BufWriter::new(File::create(&log_path)?))
    } else {
        None
    };
    let log_ref: Option<&mut dyn Write> = log_file.as_mut().map(|f| f as &mut dyn Write);

    let (output, report) = deblur_sequence_logged(&frames, &config, log_ref)?;

    std::fs::create_dir_all(args.out.join("latent"))?;
    std::fs::create_dir_all(args.out.join("flow"))?;
    std::fs::create_dir_all(args.out.join("sigma"))?;
    for (i, l) in output.latents.iter().enumerate() {
        save_png(&args.out.join(format!("latent/{i:05}.png")), l)?;
    }
    for (i, f) in output.flows_fwd.iter().enumerate() {
        if let Some(f) = f {
            write_flo(&args.out.join(format!("flow/{i:05}_fwd.flo")), f)?;
        }
    }
    for (i, f) in output.flows_bwd.iter().enumerate() {
        if let Some(f) = f {
            write_flo(&args.out.join(format!("flow/{i:05}_bwd.flo")), f)?;
        }
    }
    for (i, s) in output.sigmas.iter().enumerate() {
        write_pfm(&args.out.join(format!("sigma/{i:05}.pfm")), s)?;
    }
    let report_json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("report: {e}")))?;
    std::fs::write(args.out.join("report.json"), report_json)?;

    write_manifest(
        &args.out,
        &RunManifest {
            command: "deblur".into(),
            config: serde_json::to_value(&config).unwrap_or_default(),
            inputs: vec![src.display().to_string()],
            output: args.out.display().to_string(),
            energy_log: args.verbose.then(|| log_path.display().to_string()),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            version: env!("CARGO_PKG_VERSION").into(),
        },
    )?;
    println!(
        "deblurred {} frames across {} pyramid levels in {:.1} s",
        output.latents.len(),
        report.levels.len(),
        report.total_wall_ms / 1e3
    );
    Ok(())
}

#[derive(Serialize)]
struct FrameMetrics {
    frame: usize,
    psnr_db: f64,
    ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    epe_fwd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epe_bwd: Option<f64>,
}

#[derive(Serialize)]
struct EvalOutput {
    per_frame: Vec<FrameMetrics>,
    avg_psnr_db: f64,
    avg_ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    avg_epe_fwd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    avg_epe_bwd: Option<f64>,
}

fn cmd_eval(args: EvalArgs) -> crate::error::Result<()> {
    let (result_frames, _) = load_frames(&args.result, "latent")?;
    let (gt_frames, _) = load_frames(&args.gt, "sharp")?;
    if result_frames.is_empty() {
        return Err(Error::Config(format!(
            "no PNG frames found under {}",
            args.result.display()
        )));
    }
    if result_frames.len() != gt_frames.len() {
        return Err(Error::Config(format!(
            "frame count mismatch: {} results vs {} ground-truth frames",
            result_frames.len(),
            gt_frames.len()
        )));
    }

    let mut per_frame = Vec::new();
    for (i, (r, g)) in result_frames.iter().zip(&gt_frames).enumerate() {
        let epe_of = |suffix: &str| -> crate::error::Result<Option<f64>> {
            let rp = args.result.join(format!("flow/{i:05}_{suffix}.flo"));
            let gp = args.gt.join(format!("flow/{i:05}_{suffix}.flo"));
            if rp.exists() && gp.exists() {
                Ok(Some(epe(&read_flo(&rp)?, &read_flo(&gp)?, None)?))
            } else {
                Ok(None)
            }
        };
        per_frame.push(FrameMetrics {
            frame: i,
            psnr_db: psnr(r, g)?,
            ssim: ssim(r, g)?,
            epe_fwd: epe_of("fwd")?,
            epe_bwd: epe_of("bwd")?,
        });
    }

    let mean = |vals: Vec<f64>| -> Option<f64> {
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let out = EvalOutput {
        avg_psnr_db: mean(per_frame.iter().map(|m| m.psnr_db).collect()).unwrap_or(0.0),
        avg_ssim: mean(per_frame.iter().map(|m| m.ssim).collect()).unwrap_or(0.0),
        avg_epe_fwd: mean(per_frame.iter().filter_map(|m| m.epe_fwd).collect()),
        avg_epe_bwd: mean(per_frame.iter().filter_map(|m| m.epe_bwd).collect()),
        per_frame,
    };

    let has_epe = out.avg_epe_fwd.is_some() || out.avg_epe_bwd.is_some();
    let fmt_opt = |v: Option<f64>| v.map_or("      -".to_string(), |x| format!("{x:7.3}"));
    if has_epe {
        println!("frame    psnr_db    ssim   epe_fwd  epe_bwd");
        for m in &out.per_frame {
            println!(
                "{:5} {:9.3} {:7.4} {}  {}",
                m.frame,
                m.psnr_db,
                m.ssim,
                fmt_opt(m.epe_fwd),
                fmt_opt(m.epe_bwd)
            );
        }
        println!(
            "  avg {:9.3} {:7.4} {}  {}",
            out.avg_psnr_db,
            out.avg_ssim,
            fmt_opt(out.avg_epe_fwd),
            fmt_opt(out.avg_epe_bwd)
        );
    } else {
        println!("frame    psnr_db    ssim");
        for m in &out.per_frame {
            println!("{:5} {:9.3} {:7.4}", m.frame, m.psnr_db, m.ssim);
        }
        println!("  avg {:9.3} {:7.4}", out.avg_psnr_db, out.avg_ssim);
    }

    let json_path = args
        .json
        .unwrap_or_else(|| args.result.join("metrics.json"));
    let json = serde_json::to_string_pretty(&out)
        .map_err(|e| Error::Format(format!("metrics: {e}")))?;
    std::fs::write(&json_path, json)?;
    Ok(())
}
