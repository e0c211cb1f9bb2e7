use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use xsynth::config::Config;
use xsynth::dataset::{build_dataset, Dataset};
use xsynth::error::write_json;
use xsynth::eval::{evaluate, multiview_report, Split, Synthesizer};
use xsynth::geometry::{max_intensity_projection, path_integrals, pose_from_angles, render_drr, rotate_volume};
use xsynth::image::Image;
use xsynth::model::encoders::Domain;
use xsynth::train::{normalized_volume, Trainer};
use xsynth::volume::Volume;

#[derive(Parser)]
#[command(name = "xsynth", version, about = "Multi-view X-ray synthesis from CT volumes")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; the desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Dotted override such as `train.batch=2`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build phantoms, DRR sweeps and the pseudo-X-ray style set.
    Dataset {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a dataset, resuming from checkpoints already under --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
    },
    /// Synthesize a volume from several view angles.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory supplying geometry and intensity scales.
        #[arg(long)]
        data: PathBuf,
        /// Volume id from the dataset, or a path to a raw volume.
        #[arg(long)]
        volume: String,
        /// Horizontal angles in degrees; the eval sweep when omitted.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        angles: Option<Vec<f64>>,
        /// Style image; without it each view is styled by its own DRR.
        #[arg(long)]
        style: Option<PathBuf>,
        /// Branch the style image is routed through: `xray` or `drr`.
        #[arg(long, default_value = "xray")]
        domain: String,
    },
    /// Multi-view report and split metrics for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `val` or `train`.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Render the DRR and MIP of a raw volume at one pose.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        volume: PathBuf,
        /// Horizontal angle, degrees.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        angle: f64,
        /// Vertical angle, degrees.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        vert: f64,
        /// Path-integral value mapped to 1; the image maximum when omitted.
        #[arg(long)]
        scale: Option<f64>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Dataset { common }
            | Command::Train { common, .. }
            | Command::Synth { common, .. }
            | Command::Eval { common, .. }
            | Command::Render { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Dataset { .. } => "dataset",
            Command::Train { .. } => "train",
            Command::Synth { .. } => "synth",
            Command::Eval { .. } => "eval",
            Command::Render { .. } => "render",
        }
    }
}

fn resolve(common: &Common) -> Result<Config> {
    let mut set = common.set.clone();
    if let Some(seed) = common.seed {
        set.push(format!("seed={seed}"));
    }
    Ok(Config::resolve(common.config.as_deref(), &set)?)
}

fn snapshot(out: &Path, cfg: &Config, command: &str) -> Result<()> {
    write_json(&out.join("resolved_config.json"), cfg)?;
    let argv: Vec<String> = std::env::args().collect();
    write_json(&out.join("command.json"), &json!({ "command": command, "argv": argv }))?;
    Ok(())
}

fn save_image(out: &Path, stem: &str, img: &Image) -> Result<()> {
    img.save(&out.join(format!("{stem}.f32")))?;
    img.save_pgm(&out.join(format!("{stem}.pgm")))?;
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "val" => Ok(Split::Val),
        "train" => Ok(Split::Train),
        other => Err(xsynth::Error::Config(format!("unknown split `{other}` (expected `val` or `train`)")).into()),
    }
}

fn angle_label(a: f64) -> String {
    if a < 0.0 {
        format!("m{:03}", -a as i64)
    } else {
        format!("p{:03}", a as i64)
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(cli.cmd.common())?;
    let out = cli.cmd.common().out.clone();
    let name = cli.cmd.name();
    match cli.cmd {
        Command::Dataset { .. } => {
            let m = build_dataset(&cfg.dataset, cfg.seed, &out)?;
            log::info!(
                "{} train, {} val, {} style images in {}",
                m.train.len(),
                m.val.len(),
                m.style.len(),
                out.display()
            );
            snapshot(&out, &cfg, name)?;
        }
        Command::Train { data, .. } => {
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            snapshot(&out, &cfg, name)?;
            let data = Dataset::load(&data)?;
            let mut trainer = Trainer::new(cfg, data)?;
            let log = trainer.run(&out)?;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                log::info!("l_rec {:.4} at step {} -> {:.4} at step {}", first.l_rec, first.step, last.l_rec, last.step);
            }
        }
        Command::Synth {
            checkpoint,
            data,
            volume,
            angles,
            style,
            domain,
            ..
        } => {
            let domain: Domain = domain.parse()?;
            let (synth, _) = Synthesizer::from_checkpoint(&checkpoint)?;
            let data = Dataset::load(&data)?;
            let m = &data.manifest;
            let sample = match data.train.iter().chain(&data.val).find(|s| s.id == volume) {
                Some(s) => s.clone(),
                None => {
                    let v = Volume::load(Path::new(&volume))?;
                    if v.shape() != m.phantom.shape {
                        bail!(xsynth::Error::Config(format!(
                            "volume shape {:?} differs from the dataset's {:?}",
                            v.shape(),
                            m.phantom.shape
                        )));
                    }
                    xsynth::dataset::CtSample {
                        id: volume.clone(),
                        normalized: v.normalized(m.mu_scale),
                        volume: v,
                        drrs: Vec::new(),
                    }
                }
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            snapshot(&out, &cfg, name)?;
            let angles = angles.unwrap_or_else(|| cfg.eval.angles.clone());
            let poses: Vec<_> = angles
                .iter()
                .map(|&a| pose_from_angles(a, m.poses[0].vert_deg, &m.projection))
                .collect();
            let v = normalized_volume(&sample);
            let images = match style {
                Some(path) => {
                    let img = Image::load(&path)?;
                    synth.synthesize(&v, &poses, &img, domain)
                }
                None => {
                    let drrs: Vec<Image> = poses
                        .iter()
                        .map(|p| render_drr(&sample.volume, p, &m.projection, m.drr_scale))
                        .collect();
                    let refs: Vec<&Image> = drrs.iter().collect();
                    synth.synthesize_each(&v, &poses, &refs, Domain::Drr)
                }
            };
            for (a, img) in angles.iter().zip(&images) {
                save_image(&out, &format!("synth_{}", angle_label(*a)), img)?;
            }
            Image::tile(&images, images.len()).save_pgm(&out.join("grid.pgm"))?;
        }
        Command::Eval {
            checkpoint, data, split, ..
        } => {
            let split = parse_split(&split)?;
            let (synth, meta) = Synthesizer::from_checkpoint(&checkpoint)?;
            let data = Dataset::load(&data)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            snapshot(&out, &cfg, name)?;
            let m = &data.manifest;
            let h: Vec<f64> = m.poses.iter().map(|p| p.horiz_deg).collect();
            let range = (
                h.iter().copied().fold(f64::INFINITY, f64::min),
                h.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            );
            let samples = match split {
                Split::Val => &data.val,
                Split::Train => &data.train,
            };
            let mut views = Vec::new();
            for (i, s) in samples.iter().enumerate() {
                let mv = multiview_report(
                    &synth,
                    s,
                    m.drr_scale,
                    &m.projection,
                    m.poses[0].vert_deg,
                    range,
                    &cfg.eval.angles,
                    &data.style[i % data.style.len()],
                )?;
                mv.grid.save_pgm(&out.join(format!("grid_{}.pgm", s.id)))?;
                views.push(mv.report);
            }
            let metrics = evaluate(&synth, &data, split, cfg.eval.min_set)?;
            log::info!(
                "psnr {:.2} dB, ssim {:.3}, fid {:.4} (DRR baseline {:.4})",
                metrics.psnr,
                metrics.ssim,
                metrics.fid,
                metrics.fid_drr_baseline
            );
            write_json(
                &out.join("metrics.json"),
                &json!({ "checkpoint_step": meta.step, "metrics": metrics, "multiview": views }),
            )?;
        }
        Command::Render {
            volume, angle, vert, scale, ..
        } => {
            let v = Volume::load(&volume)?;
            let extent = v.extent_mm().into_iter().fold(0.0, f64::max);
            let proj = cfg.dataset.projection_for(extent);
            proj.validate()?;
            let pose = pose_from_angles(angle, vert, &proj);
            let scale = match scale {
                Some(s) if s > 0.0 => s,
                Some(s) => bail!(xsynth::Error::Config(format!("scale must be positive, got {s}"))),
                None => path_integrals(&v, &pose, &proj).into_iter().fold(0.0, f64::max).max(f64::MIN_POSITIVE),
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            snapshot(&out, &cfg, name)?;
            save_image(&out, "drr", &render_drr(&v, &pose, &proj, scale))?;
            save_image(&out, "mip", &max_intensity_projection(&rotate_volume(&v, &pose)))?;
            write_json(&out.join("pose.json"), &json!({ "pose": pose, "projection": proj, "scale": scale }))?;
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<xsynth::Error>() {
        Some(xsynth::Error::Config(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
