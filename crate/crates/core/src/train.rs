//! Alternating generator/discriminator optimization with checkpoints,
//! resumable logs and preview grids.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xsynth_autograd::{backward, ParamStore, Real, Tensor, Var};

use crate::config::Config;
use crate::dataset::{derive_seed, CtSample, Dataset};
use crate::error::{io_err, Error, Result};
use crate::geometry::CameraPose;
use crate::image::Image;
use crate::losses::{
    adv_critic, adv_gen_loss, content_consistency, r1_exact, r1_surrogate, rec_loss, style_consistency,
    total_dis, total_gen, zero_loss, LossReport, LossWeights, R1Mode, RecTerms,
};
use crate::model::discriminator::discriminate;
use crate::model::encoders::{content_code, encode_ct, style_code, Domain};
use crate::model::generator::generate;
use crate::model::pam::{modify_content, projection_batch, projection_input};
use crate::model::perceptual::Perceptual;
use crate::model::{image_batch, init_params, pose_batch, to_images, volume_batch, ModelConfig};
use crate::nn::Session;
use crate::volume::Volume;

/// Prefixes updated by the generator-side step.
pub const GEN_PREFIXES: [&str; 4] = ["e_ct.", "e_sty.", "pam.", "g."];
/// Prefix updated by the discriminator step.
pub const DIS_PREFIX: &str = "d.";

const ROLE_EPOCH: u64 = 0x45_50;
const ROLE_STEP: u64 = 0x53_54;
const ROLE_R1: u64 = 0x52_31;

/// Network inputs for one batch.
pub struct Batch<T: Real> {
    /// Normalized volumes `[B,1,S,S,S]`.
    pub volumes: Var<T>,
    /// Pose features `[B,25]`.
    pub poses: Var<T>,
    /// Projection inputs of the attention module `[B,S*S]`.
    pub proj: Var<T>,
    /// Ground-truth DRRs `[B,1,R,R]`.
    pub drr: Var<T>,
    /// Unpaired pseudo-X-rays `[B,1,R,R]`.
    pub xray: Var<T>,
}

/// Generator-side graph of one step.
pub struct GenPass<T: Real> {
    pub fake_x: Var<T>,
    pub fake_drr: Var<T>,
    pub rec: RecTerms<T>,
    pub cc: Var<T>,
    pub sc: Var<T>,
    pub zero: Var<T>,
    pub adv_g: Var<T>,
    pub total: Var<T>,
}

pub fn generator_pass<T: Real>(
    s: &Session<'_, T>,
    model: &ModelConfig,
    w: &LossWeights,
    perc: &Perceptual<T>,
    b: &Batch<T>,
) -> GenPass<T> {
    let fc = encode_ct(s, model, &b.volumes);
    let fw = modify_content(s, model, &fc, &b.poses, &b.proj);
    let sx = style_code(s, Domain::Xray, &b.xray);
    let sd = style_code(s, Domain::Drr, &b.drr);
    let fake_x = generate(s, model, &fw, &sx);
    let fake_drr = generate(s, model, &fw, &sd);
    let rec = rec_loss(&fake_drr, &b.drr, w, perc);
    let cc = content_consistency(&content_code(s, model, &fake_x), &content_code(s, model, &fake_drr));
    let sc = style_consistency(
        &sx,
        &style_code(s, Domain::Xray, &fake_x),
        &sd,
        &style_code(s, Domain::Drr, &fake_drr),
    );
    let zero = zero_loss(&style_code(s, Domain::Xray, &b.drr), &style_code(s, Domain::Drr, &b.xray));
    let adv_g = adv_gen_loss(&discriminate(s, model, &fake_x, &b.poses));
    let total = total_gen(w, &rec.total, &cc, &sc, &zero, &adv_g);
    GenPass {
        fake_x,
        fake_drr,
        rec,
        cc,
        sc,
        zero,
        adv_g,
        total,
    }
}

/// Discriminator-side graph of one step.
pub struct DisPass<T: Real> {
    pub critic: Var<T>,
    pub r1: Var<T>,
    /// `critic + lambda_r1 * r1`.
    pub adv_d: Var<T>,
    pub total: Var<T>,
}

/// Repeats each row of `[B,D]` `k` times.
fn repeat_rows<T: Real>(x: &Var<T>, k: usize) -> Var<T> {
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let data = x
        .value()
        .data()
        .chunks(d)
        .flat_map(|r| std::iter::repeat_n(r, k).flatten().copied())
        .collect();
    Var::constant(Tensor::new(&[b * k, d], data).expect("shape"))
}

#[allow(clippy::too_many_arguments)]
pub fn discriminator_pass<T: Real>(
    s: &Session<'_, T>,
    model: &ModelConfig,
    w: &LossWeights,
    mode: R1Mode,
    directions: usize,
    fake: &Tensor<T>,
    b: &Batch<T>,
    rng: &mut impl Rng,
) -> Result<DisPass<T>> {
    let mode = mode.resolve();
    let fake_scores = discriminate(s, model, &Var::constant(fake.clone()), &b.poses);
    let real = Var::leaf(b.drr.value().clone(), mode == R1Mode::Exact);
    let real_scores = discriminate(s, model, &real, &b.poses);
    let r1 = match mode {
        R1Mode::Exact => r1_exact(&real, &real_scores)?,
        _ => {
            let n = real.len() / real.shape()[0];
            let k = directions.clamp(1, n);
            let poses = repeat_rows(&b.poses, k);
            r1_surrogate(|x| discriminate(s, model, x, &poses), real.value(), k, rng)
        }
    };
    let critic = adv_critic(&fake_scores, &real_scores);
    let adv_d = critic.add(&r1.scale(w.r1));
    let total = total_dis(w, &critic, &r1);
    Ok(DisPass {
        critic,
        r1,
        adv_d,
        total,
    })
}

/// Indices drawn for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub volumes: Vec<usize>,
    pub poses: Vec<usize>,
    pub styles: Vec<usize>,
}

/// Training volumes are visited in a fresh seeded permutation each epoch;
/// poses and style images are drawn uniformly from the step's generator.
pub fn plan_batch(seed: u64, step: u64, batch: usize, n_volumes: usize, n_poses: usize, n_styles: usize) -> BatchPlan {
    let mut perms: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let volumes = (0..batch as u64)
        .map(|j| {
            let pos = step * batch as u64 + j;
            let epoch = pos / n_volumes as u64;
            let perm = perms.entry(epoch).or_insert_with(|| {
                let mut p: Vec<usize> = (0..n_volumes).collect();
                p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, ROLE_EPOCH, epoch)));
                p
            });
            perm[(pos % n_volumes as u64) as usize]
        })
        .collect();
    let mut rng = step_rng(seed, step);
    let poses = (0..batch).map(|_| rng.random_range(0..n_poses)).collect();
    let styles = (0..batch).map(|_| rng.random_range(0..n_styles)).collect();
    BatchPlan { volumes, poses, styles }
}

pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, ROLE_STEP, step))
}

/// Volume rescaled by the dataset's attenuation scale, as a [`Volume`].
pub fn normalized_volume(sample: &CtSample) -> Volume {
    Volume::new(sample.volume.shape(), sample.volume.spacing(), sample.normalized.clone())
        .expect("normalized volume keeps its shape")
}

/// Dataset plus the per-(volume, pose) attention inputs, computed once.
pub struct PreparedData {
    pub data: Dataset,
    pub poses: Vec<CameraPose>,
    /// `[volume][pose]` projection inputs for the training split.
    pub proj: Vec<Vec<Vec<f32>>>,
}

impl PreparedData {
    pub fn new(data: Dataset) -> Self {
        let poses = data.manifest.pose_list();
        let proj = data
            .train
            .iter()
            .map(|s| {
                let v = normalized_volume(s);
                poses.iter().map(|p| projection_input(&v, p)).collect()
            })
            .collect();
        Self { data, poses, proj }
    }

    pub fn batch<T: Real>(&self, plan: &BatchPlan) -> Batch<T> {
        let train = &self.data.train;
        let size = train[0].volume.shape()[0];
        let vols: Vec<&[f32]> = plan.volumes.iter().map(|&v| train[v].normalized.as_slice()).collect();
        let poses: Vec<&CameraPose> = plan.poses.iter().map(|&p| &self.poses[p]).collect();
        let proj: Vec<&[f32]> = plan
            .volumes
            .iter()
            .zip(&plan.poses)
            .map(|(&v, &p)| self.proj[v][p].as_slice())
            .collect();
        let drr: Vec<&Image> = plan
            .volumes
            .iter()
            .zip(&plan.poses)
            .map(|(&v, &p)| &train[v].drrs[p])
            .collect();
        let xray: Vec<&Image> = plan.styles.iter().map(|&i| &self.data.style[i]).collect();
        Batch {
            volumes: volume_batch(&vols, size),
            poses: pose_batch(&poses),
            proj: projection_batch(&proj),
            drr: image_batch(&drr),
            xray: image_batch(&xray),
        }
    }
}

/// Metadata stored beside the parameters of a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub config_hash: String,
    pub config: Config,
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:06}"))
}

pub fn save_checkpoint(dir: &Path, store: &ParamStore<f32>, cfg: &Config, step: u64) -> Result<()> {
    let meta = CheckpointMeta {
        step,
        config_hash: cfg.training_hash(),
        config: cfg.clone(),
    };
    store
        .save(dir, serde_json::to_value(meta).expect("serializable"))
        .map_err(|e| Error::Checkpoint {
            path: dir.to_path_buf(),
            msg: e.to_string(),
        })
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore<f32>, CheckpointMeta)> {
    let fail = |msg: String| Error::Checkpoint {
        path: dir.to_path_buf(),
        msg,
    };
    let (store, extra) = ParamStore::<f32>::load(dir).map_err(|e| fail(e.to_string()))?;
    let meta: CheckpointMeta =
        serde_json::from_value(extra).map_err(|e| fail(format!("bad metadata: {e}")))?;
    Ok((store, meta))
}

/// Most recent checkpoint under `out`, if any.
pub fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").exists())
        .collect();
    dirs.sort();
    dirs.pop()
}

/// Optimization state plus everything needed to advance it.
pub struct Trainer {
    pub cfg: Config,
    pub prepared: PreparedData,
    pub store: ParamStore<f32>,
    pub perc: Perceptual<f32>,
    pub step: u64,
    /// Where an aborted step leaves its checkpoint.
    pub out: Option<PathBuf>,
}

/// Images of the most recent step: `(fake_x, fake_drr, drr)` per sample.
pub type StepImages = Vec<(Image, Image, Image)>;

impl Trainer {
    pub fn new(cfg: Config, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let m = &data.manifest;
        if m.phantom.shape != [cfg.model.volume_size; 3] || m.projection.det_px != cfg.model.resolution() {
            return Err(Error::Config(format!(
                "dataset ({:?} volumes, {} px images) does not match the model ({}^3, {} px)",
                m.phantom.shape,
                m.projection.det_px,
                cfg.model.volume_size,
                cfg.model.resolution()
            )));
        }
        if data.train.is_empty() || data.style.is_empty() {
            return Err(Error::Data("training needs train volumes and style images".into()));
        }
        let store = init_params(&cfg.model, cfg.seed)?;
        let perc = Perceptual::new(cfg.model.extractor_seed);
        Ok(Self {
            prepared: PreparedData::new(data),
            cfg,
            store,
            perc,
            step: 0,
            out: None,
        })
    }

    /// Replaces the state with a checkpoint written by a run with the same
    /// training configuration.
    pub fn restore(&mut self, dir: &Path) -> Result<()> {
        let (store, meta) = load_checkpoint(dir)?;
        let want = self.cfg.training_hash();
        if meta.config_hash != want {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                msg: format!("config hash {} does not match this run's {want}", meta.config_hash),
            });
        }
        self.store = store;
        self.step = meta.step;
        Ok(())
    }

    pub fn plan(&self, step: u64) -> BatchPlan {
        let d = &self.prepared.data;
        plan_batch(
            self.cfg.seed,
            step,
            self.cfg.train.batch,
            d.train.len(),
            self.prepared.poses.len(),
            d.style.len(),
        )
    }

    /// Runs one generator update and `d_steps` discriminator updates.
    pub fn train_step(&mut self) -> Result<(LossReport, StepImages)> {
        let step = self.step;
        let cfg = self.cfg.clone();
        let w = &cfg.loss;
        let batch: Batch<f32> = self.prepared.batch(&self.plan(step));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ROLE_R1, step));

        let (report_g, fake, images, g_grads, bn) = {
            let s = Session::new(&self.store, &GEN_PREFIXES, true);
            let g = generator_pass(&s, &cfg.model, w, &self.perc, &batch);
            let total = g.total.item() as f64;
            let partial = LossReport {
                step,
                l_rec: g.rec.total.item() as f64,
                l_cc: g.cc.item() as f64,
                l_sc: g.sc.item() as f64,
                l_0: g.zero.item() as f64,
                l_adv_g: g.adv_g.item() as f64,
                total_g: total,
                ..LossReport::default()
            };
            if !total.is_finite() {
                return self.abort(partial);
            }
            let grads = s.grads(&backward(&g.total));
            let images = to_images(g.fake_x.value())
                .into_iter()
                .zip(to_images(g.fake_drr.value()))
                .zip(to_images(batch.drr.value()))
                .map(|((a, b), c)| (a, b, c))
                .collect();
            (partial, g.fake_x.value().clone(), images, grads, s.take_buffer_updates())
        };
        let opt = &cfg.train.optimizer;
        opt.step(&mut self.store, &g_grads, step + 1)?;
        for (name, value) in bn {
            self.store.set(&name, value)?;
        }

        let mut report = report_g;
        for _ in 0..cfg.train.d_steps {
            let (d, grads) = {
                let s = Session::new(&self.store, &[DIS_PREFIX], true);
                let d = discriminator_pass(
                    &s,
                    &cfg.model,
                    w,
                    cfg.train.r1_mode,
                    cfg.train.r1_directions,
                    &fake,
                    &batch,
                    &mut rng,
                )?;
                let grads = s.grads(&backward(&d.total));
                ((d.adv_d.item() as f64, d.r1.item() as f64, d.total.item() as f64), grads)
            };
            report.l_adv_d = d.0;
            report.r1 = d.1;
            report.total_d = d.2;
            if !d.2.is_finite() {
                return self.abort(report);
            }
            opt.step(&mut self.store, &grads, step + 1)?;
        }
        report.check_finite()?;
        self.step += 1;
        Ok((report, images))
    }

    fn abort<R>(&self, report: LossReport) -> Result<R> {
        if let Some(dir) = &self.abort_dir() {
            if let Err(e) = save_checkpoint(dir, &self.store, &self.cfg, self.step) {
                log::error!("could not write the abort checkpoint: {e}");
            }
        }
        report.check_finite()?;
        Err(Error::NonFinite {
            step: report.step,
            term: "total".into(),
        })
    }

    fn abort_dir(&self) -> Option<PathBuf> {
        self.out.as_ref().map(|o| o.join("checkpoints").join("abort"))
    }

    /// Trains to the configured length, writing checkpoints, previews and
    /// `train_log.jsonl` under `out`. Resumes from the latest checkpoint
    /// there when one exists.
    pub fn run(&mut self, out: &Path) -> Result<Vec<LossReport>> {
        self.out = Some(out.to_path_buf());
        fs::create_dir_all(out).map_err(io_err(out))?;
        if let Some(dir) = latest_checkpoint(out) {
            self.restore(&dir)?;
            log::info!("resuming from {} at step {}", dir.display(), self.step);
        } else {
            save_checkpoint(&checkpoint_dir(out, 0), &self.store, &self.cfg, 0)?;
        }
        let log_path = out.join("train_log.jsonl");
        let mut history = read_log(&log_path)?;
        history.retain(|r| r.step < self.step);
        let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
        for r in &history {
            writeln!(log, "{}", serde_json::to_string(r).expect("serializable")).map_err(io_err(&log_path))?;
        }
        let total = self.cfg.train.total_steps(self.prepared.data.train.len());
        let t = &self.cfg.train;
        let (ckpt_every, preview_every) = (t.checkpoint_every, t.preview_every);
        while self.step < total {
            let (report, images) = self.train_step()?;
            writeln!(log, "{}", serde_json::to_string(&report).expect("serializable")).map_err(io_err(&log_path))?;
            log.flush().map_err(io_err(&log_path))?;
            if report.step % 10 == 0 {
                log::info!(
                    "step {} l_rec {:.4} total_g {:.4} total_d {:.4}",
                    report.step,
                    report.l_rec,
                    report.total_g,
                    report.total_d
                );
            }
            if preview_every > 0 && (self.step.is_multiple_of(preview_every) || self.step == total) {
                let tiles: Vec<Image> = images.into_iter().flat_map(|(a, b, c)| [a, b, c]).collect();
                Image::tile(&tiles, 3).save_pgm(&out.join("previews").join(format!("step-{:06}.pgm", self.step)))?;
            }
            if (ckpt_every > 0 && self.step.is_multiple_of(ckpt_every)) || self.step == total {
                save_checkpoint(&checkpoint_dir(out, self.step), &self.store, &self.cfg, self.step)?;
            }
            history.push(report);
        }
        Ok(history)
    }
}

/// Reads `train_log.jsonl`; a missing file is an empty log.
pub fn read_log(path: &Path) -> Result<Vec<LossReport>> {
    let f = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map(|l| !l.trim().is_empty()).unwrap_or(true))
        .map(|l| {
            let l = l.map_err(io_err(path))?;
            serde_json::from_str(&l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
        })
        .collect()
}
