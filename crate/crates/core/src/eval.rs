//! Synthesis from checkpoints, the multi-view sweep report and split-level
//! metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};
use xsynth_autograd::{no_grad, ParamStore, Tensor, Var};

use crate::dataset::{CtSample, Dataset};
use crate::error::Result;
use crate::geometry::{pose_from_angles, render_drr, CameraPose, ProjectionConfig};
use crate::image::Image;
use crate::metrics::{extract_features, fid, kid, psnr, ssim};
use crate::model::encoders::{encode_ct, style_code, Domain};
use crate::model::generator::generate;
use crate::model::pam::{modify_content, projection_batch, projection_input};
use crate::model::perceptual::Perceptual;
use crate::model::{image_batch, pose_batch, to_images, volume_batch, ModelConfig};
use crate::nn::Session;
use crate::train::{load_checkpoint, normalized_volume, CheckpointMeta};
use crate::volume::Volume;

/// Inference-mode generator pipeline bound to one parameter set.
pub struct Synthesizer {
    pub model: ModelConfig,
    pub store: ParamStore<f32>,
}

impl Synthesizer {
    pub fn from_checkpoint(dir: &Path) -> Result<(Self, CheckpointMeta)> {
        let (store, meta) = load_checkpoint(dir)?;
        Ok((
            Self {
                model: meta.config.model.clone(),
                store,
            },
            meta,
        ))
    }

    /// One image per pose of the normalized volume `v`, styled by `style`
    /// through the branch of `domain`.
    pub fn synthesize(&self, v: &Volume, poses: &[CameraPose], style: &Image, domain: Domain) -> Vec<Image> {
        self.synthesize_each(v, poses, &vec![style; poses.len()], domain)
    }

    /// As [`Synthesizer::synthesize`] with one style image per pose.
    pub fn synthesize_each(&self, v: &Volume, poses: &[CameraPose], styles: &[&Image], domain: Domain) -> Vec<Image> {
        assert_eq!(poses.len(), styles.len(), "one style image per pose");
        let _g = no_grad();
        let s = Session::inference(&self.store);
        let m = &self.model;
        let p = poses.len();
        let fc = encode_ct(&s, m, &volume_batch::<f32>(&[v.data()], m.volume_size));
        let row = fc.value().data().to_vec();
        let fc = Var::constant(Tensor::new(&[p, m.content_dim], row.repeat(p)).expect("shape"));
        let proj: Vec<Vec<f32>> = poses.iter().map(|pose| projection_input(v, pose)).collect();
        let proj_refs: Vec<&[f32]> = proj.iter().map(Vec::as_slice).collect();
        let pose_refs: Vec<&CameraPose> = poses.iter().collect();
        let fw = modify_content(&s, m, &fc, &pose_batch(&pose_refs), &projection_batch(&proj_refs));
        let sty = style_code(&s, domain, &image_batch(styles));
        to_images(generate(&s, m, &fw, &sty).value())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleReport {
    pub angle_deg: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// False when the angle lies outside the range of training poses.
    pub in_training_sweep: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiviewReport {
    pub volume: String,
    pub angles: Vec<AngleReport>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

pub struct Multiview {
    pub report: MultiviewReport,
    /// Rows: ground-truth DRR, DRR-style synthesis, X-ray-style synthesis;
    /// one column per angle.
    pub grid: Image,
}

/// Sweeps `angles` for one volume: the DRR-style synthesis (styled by the
/// ground-truth DRR itself) is scored against the rendered DRR.
#[allow(clippy::too_many_arguments)]
pub fn multiview_report(
    synth: &Synthesizer,
    sample: &CtSample,
    drr_scale: f64,
    projection: &ProjectionConfig,
    vert_deg: f64,
    train_range: (f64, f64),
    angles: &[f64],
    xray_style: &Image,
) -> Result<Multiview> {
    let v = normalized_volume(sample);
    let poses: Vec<CameraPose> = angles.iter().map(|&a| pose_from_angles(a, vert_deg, projection)).collect();
    let gt: Vec<Image> = poses
        .iter()
        .map(|p| render_drr(&sample.volume, p, projection, drr_scale))
        .collect();
    let gt_refs: Vec<&Image> = gt.iter().collect();
    let fake_drr = synth.synthesize_each(&v, &poses, &gt_refs, Domain::Drr);
    let fake_x = synth.synthesize(&v, &poses, xray_style, Domain::Xray);
    let mut rows = Vec::with_capacity(angles.len());
    for (i, &a) in angles.iter().enumerate() {
        let inside = a >= train_range.0 - 1e-9 && a <= train_range.1 + 1e-9;
        if !inside {
            log::warn!("angle {a} deg lies outside the training sweep; rendered anyway");
        }
        rows.push(AngleReport {
            angle_deg: a,
            psnr: psnr(&fake_drr[i], &gt[i])?,
            ssim: ssim(&fake_drr[i], &gt[i])?,
            in_training_sweep: inside,
        });
    }
    let n = rows.len() as f64;
    let report = MultiviewReport {
        volume: sample.id.clone(),
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        angles: rows,
    };
    let tiles: Vec<Image> = gt.into_iter().chain(fake_drr).chain(fake_x).collect();
    Ok(Multiview {
        report,
        grid: Image::tile(&tiles, angles.len()),
    })
}

/// Which volumes a split-level evaluation covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: Split,
    /// Synthesized images per set.
    pub samples: usize,
    /// DRR-style synthesis against ground truth.
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    /// X-ray-style synthesis against the pseudo-X-ray set.
    pub fid: f64,
    pub kid: f64,
    /// Ground-truth DRRs against the pseudo-X-ray set, for reference.
    pub fid_drr_baseline: f64,
    pub kid_drr_baseline: f64,
    pub fid_clamped: f64,
    pub extractor_seed: u64,
    pub kid_degree: u32,
}

/// Synthesized sets for every (volume, training pose) of a split.
pub struct SplitImages {
    pub gt: Vec<Image>,
    pub fake_drr: Vec<Image>,
    pub fake_x: Vec<Image>,
}

pub fn synthesize_split(synth: &Synthesizer, data: &Dataset, split: Split) -> SplitImages {
    let samples = match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
    };
    let poses = data.manifest.pose_list();
    let mut out = SplitImages {
        gt: Vec::new(),
        fake_drr: Vec::new(),
        fake_x: Vec::new(),
    };
    for (i, s) in samples.iter().enumerate() {
        let v = normalized_volume(s);
        let drr_refs: Vec<&Image> = s.drrs.iter().collect();
        let styles: Vec<&Image> = (0..poses.len())
            .map(|p| &data.style[(i * poses.len() + p) % data.style.len()])
            .collect();
        out.fake_drr.extend(synth.synthesize_each(&v, &poses, &drr_refs, Domain::Drr));
        out.fake_x.extend(synth.synthesize_each(&v, &poses, &styles, Domain::Xray));
        out.gt.extend(s.drrs.iter().cloned());
    }
    out
}

pub fn evaluate(synth: &Synthesizer, data: &Dataset, split: Split, min_set: usize) -> Result<MetricReport> {
    let imgs = synthesize_split(synth, data, split);
    let n = imgs.gt.len() as f64;
    let mut ps = 0.0;
    let mut ss = 0.0;
    for (a, b) in imgs.fake_drr.iter().zip(&imgs.gt) {
        ps += psnr(a, b)?;
        ss += ssim(a, b)?;
    }
    let perc = Perceptual::<f64>::new(synth.model.extractor_seed);
    let lpips = {
        let _g = no_grad();
        let a: Vec<&Image> = imgs.fake_drr.iter().collect();
        let b: Vec<&Image> = imgs.gt.iter().collect();
        perc.distance(&image_batch(&a), &image_batch(&b)).value().mean()
    };
    let f_fake = extract_features(&perc, &imgs.fake_x);
    let f_gt = extract_features(&perc, &imgs.gt);
    let f_style = extract_features(&perc, &data.style);
    let f = fid(&f_fake, &f_style, min_set)?;
    let base = fid(&f_gt, &f_style, min_set)?;
    Ok(MetricReport {
        split,
        samples: imgs.gt.len(),
        psnr: ps / n,
        ssim: ss / n,
        lpips,
        fid: f.fid,
        kid: kid(&f_fake, &f_style, min_set)?,
        fid_drr_baseline: base.fid,
        kid_drr_baseline: kid(&f_gt, &f_style, min_set)?,
        fid_clamped: f.clamped.max(base.clamped),
        extractor_seed: perc.seed(),
        kid_degree: 3,
    })
}
