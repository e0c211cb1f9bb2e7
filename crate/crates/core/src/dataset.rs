//! Dataset construction: phantoms, the DRR pose sweep and the unpaired
//! pseudo-X-ray style domain, tied together by a manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, read_json, write_json, Error, Result};
use crate::geometry::{path_integrals, pose_from_angles, CameraPose, ProjectionConfig};
use crate::image::Image;
use crate::volume::{generate_phantom, PhantomSpec, Volume};
use crate::xray::make_pseudo_xray;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "xsynth-dataset-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub phantom: PhantomSpec,
    /// Detector geometry; `det_pitch_mm` of `None` fits the volume.
    pub sod_mm: f64,
    pub sdd_mm: f64,
    pub det_px: usize,
    pub det_pitch_mm: Option<f64>,
    pub step: f64,
    pub train_volumes: usize,
    pub val_volumes: usize,
    pub style_volumes: usize,
    pub horiz_deg: Vec<f64>,
    pub vert_deg: f64,
    /// Fixed divisor for path integrals; `None` uses the largest training value.
    pub drr_scale: Option<f64>,
    /// Fixed divisor for attenuation; `None` uses the largest training value.
    pub mu_scale: Option<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            sod_mm: 1020.0,
            sdd_mm: 530.0,
            det_px: 64,
            det_pitch_mm: None,
            step: 0.1,
            train_volumes: 8,
            val_volumes: 4,
            style_volumes: 4,
            horiz_deg: vec![-60.0, -30.0, 0.0, 30.0, 60.0],
            vert_deg: 0.0,
            drr_scale: None,
            mu_scale: None,
        }
    }
}

impl DatasetConfig {
    pub fn projection(&self) -> ProjectionConfig {
        let extent = (0..3)
            .map(|a| self.phantom.shape[a] as f64 * self.phantom.spacing_mm[a])
            .fold(0.0, f64::max);
        self.projection_for(extent)
    }

    /// Geometry for an object whose largest extent is `extent` mm.
    pub fn projection_for(&self, extent: f64) -> ProjectionConfig {
        let mut p = ProjectionConfig::fitted(extent, self.det_px);
        p.sod_mm = self.sod_mm;
        p.sdd_mm = self.sdd_mm;
        p.step = self.step;
        let magnification = (self.sod_mm + self.sdd_mm) / self.sod_mm;
        p.det_pitch_mm = self
            .det_pitch_mm
            .unwrap_or(1.1 * extent * magnification / self.det_px as f64);
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.projection().validate()?;
        let bad = |m: &str| Err(Error::Config(format!("dataset: {m}")));
        if self.train_volumes == 0 || self.style_volumes == 0 {
            return bad("needs at least one training and one style volume");
        }
        if self.horiz_deg.is_empty() || self.horiz_deg.iter().any(|a| !a.is_finite()) {
            return bad("pose sweep must be a nonempty list of finite angles");
        }
        for s in [self.drr_scale, self.mu_scale].into_iter().flatten() {
            if !(s > 0.0 && s.is_finite()) {
                return bad("normalisation scales must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseEntry {
    pub horiz_deg: f64,
    pub vert_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeEntry {
    pub id: String,
    pub seed: u64,
    pub volume: String,
    /// One DRR per manifest pose, in pose order.
    pub drrs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleEntry {
    pub id: String,
    pub seed: u64,
    pub pose: usize,
    pub style_seed: u64,
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub projection: ProjectionConfig,
    pub mu_scale: f64,
    pub drr_scale: f64,
    pub poses: Vec<PoseEntry>,
    pub train: Vec<VolumeEntry>,
    pub val: Vec<VolumeEntry>,
    pub style: Vec<StyleEntry>,
}

/// Decorrelated child seed (splitmix64 finaliser over the tuple).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB))
        .wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const ROLE_TRAIN: u64 = 1;
const ROLE_VAL: u64 = 2;
const ROLE_STYLE: u64 = 3;
const ROLE_XRAY: u64 = 4;

fn phantom_id(seed: u64) -> String {
    format!("ph{seed:016x}")
}

impl DatasetManifest {
    pub fn pose(&self, ix: usize) -> CameraPose {
        let p = &self.poses[ix];
        pose_from_angles(p.horiz_deg, p.vert_deg, &self.projection)
    }

    pub fn pose_list(&self) -> Vec<CameraPose> {
        (0..self.poses.len()).map(|i| self.pose(i)).collect()
    }

    /// Structural checks: disjoint splits, an unpaired style domain and
    /// one DRR per pose.
    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Data(format!("unknown manifest format `{}`", self.format)));
        }
        let ids = |v: &[VolumeEntry]| v.iter().map(|e| e.id.clone()).collect::<HashSet<_>>();
        let (train, val) = (ids(&self.train), ids(&self.val));
        let style: HashSet<_> = self.style.iter().map(|e| e.id.clone()).collect();
        if train.len() != self.train.len() || val.len() != self.val.len() {
            return Err(Error::Data("duplicate volume ids within a split".into()));
        }
        if !train.is_disjoint(&val) {
            return Err(Error::Data("train and val splits share volumes".into()));
        }
        let paired: Vec<_> = style.iter().filter(|s| train.contains(*s) || val.contains(*s)).collect();
        if !paired.is_empty() {
            return Err(Error::Data(format!(
                "style-domain volumes overlap the content domain: {paired:?}"
            )));
        }
        for e in self.train.iter().chain(&self.val) {
            if e.drrs.len() != self.poses.len() {
                return Err(Error::Data(format!("volume {} lacks DRRs for some poses", e.id)));
            }
        }
        if self.style.iter().any(|s| s.pose >= self.poses.len()) {
            return Err(Error::Data("style image refers to an unknown pose".into()));
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Self = read_json(&dir.join(MANIFEST_FILE))?;
        m.validate()?;
        Ok(m)
    }

    /// Every referenced file, relative to the dataset directory.
    pub fn files(&self) -> Vec<String> {
        let mut out = Vec::new();
        for e in self.train.iter().chain(&self.val) {
            out.push(e.volume.clone());
            out.extend(e.drrs.iter().cloned());
        }
        out.extend(self.style.iter().map(|s| s.image.clone()));
        out
    }
}

/// Removes what a failed build created.
struct Staging {
    dir: PathBuf,
    created: Vec<PathBuf>,
    armed: bool,
}

impl Staging {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut created = Vec::new();
        for sub in ["volumes", "drr", "xray", "preview"] {
            let p = dir.join(sub);
            if p.exists() {
                return Err(Error::Data(format!("{} already exists", p.display())));
            }
            created.push(p);
        }
        if dir.join(MANIFEST_FILE).exists() {
            return Err(Error::Data(format!("{} already holds a dataset", dir.display())));
        }
        created.push(dir.join(MANIFEST_FILE));
        Ok(Self {
            dir: dir.to_path_buf(),
            created,
            armed: true,
        })
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if self.armed {
            for p in &self.created {
                if p.is_dir() {
                    let _ = fs::remove_dir_all(p);
                } else {
                    let _ = fs::remove_file(p);
                }
            }
            log::warn!("removed partial dataset output in {}", self.dir.display());
        }
    }
}

fn save_image(dir: &Path, rel: &str, im: &Image) -> Result<()> {
    im.save(&dir.join(rel))?;
    let preview = Path::new("preview").join(Path::new(rel).with_extension("pgm"));
    im.save_pgm(&dir.join(preview))
}

fn angle_tag(a: f64) -> String {
    let s = format!("{a:+}").replace('.', "p");
    format!("h{s}")
}

pub fn build_dataset(cfg: &DatasetConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut staging = Staging::new(dir)?;
    let projection = cfg.projection();
    let poses: Vec<PoseEntry> = cfg
        .horiz_deg
        .iter()
        .map(|&h| PoseEntry {
            horiz_deg: h,
            vert_deg: cfg.vert_deg,
        })
        .collect();
    let cams: Vec<CameraPose> = poses
        .iter()
        .map(|p| pose_from_angles(p.horiz_deg, p.vert_deg, &projection))
        .collect();

    let make = |role: u64, n: usize| -> Result<Vec<(u64, Volume)>> {
        (0..n)
            .map(|i| {
                let s = derive_seed(seed, role, i as u64);
                Ok((s, generate_phantom(&cfg.phantom, s)?.volume))
            })
            .collect()
    };
    let train = make(ROLE_TRAIN, cfg.train_volumes)?;
    let val = make(ROLE_VAL, cfg.val_volumes)?;
    let style = make(ROLE_STYLE, cfg.style_volumes)?;

    let render = |v: &Volume| cams.iter().map(|c| path_integrals(v, c, &projection)).collect::<Vec<_>>();
    let train_a: Vec<_> = train.iter().map(|(_, v)| render(v)).collect();
    let mu_scale = cfg
        .mu_scale
        .unwrap_or_else(|| train.iter().map(|(_, v)| v.max() as f64).fold(0.0, f64::max));
    let drr_scale = cfg.drr_scale.unwrap_or_else(|| {
        train_a
            .iter()
            .flatten()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    });
    if !(mu_scale > 0.0 && drr_scale > 0.0) {
        return Err(Error::Data("training volumes are empty".into()));
    }
    let to_image = |a: &[f64]| {
        let d = a.iter().map(|&x| (x / drr_scale).clamp(0.0, 1.0) as f32).collect();
        Image::new(projection.det_px, projection.det_px, d).expect("square detector")
    };

    let write_split = |name: &str, vols: &[(u64, Volume)], renders: Vec<Vec<Vec<f64>>>| -> Result<Vec<VolumeEntry>> {
        let mut out = Vec::new();
        for ((s, v), a) in vols.iter().zip(renders) {
            let id = phantom_id(*s);
            let vol_rel = format!("volumes/{id}.f32");
            v.save(&dir.join(&vol_rel))?;
            let mut drrs = Vec::new();
            for (p, a) in poses.iter().zip(&a) {
                let rel = format!("drr/{id}_{}.f32", angle_tag(p.horiz_deg));
                save_image(dir, &rel, &to_image(a))?;
                drrs.push(rel);
            }
            log::debug!("{name}: wrote {id}");
            out.push(VolumeEntry {
                id,
                seed: *s,
                volume: vol_rel,
                drrs,
            });
        }
        Ok(out)
    };
    let train_entries = write_split("train", &train, train_a)?;
    let val_a = val.iter().map(|(_, v)| render(v)).collect();
    let val_entries = write_split("val", &val, val_a)?;

    let mut style_entries = Vec::new();
    for (n, (s, v)) in style.iter().enumerate() {
        let id = phantom_id(*s);
        for (pi, (p, cam)) in poses.iter().zip(&cams).enumerate() {
            let drr = to_image(&path_integrals(v, cam, &projection));
            let style_seed = derive_seed(seed, ROLE_XRAY, (n * poses.len() + pi) as u64);
            let xr = make_pseudo_xray(&drr, style_seed);
            let mad = xr.mean_abs_diff(&drr);
            if mad <= 0.02 {
                return Err(Error::Data(format!(
                    "pseudo-X-ray for {id} at {}° is too close to its DRR (MAD {mad:.4})",
                    p.horiz_deg
                )));
            }
            let rel = format!("xray/{id}_{}.f32", angle_tag(p.horiz_deg));
            save_image(dir, &rel, &xr)?;
            style_entries.push(StyleEntry {
                id: id.clone(),
                seed: *s,
                pose: pi,
                style_seed,
                image: rel,
            });
        }
    }

    let manifest = DatasetManifest {
        format: FORMAT.into(),
        seed,
        phantom: cfg.phantom.clone(),
        projection,
        mu_scale,
        drr_scale,
        poses,
        train: train_entries,
        val: val_entries,
        style: style_entries,
    };
    manifest.validate()?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    staging.armed = false;
    Ok(manifest)
}

/// One content-domain volume with its rendered sweep.
#[derive(Clone, Debug)]
pub struct CtSample {
    pub id: String,
    pub volume: Volume,
    /// Attenuation divided by the manifest's `mu_scale`, clipped to `[0, 1]`.
    pub normalized: Vec<f32>,
    pub drrs: Vec<Image>,
}

/// A dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<CtSample>,
    pub val: Vec<CtSample>,
    pub style: Vec<Image>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let load_split = |entries: &[VolumeEntry]| -> Result<Vec<CtSample>> {
            entries
                .iter()
                .map(|e| {
                    let volume = Volume::load(&dir.join(&e.volume))?;
                    if volume.shape() != manifest.phantom.shape {
                        return Err(Error::Data(format!("volume {} has an unexpected shape", e.id)));
                    }
                    let drrs = e
                        .drrs
                        .iter()
                        .map(|p| Image::load(&dir.join(p)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(CtSample {
                        id: e.id.clone(),
                        normalized: volume.normalized(manifest.mu_scale),
                        volume,
                        drrs,
                    })
                })
                .collect()
        };
        let train = load_split(&manifest.train)?;
        let val = load_split(&manifest.val)?;
        let style = manifest
            .style
            .iter()
            .map(|s| Image::load(&dir.join(&s.image)))
            .collect::<Result<Vec<_>>>()?;
        let n = manifest.projection.det_px;
        if train
            .iter()
            .chain(&val)
            .flat_map(|s| &s.drrs)
            .chain(&style)
            .any(|im| im.height() != n || im.width() != n)
        {
            return Err(Error::Data("image size differs from the detector".into()));
        }
        Ok(Self {
            manifest,
            train,
            val,
            style,
        })
    }
}
