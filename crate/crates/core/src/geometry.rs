//! Cone-beam camera poses, volume rotation, MIP and the DRR ray caster.
//!
//! The source orbits the volume centre. At pose `(0°, 0°)` the camera frame
//! coincides with the world frame shifted by `SOD` along `z`, so rays travel
//! along `+z` (the depth axis `k`) and detector rows/columns follow `y`/`x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::volume::Volume;

pub type Mat3 = [[f64; 3]; 3];

/// Detector and sampling geometry. `sdd_mm` is measured from the isocentre
/// to the detector, so the source-to-detector length is `sod_mm + sdd_mm`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub sod_mm: f64,
    pub sdd_mm: f64,
    pub det_px: usize,
    pub det_pitch_mm: f64,
    /// Ray-marching step in voxel units (of the finest spacing).
    pub step: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self::fitted(64.0, 64)
    }
}

impl ProjectionConfig {
    /// Paper distances with a detector pitch that fits a cube of side
    /// `extent_mm` (plus 10% margin) onto `det_px` pixels.
    pub fn fitted(extent_mm: f64, det_px: usize) -> Self {
        let (sod, sdd) = (1020.0, 530.0);
        let magnification = (sod + sdd) / sod;
        Self {
            sod_mm: sod,
            sdd_mm: sdd,
            det_px,
            det_pitch_mm: 1.1 * extent_mm * magnification / det_px as f64,
            step: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sod_mm > 0.0
            && self.sdd_mm > 0.0
            && self.det_px > 0
            && self.det_pitch_mm > 0.0
            && self.step > 0.0
            && [self.sod_mm, self.sdd_mm, self.det_pitch_mm, self.step]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid projection config {self:?}")))
        }
    }

    pub fn focal_px(&self) -> f64 {
        (self.sod_mm + self.sdd_mm) / self.det_pitch_mm
    }
}

/// Extrinsic world-to-camera transform and pinhole intrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub horiz_deg: f64,
    pub vert_deg: f64,
    pub extrinsic: [f64; 16],
    pub intrinsic: [f64; 9],
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m[j][i] = v;
        }
    }
    m
}

pub fn apply(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Camera at horizontal angle `horiz` (about the vertical `y` axis) and
/// elevation `vert` (about `x`), looking at the volume centre from `SOD`.
pub fn pose_from_angles(horiz: f64, vert: f64, cfg: &ProjectionConfig) -> CameraPose {
    let (sh, ch) = horiz.to_radians().sin_cos();
    let (sv, cv) = vert.to_radians().sin_cos();
    let ry = [[ch, 0.0, sh], [0.0, 1.0, 0.0], [-sh, 0.0, ch]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cv, -sv], [0.0, sv, cv]];
    let r = mat_mul(&rx, &ry);
    let t = [0.0, 0.0, cfg.sod_mm];
    let mut extrinsic = [0.0; 16];
    for i in 0..3 {
        for j in 0..3 {
            extrinsic[i * 4 + j] = r[i][j];
        }
        extrinsic[i * 4 + 3] = t[i];
    }
    extrinsic[15] = 1.0;
    let f = cfg.focal_px();
    let c = (cfg.det_px as f64 - 1.0) / 2.0;
    CameraPose {
        horiz_deg: horiz,
        vert_deg: vert,
        extrinsic,
        intrinsic: [f, 0.0, c, 0.0, f, c, 0.0, 0.0, 1.0],
    }
}

impl CameraPose {
    pub fn rotation(&self) -> Mat3 {
        let e = &self.extrinsic;
        [[e[0], e[1], e[2]], [e[4], e[5], e[6]], [e[8], e[9], e[10]]]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.extrinsic[3], self.extrinsic[7], self.extrinsic[11]]
    }

    /// 16 row-major extrinsic scalars followed by 9 row-major intrinsic ones.
    pub fn flatten(&self) -> [f64; 25] {
        let mut out = [0.0; 25];
        out[..16].copy_from_slice(&self.extrinsic);
        out[16..].copy_from_slice(&self.intrinsic);
        out
    }

    pub fn from_flat(horiz_deg: f64, vert_deg: f64, flat: &[f64; 25]) -> Self {
        let mut extrinsic = [0.0; 16];
        let mut intrinsic = [0.0; 9];
        extrinsic.copy_from_slice(&flat[..16]);
        intrinsic.copy_from_slice(&flat[16..]);
        Self {
            horiz_deg,
            vert_deg,
            extrinsic,
            intrinsic,
        }
    }

    /// Source position in world coordinates.
    pub fn source(&self) -> [f64; 3] {
        let rt = transpose(&self.rotation());
        let t = self.translation();
        let s = apply(&rt, t);
        [-s[0], -s[1], -s[2]]
    }

    /// Scale-free pose features for the networks: the flattened pose with
    /// translation divided by its norm and the intrinsic matrix divided by
    /// its focal length.
    pub fn features(&self) -> [f64; 25] {
        let mut f = self.flatten();
        let t = self.translation();
        let tn = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt().max(1e-12);
        for ix in [3, 7, 11] {
            f[ix] /= tn;
        }
        let focal = self.intrinsic[0].abs().max(1e-12);
        for v in &mut f[16..] {
            *v /= focal;
        }
        f
    }
}

/// Resamples `v` under the inverse pose rotation about the volume centre:
/// `out(y) = V(Rᵀ y)`. Outside the grid the value is 0.
pub fn rotate_volume(v: &Volume, pose: &CameraPose) -> Volume {
    let rt = transpose(&pose.rotation());
    let [h, w, d] = v.shape();
    let mut data = Vec::with_capacity(v.len());
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let y = v.voxel_to_world([i as f64, j as f64, k as f64]);
                let x = apply(&rt, y);
                data.push(v.sample(v.world_to_voxel(x)) as f32);
            }
        }
    }
    Volume::new(v.shape(), v.spacing(), data).expect("rotation preserves validity")
}

/// Maximum along the depth axis `k`; an `H × W` image.
pub fn max_intensity_projection(v: &Volume) -> Image {
    let [h, w, d] = v.shape();
    let data = v
        .data()
        .chunks(d)
        .map(|ray| ray.iter().copied().fold(0.0, f32::max))
        .collect();
    Image::new(h, w, data).expect("H x W rays")
}

/// Entry and exit distances of a ray through the axis-aligned box
/// `[-half, half]`, or `None` if it misses.
fn ray_box(origin: [f64; 3], dir: [f64; 3], half: [f64; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let ta = (-half[a] - origin[a]) / dir[a];
        let tb = (half[a] - origin[a]) / dir[a];
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    let t0 = t0.max(0.0);
    (t1 > t0).then_some((t0, t1))
}

/// Radiological path `∫μ ds` (dimensionless) per detector pixel, by the
/// midpoint rule with trilinear sampling.
pub fn path_integrals(v: &Volume, pose: &CameraPose, cfg: &ProjectionConfig) -> Vec<f64> {
    let n = cfg.det_px;
    let rt = transpose(&pose.rotation());
    let origin = pose.source();
    let [ey, ex, ez] = v.extent_mm();
    let half = [ex / 2.0, ey / 2.0, ez / 2.0];
    let sp = v.spacing();
    let step_mm = cfg.step * sp[0].min(sp[1]).min(sp[2]);
    let k = &pose.intrinsic;
    let (f, cx, cy) = (k[0], k[2], k[5]);
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let cam = [(c as f64 - cx) / f, (r as f64 - cy) / f, 1.0];
            let norm = (cam[0] * cam[0] + cam[1] * cam[1] + 1.0).sqrt();
            let dir = apply(&rt, cam.map(|x| x / norm));
            let Some((t0, t1)) = ray_box(origin, dir, half) else {
                continue;
            };
            let len = t1 - t0;
            let samples = (len / step_mm).ceil().max(1.0) as usize;
            let ds = len / samples as f64;
            let mut acc = 0.0;
            for m in 0..samples {
                let t = t0 + (m as f64 + 0.5) * ds;
                let p = [0, 1, 2].map(|a| origin[a] + t * dir[a]);
                acc += v.sample(v.world_to_voxel(p));
            }
            out[r * n + c] = acc * ds;
        }
    }
    out
}

/// Path integrals divided by `scale` and clipped to `[0, 1]`.
pub fn render_drr(v: &Volume, pose: &CameraPose, cfg: &ProjectionConfig, scale: f64) -> Image {
    let a = path_integrals(v, pose, cfg);
    let data = a.iter().map(|&x| (x / scale).clamp(0.0, 1.0) as f32).collect();
    Image::new(cfg.det_px, cfg.det_px, data).expect("square detector")
}
