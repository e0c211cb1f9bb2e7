//! Attenuation volumes and the procedural phantom generator.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rawfile::{self, Sidecar};

/// Linear attenuation of water in mm⁻¹.
pub const MU_WATER: f64 = 0.02;

/// Linear attenuation coefficients (mm⁻¹) on an `(H, W, D)` grid, C order.
///
/// World coordinates are millimetres with the origin at the volume centre:
/// index `i` runs along `y`, `j` along `x` and `k` along `z` (depth).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Data(format!(
                "volume shape {shape:?} does not hold {} voxels",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("volume spacing {spacing:?} must be positive")));
        }
        if data.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Data("attenuation must be finite and nonnegative".into()));
        }
        Ok(Self { shape, spacing, data })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        Self::new(shape, spacing, vec![0.0; shape.iter().product()]).expect("valid zero volume")
    }

    /// Converts Hounsfield units with `μ = μ_water·(1 + HU/1000)`, clamped at 0.
    pub fn from_hu(shape: [usize; 3], spacing: [f64; 3], hu: &[f32]) -> Result<Self> {
        let data = hu
            .iter()
            .map(|&h| (MU_WATER * (1.0 + h as f64 / 1000.0)).max(0.0) as f32)
            .collect();
        Self::new(shape, spacing, data)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        assert!(v >= 0.0 && v.is_finite(), "attenuation must be finite and nonnegative");
        let ix = self.index(i, j, k);
        self.data[ix] = v;
    }

    /// Physical size along `(y, x, z)` in mm.
    pub fn extent_mm(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.shape[a] as f64 * self.spacing[a])
    }

    /// Continuous voxel coordinates `(i, j, k)` of a world point `(x, y, z)`.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        let [x, y, z] = p;
        [
            y / self.spacing[0] + (self.shape[0] as f64 - 1.0) / 2.0,
            x / self.spacing[1] + (self.shape[1] as f64 - 1.0) / 2.0,
            z / self.spacing[2] + (self.shape[2] as f64 - 1.0) / 2.0,
        ]
    }

    /// World point `(x, y, z)` of continuous voxel coordinates.
    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        let c = |a: usize| (v[a] - (self.shape[a] as f64 - 1.0) / 2.0) * self.spacing[a];
        [c(1), c(0), c(2)]
    }

    /// Trilinear interpolation at voxel coordinates. Outside `[-0.5, n-0.5]`
    /// along any axis the value is 0; between the outermost voxel centre and
    /// the grid boundary the edge value is held.
    pub fn sample(&self, v: [f64; 3]) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let n = self.shape[a] as f64;
            if !(v[a] >= -0.5 && v[a] <= n - 0.5) {
                return 0.0;
            }
            let c = v[a].clamp(0.0, n - 1.0);
            let b = (c.floor() as usize).min(self.shape[a].saturating_sub(2));
            base[a] = b;
            frac[a] = if self.shape[a] == 1 { 0.0 } else { c - b as f64 };
        }
        let step = [
            usize::from(self.shape[0] > 1),
            usize::from(self.shape[1] > 1),
            usize::from(self.shape[2] > 1),
        ];
        let mut acc = 0.0;
        for di in 0..2 {
            let wi = if di == 0 { 1.0 - frac[0] } else { frac[0] };
            for dj in 0..2 {
                let wj = if dj == 0 { 1.0 - frac[1] } else { frac[1] };
                for dk in 0..2 {
                    let wk = if dk == 0 { 1.0 - frac[2] } else { frac[2] };
                    let w = wi * wj * wk;
                    if w != 0.0 {
                        let ix = self.index(
                            base[0] + di * step[0],
                            base[1] + dj * step[1],
                            base[2] + dk * step[2],
                        );
                        acc += w * self.data[ix] as f64;
                    }
                }
            }
        }
        acc
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Values divided by `scale` and clipped to `[0, 1]`.
    pub fn normalized(&self, scale: f64) -> Vec<f32> {
        self.data
            .iter()
            .map(|&v| (v as f64 / scale).clamp(0.0, 1.0) as f32)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let sidecar = Sidecar {
            shape: self.shape.to_vec(),
            spacing_mm: Some(self.spacing.to_vec()),
            dtype: "f32".into(),
        };
        rawfile::save(path, &sidecar, &self.data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (sidecar, data) = rawfile::load(path)?;
        let fail = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        };
        let shape: [usize; 3] = sidecar
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| fail("volume sidecar needs a 3D shape"))?;
        let spacing: [f64; 3] = sidecar
            .spacing_mm
            .as_deref()
            .unwrap_or(&[1.0, 1.0, 1.0])
            .try_into()
            .map_err(|_| fail("volume spacing needs 3 entries"))?;
        Self::new(shape, spacing, data).map_err(|e| fail(&e.to_string()))
    }
}

/// Parameters of the procedural phantom family: a soft-tissue ellipsoid in
/// air holding a few rotated ellipsoidal bone bodies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub bone_bodies: usize,
    pub mu_bone: [f64; 2],
    pub mu_soft: [f64; 2],
    pub mu_air: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [64, 64, 64],
            spacing_mm: [1.0, 1.0, 1.0],
            bone_bodies: 4,
            mu_bone: [0.045, 0.06],
            mu_soft: [0.017, 0.023],
            mu_air: 0.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        if self.bone_bodies == 0 {
            return bad("needs at least one bone body");
        }
        if self.shape.iter().any(|&n| n < 4) {
            return bad("every extent must be at least 4 voxels");
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return bad("spacing must be positive");
        }
        let [b0, b1] = self.mu_bone;
        let [s0, s1] = self.mu_soft;
        if !(b0 <= b1 && s0 <= s1) {
            return bad("attenuation ranges must be ordered low, high");
        }
        if self.mu_air != 0.0 || !(s0 > 0.0 && b0 > s1) {
            return bad("needs bone range above soft range above air = 0");
        }
        Ok(())
    }
}

/// Bone voxels of a generated phantom, for mask statistics.
pub struct Phantom {
    pub volume: Volume,
    pub bone_mask: Vec<bool>,
}

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
    /// Rotation about the vertical (`i`) axis, radians.
    yaw: f64,
}

impl Ellipsoid {
    /// `true` if normalised voxel coordinates `p` (each in `[-1, 1]`) lie inside.
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.centre[0], p[1] - self.centre[1], p[2] - self.centre[2]];
        let (s, c) = self.yaw.sin_cos();
        let u = c * d[1] - s * d[2];
        let w = s * d[1] + c * d[2];
        let q = [d[0], u, w];
        (0..3).map(|a| (q[a] / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }

    /// Largest distance from the centre to the surface along any axis,
    /// bounding the body regardless of yaw.
    fn reach(&self) -> [f64; 3] {
        let horiz = self.radii[1].max(self.radii[2]);
        [self.radii[0], horiz, horiz]
    }
}

pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let soft = Ellipsoid {
        centre: [0.0, 0.0, 0.0],
        radii: [
            rng.random_range(0.8..0.95),
            rng.random_range(0.6..0.9),
            rng.random_range(0.5..0.8),
        ],
        yaw: rng.random_range(-0.4..0.4),
    };
    let mu_soft = rng.random_range(spec.mu_soft[0]..=spec.mu_soft[1]);
    let mut bones = Vec::with_capacity(spec.bone_bodies);
    for _ in 0..spec.bone_bodies {
        let radii = [
            rng.random_range(0.12..0.3),
            rng.random_range(0.08..0.25),
            rng.random_range(0.06..0.18),
        ];
        let mut body = Ellipsoid {
            centre: [0.0; 3],
            radii,
            yaw: rng.random_range(0.0..std::f64::consts::PI),
        };
        let reach = body.reach();
        // Keep at least one voxel of margin inside the grid.
        for a in 0..3 {
            let limit = (0.9 - reach[a]).max(0.0);
            body.centre[a] = rng.random_range(-limit..=limit) * 0.6;
        }
        let mu = rng.random_range(spec.mu_bone[0]..=spec.mu_bone[1]);
        bones.push((body, mu));
    }
    let [h, w, d] = spec.shape;
    let norm = |i: usize, n: usize| 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
    let mut data = vec![spec.mu_air as f32; h * w * d];
    let mut bone_mask = vec![false; h * w * d];
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let p = [norm(i, h), norm(j, w), norm(k, d)];
                let ix = (i * w + j) * d + k;
                if soft.contains(p) {
                    data[ix] = mu_soft as f32;
                }
                for (b, mu) in &bones {
                    if b.contains(p) {
                        data[ix] = *mu as f32;
                        bone_mask[ix] = true;
                    }
                }
            }
        }
    }
    Ok(Phantom {
        volume: Volume::new(spec.shape, spec.spacing_mm, data)?,
        bone_mask,
    })
}
