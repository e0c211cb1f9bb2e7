//! Network definitions: CT encoder, style decoupling encoder, pose attention,
//! generator, discriminator and the frozen perceptual feature pyramid.

pub mod discriminator;
pub mod encoders;
pub mod generator;
pub mod pam;
pub mod perceptual;

use serde::{Deserialize, Serialize};
use xsynth_autograd::{ParamStore, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::image::Image;
use crate::nn::Init;

/// Width of the flattened camera pose.
pub const POSE_DIM: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Cubic CT grid edge fed to the CT encoder.
    pub volume_size: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    pub pose_dim: usize,
    pub heads: usize,
    /// Attention temperature; `sqrt(content_dim / heads)` when unset.
    pub tau: Option<f64>,
    /// Channels of the CT encoder's input, three downsampling and latent layers.
    pub ct_channels: [usize; 5],
    /// Channels of the six convolutions shared by the style and content branches.
    pub branch_channels: [usize; 6],
    pub synthesis_layers: usize,
    /// Layers modulated by the content code; `round(8 L / 14)` when unset.
    pub content_layers: Option<usize>,
    pub gen_max_channels: usize,
    pub gen_min_channels: usize,
    pub disc_channels: usize,
    pub disc_features: usize,
    /// Seed of the frozen perceptual feature pyramid.
    pub extractor_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            volume_size: 32,
            content_dim: 128,
            style_dim: 64,
            pose_dim: 32,
            heads: 8,
            tau: None,
            ct_channels: [4, 8, 16, 16, 16],
            branch_channels: [8, 16, 32, 32, 32, 32],
            synthesis_layers: 8,
            content_layers: None,
            gen_max_channels: 64,
            gen_min_channels: 16,
            disc_channels: 16,
            disc_features: 64,
            extractor_seed: 0x5eed,
        }
    }
}

impl ModelConfig {
    /// The full-size configuration: 14 synthesis layers producing 256 x 256.
    pub fn full_scale() -> Self {
        Self {
            volume_size: 64,
            synthesis_layers: 14,
            ..Self::default()
        }
    }

    /// A 16^3 / 16^2 configuration small enough for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            volume_size: 16,
            content_dim: 16,
            style_dim: 8,
            pose_dim: 8,
            heads: 4,
            ct_channels: [2, 2, 3, 3, 3],
            branch_channels: [2, 3, 3, 3, 3, 3],
            synthesis_layers: 6,
            gen_max_channels: 4,
            gen_min_channels: 3,
            disc_channels: 3,
            disc_features: 6,
            ..Self::default()
        }
    }

    pub fn content_layers(&self) -> usize {
        self.content_layers
            .unwrap_or_else(|| (self.synthesis_layers as f64 * 8.0 / 14.0).round() as usize)
    }

    pub fn tau(&self) -> f64 {
        self.tau
            .unwrap_or_else(|| (self.content_dim as f64 / self.heads as f64).sqrt())
    }

    /// Output edge: 4 pixels, doubled every second layer.
    pub fn resolution(&self) -> usize {
        4 << ((self.synthesis_layers.max(1) - 1) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.synthesis_layers < 2 {
            return fail("synthesis_layers must be at least 2".into());
        }
        let kc = self.content_layers();
        if kc == 0 || kc >= self.synthesis_layers {
            return fail(format!(
                "content_layers {kc} must lie in 1..{}",
                self.synthesis_layers
            ));
        }
        if self.heads == 0 || !self.content_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "content_dim {} is not divisible by {} heads",
                self.content_dim, self.heads
            ));
        }
        if !self.volume_size.is_multiple_of(8) || self.volume_size < 8 {
            return fail(format!(
                "volume_size {} must be a positive multiple of 8 (three halvings)",
                self.volume_size
            ));
        }
        if !(self.tau() > 0.0) {
            return fail("tau must be positive".into());
        }
        let dims = [
            self.content_dim,
            self.style_dim,
            self.pose_dim,
            self.gen_min_channels,
            self.disc_channels,
            self.disc_features,
        ];
        if dims.contains(&0)
            || self.ct_channels.contains(&0)
            || self.branch_channels.contains(&0)
            || self.gen_max_channels < self.gen_min_channels
        {
            return fail("layer widths must be positive and gen_max_channels >= gen_min_channels".into());
        }
        Ok(())
    }
}

/// Builds every trainable network's parameters, seeded by `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut store = ParamStore::new(seed);
    let mut init = Init { store: &mut store };
    encoders::init_ct(&mut init, cfg);
    encoders::init_style(&mut init, cfg, encoders::Domain::Xray);
    encoders::init_style(&mut init, cfg, encoders::Domain::Drr);
    encoders::init_content(&mut init, cfg);
    pam::init(&mut init, cfg);
    generator::init(&mut init, cfg);
    discriminator::init(&mut init, cfg);
    Ok(store)
}

/// Stacks single-channel images into `[N,1,H,W]`.
pub fn image_batch<T: Real>(images: &[&Image]) -> Var<T> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        assert_eq!((im.height(), im.width()), (h, w), "image batch: mixed sizes");
        data.extend(im.data().iter().map(|&v| T::c(v as f64)));
    }
    Var::constant(Tensor::new(&[images.len(), 1, h, w], data).expect("batch shape"))
}

/// Splits `[N,1,H,W]` back into images.
pub fn to_images<T: Real>(x: &Tensor<T>) -> Vec<Image> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    x.data()
        .chunks(h * w)
        .map(|c| {
            Image::new(h, w, c.iter().map(|v| v.to_f64().unwrap() as f32).collect())
                .expect("image shape")
        })
        .collect()
}

/// Stacks normalized cubic volumes into `[N,1,D,H,W]`.
pub fn volume_batch<T: Real>(volumes: &[&[f32]], size: usize) -> Var<T> {
    let n = size * size * size;
    let mut data = Vec::with_capacity(volumes.len() * n);
    for v in volumes {
        assert_eq!(v.len(), n, "volume batch: expected {size}^3 voxels");
        data.extend(v.iter().map(|&x| T::c(x as f64)));
    }
    Var::constant(Tensor::new(&[volumes.len(), 1, size, size, size], data).expect("batch shape"))
}

/// Normalized pose features `[N,25]`.
pub fn pose_batch<T: Real>(poses: &[&CameraPose]) -> Var<T> {
    let data = poses
        .iter()
        .flat_map(|p| p.features())
        .map(T::c)
        .collect();
    Var::constant(Tensor::new(&[poses.len(), POSE_DIM], data).expect("pose shape"))
}
