//! Single-channel image planes, their raw storage and PGM previews.

use std::path::Path;

use crate::error::{write, Error, Result};
use crate::rawfile::{self, Sidecar};

/// Row-major `h × w` scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || h * w != data.len() {
            return Err(Error::Data(format!(
                "image {h}x{w} does not hold {} pixels",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::full(h, w, 0.0)
    }

    pub fn full(h: usize, w: usize, v: f32) -> Self {
        Self {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let data = (0..h * w).map(|ix| f(ix / w, ix % w)).collect();
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.w + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(
            (self.h, self.w),
            (other.h, other.w),
            "image shapes differ"
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let sidecar = Sidecar {
            shape: vec![self.h, self.w],
            spacing_mm: None,
            dtype: "f32".into(),
        };
        rawfile::save(path, &sidecar, &self.data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (sidecar, data) = rawfile::load(path)?;
        match sidecar.shape.as_slice() {
            &[h, w] => Self::new(h, w, data),
            s => Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("image sidecar needs a 2D shape, got {s:?}"),
            }),
        }
    }

    /// 16-bit binary PGM (P5, maxval 65535), values clipped to `[0, 1]`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.w, self.h).into_bytes();
        for &v in &self.data {
            let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        write(path, &self.to_pgm())
    }

    /// Lays equally sized images out left to right, top to bottom, with
    /// `cols` columns and a one-pixel white gutter.
    pub fn tile(images: &[Image], cols: usize) -> Image {
        assert!(!images.is_empty() && cols > 0, "tile: nothing to lay out");
        let (h, w) = (images[0].h, images[0].w);
        assert!(
            images.iter().all(|im| im.h == h && im.w == w),
            "tile: images differ in shape"
        );
        let rows = images.len().div_ceil(cols);
        let (th, tw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
        let mut out = Image::full(th, tw, 1.0);
        for (n, im) in images.iter().enumerate() {
            let (r0, c0) = ((n / cols) * (h + 1), (n % cols) * (w + 1));
            for r in 0..h {
                let dst = (r0 + r) * tw + c0;
                out.data[dst..dst + w].copy_from_slice(&im.data[r * w..(r + 1) * w]);
            }
        }
        out
    }
}
