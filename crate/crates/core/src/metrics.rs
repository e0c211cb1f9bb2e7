//! Image-quality and distributional metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::image_batch;
use crate::model::perceptual::Perceptual;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Data(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit-peak images, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean structural similarity over all valid 7 x 7 uniform windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Data(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - SSIM_WINDOW {
        for x in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                let row = (y + dy) * w + x;
                for i in row..row + SSIM_WINDOW {
                    let (p, q) = (ad[i] as f64, bd[i] as f64);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Feature vectors of `images` from the frozen extractor.
pub fn extract_features(perc: &Perceptual<f64>, images: &[Image]) -> Vec<Vec<f64>> {
    images
        .chunks(16)
        .flat_map(|chunk| {
            let refs: Vec<&Image> = chunk.iter().collect();
            let f = perc.features(&image_batch(&refs));
            let d = f.shape()[1];
            f.data().chunks(d).map(|r| r.to_vec()).collect::<Vec<_>>()
        })
        .collect()
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>], min: usize) -> Result<usize> {
    if a.len() < min || b.len() < min {
        return Err(Error::Data(format!(
            "feature sets of {} and {} samples; at least {min} each are required",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Data("feature vectors differ in length".into()));
    }
    Ok(d)
}

fn mean_cov(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mu = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

/// Symmetric square root with negative eigenvalues clamped to zero; also
/// returns the largest clamped magnitude.
fn sqrtm_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.iter().filter(|&&v| v < 0.0).fold(0.0f64, |a, &v| a.max(-v));
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), clamped)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidResult {
    pub fid: f64,
    /// Largest negative eigenvalue magnitude zeroed in the matrix roots.
    pub clamped: f64,
}

/// Frechet distance between Gaussian fits of two feature sets.
///
/// The trace of `(S_a S_b)^(1/2)` is taken as that of the symmetric matrix
/// `(S_a^(1/2) S_b S_a^(1/2))^(1/2)`, which has the same eigenvalues.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>], min: usize) -> Result<FidResult> {
    check_sets(a, b, min)?;
    let (mu_a, s_a) = mean_cov(a);
    let (mu_b, s_b) = mean_cov(b);
    let (root_a, c1) = sqrtm_psd(&s_a);
    let (cross, c2) = sqrtm_psd(&(&root_a * &s_b * &root_a));
    let fid = (&mu_a - &mu_b).norm_squared() + s_a.trace() + s_b.trace() - 2.0 * cross.trace();
    let clamped = c1.max(c2);
    if clamped > 0.0 {
        log::debug!("FID: clamped negative eigenvalues up to {clamped:.3e}");
    }
    Ok(FidResult {
        fid: fid.max(0.0),
        clamped,
    })
}

/// Unbiased squared MMD with the cubic polynomial kernel `(x.y/d + 1)^3`.
///
/// Equal-size sets use the paired U-statistic, which also drops the `i == j`
/// cross terms and so is exactly zero for identical sets. The estimate can
/// fall slightly below zero for sets drawn from one distribution.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>], min: usize) -> Result<f64> {
    let d = check_sets(a, b, min)? as f64;
    let k = |x: &[f64], y: &[f64]| (x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / d + 1.0).powi(3);
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        let mut t = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    t += k(&s[i], &s[j]);
                }
            }
        }
        t / (n * (n - 1)) as f64
    };
    let paired = a.len() == b.len();
    let mut cross = 0.0;
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if !(paired && i == j) {
                cross += k(x, y);
            }
        }
    }
    let pairs = if paired { a.len() * (a.len() - 1) } else { a.len() * b.len() };
    cross /= pairs as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}
