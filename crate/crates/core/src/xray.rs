//! Fabricated X-ray appearance for the unpaired style domain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::image::Image;

/// Parameters drawn for one style seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct XrayStyle {
    pub gamma: f64,
    pub gain: f64,
    pub noise: f64,
    pub vignette: f64,
}

impl XrayStyle {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            gamma: rng.random_range(1.5..=2.5),
            gain: rng.random_range(1.1..=1.4),
            noise: rng.random_range(0.02..=0.05),
            vignette: rng.random_range(0.15..=0.35),
        }
    }
}

/// Gamma curve `x^(1/γ)`, contrast gain, noise with standard deviation
/// proportional to `√y`, corner vignetting, then clipping to `[0, 1]`.
pub fn make_pseudo_xray(image: &Image, style_seed: u64) -> Image {
    let style = XrayStyle::from_seed(style_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed ^ 0x05ee_d0fa_015e);
    let (h, w) = (image.height(), image.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let r_max2 = cy * cy + cx * cx;
    let mut out = image.clone();
    for (ix, v) in out.data_mut().iter_mut().enumerate() {
        let (r, c) = ((ix / w) as f64, (ix % w) as f64);
        let x = (*v as f64).clamp(0.0, 1.0);
        let mut y = x.powf(1.0 / style.gamma) * style.gain;
        let z: f64 = StandardNormal.sample(&mut rng);
        y += style.noise * y.max(0.0).sqrt() * z;
        let rho2 = if r_max2 > 0.0 {
            ((r - cy).powi(2) + (c - cx).powi(2)) / r_max2
        } else {
            0.0
        };
        y *= 1.0 - style.vignette * rho2;
        *v = y.clamp(0.0, 1.0) as f32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_stays_zero() {
        let out = make_pseudo_xray(&Image::zeros(8, 8), 3);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let im = Image::from_fn(8, 8, |r, c| (r + c) as f32 / 14.0);
        assert_eq!(make_pseudo_xray(&im, 9), make_pseudo_xray(&im, 9));
        assert_ne!(make_pseudo_xray(&im, 9), make_pseudo_xray(&im, 10));
    }

    #[test]
    fn gamma_in_range() {
        for s in 0..100 {
            let st = XrayStyle::from_seed(s);
            assert!((1.5..=2.5).contains(&st.gamma));
        }
    }
}
