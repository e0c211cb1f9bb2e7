mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use xsynth::config::Config;
use xsynth::eval::{multiview_report, Synthesizer};
use xsynth::image::Image;
use xsynth::metrics::{fid, kid, psnr, ssim};
use xsynth::model::init_params;

fn noise(seed: u64, side: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = rand_distr::Uniform::new(0.0f32, 1.0).unwrap();
    Image::new(side, side, (0..side * side).map(|_| u.sample(&mut rng)).collect()).unwrap()
}

fn cloud(n: usize, mean: &[f64], std: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| mean.iter().zip(std).map(|(m, s)| m + s * z.sample(&mut rng)).collect())
        .collect()
}

#[test]
fn psnr_and_ssim_reference_values() {
    let a = Image::full(16, 16, 0.3);
    let b = Image::full(16, 16, 0.4);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    let x = noise(1, 16);
    assert_eq!(psnr(&x, &x).unwrap(), 99.0);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    assert!(psnr(&x, &Image::zeros(8, 8)).is_err());
    assert!(ssim(&x, &Image::zeros(8, 8)).is_err());
}

#[test]
fn identical_feature_sets_have_zero_distance() {
    let a = cloud(64, &[0.0; 6], &[1.0, 0.5, 2.0, 1.0, 0.1, 3.0], 4);
    let f = fid(&a, &a, 16).unwrap();
    assert!(f.fid.abs() < 1e-6, "{}", f.fid);
    assert!(kid(&a, &a, 16).unwrap().abs() < 1e-4);
}

#[test]
fn fid_matches_the_diagonal_gaussian_closed_form() {
    let (ma, sa) = ([0.0, 0.0, 0.0, 0.0], [1.0, 0.5, 0.8, 1.0]);
    let (mb, sb) = ([2.0, -1.0, 1.0, 0.5], [0.5, 0.5, 1.2, 1.5]);
    let frechet = |ma: &[f64], sa: &[f64], mb: &[f64], sb: &[f64]| -> f64 {
        (0..ma.len())
            .map(|j| (ma[j] - mb[j]).powi(2) + (sa[j] - sb[j]).powi(2))
            .sum()
    };
    let exact = frechet(&ma, &sa, &mb, &sb);
    let a = cloud(512, &ma, &sa, 7);
    let b = cloud(512, &mb, &sb, 8);
    let got = fid(&a, &b, 16).unwrap().fid;
    assert!((got - exact).abs() < 0.05 * exact, "{got} vs {exact}");
    let back = fid(&b, &a, 16).unwrap().fid;
    assert!((got - back).abs() < 1e-8 * exact);

    // The same formula on the sample moments; only the small sample
    // cross-covariances separate it from the full estimate.
    let moments = |x: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) {
        let n = x.len() as f64;
        let mu: Vec<f64> = (0..4).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let sd = (0..4)
            .map(|j| (x.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
            .collect();
        (mu, sd)
    };
    let ((mua, sda), (mub, sdb)) = (moments(&a), moments(&b));
    let sample = frechet(&mua, &sda, &mub, &sdb);
    assert!((got - sample).abs() < 0.01 * sample, "{got} vs {sample}");
}

#[test]
fn small_sets_are_refused_with_the_minimum() {
    let a = cloud(8, &[0.0; 3], &[1.0; 3], 1);
    let e = fid(&a, &a, 16).unwrap_err().to_string();
    assert!(e.contains("16"), "{e}");
    assert!(kid(&a, &a, 16).is_err());
}

#[test]
fn kid_separates_shifted_clouds() {
    let a = cloud(64, &[0.0; 4], &[1.0; 4], 2);
    let b = cloud(64, &[0.0; 4], &[1.0; 4], 3);
    let c = cloud(64, &[1.5; 4], &[1.0; 4], 3);
    let same = kid(&a, &b, 16).unwrap();
    let shifted = kid(&a, &c, 16).unwrap();
    assert!(shifted > 10.0 * same.abs(), "{same} {shifted}");
}

#[test]
fn ssim_single_window_ignores_a_shared_pixel_permutation() {
    let a = noise(5, 7);
    let b = noise(6, 7);
    let perm: Vec<usize> = {
        let mut p: Vec<usize> = (0..49).collect();
        p.reverse();
        p.swap(3, 17);
        p
    };
    let shuffle = |im: &Image| Image::new(7, 7, perm.iter().map(|&i| im.data()[i]).collect()).unwrap();
    let s0 = ssim(&a, &b).unwrap();
    let s1 = ssim(&shuffle(&a), &shuffle(&b)).unwrap();
    assert!((s0 - s1).abs() < 1e-12);
}

proptest! {
    #[test]
    fn ssim_is_symmetric_and_bounded(sa in 0u64..1000, sb in 0u64..1000) {
        let a = noise(sa, 12);
        let b = noise(sb + 1000, 12);
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!(psnr(&a, &b).unwrap() >= 0.0);
    }
}

#[test]
fn multiview_sweep_has_one_column_per_angle_and_is_deterministic() {
    let cfg = Config::micro();
    let dir = tempfile::tempdir().unwrap();
    let data = common::load(&cfg, &dir.path().join("ds")).data;
    let synth = Synthesizer {
        model: cfg.model.clone(),
        store: init_params(&cfg.model, cfg.seed).unwrap(),
    };
    let m = &data.manifest;
    let angles = &cfg.eval.angles;
    assert_eq!(angles.len(), 7);
    let run = || {
        multiview_report(
            &synth,
            &data.train[0],
            m.drr_scale,
            &m.projection,
            0.0,
            (-30.0, 30.0),
            angles,
            &data.style[0],
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    let side = cfg.model.resolution();
    // One-pixel separators between tiles.
    assert_eq!(a.grid.width(), 7 * (side + 1) - 1);
    assert_eq!(a.grid.height(), 3 * (side + 1) - 1);
    assert_eq!(a.report, b.report);
    assert_eq!(a.grid.data(), b.grid.data());
    let flags: Vec<bool> = a.report.angles.iter().map(|r| r.in_training_sweep).collect();
    assert_eq!(flags, [false, false, true, true, true, false, false]);
}
