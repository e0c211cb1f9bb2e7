use std::path::Path;

use xsynth::dataset::{build_dataset, Dataset, DatasetConfig, DatasetManifest, MANIFEST_FILE};
use xsynth::image::Image;
use xsynth::volume::{PhantomSpec, Volume};

fn tiny(train: usize) -> DatasetConfig {
    DatasetConfig {
        phantom: PhantomSpec {
            shape: [16; 3],
            ..Default::default()
        },
        det_px: 16,
        step: 0.25,
        train_volumes: train,
        val_volumes: 1,
        style_volumes: 2,
        ..Default::default()
    }
}

#[test]
fn default_sweep_is_five_horizontal_angles() {
    let cfg = DatasetConfig::default();
    assert_eq!(cfg.horiz_deg, [-60.0, -30.0, 0.0, 30.0, 60.0]);
    assert_eq!(cfg.vert_deg, 0.0);
}

#[test]
fn eight_volumes_give_forty_drrs_and_valid_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&tiny(8), 11, dir.path()).unwrap();
    let count: usize = m.train.iter().map(|e| e.drrs.len()).sum();
    assert_eq!(count, 40);
    for rel in m.files() {
        let p = dir.path().join(&rel);
        assert!(p.exists(), "{rel} missing");
        if rel.starts_with("volumes/") {
            let v = Volume::load(&p).unwrap();
            assert!(v.data().iter().all(|&x| x >= 0.0));
        } else {
            assert!(Image::load(&p).unwrap().in_unit_range(), "{rel} out of range");
        }
    }
    let data = Dataset::load(dir.path()).unwrap();
    assert_eq!(data.style.len(), 2 * 5);
    for (s, e) in data.style.iter().zip(&m.style) {
        // Style images are pseudo-X-rays of held-out volumes, so compare with
        // a fresh render of the same phantom.
        let v = xsynth::volume::generate_phantom(&m.phantom, e.seed).unwrap().volume;
        let drr = xsynth::geometry::render_drr(&v, &m.pose(e.pose), &m.projection, m.drr_scale);
        assert!(s.mean_abs_diff(&drr) > 0.02);
    }
}

#[test]
fn same_seed_same_manifest() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = build_dataset(&tiny(2), 5, a.path()).unwrap();
    let mb = build_dataset(&tiny(2), 5, b.path()).unwrap();
    assert_eq!(ma, mb);
    let read = |d: &Path| std::fs::read(d.join(MANIFEST_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn overlapping_style_domain_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_dataset(&tiny(2), 5, dir.path()).unwrap();
    m.style[0].id = m.train[0].id.clone();
    assert!(m.validate().is_err());
}

#[test]
fn refuses_to_overwrite_and_cleans_up_on_failure() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&tiny(1), 5, dir.path()).unwrap();
    assert!(build_dataset(&tiny(1), 5, dir.path()).is_err());

    // A huge scale leaves every DRR nearly black, so the style transform
    // cannot move far from it and the build fails after writing volumes.
    let other = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        drr_scale: Some(1e7),
        ..tiny(1)
    };
    assert!(build_dataset(&cfg, 5, other.path()).is_err());
    assert_eq!(std::fs::read_dir(other.path()).unwrap().count(), 0);
    assert!(DatasetManifest::load(other.path()).is_err());
}
