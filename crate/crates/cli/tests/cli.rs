use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use xsynth::config::Config;
use xsynth::dataset::Dataset;
use xsynth::eval::Synthesizer;
use xsynth::geometry::{pose_from_angles, render_drr};
use xsynth::image::Image;
use xsynth::model::encoders::Domain;
use xsynth::train::{checkpoint_dir, normalized_volume};
use xsynth::volume::Volume;

fn xsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xsynth"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let o = xsynth(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn micro_config(dir: &Path) -> String {
    let p = dir.join("micro.json");
    std::fs::write(&p, serde_json::to_string_pretty(&Config::micro()).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn render_puts_a_one_hot_voxel_at_the_predicted_pixel() {
    let dir = tempfile::tempdir().unwrap();
    // World (x, y, z) = (6, -4, 3) mm in a 17^3 grid of 1 mm voxels.
    let mut v = Volume::zeros([17; 3], [1.0; 3]);
    v.set(8 - 4, 8 + 6, 8 + 3, 1.0);
    let vol = dir.path().join("hot.raw");
    v.save(&vol).unwrap();
    let out = dir.path().join("render");
    ok(&["render", "--volume", vol.to_str().unwrap(), "--angle", "0", "--out", out.to_str().unwrap()]);

    let proj = &read_json(&out.join("pose.json"))["projection"];
    let f = |k: &str| proj[k].as_f64().unwrap();
    let n = proj["det_px"].as_u64().unwrap() as usize;
    let focal = (f("sod_mm") + f("sdd_mm")) / f("det_pitch_mm");
    let c = (n as f64 - 1.0) / 2.0;
    let depth = f("sod_mm") + 3.0;
    let (row, col) = (c - focal * 4.0 / depth, c + focal * 6.0 / depth);

    let drr = Image::load(&out.join("drr.f32")).unwrap();
    let best = drr
        .data()
        .iter()
        .enumerate()
        .fold((0, f32::MIN), |a, (i, &x)| if x > a.1 { (i, x) } else { a })
        .0;
    let (r, cc) = (best / n, best % n);
    assert!((r as f64 - row).abs() <= 0.5 + 1e-9, "row {r} vs {row}");
    assert!((cc as f64 - col).abs() <= 0.5 + 1e-9, "col {cc} vs {col}");
    assert!(out.join("mip.pgm").exists() && out.join("resolved_config.json").exists());
}

#[test]
fn dataset_is_reproducible_and_snapshots_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["dataset", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()]);
    }
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("manifest.json")).unwrap());
    let snap = read_json(&a.join("resolved_config.json"));
    assert_eq!(snap["seed"], 3);
    // The snapshot alone reproduces the run.
    let c = dir.path().join("c");
    ok(&["dataset", "--config", a.join("resolved_config.json").to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert_eq!(ma, std::fs::read(c.join("manifest.json")).unwrap());
}

#[test]
fn exit_codes_separate_config_errors_from_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = xsynth(&["dataset", "--set", "train.bogus_key=1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus_key"));

    let o = xsynth(&[
        "train",
        "--data",
        dir.path().join("missing").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn synth_without_style_follows_the_drr_reconstruction_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["dataset", "--config", &cfg, "--out", data.to_str().unwrap()]);
    ok(&[
        "train", "--config", &cfg, "--set", "train.steps=2", "--data", data.to_str().unwrap(), "--out",
        run.to_str().unwrap(),
    ]);
    let ckpt = checkpoint_dir(&run, 2);
    let ds = Dataset::load(&data).unwrap();
    let id = ds.train[0].id.clone();
    let out = dir.path().join("synth");
    ok(&[
        "synth", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--volume", &id, "--angles=-30,0", "--out", out.to_str().unwrap(),
    ]);

    let (synth, _) = Synthesizer::from_checkpoint(&ckpt).unwrap();
    let m = &ds.manifest;
    let s = &ds.train[0];
    for (a, label) in [(-30.0, "m030"), (0.0, "p000")] {
        let pose = pose_from_angles(a, m.poses[0].vert_deg, &m.projection);
        let gt = render_drr(&s.volume, &pose, &m.projection, m.drr_scale);
        let want = synth.synthesize(&normalized_volume(s), &[pose], &gt, Domain::Drr);
        let got = Image::load(&out.join(format!("synth_{label}.f32"))).unwrap();
        assert_eq!(got.data(), want[0].data(), "angle {a}");
    }
    assert!(out.join("grid.pgm").exists());
}
