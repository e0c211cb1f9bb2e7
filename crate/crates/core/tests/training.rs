mod common;

use xsynth::config::Config;
use xsynth::dataset::Dataset;
use xsynth::geometry::render_drr;
use xsynth::model::init_params;
use xsynth::nn::Session;
use xsynth::train::{
    checkpoint_dir, discriminator_pass, generator_pass, latest_checkpoint, load_checkpoint, read_log, Trainer,
    DIS_PREFIX, GEN_PREFIXES,
};
use xsynth_autograd::backward;

fn setup(steps: u64) -> (Config, Dataset, tempfile::TempDir) {
    let mut cfg = Config::micro();
    cfg.train.steps = steps;
    cfg.train.checkpoint_every = 2;
    cfg.train.preview_every = 3;
    let dir = tempfile::tempdir().unwrap();
    let data = common::load(&cfg, &dir.path().join("ds")).data;
    (cfg, data, dir)
}

fn log_lines(path: &std::path::Path) -> Vec<String> {
    read_log(path)
        .unwrap()
        .iter()
        .map(|r| serde_json::to_string(r).unwrap())
        .collect()
}

#[test]
fn initialization_is_a_function_of_the_seed() {
    let cfg = Config::micro();
    let a = init_params(&cfg.model, 9).unwrap();
    let b = init_params(&cfg.model, 9).unwrap();
    let c = init_params(&cfg.model, 10).unwrap();
    assert_eq!(a.fingerprint(""), b.fingerprint(""));
    assert_ne!(a.fingerprint(""), c.fingerprint(""));
}

#[test]
fn reruns_are_bit_identical() {
    let (cfg, data, dir) = setup(10);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    Trainer::new(cfg.clone(), data.clone()).unwrap().run(&a).unwrap();
    Trainer::new(cfg, data).unwrap().run(&b).unwrap();
    assert_eq!(log_lines(&a.join("train_log.jsonl")), log_lines(&b.join("train_log.jsonl")));
    let (sa, _) = load_checkpoint(&checkpoint_dir(&a, 10)).unwrap();
    let (sb, _) = load_checkpoint(&checkpoint_dir(&b, 10)).unwrap();
    assert_eq!(sa.fingerprint(""), sb.fingerprint(""));
}

#[test]
fn run_writes_checkpoints_previews_and_log_at_cadence() {
    let (cfg, data, dir) = setup(7);
    let out = dir.path().join("run");
    let hist = Trainer::new(cfg, data).unwrap().run(&out).unwrap();
    assert_eq!(hist.len(), 7);
    for s in [0, 2, 4, 6, 7] {
        assert!(checkpoint_dir(&out, s).join("manifest.json").exists(), "step {s}");
    }
    assert!(!checkpoint_dir(&out, 3).exists());
    for s in [3, 6, 7] {
        assert!(out.join("previews").join(format!("step-{s:06}.pgm")).exists(), "preview {s}");
    }
    let steps: Vec<u64> = read_log(&out.join("train_log.jsonl")).unwrap().iter().map(|r| r.step).collect();
    assert_eq!(steps, (0..7).collect::<Vec<_>>());
    assert_eq!(latest_checkpoint(&out).unwrap(), checkpoint_dir(&out, 7));
}

#[test]
fn resume_continues_the_uninterrupted_trajectory() {
    let (cfg, data, dir) = setup(6);
    let full = dir.path().join("full");
    Trainer::new(cfg.clone(), data.clone()).unwrap().run(&full).unwrap();

    let part = dir.path().join("part");
    let mut short = cfg.clone();
    short.train.steps = 3;
    Trainer::new(short, data.clone()).unwrap().run(&part).unwrap();
    // Drop the final checkpoint so the resume starts from step 2 and must
    // rewrite the log line of step 2.
    std::fs::remove_dir_all(checkpoint_dir(&part, 3)).unwrap();
    Trainer::new(cfg, data).unwrap().run(&part).unwrap();

    assert_eq!(log_lines(&full.join("train_log.jsonl")), log_lines(&part.join("train_log.jsonl")));
    let (a, _) = load_checkpoint(&checkpoint_dir(&full, 6)).unwrap();
    let (b, _) = load_checkpoint(&checkpoint_dir(&part, 6)).unwrap();
    assert_eq!(a.fingerprint(""), b.fingerprint(""));
}

#[test]
fn resume_refuses_a_different_training_config() {
    let (cfg, data, dir) = setup(2);
    let out = dir.path().join("run");
    Trainer::new(cfg.clone(), data.clone()).unwrap().run(&out).unwrap();
    let mut other = cfg.clone();
    other.loss.cc = 0.5;
    let err = Trainer::new(other, data.clone()).unwrap().restore(&checkpoint_dir(&out, 2));
    assert!(err.is_err());
    // Run length and cadences are not part of the hash.
    let mut longer = cfg;
    longer.train.steps = 4;
    longer.train.checkpoint_every = 1;
    Trainer::new(longer, data).unwrap().restore(&checkpoint_dir(&out, 2)).unwrap();
}

#[test]
fn each_update_touches_only_its_own_parameters() {
    let (cfg, data, _dir) = setup(1);
    let mut tr = Trainer::new(cfg.clone(), data).unwrap();
    let batch = tr.prepared.batch::<f32>(&tr.plan(0));
    let opt = cfg.train.optimizer.clone();

    let before_d = tr.store.fingerprint(DIS_PREFIX);
    let (g_grads, fake) = {
        let s = Session::new(&tr.store, &GEN_PREFIXES, true);
        let g = generator_pass(&s, &cfg.model, &cfg.loss, &tr.perc, &batch);
        (s.grads(&backward(&g.total)), g.fake_x.value().clone())
    };
    assert!(g_grads.keys().all(|k| !k.starts_with(DIS_PREFIX)));
    opt.step(&mut tr.store, &g_grads, 1).unwrap();
    assert_eq!(tr.store.fingerprint(DIS_PREFIX), before_d);

    let before_g: Vec<u64> = GEN_PREFIXES.iter().map(|p| tr.store.fingerprint(p)).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let d_grads = {
        let s = Session::new(&tr.store, &[DIS_PREFIX], true);
        let d = discriminator_pass(&s, &cfg.model, &cfg.loss, cfg.train.r1_mode, 4, &fake, &batch, &mut rng).unwrap();
        s.grads(&backward(&d.total))
    };
    assert!(!d_grads.is_empty() && d_grads.keys().all(|k| k.starts_with(DIS_PREFIX)));
    opt.step(&mut tr.store, &d_grads, 1).unwrap();
    let after_g: Vec<u64> = GEN_PREFIXES.iter().map(|p| tr.store.fingerprint(p)).collect();
    assert_eq!(before_g, after_g);
}

#[test]
fn batch_drrs_are_the_renderer_output_for_their_volume_and_pose() {
    let (cfg, data, _dir) = setup(1);
    let tr = Trainer::new(cfg, data).unwrap();
    let m = &tr.prepared.data.manifest;
    for step in 0..3 {
        let plan = tr.plan(step);
        let batch = tr.prepared.batch::<f32>(&plan);
        let side = m.projection.det_px;
        for (i, (&v, &p)) in plan.volumes.iter().zip(&plan.poses).enumerate() {
            let pose = &tr.prepared.poses[p];
            let want = render_drr(&tr.prepared.data.train[v].volume, pose, &m.projection, m.drr_scale);
            let got = &batch.drr.value().data()[i * side * side..(i + 1) * side * side];
            assert_eq!(got, want.data(), "step {step} sample {i}");
        }
    }
}
