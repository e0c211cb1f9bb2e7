mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use xsynth::geometry::{pose_from_angles, ProjectionConfig};
use xsynth::model::discriminator::discriminate;
use xsynth::model::encoders::{content_code, encode_ct_traced, style_code, Domain};
use xsynth::model::generator::{generate, generate_traced};
use xsynth::model::pam::{attend, attention_entropy, mean_row_entropy, modify_content, projection_batch, projection_input};
use xsynth::model::{init_params, pose_batch, volume_batch, ModelConfig};
use xsynth::nn::{adain, Session};
use xsynth::train::{generator_pass, GEN_PREFIXES};
use xsynth::volume::{generate_phantom, PhantomSpec};
use xsynth_autograd::{backward, no_grad, Tensor, Var};

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z as f32
    })
}

fn phantom(size: usize, seed: u64) -> Vec<f32> {
    let spec = PhantomSpec {
        shape: [size; 3],
        spacing_mm: [64.0 / size as f64; 3],
        ..PhantomSpec::default()
    };
    let v = generate_phantom(&spec, seed).unwrap().volume;
    v.normalized(v.max() as f64)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn ct_encoder_halves_three_times_and_emits_content_width() {
    let cfg = ModelConfig {
        volume_size: 64,
        ..ModelConfig::default()
    };
    let store = init_params(&cfg, 0).unwrap();
    let s = Session::inference(&store);
    let _g = no_grad();
    let a = phantom(64, 1);
    let b = phantom(64, 2);
    let mut trace = Vec::new();
    let code = encode_ct_traced(&s, &cfg, &volume_batch(&[&a, &b], 64), &mut trace);
    let extents: Vec<usize> = trace.iter().map(|t| t[2]).collect();
    assert_eq!(extents, vec![64, 32, 16, 8, 8]);
    assert!(trace.iter().all(|t| t[2..] == [t[2]; 3]));
    assert_eq!(code.shape(), &[2, 128]);
    let d = code.value().data();
    let c = cosine(&d[..128], &d[128..]);
    assert!(c < 0.999, "codes of distinct phantoms have cosine {c}");
    assert!(code.value().all_finite());
}

#[test]
fn bad_model_configs_are_refused() {
    let odd = ModelConfig {
        volume_size: 36,
        ..ModelConfig::default()
    };
    assert!(odd.validate().is_err());
    let heads = ModelConfig {
        heads: 5,
        ..ModelConfig::default()
    };
    assert!(heads.validate().unwrap_err().to_string().contains("divisible"));
    assert!("ct".parse::<Domain>().is_err());
    assert_eq!("drr".parse::<Domain>().unwrap(), Domain::Drr);
}

#[test]
fn style_branches_are_bounded_disjoint_and_deterministic() {
    let cfg = ModelConfig::default();
    let store = init_params(&cfg, 4).unwrap();
    let s = Session::inference(&store);
    let _g = no_grad();
    let img = Var::constant(randn(&[3, 1, 32, 32], 1).map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0)));
    let x = style_code(&s, Domain::Xray, &img);
    let d = style_code(&s, Domain::Drr, &img);
    assert_eq!(x.shape(), &[3, cfg.style_dim]);
    assert!(x.value().data().iter().chain(d.value().data()).all(|v| (-1.0..=1.0).contains(v)));
    assert_ne!(x.value(), d.value());

    let names = |p: &str| -> Vec<String> { store.names_with_prefix(p).map(|n| n.to_string()).collect() };
    let (nx, nd) = (names("e_sty.s_x."), names("e_sty.s_drr."));
    assert!(nx.iter().all(|n| !nd.contains(n)));
    let convs = |v: &[String]| v.iter().filter(|n| n.ends_with(".w")).count();
    assert_eq!((convs(&nx), convs(&nd)), (7, 7));

    let zero = Var::constant(Tensor::zeros(&[1, 1, 32, 32]));
    let z1 = style_code(&s, Domain::Xray, &zero);
    let z2 = style_code(&s, Domain::Xray, &zero);
    assert_eq!(z1.value(), z2.value());
}

#[test]
fn content_branch_width_and_determinism() {
    let cfg = ModelConfig::default();
    let store = init_params(&cfg, 4).unwrap();
    let s = Session::inference(&store);
    let img = Var::constant(randn(&[2, 1, 32, 32], 2).map(|v| v.abs().min(1.0)));
    let a = content_code(&s, &cfg, &img);
    let b = content_code(&s, &cfg, &img);
    assert_eq!(a.shape(), &[2, cfg.content_dim]);
    assert_eq!(a.value(), b.value());
}

#[test]
fn identical_queries_give_the_weighted_value_mean() {
    // Two heads of width one; both query rows equal 1, keys 0 and ln 3 at
    // temperature 1 give weights 1/4 and 3/4 over values 2 and 6.
    let q = Var::constant(Tensor::new(&[1, 2], vec![1.0f64, 1.0]).unwrap());
    let k = Var::constant(Tensor::new(&[1, 2], vec![0.0, 3f64.ln()]).unwrap());
    let v = Var::constant(Tensor::new(&[1, 2], vec![2.0, 6.0]).unwrap());
    let (out, attn) = attend(&q, &k, &v, 2, 1.0);
    for &o in out.value().data() {
        assert!((o - 5.0).abs() < 1e-12);
    }
    assert!((attn.value().data()[1] - 0.75).abs() < 1e-12);
}

#[test]
fn entropy_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut r = |n| Tensor::from_fn(&[1, n], |_| StandardNormal.sample(&mut rng));
    let (q, k) = (Var::<f64>::constant(r(32)), Var::constant(r(32)));
    let (_, a) = attend(&q, &k, &k, 8, 1e9);
    assert!((mean_row_entropy(a.value()) - 8f64.ln()).abs() < 1e-6);
    let (_, a) = attend(&q, &k, &k, 1, 1.0);
    assert_eq!(mean_row_entropy(a.value()), 0.0);
}

#[test]
fn entropy_grows_with_temperature_over_seeds() {
    let cfg = ModelConfig::default();
    let pc = ProjectionConfig::fitted(64.0, 32);
    for seed in 0..20 {
        let store = init_params(&cfg, seed).unwrap();
        let s = Session::inference(&store);
        let fc = Var::constant(randn(&[1, cfg.content_dim], seed));
        let pose = pose_from_angles(30.0, 0.0, &pc);
        let proj = Var::constant(randn(&[1, 32 * 32], seed + 100));
        let p = pose_batch(&[&pose]);
        let e1 = attention_entropy(&s, &cfg, &fc, &p, &proj, 1.0);
        let e10 = attention_entropy(&s, &cfg, &fc, &p, &proj, 10.0);
        assert!(e10 >= e1 - 1e-12, "seed {seed}: {e10} < {e1}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_stochastic(seed in any::<u64>(), scale in 0.01f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = || Var::<f64>::constant(Tensor::from_fn(&[3, 128], |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        }));
        let (q, k, v) = (r(), r(), r());
        let (out, attn) = attend(&q, &k, &v, 8, 4.0);
        for row in attn.value().data().chunks(8) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!(out.value().all_finite());
        prop_assert_eq!(out.shape(), &[3, 128]);
    }

    #[test]
    fn adain_sets_statistics(seed in any::<u64>(), s0 in -3.0f64..3.0, b0 in -2.0f64..2.0) {
        let x = Var::constant(randn(&[1, 1, 64, 64], seed).map(|v| v * 3.0 + 1.0).cast::<f64>());
        let s = Var::constant(Tensor::new(&[1, 1], vec![s0]).unwrap());
        let b = Var::constant(Tensor::new(&[1, 1], vec![b0]).unwrap());
        let (m, sd) = adain(&x, &s, &b).channel_mean_std(0.0);
        prop_assert!((m.item() - b0).abs() < 1e-3);
        prop_assert!((sd.item() - s0.abs()).abs() < 1e-3);
    }
}

#[test]
fn pose_changes_the_modified_content() {
    let cfg = ModelConfig::default();
    let store = init_params(&cfg, 1).unwrap();
    let pc = ProjectionConfig::fitted(64.0, 32);
    let s = Session::new(&store, &[], false);
    let fc = Var::constant(randn(&[1, cfg.content_dim], 3));
    let v = xsynth::volume::Volume::new([32; 3], [2.0; 3], phantom(32, 7)).unwrap();
    let pose = pose_from_angles(0.0, 0.0, &pc);
    let proj = projection_batch(&[&projection_input(&v, &pose)]);
    let p = Var::leaf(pose_batch::<f32>(&[&pose]).value().clone(), true);
    let out = modify_content(&s, &cfg, &fc, &p, &proj);
    assert_eq!(out.shape(), &[1, 128]);
    let probe = Var::constant(randn(&[1, 128], 9));
    let g = backward(&out.mul(&probe).sum_all());
    assert!(g.get(&p).unwrap().max_abs() > 0.0, "no gradient reaches the pose");

    let other = pose_from_angles(1.0, 0.0, &pc);
    let out2 = modify_content(&s, &cfg, &fc, &pose_batch(&[&other]), &proj);
    assert_ne!(out.value(), out2.value());
}

#[test]
fn generator_configurations_reach_their_resolutions() {
    let full = ModelConfig {
        gen_max_channels: 8,
        gen_min_channels: 4,
        ..ModelConfig::full_scale()
    };
    assert_eq!((full.synthesis_layers, full.content_layers(), full.resolution()), (14, 8, 256));
    let desk10 = ModelConfig {
        synthesis_layers: 10,
        ..ModelConfig::default()
    };
    assert_eq!((desk10.content_layers(), desk10.resolution()), (6, 64));
    for cfg in [full, desk10] {
        let store = init_params(&cfg, 0).unwrap();
        let s = Session::inference(&store);
        let _g = no_grad();
        let out = generate(
            &s,
            &cfg,
            &Var::constant(randn(&[1, cfg.content_dim], 1)),
            &Var::constant(randn(&[1, cfg.style_dim], 2).map(f32::tanh)),
        );
        let r = cfg.resolution();
        assert_eq!(out.shape(), &[1, 1, r, r]);
    }
}

#[test]
fn generator_is_deterministic_bounded_and_style_free_in_content_layers() {
    let cfg = ModelConfig::micro();
    let store = init_params(&cfg, 2).unwrap();
    let s = Session::inference(&store);
    let _g = no_grad();
    for trial in 0..10u64 {
        let c = Var::constant(randn(&[100, cfg.content_dim], trial).map(|v| v * 3.0));
        let st = Var::constant(randn(&[100, cfg.style_dim], trial + 50).map(f32::tanh));
        let a = generate(&s, &cfg, &c, &st);
        assert!(a.value().data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        if trial == 0 {
            assert_eq!(a.value(), generate(&s, &cfg, &c, &st).value());
        }
    }
    let c = Var::constant(randn(&[2, cfg.content_dim], 1));
    let (mut t1, mut t2) = (Vec::new(), Vec::new());
    generate_traced(&s, &cfg, &c, &Var::constant(randn(&[2, cfg.style_dim], 2).map(f32::tanh)), &mut t1);
    generate_traced(&s, &cfg, &c, &Var::constant(randn(&[2, cfg.style_dim], 3).map(f32::tanh)), &mut t2);
    let kc = cfg.content_layers();
    for i in 0..kc {
        assert_eq!(t1[i].value(), t2[i].value(), "content layer {i} saw the style code");
    }
    assert_ne!(t1[kc].value(), t2[kc].value());
}

#[test]
fn discriminator_scores_one_per_image_and_responds_to_pixels() {
    let cfg = ModelConfig::default();
    let store = init_params(&cfg, 3).unwrap().cast::<f64>();
    let s = Session::inference(&store);
    let pc = ProjectionConfig::fitted(64.0, 32);
    let poses = [pose_from_angles(-30.0, 0.0, &pc), pose_from_angles(60.0, 0.0, &pc)];
    let p = pose_batch(&[&poses[0], &poses[1]]);
    let img = randn(&[2, 1, 32, 32], 4).map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0)).cast::<f64>();
    let score = |t: &Tensor<f64>| discriminate(&s, &cfg, &Var::constant(t.clone()), &p);
    let a = score(&img);
    assert_eq!(a.shape(), &[2, 1]);
    assert_eq!(a.value(), score(&img).value());
    for px in [5usize, 300, 1000] {
        let mut up = img.clone();
        up.data_mut()[px] += 1e-4;
        let mut down = img.clone();
        down.data_mut()[px] -= 1e-4;
        let fd = (score(&up).value().data()[0] - score(&down).value().data()[0]) / 2e-4;
        assert!(fd.abs() > 1e-9, "pixel {px}: zero finite-difference gradient");
    }
}

#[test]
fn generator_losses_reach_every_encoder_branch() {
    let m = common::Micro::new();
    let s = Session::new(&m.store, &GEN_PREFIXES, true);
    let g = generator_pass(&s, &m.cfg.model, &m.cfg.loss, &m.perc, &m.batch);
    let grads = s.grads(&backward(&g.total));
    for prefix in ["e_ct.", "e_sty.s_x.", "e_sty.s_drr.", "e_sty.c.", "pam.pose.", "pam.proj.", "g."] {
        let total: f64 = grads
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.max_abs())
            .fold(0.0, f64::max);
        assert!(total > 0.0, "no gradient reaches {prefix}");
    }
    assert!(grads.keys().all(|k| !k.starts_with("d.")));
}
