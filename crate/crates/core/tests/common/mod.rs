#![allow(dead_code)]

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xsynth::config::Config;
use xsynth::dataset::{build_dataset, Dataset};
use xsynth::losses::R1Mode;
use xsynth::model::init_params;
use xsynth::model::perceptual::Perceptual;
use xsynth::nn::Session;
use xsynth::train::{discriminator_pass, generator_pass, plan_batch, Batch, PreparedData};
use xsynth_autograd::{EntryKind, ParamStore, Tensor, Var};

pub fn load(cfg: &Config, dir: &Path) -> PreparedData {
    build_dataset(&cfg.dataset, cfg.seed, dir).expect("dataset builds");
    PreparedData::new(Dataset::load(dir).expect("dataset loads"))
}

/// The two-phantom, 16^3 / 16^2 setup in 64 bits.
pub struct Micro {
    pub cfg: Config,
    pub store: ParamStore<f64>,
    pub perc: Perceptual<f64>,
    pub batch: Batch<f64>,
    pub fake: Tensor<f64>,
    _dir: tempfile::TempDir,
}

impl Micro {
    pub fn new() -> Self {
        let cfg = Config::micro();
        let dir = tempfile::tempdir().unwrap();
        let data = load(&cfg, &dir.path().join("ds"));
        let d = &data.data;
        let plan = plan_batch(cfg.seed, 0, 2, d.train.len(), data.poses.len(), d.style.len());
        let batch = data.batch::<f64>(&plan);
        let store = jitter(init_params(&cfg.model, cfg.seed).unwrap().cast::<f64>(), 0.02);
        let perc = Perceptual::new(cfg.model.extractor_seed);
        let fake = {
            let s = Session::new(&store, &[], true);
            generator_pass(&s, &cfg.model, &cfg.loss, &perc, &batch).fake_x.value().clone()
        };
        Self {
            cfg,
            store,
            perc,
            batch,
            fake,
            _dir: dir,
        }
    }

    pub fn gen_term(&self, s: &Session<'_, f64>, term: &str) -> Var<f64> {
        let g = generator_pass(s, &self.cfg.model, &self.cfg.loss, &self.perc, &self.batch);
        match term {
            "rec" => g.rec.total,
            "cc" => g.cc,
            "sc" => g.sc,
            "zero" => g.zero,
            "adv_g" => g.adv_g,
            "total_g" => g.total,
            other => panic!("unknown term {other}"),
        }
    }

    pub fn dis_term(&self, s: &Session<'_, f64>, term: &str, mode: R1Mode) -> Var<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = discriminator_pass(s, &self.cfg.model, &self.cfg.loss, mode, 4, &self.fake, &self.batch, &mut rng)
            .expect("discriminator pass");
        match term {
            "critic" => d.critic,
            "r1" => d.r1,
            "total_d" => d.total,
            other => panic!("unknown term {other}"),
        }
    }
}

/// Adds small seeded noise to every trainable entry. Zero-initialised biases
/// on all-zero image regions would otherwise put pre-activations exactly on
/// the rectifier's kink, where finite differences see the mean of both slopes.
pub fn jitter(mut store: ParamStore<f64>, std: f64) -> ParamStore<f64> {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let normal = Normal::new(0.0, std).unwrap();
    let names: Vec<String> = store
        .iter()
        .filter(|(_, k, _)| *k == EntryKind::Param)
        .map(|(n, _, _)| n.to_string())
        .collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    store
}

pub const GEN_TERMS: [&str; 6] = ["rec", "cc", "sc", "zero", "adv_g", "total_g"];
