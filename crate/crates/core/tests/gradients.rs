mod common;

use std::time::Instant;

use common::{Micro, GEN_TERMS};
use xsynth::gradcheck::check_param_grads;
use xsynth::losses::R1Mode;
use xsynth::train::{DIS_PREFIX, GEN_PREFIXES};

const TOL: f64 = 1e-4;

#[test]
fn every_loss_term_matches_finite_differences() {
    let m = Micro::new();
    let t = Instant::now();
    for term in GEN_TERMS {
        let r = check_param_grads(&m.store, &GEN_PREFIXES, 2, 1, 1e-6, 1e-4, |s| m.gen_term(s, term));
        println!("{term}: max rel err {:.2e} at {} over {} probes", r.max_rel_err, r.worst, r.probes);
        assert!(r.max_rel_err < TOL, "{term}: {r:?}");
    }
    for (term, mode) in [
        ("critic", R1Mode::Exact),
        ("r1", R1Mode::Exact),
        ("r1", R1Mode::Surrogate),
        ("total_d", R1Mode::Exact),
    ] {
        // The surrogate already divides a difference of scores by its own
        // step, so a smaller probe step only amplifies rounding.
        let eps = if mode == R1Mode::Surrogate { 1e-5 } else { 1e-6 };
        let r = check_param_grads(&m.store, &[DIS_PREFIX], 3, 2, eps, 1e-4, |s| m.dis_term(s, term, mode));
        println!("{term} ({mode:?}): max rel err {:.2e} at {} over {} probes", r.max_rel_err, r.worst, r.probes);
        assert!(r.max_rel_err < TOL, "{term}: {r:?}");
    }
    println!("elapsed {:?}", t.elapsed());
}
