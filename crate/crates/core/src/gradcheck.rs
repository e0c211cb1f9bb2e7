//! Finite-difference verification of parameter gradients of whole losses.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xsynth_autograd::{backward, relative_error, ParamStore, Var};

use crate::nn::Session;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub probes: usize,
}

/// Compares reverse-mode gradients of `f` with central differences at
/// `per_tensor` random coordinates of every tracked parameter it touches.
///
/// Relative errors use `floor` times the largest probed gradient magnitude
/// as the denominator floor.
pub fn check_param_grads(
    store: &ParamStore<f64>,
    trainable: &[&str],
    per_tensor: usize,
    seed: u64,
    eps: f64,
    floor: f64,
    f: impl Fn(&Session<'_, f64>) -> Var<f64>,
) -> ParamCheck {
    let analytic: BTreeMap<String, Vec<f64>> = {
        let s = Session::new(store, trainable, true);
        let loss = f(&s);
        s.grads(&backward(&loss))
            .into_iter()
            .map(|(k, t)| (k, t.into_data()))
            .collect()
    };
    let eval = |st: &ParamStore<f64>| -> f64 {
        let s = Session::new(st, trainable, true);
        f(&s).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    for (name, g) in &analytic {
        for _ in 0..per_tensor.min(g.len()) {
            let i = rng.random_range(0..g.len());
            let mut st = store.clone();
            let base = st.get(name).expect("param").data()[i];
            st.get_mut(name).expect("param").data_mut()[i] = base + eps;
            let up = eval(&st);
            st.get_mut(name).expect("param").data_mut()[i] = base - eps;
            let down = eval(&st);
            probes.push((format!("{name}[{i}]"), g[i], (up - down) / (2.0 * eps)));
        }
    }
    let scale = probes.iter().fold(0.0f64, |m, p| m.max(p.1.abs()).max(p.2.abs()));
    let mut out = ParamCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        probes: probes.len(),
    };
    for (name, a, n) in probes {
        let e = relative_error(a, n, floor * scale);
        if e >= out.max_rel_err {
            out.max_rel_err = e;
            out.worst = name;
        }
    }
    out
}
