//! Training objectives: reconstruction, consistency, zero and adversarial
//! terms, the R1 penalty and their weighted totals.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use xsynth_autograd::{double_backward_available, grad, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::perceptual::Perceptual;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mae: f64,
    pub lpips: f64,
    pub cc: f64,
    pub sc: f64,
    pub zero: f64,
    pub adv: f64,
    pub r1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mae: 1.0,
            lpips: 1.0,
            cc: 1.0,
            sc: 1.0,
            zero: 1.0,
            adv: 0.1,
            r1: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mae, self.lpips, self.cc, self.sc, self.zero, self.adv, self.r1];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// How the R1 penalty is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R1Mode {
    /// Exact when double backward is available, otherwise the surrogate.
    Auto,
    Exact,
    /// Finite differences along random orthonormal directions.
    Surrogate,
}

impl R1Mode {
    pub fn resolve(self) -> R1Mode {
        match self {
            R1Mode::Auto if double_backward_available() => R1Mode::Exact,
            R1Mode::Auto => R1Mode::Surrogate,
            m => m,
        }
    }
}

/// Step of the finite-difference R1 surrogate.
pub const R1_EPS: f64 = 1e-3;

/// Per-sample L2 norm of `[N,D]` rows, averaged over the batch.
fn mean_row_norm<T: Real>(x: &Var<T>) -> Var<T> {
    x.row_norm().mean_all()
}

/// `lambda_mae * mean|a-b| + lambda_lpips * mean perceptual(a,b)`, with the
/// two unweighted terms.
pub fn rec_loss<T: Real>(fake: &Var<T>, real: &Var<T>, w: &LossWeights, perc: &Perceptual<T>) -> RecTerms<T> {
    assert_eq!(fake.shape(), real.shape(), "rec_loss: shape mismatch");
    let mae = fake.sub(real).abs().mean_all();
    let lpips = perc.distance(fake, real).mean_all();
    let total = mae.scale(w.mae).add(&lpips.scale(w.lpips));
    RecTerms { mae, lpips, total }
}

pub struct RecTerms<T: Real> {
    pub mae: Var<T>,
    pub lpips: Var<T>,
    pub total: Var<T>,
}

/// Content consistency: distance between content codes of the two syntheses.
pub fn content_consistency<T: Real>(c_fake_x: &Var<T>, c_fake_drr: &Var<T>) -> Var<T> {
    mean_row_norm(&c_fake_x.sub(c_fake_drr))
}

/// Style consistency: each branch's code of the reference against its code
/// of the synthesis in the same domain.
pub fn style_consistency<T: Real>(
    sx_ref: &Var<T>,
    sx_fake: &Var<T>,
    sdrr_ref: &Var<T>,
    sdrr_fake: &Var<T>,
) -> Var<T> {
    mean_row_norm(&sx_ref.sub(sx_fake)).add(&mean_row_norm(&sdrr_ref.sub(sdrr_fake)))
}

/// Zero loss: L1 norm of each style branch's code on the other domain's image.
pub fn zero_loss<T: Real>(sx_of_drr: &Var<T>, sdrr_of_x: &Var<T>) -> Var<T> {
    let n = sx_of_drr.shape()[0] as f64;
    sx_of_drr
        .abs()
        .sum_all()
        .add(&sdrr_of_x.abs().sum_all())
        .scale(1.0 / n)
}

/// Generator adversarial term `mean(-D(fake))`.
pub fn adv_gen_loss<T: Real>(fake_scores: &Var<T>) -> Var<T> {
    fake_scores.mean_all().neg()
}

/// Discriminator critic term `mean D(fake) - mean D(real)`, without R1.
pub fn adv_critic<T: Real>(fake_scores: &Var<T>, real_scores: &Var<T>) -> Var<T> {
    fake_scores.mean_all().sub(&real_scores.mean_all())
}

/// Exact R1: `mean_i |grad_x D(x_i)|^2`, differentiable in D's parameters.
/// `x` must be a gradient-tracking leaf and `scores` computed from it.
pub fn r1_exact<T: Real>(x: &Var<T>, scores: &Var<T>) -> Result<Var<T>> {
    let n = x.shape()[0] as f64;
    let g = grad(&scores.sum_all(), &[x], true)?
        .pop()
        .flatten()
        .unwrap_or_else(|| Var::constant(Tensor::zeros(x.shape())));
    Ok(g.square().sum_all().scale(1.0 / n))
}

/// Orthonormal directions `[k, n]` (Gram-Schmidt on Gaussian draws).
pub fn orthonormal_directions(k: usize, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    assert!(k <= n, "cannot draw {k} orthonormal directions in {n} dimensions");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut u: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for b in &out {
            let d: f64 = u.iter().zip(b).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(b).for_each(|(a, b)| *a -= d * b);
        }
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(u.into_iter().map(|v| v / norm).collect());
        }
    }
    out
}

/// Surrogate R1 from forward differences: for each sample, `dirs` orthonormal
/// unit directions `u` give `(n/dirs) * sum_u ((D(x+eps u) - D(x)) / eps)^2`,
/// an unbiased estimate of `|grad D|^2` that is exact for linear `D` when
/// `dirs = n`. Averaged over the batch.
pub fn r1_surrogate<T: Real>(
    d: impl Fn(&Var<T>) -> Var<T>,
    x: &Tensor<T>,
    dirs: usize,
    rng: &mut impl Rng,
) -> Var<T> {
    let shape = x.shape().to_vec();
    let (b, n) = (shape[0], x.len() / shape[0]);
    let k = dirs.clamp(1, n);
    let mut perturbed = Vec::with_capacity(b * k * n);
    let mut base = Vec::with_capacity(b * k * n);
    for i in 0..b {
        let xi = &x.data()[i * n..(i + 1) * n];
        for u in orthonormal_directions(k, n, rng) {
            for (xv, uv) in xi.iter().zip(&u) {
                perturbed.push(*xv + T::c(R1_EPS * uv));
                base.push(*xv);
            }
        }
    }
    let mut big = shape.clone();
    big[0] = b * k;
    let xp = Var::constant(Tensor::new(&big, perturbed).expect("shape"));
    let x0 = Var::constant(Tensor::new(&big, base).expect("shape"));
    let diff = d(&xp).sub(&d(&x0)).scale(1.0 / R1_EPS);
    diff.square().sum_all().scale(n as f64 / (k * b) as f64)
}

/// Unweighted scalar terms of one optimization step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_rec: f64,
    pub l_cc: f64,
    pub l_sc: f64,
    pub l_0: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub r1: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub fn check_finite(&self) -> Result<()> {
        let terms = [
            ("l_rec", self.l_rec),
            ("l_cc", self.l_cc),
            ("l_sc", self.l_sc),
            ("l_0", self.l_0),
            ("l_adv_g", self.l_adv_g),
            ("l_adv_d", self.l_adv_d),
            ("r1", self.r1),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ];
        match terms.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite {
                step: self.step,
                term: name.to_string(),
            }),
            None => Ok(()),
        }
    }
}

/// Generator total: `adv * L_adv_g + L_rec + cc * L_cc + sc * L_sc + zero * L_0`,
/// where `rec` already carries its own weights.
pub fn total_gen<T: Real>(
    w: &LossWeights,
    rec: &Var<T>,
    cc: &Var<T>,
    sc: &Var<T>,
    zero: &Var<T>,
    adv_g: &Var<T>,
) -> Var<T> {
    adv_g
        .scale(w.adv)
        .add(rec)
        .add(&cc.scale(w.cc))
        .add(&sc.scale(w.sc))
        .add(&zero.scale(w.zero))
}

/// Discriminator total: `adv * (critic + r1_weight * R1)`.
pub fn total_dis<T: Real>(w: &LossWeights, critic: &Var<T>, r1: &Var<T>) -> Var<T> {
    critic.add(&r1.scale(w.r1)).scale(w.adv)
}
