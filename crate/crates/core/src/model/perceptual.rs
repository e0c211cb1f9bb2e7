//! Frozen random-weight convolution pyramid used as the perceptual distance
//! and as the feature extractor for distributional metrics.

use xsynth_autograd::{ParamStore, Real, Tensor, Var};

use crate::nn::{leaky, Init};

pub const STAGE_CHANNELS: [usize; 4] = [8, 16, 32, 32];

/// The fixed extractor; weights depend only on the seed.
#[derive(Clone, Debug)]
pub struct Perceptual<T: Real> {
    seed: u64,
    weights: Vec<(Var<T>, Var<T>)>,
}

impl<T: Real> Perceptual<T> {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new(seed);
        let mut init = Init { store: &mut store };
        let mut cin = 1;
        for (i, &c) in STAGE_CHANNELS.iter().enumerate() {
            init.conv2d(&format!("stage{i}"), cin, c, 3, false);
            init.normal(&format!("stage{i}.b"), &[1, c, 1, 1], 0.1);
            cin = c;
        }
        let store = store.cast::<T>();
        let get = |n: String| Var::constant(store.get(&n).expect("extractor weight").clone());
        let weights = (0..STAGE_CHANNELS.len())
            .map(|i| (get(format!("stage{i}.w")), get(format!("stage{i}.b"))))
            .collect();
        Self { seed, weights }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Activations of every stage for images `[N,1,H,W]` in `[0,1]`.
    pub fn stages(&self, img: &Var<T>) -> Vec<Var<T>> {
        let mut x = img.scale(2.0).add_scalar(-1.0);
        let mut out = Vec::with_capacity(self.weights.len());
        for (i, (w, b)) in self.weights.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let y = x.conv2d(w, stride, 1);
            let shape = y.shape().to_vec();
            x = leaky(&y.add(&b.broadcast_to(&shape)));
            out.push(x.clone());
        }
        out
    }

    /// Per-sample distance `[N]` between two image batches of equal shape.
    pub fn distance(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.shape(), b.shape(), "perceptual distance: shape mismatch");
        let n = a.shape()[0];
        let mut total: Option<Var<T>> = None;
        for (fa, fb) in self.stages(a).iter().zip(self.stages(b)) {
            let d = unit_channels(fa).sub(&unit_channels(&fb)).square();
            let s = d.shape().to_vec();
            let per = d.sum_to(&[n, 1, 1, 1]).scale(1.0 / (s[2] * s[3]) as f64);
            total = Some(match total {
                Some(t) => t.add(&per),
                None => per,
            });
        }
        total.expect("at least one stage").reshape(&[n])
    }

    /// Pooled final-stage features `[N,C]` for FID and KID.
    pub fn features(&self, img: &Var<T>) -> Tensor<T> {
        let last = self.stages(img).pop().expect("stages");
        let n = last.shape()[0];
        let pooled = last.adaptive_avg_pool2d(1, 1);
        pooled.value().reshape(&[n, pooled.len() / n]).expect("feature shape")
    }
}

/// Scales each pixel's channel vector to unit length.
fn unit_channels<T: Real>(x: &Var<T>) -> Var<T> {
    let s = x.shape().to_vec();
    let norm = x.square().sum_to(&[s[0], 1, s[2], s[3]]).add_scalar(1e-10).sqrt();
    x.div(&norm.broadcast_to(&s))
}
