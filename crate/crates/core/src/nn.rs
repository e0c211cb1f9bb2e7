//! Parameter binding and the layer building blocks shared by every network.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use xsynth_autograd::{ConvSpec, EntryKind, Gradients, ParamStore, Real, Tensor, Var};

use crate::dataset::derive_seed;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.9;
const BN_EPS: f64 = 1e-5;

/// FNV-1a of a parameter name, so initial values do not depend on the order
/// parameters are created in.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Collects freshly initialised entries for one store.
pub struct Init<'a> {
    pub store: &'a mut ParamStore<f32>,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.store.seed(), name_hash(name), 0));
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * std) as f32
        });
        self.insert(name, EntryKind::Param, t);
    }

    fn insert(&mut self, name: &str, kind: EntryKind, t: Tensor<f32>) {
        self.store
            .insert(name, kind, t)
            .unwrap_or_else(|e| panic!("building parameters: {e}"));
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f32) {
        self.insert(name, EntryKind::Param, Tensor::full(shape, v));
    }

    /// He initialisation for a leaky-rectifier network.
    fn he(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) {
        let std = gain * (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) / fan_in as f64).sqrt();
        self.normal(name, shape, std);
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.he(&format!("{name}.w"), &[fan_in, fan_out], fan_in, 1.0);
        if bias {
            self.constant(&format!("{name}.b"), &[1, fan_out], 0.0);
        }
    }

    /// Linear map initialised with a custom gain and a constant bias.
    pub fn linear_with(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64, bias: f32) {
        self.he(&format!("{name}.w"), &[fan_in, fan_out], fan_in, gain);
        self.constant(&format!("{name}.b"), &[1, fan_out], bias);
    }

    pub fn conv2d(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        self.he(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, 1.0);
        if bias {
            self.constant(&format!("{name}.b"), &[1, cout, 1, 1], 0.0);
        }
    }

    pub fn conv3d(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.he(&format!("{name}.w"), &[cout, cin, k, k, k], cin * k * k * k, 1.0);
    }

    pub fn batch_norm(&mut self, name: &str, c: usize, rank: usize) {
        let mut shape = vec![1; rank];
        shape[1] = c;
        self.constant(&format!("{name}.gamma"), &shape, 1.0);
        self.constant(&format!("{name}.beta"), &shape, 0.0);
        self.insert(&format!("{name}.running_mean"), EntryKind::Buffer, Tensor::zeros(&shape));
        self.insert(&format!("{name}.running_var"), EntryKind::Buffer, Tensor::ones(&shape));
    }
}

/// Binds store entries to graph leaves for one forward/backward pass.
///
/// Entries whose name starts with one of the `trainable` prefixes become
/// gradient-tracking leaves; everything else enters as a constant.
pub struct Session<'s, T: Real> {
    store: &'s ParamStore<T>,
    trainable: Vec<String>,
    training: bool,
    vars: RefCell<BTreeMap<String, Var<T>>>,
    buffer_updates: RefCell<Vec<(String, Tensor<T>)>>,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>, trainable: &[&str], training: bool) -> Self {
        Self {
            store,
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            training,
            vars: RefCell::new(BTreeMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// Inference: batch norm uses running statistics, nothing is tracked.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::new(store, &[], false)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn param(&self, name: &str) -> Var<T> {
        if let Some(v) = self.vars.borrow().get(name) {
            return v.clone();
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let track = self.store.kind(name) == Some(EntryKind::Param)
            && self.trainable.iter().any(|p| name.starts_with(p.as_str()));
        let v = Var::leaf(t, track);
        self.vars.borrow_mut().insert(name.to_string(), v.clone());
        v
    }

    /// Gradients of every tracked leaf touched in this session.
    pub fn grads(&self, g: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), g.get_or_zeros(v)))
            .collect()
    }

    /// Tracked leaves by name.
    pub fn tracked(&self) -> Vec<(String, Var<T>)> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// New running statistics recorded by batch norm in training mode.
    pub fn take_buffer_updates(&self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    pub fn linear(&self, name: &str, x: &Var<T>) -> Var<T> {
        let w = self.param(&format!("{name}.w"));
        let y = x.matmul(&w);
        let bname = format!("{name}.b");
        if self.store.contains(&bname) {
            let shape = y.shape().to_vec();
            y.add(&self.param(&bname).broadcast_to(&shape))
        } else {
            y
        }
    }

    pub fn conv2d(&self, name: &str, x: &Var<T>, stride: usize, pad: usize) -> Var<T> {
        let y = x.conv2d(&self.param(&format!("{name}.w")), stride, pad);
        self.bias(name, y)
    }

    pub fn conv3d(&self, name: &str, x: &Var<T>, stride: usize, pad: usize) -> Var<T> {
        let y = x.conv3d(&self.param(&format!("{name}.w")), ConvSpec::new3(stride, pad));
        self.bias(name, y)
    }

    fn bias(&self, name: &str, y: Var<T>) -> Var<T> {
        let bname = format!("{name}.b");
        if self.store.contains(&bname) {
            let shape = y.shape().to_vec();
            y.add(&self.param(&bname).broadcast_to(&shape))
        } else {
            y
        }
    }

    /// Batch normalisation over every axis except the channel axis 1.
    pub fn batch_norm(&self, name: &str, x: &Var<T>) -> Var<T> {
        let shape = x.shape().to_vec();
        let mut keep = vec![1; shape.len()];
        keep[1] = shape[1];
        let count = (x.len() / shape[1]) as f64;
        let (mean, var) = if self.training {
            let mean = x.sum_to(&keep).scale(1.0 / count);
            let centred = x.sub(&mean.broadcast_to(&shape));
            let var = centred.square().sum_to(&keep).scale(1.0 / count);
            let m = T::c(BN_MOMENTUM);
            let one_m = T::one() - m;
            let rm = self.store.get(&format!("{name}.running_mean")).expect("bn buffer");
            let rv = self.store.get(&format!("{name}.running_var")).expect("bn buffer");
            let new_m = rm.zip_map(mean.value(), |r, b| m * r + one_m * b);
            let new_v = rv.zip_map(var.value(), |r, b| m * r + one_m * b);
            let mut up = self.buffer_updates.borrow_mut();
            up.push((format!("{name}.running_mean"), new_m));
            up.push((format!("{name}.running_var"), new_v));
            (mean, var)
        } else {
            (
                self.param(&format!("{name}.running_mean")),
                self.param(&format!("{name}.running_var")),
            )
        };
        let inv = var.add_scalar(BN_EPS).sqrt();
        let xhat = x.sub(&mean.broadcast_to(&shape)).div(&inv.broadcast_to(&shape));
        let gamma = self.param(&format!("{name}.gamma")).broadcast_to(&shape);
        let beta = self.param(&format!("{name}.beta")).broadcast_to(&shape);
        xhat.mul(&gamma).add(&beta)
    }
}

pub fn leaky<T: Real>(x: &Var<T>) -> Var<T> {
    x.leaky_relu(LEAKY_SLOPE)
}

/// Adaptive instance normalisation: each channel of `x: [N,C,H,W]` is
/// standardised over space, then scaled and shifted per sample.
pub fn adain<T: Real>(x: &Var<T>, scale: &Var<T>, shift: &Var<T>) -> Var<T> {
    let shape = x.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let (mean, std) = x.channel_mean_std(1e-8);
    let xhat = x.sub(&mean.broadcast_to(&shape)).div(&std.broadcast_to(&shape));
    let s = scale.reshape(&[n, c, 1, 1]).broadcast_to(&shape);
    let b = shift.reshape(&[n, c, 1, 1]).broadcast_to(&shape);
    xhat.mul(&s).add(&b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(3);
        let mut b = ParamStore::new(3);
        {
            let mut i = Init { store: &mut a };
            i.linear("x", 4, 2, true);
            i.conv2d("y", 1, 2, 3, false);
        }
        {
            let mut i = Init { store: &mut b };
            i.conv2d("y", 1, 2, 3, false);
            i.linear("x", 4, 2, true);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn batch_norm_train_and_running_update() {
        let mut store = ParamStore::new(0);
        Init { store: &mut store }.batch_norm("bn", 2, 4);
        let s = Session::new(&store, &["bn"], true);
        let x = Var::constant(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f32));
        let y = s.batch_norm("bn", &x);
        // Channel 0 holds 0,1,2,3,8,9,10,11: mean 5.5.
        let ch0: Vec<f32> = [0, 1, 2, 3, 8, 9, 10, 11].iter().map(|&i| y.value().data()[i]).collect();
        let mean: f32 = ch0.iter().sum::<f32>() / 8.0;
        let var: f32 = ch0.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 8.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-4);
        let up = s.take_buffer_updates();
        assert_eq!(up[0].0, "bn.running_mean");
        assert!((up[0].1.data()[0] - 0.55).abs() < 1e-6);
    }

    #[test]
    fn adain_sets_channel_statistics() {
        let x = Var::constant(Tensor::from_fn(&[1, 2, 32, 32], |i| (i as f64 * 0.37).sin() * 3.0 + 1.0));
        let s = Var::constant(Tensor::new(&[1, 2], vec![-1.5, 0.7]).unwrap());
        let b = Var::constant(Tensor::new(&[1, 2], vec![0.25, -2.0]).unwrap());
        let y = adain(&x, &s, &b);
        let (m, sd) = y.channel_mean_std(0.0);
        for (c, (eb, es)) in [(0.25, 1.5), (-2.0, 0.7)].iter().enumerate() {
            assert!((m.value().data()[c] - eb).abs() < 1e-3);
            assert!((sd.value().data()[c] - es).abs() < 1e-3);
        }
    }
}
