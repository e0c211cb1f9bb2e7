//! Pose attention: reweights the CT content code with attention over the
//! projection of the volume seen from the target pose.

use xsynth_autograd::{Real, Tensor, Var};

use super::{ModelConfig, POSE_DIM};
use crate::geometry::{max_intensity_projection, rotate_volume, CameraPose};
use crate::nn::{leaky, Init, Session};
use crate::volume::Volume;

pub(crate) fn init(init: &mut Init<'_>, cfg: &ModelConfig) {
    let (dc, dp) = (cfg.content_dim, cfg.pose_dim);
    let mip = cfg.volume_size * cfg.volume_size;
    init.linear("pam.pose.l0", POSE_DIM, dp, true);
    init.linear("pam.pose.l1", dp, dp, true);
    init.linear("pam.merge.l0", dc + dp, dc, true);
    init.linear("pam.merge.l1", dc, dc, true);
    init.linear("pam.proj.l0", mip, dc, true);
    init.linear("pam.proj.l1", dc, dc, true);
}

/// Maximum intensity projection of `v` rotated into the pose's frame,
/// standardized to zero mean and unit variance.
pub fn projection_input(v: &Volume, pose: &CameraPose) -> Vec<f32> {
    let mip = max_intensity_projection(&rotate_volume(v, pose));
    let n = mip.data().len() as f64;
    let mean = mip.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = mip.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-8).sqrt();
    mip.data().iter().map(|&x| ((x as f64 - mean) * inv) as f32).collect()
}

/// Stacks projection inputs into `[N, S*S]`.
pub fn projection_batch<T: Real>(rows: &[&[f32]]) -> Var<T> {
    let len = rows[0].len();
    let data = rows
        .iter()
        .flat_map(|r| {
            assert_eq!(r.len(), len, "projection batch: mixed sizes");
            r.iter().map(|&x| T::c(x as f64))
        })
        .collect();
    Var::constant(Tensor::new(&[rows.len(), len], data).expect("projection shape"))
}

fn mlp<T: Real>(s: &Session<'_, T>, name: &str, x: &Var<T>) -> Var<T> {
    let h = leaky(&s.linear(&format!("{name}.l0"), x));
    s.linear(&format!("{name}.l1"), &h)
}

/// Multi-head attention over code segments: `q,k,v` are `[N,d]`, viewed as
/// `heads` rows of width `d/heads`. Returns the output `[N,d]` and the
/// attention map `[N,heads,heads]`.
pub fn attend<T: Real>(q: &Var<T>, k: &Var<T>, v: &Var<T>, heads: usize, tau: f64) -> (Var<T>, Var<T>) {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    assert_eq!(d % heads, 0, "attention: width {d} not divisible by {heads} heads");
    let w = d / heads;
    let q = q.reshape(&[n, heads, w]);
    let k = k.reshape(&[n, heads, w]);
    let v = v.reshape(&[n, heads, w]);
    let attn = q.matmul(&k.transpose()).scale(1.0 / tau).softmax();
    (attn.matmul(&v).reshape(&[n, d]), attn)
}

/// Query and key/value codes.
fn query_key<T: Real>(s: &Session<'_, T>, fc: &Var<T>, pose: &Var<T>, proj: &Var<T>) -> (Var<T>, Var<T>) {
    let p = mlp(s, "pam.pose", pose);
    let q = mlp(s, "pam.merge", &Var::concat(&[fc.clone(), p], 1));
    let kv = mlp(s, "pam.proj", proj);
    (q, kv)
}

/// `f_c^{w+}` from the CT code `[N,d_c]`, pose features `[N,25]` and the
/// projection inputs `[N,S*S]`.
pub fn modify_content<T: Real>(
    s: &Session<'_, T>,
    cfg: &ModelConfig,
    fc: &Var<T>,
    pose: &Var<T>,
    proj: &Var<T>,
) -> Var<T> {
    let (q, kv) = query_key(s, fc, pose, proj);
    attend(&q, &kv, &kv, cfg.heads, cfg.tau()).0
}

/// Attention map `[N,h,h]` for the given temperature.
pub fn attention_map<T: Real>(
    s: &Session<'_, T>,
    cfg: &ModelConfig,
    fc: &Var<T>,
    pose: &Var<T>,
    proj: &Var<T>,
    tau: f64,
) -> Var<T> {
    let (q, kv) = query_key(s, fc, pose, proj);
    attend(&q, &kv, &kv, cfg.heads, tau).1
}

/// Mean Shannon entropy (nats) of the rows of an attention map.
pub fn mean_row_entropy<T: Real>(attn: &Tensor<T>) -> f64 {
    let h = *attn.shape().last().expect("attention map");
    let rows = attn.len() / h;
    let total: f64 = attn
        .data()
        .chunks(h)
        .map(|r| {
            r.iter()
                .map(|&p| p.to_f64().unwrap())
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / rows as f64
}

/// Mean attention-row entropy of the module at temperature `tau`.
pub fn attention_entropy<T: Real>(
    s: &Session<'_, T>,
    cfg: &ModelConfig,
    fc: &Var<T>,
    pose: &Var<T>,
    proj: &Var<T>,
    tau: f64,
) -> f64 {
    mean_row_entropy(attention_map(s, cfg, fc, pose, proj, tau).value())
}
