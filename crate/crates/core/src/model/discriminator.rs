//! Pose-conditioned discriminator producing one unbounded score per image.

use xsynth_autograd::{Real, Var};

use super::{ModelConfig, POSE_DIM};
use crate::nn::{leaky, Init, Session};

/// Stride-2 convolutions from the image resolution down to 4 x 4.
fn down_layers(cfg: &ModelConfig) -> usize {
    (cfg.resolution() / 4).trailing_zeros() as usize
}

fn channels(cfg: &ModelConfig, i: usize) -> usize {
    cfg.disc_channels << i.min(2)
}

pub(crate) fn init(init: &mut Init<'_>, cfg: &ModelConfig) {
    init.conv2d("d.conv_in", 1, cfg.disc_channels, 3, true);
    let mut cin = cfg.disc_channels;
    for i in 0..down_layers(cfg) {
        let c = channels(cfg, i + 1);
        init.conv2d(&format!("d.down{i}"), cin, c, 3, true);
        cin = c;
    }
    init.linear("d.feat", cin * 16, cfg.disc_features, true);
    init.linear("d.pose", POSE_DIM, cfg.pose_dim, true);
    init.linear("d.out", cfg.disc_features + cfg.pose_dim, 1, true);
}

/// Scores `[N,1]` for images `[N,1,R,R]` seen from poses `[N,25]`.
pub fn discriminate<T: Real>(s: &Session<'_, T>, cfg: &ModelConfig, img: &Var<T>, pose: &Var<T>) -> Var<T> {
    let r = cfg.resolution();
    assert_eq!(&img.shape()[1..], &[1, r, r], "discriminator: image shape");
    let mut x = leaky(&s.conv2d("d.conv_in", img, 1, 1));
    for i in 0..down_layers(cfg) {
        x = leaky(&s.conv2d(&format!("d.down{i}"), &x, 2, 1));
    }
    let n = x.shape()[0];
    let f = leaky(&s.linear("d.feat", &x.reshape(&[n, x.len() / n])));
    let p = leaky(&s.linear("d.pose", pose));
    s.linear("d.out", &Var::concat(&[f, p], 1))
}
