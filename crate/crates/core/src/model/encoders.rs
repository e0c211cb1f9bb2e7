//! CT encoder and the three-branch style decoupling encoder.

use std::fmt;
use std::str::FromStr;

use xsynth_autograd::{Real, Var};

use super::ModelConfig;
use crate::error::Error;
use crate::nn::{leaky, Init, Session};

const BRANCH_STRIDES: [usize; 6] = [1, 2, 2, 2, 1, 1];

/// Image domain of a style branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Xray,
    Drr,
}

impl Domain {
    pub fn prefix(self) -> &'static str {
        match self {
            Domain::Xray => "e_sty.s_x",
            Domain::Drr => "e_sty.s_drr",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Xray => "xray",
            Domain::Drr => "drr",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "xray" | "x" => Ok(Domain::Xray),
            "drr" => Ok(Domain::Drr),
            other => Err(Error::Config(format!(
                "unknown style domain `{other}` (expected `xray` or `drr`)"
            ))),
        }
    }
}

pub(crate) fn init_ct(init: &mut Init<'_>, cfg: &ModelConfig) {
    let c = cfg.ct_channels;
    let mut cin = 1;
    for (i, &cout) in c.iter().enumerate() {
        init.conv3d(&format!("e_ct.l{i}.conv0"), cin, cout, 3);
        init.conv3d(&format!("e_ct.l{i}.conv1"), cout, cout, 3);
        init.batch_norm(&format!("e_ct.l{i}.bn"), cout, 5);
        cin = cout;
    }
    let side = cfg.volume_size / 8;
    init.linear("e_ct.out", c[4] * side * side * side, cfg.content_dim, true);
}

/// `f_c^CT` for a batch of normalized volumes `[N,1,S,S,S]`, returning `[N,d_c]`.
pub fn encode_ct<T: Real>(s: &Session<'_, T>, cfg: &ModelConfig, v: &Var<T>) -> Var<T> {
    encode_ct_traced(s, cfg, v, &mut Vec::new())
}

/// As [`encode_ct`], also recording the feature-map shape after each layer.
pub fn encode_ct_traced<T: Real>(
    s: &Session<'_, T>,
    cfg: &ModelConfig,
    v: &Var<T>,
    trace: &mut Vec<Vec<usize>>,
) -> Var<T> {
    let mut x = v.clone();
    for i in 0..cfg.ct_channels.len() {
        let stride = if (1..=3).contains(&i) { 2 } else { 1 };
        x = s.conv3d(&format!("e_ct.l{i}.conv0"), &x, stride, 1);
        x = s.conv3d(&format!("e_ct.l{i}.conv1"), &x, 1, 1);
        x = leaky(&s.batch_norm(&format!("e_ct.l{i}.bn"), &x));
        trace.push(x.shape().to_vec());
    }
    let n = x.shape()[0];
    let flat = x.len() / n;
    s.linear("e_ct.out", &x.reshape(&[n, flat]))
}

fn init_trunk(init: &mut Init<'_>, cfg: &ModelConfig, prefix: &str) {
    let mut cin = 1;
    for (i, &cout) in cfg.branch_channels.iter().enumerate() {
        init.conv2d(&format!("{prefix}.conv{i}"), cin, cout, 3, true);
        cin = cout;
    }
}

fn trunk<T: Real>(s: &Session<'_, T>, prefix: &str, x: &Var<T>) -> Var<T> {
    let mut x = x.clone();
    for (i, &stride) in BRANCH_STRIDES.iter().enumerate() {
        x = leaky(&s.conv2d(&format!("{prefix}.conv{i}"), &x, stride, 1));
    }
    x
}

pub(crate) fn init_style(init: &mut Init<'_>, cfg: &ModelConfig, domain: Domain) {
    let p = domain.prefix();
    init_trunk(init, cfg, p);
    init.conv2d(&format!("{p}.conv6"), cfg.branch_channels[5], cfg.style_dim, 1, true);
}

/// Style code `[N,d_s]` in `[-1,1]` for images `[N,1,H,W]`.
pub fn style_code<T: Real>(s: &Session<'_, T>, domain: Domain, img: &Var<T>) -> Var<T> {
    let p = domain.prefix();
    let x = trunk(s, p, img).adaptive_avg_pool2d(1, 1);
    let x = s.conv2d(&format!("{p}.conv6"), &x, 1, 0).tanh();
    let n = x.shape()[0];
    x.reshape(&[n, x.len() / n])
}

/// Spatial size the content branch pools to before its affine head.
fn content_pool(cfg: &ModelConfig) -> usize {
    (cfg.resolution() / 8).clamp(1, 4)
}

pub(crate) fn init_content(init: &mut Init<'_>, cfg: &ModelConfig) {
    init_trunk(init, cfg, "e_sty.c");
    let k = content_pool(cfg);
    init.linear("e_sty.c.out", cfg.branch_channels[5] * k * k, cfg.content_dim, true);
}

/// Domain-agnostic content code `[N,d_c]` for images `[N,1,H,W]`.
pub fn content_code<T: Real>(s: &Session<'_, T>, cfg: &ModelConfig, img: &Var<T>) -> Var<T> {
    let k = content_pool(cfg);
    let x = trunk(s, "e_sty.c", img).adaptive_avg_pool2d(k, k);
    let n = x.shape()[0];
    s.linear("e_sty.c.out", &x.reshape(&[n, x.len() / n]))
}
