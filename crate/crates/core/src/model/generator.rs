//! Style-based generator: a learned constant refined by synthesis layers whose
//! instance statistics are set from the content code (early layers) or the
//! style code (late layers).

use xsynth_autograd::{Real, Var};

use super::ModelConfig;
use crate::nn::{adain, leaky, Init, Session};

/// Channels of synthesis layer `i` (0-based).
pub fn layer_channels(cfg: &ModelConfig, i: usize) -> usize {
    (cfg.gen_max_channels >> (i / 2)).max(cfg.gen_min_channels)
}

pub(crate) fn init(init: &mut Init<'_>, cfg: &ModelConfig) {
    let kc = cfg.content_layers();
    init.normal("g.const", &[1, layer_channels(cfg, 0), 4, 4], 1.0);
    let mut cin = layer_channels(cfg, 0);
    for i in 0..cfg.synthesis_layers {
        let c = layer_channels(cfg, i);
        let code = if i < kc { cfg.content_dim } else { cfg.style_dim };
        init.conv2d(&format!("g.l{i}.conv"), cin, c, 3, false);
        init.linear_with(&format!("g.l{i}.scale"), code, c, 0.5, 1.0);
        init.linear_with(&format!("g.l{i}.shift"), code, c, 0.5, 0.0);
        cin = c;
    }
    init.conv2d("g.head", cin, 1, 1, true);
}

/// Image `[N,1,R,R]` in `[0,1]` from `f_c^{w+}` `[N,d_c]` and a style code `[N,d_s]`.
pub fn generate<T: Real>(s: &Session<'_, T>, cfg: &ModelConfig, content: &Var<T>, style: &Var<T>) -> Var<T> {
    generate_traced(s, cfg, content, style, &mut Vec::new())
}

/// As [`generate`], also returning the output of every synthesis layer.
pub fn generate_traced<T: Real>(
    s: &Session<'_, T>,
    cfg: &ModelConfig,
    content: &Var<T>,
    style: &Var<T>,
    trace: &mut Vec<Var<T>>,
) -> Var<T> {
    assert_eq!(content.shape()[1], cfg.content_dim, "generator: content code width");
    assert_eq!(style.shape()[1], cfg.style_dim, "generator: style code width");
    let n = content.shape()[0];
    assert_eq!(style.shape()[0], n, "generator: batch sizes differ");
    let kc = cfg.content_layers();
    let c0 = s.param("g.const");
    let mut x = c0.broadcast_to(&[n, c0.shape()[1], 4, 4]);
    for i in 0..cfg.synthesis_layers {
        if i > 0 && i % 2 == 0 {
            x = x.upsample_nearest2d(2);
        }
        let code = if i < kc { content } else { style };
        x = s.conv2d(&format!("g.l{i}.conv"), &x, 1, 1);
        let scale = s.linear(&format!("g.l{i}.scale"), code);
        let shift = s.linear(&format!("g.l{i}.shift"), code);
        x = leaky(&adain(&x, &scale, &shift));
        trace.push(x.clone());
    }
    s.conv2d("g.head", &x, 1, 0).sigmoid()
}
