use crate::real::Real;
use crate::tensor::Tensor;
use crate::var::Var;

/// Cell `i` of an adaptive pooling over `len` inputs into `out` cells covers
/// `[floor(i*len/out), ceil((i+1)*len/out))`.
fn cell(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

fn dims4(op: &str, s: &[usize]) -> (usize, usize, usize) {
    assert!(s.len() == 4, "{op}: expected [N,C,H,W], got {s:?}");
    (s[0] * s[1], s[2], s[3])
}

impl<T: Real> Var<T> {
    /// Adaptive average pooling of `[N,C,H,W]` to `[N,C,oh,ow]`.
    pub fn adaptive_avg_pool2d(&self, oh: usize, ow: usize) -> Var<T> {
        let s = self.shape().to_vec();
        let (planes, h, w) = dims4("adaptive_avg_pool2d", &s);
        let src = self.value().data();
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for i in 0..oh {
                let (h0, h1) = cell(i, h, oh);
                for j in 0..ow {
                    let (w0, w1) = cell(j, w, ow);
                    let mut acc = T::zero();
                    for y in h0..h1 {
                        for x in w0..w1 {
                            acc = acc + src[(p * h + y) * w + x];
                        }
                    }
                    out[(p * oh + i) * ow + j] = acc / T::from_usize((h1 - h0) * (w1 - w0)).unwrap();
                }
            }
        }
        let value = Tensor::raw(vec![s[0], s[1], oh, ow], out);
        Var::from_op("adaptive_avg_pool2d", value, vec![self.clone()], move |g| {
            vec![Some(g.adaptive_avg_unpool2d(h, w))]
        })
    }

    /// Adjoint of [`Var::adaptive_avg_pool2d`]: spreads each cell back over
    /// its `h x w` source window.
    pub fn adaptive_avg_unpool2d(&self, h: usize, w: usize) -> Var<T> {
        let s = self.shape().to_vec();
        let (planes, oh, ow) = dims4("adaptive_avg_unpool2d", &s);
        let src = self.value().data();
        let mut out = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            for i in 0..oh {
                let (h0, h1) = cell(i, h, oh);
                for j in 0..ow {
                    let (w0, w1) = cell(j, w, ow);
                    let v = src[(p * oh + i) * ow + j]
                        / T::from_usize((h1 - h0) * (w1 - w0)).unwrap();
                    for y in h0..h1 {
                        for x in w0..w1 {
                            let o = (p * h + y) * w + x;
                            out[o] = out[o] + v;
                        }
                    }
                }
            }
        }
        let value = Tensor::raw(vec![s[0], s[1], h, w], out);
        Var::from_op("adaptive_avg_unpool2d", value, vec![self.clone()], move |g| {
            vec![Some(g.adaptive_avg_pool2d(oh, ow))]
        })
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
    pub fn upsample_nearest2d(&self, factor: usize) -> Var<T> {
        let s = self.shape().to_vec();
        let (planes, h, w) = dims4("upsample_nearest2d", &s);
        let (uh, uw) = (h * factor, w * factor);
        let src = self.value().data();
        let mut out = vec![T::zero(); planes * uh * uw];
        for p in 0..planes {
            for y in 0..uh {
                let row = &src[(p * h + y / factor) * w..];
                let dst = &mut out[(p * uh + y) * uw..(p * uh + y + 1) * uw];
                for (x, d) in dst.iter_mut().enumerate() {
                    *d = row[x / factor];
                }
            }
        }
        let value = Tensor::raw(vec![s[0], s[1], uh, uw], out);
        Var::from_op("upsample_nearest2d", value, vec![self.clone()], move |g| {
            vec![Some(g.sum_pool2d(factor))]
        })
    }

    /// Sums non-overlapping `factor x factor` blocks; adjoint of upsampling.
    pub fn sum_pool2d(&self, factor: usize) -> Var<T> {
        let s = self.shape().to_vec();
        let (planes, h, w) = dims4("sum_pool2d", &s);
        assert!(
            h % factor == 0 && w % factor == 0,
            "sum_pool2d: {s:?} not divisible by {factor}"
        );
        let (dh, dw) = (h / factor, w / factor);
        let src = self.value().data();
        let mut out = vec![T::zero(); planes * dh * dw];
        for p in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    let o = (p * dh + y / factor) * dw + x / factor;
                    out[o] = out[o] + src[(p * h + y) * w + x];
                }
            }
        }
        let value = Tensor::raw(vec![s[0], s[1], dh, dw], out);
        Var::from_op("sum_pool2d", value, vec![self.clone()], move |g| {
            vec![Some(g.upsample_nearest2d(factor))]
        })
    }
}
