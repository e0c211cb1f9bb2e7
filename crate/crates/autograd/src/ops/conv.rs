//! Strided, zero-padded 3D cross-correlation (2D is the depth-1 case).
//!
//! Lowered to im2col + GEMM. The forward map is bilinear in (input, weight),
//! so its two adjoints plus itself form a set closed under differentiation:
//! each backward rule is expressed with one of the three recorded ops.

use rayon::prelude::*;

use crate::real::Real;
use crate::tensor::{gemm, Tensor};
use crate::var::Var;

/// Stride and zero padding per spatial axis (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn new3(stride: usize, pad: usize) -> Self {
        Self {
            stride: [stride; 3],
            pad: [pad; 3],
        }
    }

    pub fn new2(stride: usize, pad: usize) -> Self {
        Self {
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c: usize,
    o: usize,
    input: [usize; 3],
    k: [usize; 3],
    out: [usize; 3],
    spec: ConvSpec,
}

impl Geom {
    fn in_len(&self) -> usize {
        self.c * self.input.iter().product::<usize>()
    }
    fn out_pix(&self) -> usize {
        self.out.iter().product()
    }
    fn ck(&self) -> usize {
        self.c * self.k.iter().product::<usize>()
    }
    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.spec.stride == [1, 1, 1] && self.spec.pad == [0, 0, 0]
    }
}

fn geometry(x: &[usize], w: &[usize], spec: ConvSpec) -> Geom {
    assert!(
        x.len() == 5 && w.len() == 5 && x[1] == w[1],
        "conv: input {x:?} and weight {w:?} are incompatible"
    );
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = x[2 + a] + 2 * spec.pad[a];
        assert!(
            padded >= w[2 + a] && spec.stride[a] > 0,
            "conv: kernel {w:?} larger than padded input {x:?}"
        );
        out[a] = (padded - w[2 + a]) / spec.stride[a] + 1;
    }
    Geom {
        n: x[0],
        c: x[1],
        o: w[0],
        input: [x[2], x[3], x[4]],
        k: [w[2], w[3], w[4]],
        out,
        spec,
    }
}

/// For each kernel tap along one axis: output positions and matching input
/// positions that fall inside the image.
fn axis_map(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> Vec<Vec<(usize, usize)>> {
    (0..k)
        .map(|t| {
            (0..out)
                .filter_map(|o| {
                    let i = (o * stride + t) as isize - pad as isize;
                    (i >= 0 && (i as usize) < input).then_some((o, i as usize))
                })
                .collect()
        })
        .collect()
}

struct Maps([Vec<Vec<(usize, usize)>>; 3]);

impl Maps {
    fn new(g: &Geom) -> Self {
        let m = |a: usize| axis_map(g.out[a], g.input[a], g.k[a], g.spec.stride[a], g.spec.pad[a]);
        Maps([m(0), m(1), m(2)])
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom, maps: &Maps, cols: &mut [T]) {
    let p = g.out_pix();
    let [id, ih, iw] = g.input;
    let [_, oh, ow] = g.out;
    cols.iter_mut().for_each(|v| *v = T::zero());
    let unit_w = g.spec.stride[2] == 1;
    let mut row = 0;
    for c in 0..g.c {
        let xc = &x[c * id * ih * iw..];
        for md in &maps.0[0] {
            for mh in &maps.0[1] {
                for mw in &maps.0[2] {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for &(od, idd) in md {
                        for &(ohh, ihh) in mh {
                            let o_base = (od * oh + ohh) * ow;
                            let i_base = (idd * ih + ihh) * iw;
                            if unit_w {
                                if let (Some(&(o0, i0)), len) = (mw.first(), mw.len()) {
                                    dst[o_base + o0..o_base + o0 + len]
                                        .copy_from_slice(&xc[i_base + i0..i_base + i0 + len]);
                                }
                            } else {
                                for &(oww, iww) in mw {
                                    dst[o_base + oww] = xc[i_base + iww];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geom, maps: &Maps, dx: &mut [T]) {
    let p = g.out_pix();
    let [id, ih, iw] = g.input;
    let [_, oh, ow] = g.out;
    let unit_w = g.spec.stride[2] == 1;
    let mut row = 0;
    for c in 0..g.c {
        let dxc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for md in &maps.0[0] {
            for mh in &maps.0[1] {
                for mw in &maps.0[2] {
                    let src = &cols[row * p..(row + 1) * p];
                    for &(od, idd) in md {
                        for &(ohh, ihh) in mh {
                            let o_base = (od * oh + ohh) * ow;
                            let i_base = (idd * ih + ihh) * iw;
                            if unit_w {
                                if let (Some(&(o0, i0)), len) = (mw.first(), mw.len()) {
                                    let d = &mut dxc[i_base + i0..i_base + i0 + len];
                                    for (d, &s) in d.iter_mut().zip(&src[o_base + o0..o_base + o0 + len]) {
                                        *d = *d + s;
                                    }
                                }
                            } else {
                                for &(oww, iww) in mw {
                                    dxc[i_base + iww] = dxc[i_base + iww] + src[o_base + oww];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn forward_kernel<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &Geom) -> Tensor<T> {
    let p = g.out_pix();
    let ck = g.ck();
    let maps = Maps::new(g);
    let mut out = vec![T::zero(); g.n * g.o * p];
    let xd = x.data();
    let wd = w.data();
    out.par_chunks_mut(g.o * p).enumerate().for_each(|(n, out_n)| {
        let xn = &xd[n * g.in_len()..(n + 1) * g.in_len()];
        if g.is_pointwise() {
            gemm(false, false, g.o, ck, p, wd, xn, T::zero(), out_n);
        } else {
            let mut cols = vec![T::zero(); ck * p];
            im2col(xn, g, &maps, &mut cols);
            gemm(false, false, g.o, ck, p, wd, &cols, T::zero(), out_n);
        }
    });
    Tensor::raw(vec![g.n, g.o, g.out[0], g.out[1], g.out[2]], out)
}

fn input_grad_kernel<T: Real>(gy: &Tensor<T>, w: &Tensor<T>, g: &Geom) -> Tensor<T> {
    let p = g.out_pix();
    let ck = g.ck();
    let maps = Maps::new(g);
    let mut dx = vec![T::zero(); g.n * g.in_len()];
    let gd = gy.data();
    let wd = w.data();
    dx.par_chunks_mut(g.in_len()).enumerate().for_each(|(n, dx_n)| {
        let gn = &gd[n * g.o * p..(n + 1) * g.o * p];
        if g.is_pointwise() {
            gemm(true, false, ck, g.o, p, wd, gn, T::zero(), dx_n);
        } else {
            let mut cols = vec![T::zero(); ck * p];
            gemm(true, false, ck, g.o, p, wd, gn, T::zero(), &mut cols);
            col2im(&cols, g, &maps, dx_n);
        }
    });
    Tensor::raw(vec![g.n, g.c, g.input[0], g.input[1], g.input[2]], dx)
}

fn weight_grad_kernel<T: Real>(x: &Tensor<T>, gy: &Tensor<T>, g: &Geom) -> Tensor<T> {
    let p = g.out_pix();
    let ck = g.ck();
    let maps = Maps::new(g);
    let xd = x.data();
    let gd = gy.data();
    let partials: Vec<Vec<T>> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let xn = &xd[n * g.in_len()..(n + 1) * g.in_len()];
            let gn = &gd[n * g.o * p..(n + 1) * g.o * p];
            let mut dw = vec![T::zero(); g.o * ck];
            if g.is_pointwise() {
                gemm(false, true, g.o, p, ck, gn, xn, T::zero(), &mut dw);
            } else {
                let mut cols = vec![T::zero(); ck * p];
                im2col(xn, g, &maps, &mut cols);
                gemm(false, true, g.o, p, ck, gn, &cols, T::zero(), &mut dw);
            }
            dw
        })
        .collect();
    // Fixed summation order keeps the result independent of thread count.
    let mut dw = vec![T::zero(); g.o * ck];
    for part in partials {
        for (a, b) in dw.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    Tensor::raw(vec![g.o, g.c, g.k[0], g.k[1], g.k[2]], dw)
}

impl<T: Real> Var<T> {
    /// `x: [N,C,D,H,W]`, `w: [O,C,KD,KH,KW]` to `[N,O,D',H',W']`.
    pub fn conv3d(&self, w: &Var<T>, spec: ConvSpec) -> Var<T> {
        let g = geometry(self.shape(), w.shape(), spec);
        let value = forward_kernel(self.value(), w.value(), &g);
        let (x, wt) = (self.clone(), w.clone());
        Var::from_op("conv3d", value, vec![self.clone(), w.clone()], move |gy| {
            vec![
                x.requires_grad().then(|| gy.conv_input_grad(&wt, spec, x.shape())),
                wt.requires_grad().then(|| x.conv_weight_grad(gy, spec, wt.shape())),
            ]
        })
    }

    /// Adjoint of [`Var::conv3d`] in its input: `self` is the output gradient.
    pub fn conv_input_grad(&self, w: &Var<T>, spec: ConvSpec, in_shape: &[usize]) -> Var<T> {
        let g = geometry(in_shape, w.shape(), spec);
        assert_eq!(
            self.shape(),
            &[g.n, g.o, g.out[0], g.out[1], g.out[2]],
            "conv_input_grad: output gradient shape"
        );
        let value = input_grad_kernel(self.value(), w.value(), &g);
        let (gy, wt) = (self.clone(), w.clone());
        Var::from_op("conv_input_grad", value, vec![self.clone(), w.clone()], move |h| {
            vec![
                gy.requires_grad().then(|| h.conv3d(&wt, spec)),
                wt.requires_grad().then(|| h.conv_weight_grad(&gy, spec, wt.shape())),
            ]
        })
    }

    /// Adjoint of [`Var::conv3d`] in its weight: `self` is the input and
    /// `gy` the output gradient.
    pub fn conv_weight_grad(&self, gy: &Var<T>, spec: ConvSpec, w_shape: &[usize]) -> Var<T> {
        let g = geometry(self.shape(), w_shape, spec);
        assert_eq!(
            gy.shape(),
            &[g.n, g.o, g.out[0], g.out[1], g.out[2]],
            "conv_weight_grad: output gradient shape"
        );
        let value = weight_grad_kernel(self.value(), gy.value(), &g);
        let (x, gyc) = (self.clone(), gy.clone());
        Var::from_op("conv_weight_grad", value, vec![self.clone(), gy.clone()], move |h| {
            vec![
                x.requires_grad().then(|| gyc.conv_input_grad(h, spec, x.shape())),
                gyc.requires_grad().then(|| x.conv3d(h, spec)),
            ]
        })
    }

    /// `x: [N,C,H,W]`, `w: [O,C,KH,KW]` to `[N,O,H',W']`.
    pub fn conv2d(&self, w: &Var<T>, stride: usize, pad: usize) -> Var<T> {
        let (xs, ws) = (self.shape(), w.shape());
        assert!(
            xs.len() == 4 && ws.len() == 4,
            "conv2d: input {xs:?} and weight {ws:?} must both be 4-D"
        );
        let x5 = self.reshape(&[xs[0], xs[1], 1, xs[2], xs[3]]);
        let w5 = w.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]]);
        let y = x5.conv3d(&w5, ConvSpec::new2(stride, pad));
        let s = y.shape().to_vec();
        y.reshape(&[s[0], s[1], s[3], s[4]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop cross-correlation.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
        let g = geometry(x.shape(), w.shape(), spec);
        let mut out = vec![0.0; g.n * g.o * g.out_pix()];
        let xs = crate::tensor::strides(x.shape());
        let ws = crate::tensor::strides(w.shape());
        let [od, oh, ow] = g.out;
        for n in 0..g.n {
            for o in 0..g.o {
                for a in 0..od {
                    for b in 0..oh {
                        for c in 0..ow {
                            let mut acc = 0.0;
                            for ch in 0..g.c {
                                for ka in 0..g.k[0] {
                                    for kb in 0..g.k[1] {
                                        for kc in 0..g.k[2] {
                                            let ia = (a * spec.stride[0] + ka) as isize - spec.pad[0] as isize;
                                            let ib = (b * spec.stride[1] + kb) as isize - spec.pad[1] as isize;
                                            let ic = (c * spec.stride[2] + kc) as isize - spec.pad[2] as isize;
                                            if ia < 0 || ib < 0 || ic < 0 {
                                                continue;
                                            }
                                            let (ia, ib, ic) = (ia as usize, ib as usize, ic as usize);
                                            if ia >= g.input[0] || ib >= g.input[1] || ic >= g.input[2] {
                                                continue;
                                            }
                                            acc += x.data()[n * xs[0] + ch * xs[1] + ia * xs[2] + ib * xs[3] + ic]
                                                * w.data()[o * ws[0] + ch * ws[1] + ka * ws[2] + kb * ws[3] + kc];
                                        }
                                    }
                                }
                            }
                            out[((n * g.o + o) * od + a) * oh * ow + b * ow + c] = acc;
                        }
                    }
                }
            }
        }
        Tensor::new(&[g.n, g.o, od, oh, ow], out).unwrap()
    }

    fn ramp(shape: &[usize], k: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 * k).sin() * 3.0).round())
    }

    #[test]
    fn matches_naive_loops() {
        for (spec, xs, ws) in [
            (ConvSpec::new3(1, 1), [2, 2, 4, 5, 3], [3, 2, 3, 3, 3]),
            (ConvSpec::new3(2, 1), [1, 3, 6, 6, 6], [2, 3, 3, 3, 3]),
            (ConvSpec::new2(2, 1), [2, 1, 1, 7, 8], [4, 1, 1, 3, 3]),
            (ConvSpec::new3(1, 0), [2, 3, 2, 2, 2], [2, 3, 1, 1, 1]),
        ] {
            let x = ramp(&xs, 0.37);
            let w = ramp(&ws, 0.91);
            let got = forward_kernel(&x, &w, &geometry(&xs, &ws, spec));
            assert_eq!(got, naive(&x, &w, spec), "{spec:?}");
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <g, conv(x,w)> = <input_grad(g,w), x> = <weight_grad(x,g), w>
        let spec = ConvSpec::new3(2, 1);
        let (xs, ws) = ([2, 2, 5, 4, 6], [3, 2, 3, 3, 3]);
        let x = ramp(&xs, 0.31);
        let w = ramp(&ws, 0.77);
        let geom = geometry(&xs, &ws, spec);
        let y = forward_kernel(&x, &w, &geom);
        let gy = ramp(y.shape(), 0.53);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
        };
        let lhs = dot(&gy, &y);
        let gx = input_grad_kernel(&gy, &w, &geom);
        let gw = weight_grad_kernel(&x, &gy, &geom);
        assert!((lhs - dot(&gx, &x)).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - dot(&gw, &w)).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
