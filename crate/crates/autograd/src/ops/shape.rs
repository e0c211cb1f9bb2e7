use crate::real::Real;
use crate::tensor::{strides, Tensor};
use crate::var::Var;

/// Strides of `small` read while walking `big`; zero on broadcast axes.
fn broadcast_strides(op: &str, small: &[usize], big: &[usize]) -> Vec<usize> {
    assert!(
        small.len() == big.len() && small.iter().zip(big).all(|(&s, &b)| s == b || s == 1),
        "{op}: shape {small:?} does not broadcast to {big:?}"
    );
    let st = strides(small);
    small
        .iter()
        .zip(big)
        .zip(st)
        .map(|((&s, &b), st)| if s == 1 && b != 1 { 0 } else { st })
        .collect()
}

/// Visits every element of `big` in row-major order, reporting the offset of
/// the corresponding element of the broadcast source.
fn walk(big: &[usize], src_strides: &[usize], f: &mut impl FnMut(usize, usize)) {
    fn rec(
        dim: usize,
        big: &[usize],
        bst: &[usize],
        sst: &[usize],
        boff: usize,
        soff: usize,
        f: &mut impl FnMut(usize, usize),
    ) {
        if dim + 1 == big.len() {
            for i in 0..big[dim] {
                f(boff + i, soff + i * sst[dim]);
            }
            return;
        }
        for i in 0..big[dim] {
            rec(dim + 1, big, bst, sst, boff + i * bst[dim], soff + i * sst[dim], f);
        }
    }
    if big.is_empty() {
        f(0, 0);
        return;
    }
    let bst = strides(big);
    rec(0, big, &bst, src_strides, 0, 0, f);
}

pub(crate) fn broadcast_kernel<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let sst = broadcast_strides("broadcast_to", x.shape(), shape);
    let n: usize = shape.iter().product();
    let mut out = vec![T::zero(); n];
    let src = x.data();
    walk(shape, &sst, &mut |o, s| out[o] = src[s]);
    Tensor::raw(shape.to_vec(), out)
}

pub(crate) fn sum_to_kernel<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let sst = broadcast_strides("sum_to", shape, x.shape());
    let n: usize = shape.iter().product();
    let mut out = vec![T::zero(); n];
    let src = x.data();
    walk(x.shape(), &sst, &mut |b, s| out[s] = out[s] + src[b]);
    Tensor::raw(shape.to_vec(), out)
}

/// (outer, axis, inner) extents around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Var<T> {
    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let value = self.value().reshape(shape).unwrap_or_else(|_| {
            panic!("reshape: cannot view {:?} as {shape:?}", self.shape())
        });
        let orig = self.shape().to_vec();
        Var::from_op("reshape", value, vec![self.clone()], move |g| {
            vec![Some(g.reshape(&orig))]
        })
    }

    /// Swaps the last two axes (matrix transpose, batched over leading axes).
    pub fn transpose(&self) -> Var<T> {
        let shape = self.shape();
        let nd = shape.len();
        assert!(nd >= 2, "transpose: needs at least 2 axes, got {shape:?}");
        let (r, c) = (shape[nd - 2], shape[nd - 1]);
        let batch = self.len() / (r * c);
        let src = self.value().data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            let o = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = src[o + i * c + j];
                }
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.swap(nd - 2, nd - 1);
        Var::from_op(
            "transpose",
            Tensor::raw(new_shape, out),
            vec![self.clone()],
            |g| vec![Some(g.transpose())],
        )
    }

    /// Repeats size-1 axes to reach `shape` (same rank required).
    pub fn broadcast_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let value = broadcast_kernel(self.value(), shape);
        let orig = self.shape().to_vec();
        Var::from_op("broadcast_to", value, vec![self.clone()], move |g| {
            vec![Some(g.sum_to(&orig))]
        })
    }

    /// Sums over the axes where `shape` has extent 1 (same rank required).
    pub fn sum_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let value = sum_to_kernel(self.value(), shape);
        let orig = self.shape().to_vec();
        Var::from_op("sum_to", value, vec![self.clone()], move |g| {
            vec![Some(g.broadcast_to(&orig))]
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&self) -> Var<T> {
        self.reshape(&[self.len()]).sum_to(&[1])
    }

    pub fn mean_all(&self) -> Var<T> {
        self.sum_all().scale(1.0 / self.len() as f64)
    }

    /// Mean over one axis, keeping it with extent 1.
    pub fn mean_axis(&self, axis: usize) -> Var<T> {
        let mut shape = self.shape().to_vec();
        let n = shape[axis];
        shape[axis] = 1;
        self.sum_to(&shape).scale(1.0 / n as f64)
    }

    /// Joins along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = parts[0].shape().to_vec();
        for p in parts {
            let s = p.shape();
            assert!(
                s.len() == first.len()
                    && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
                "concat: shapes {:?} and {:?} disagree off axis {axis}",
                first,
                s
            );
        }
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = vec![T::zero(); shape.iter().product()];
        let mut start = 0;
        let mut offsets = Vec::with_capacity(parts.len());
        for p in parts {
            let len = p.shape()[axis];
            let src = p.value().data();
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                out[dst..dst + len * inner]
                    .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offsets.push((start, len));
            start += len;
        }
        let flags: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Var::from_op("concat", Tensor::raw(shape, out), parts.to_vec(), move |g| {
            offsets
                .iter()
                .zip(&flags)
                .map(|(&(s, l), &rg)| rg.then(|| g.slice(axis, s, l)))
                .collect()
        })
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let shape = self.shape().to_vec();
        assert!(
            axis < shape.len() && start + len <= shape[axis] && len > 0,
            "slice: range {start}..{} out of axis {axis} of {shape:?}",
            start + len
        );
        let (outer, full, inner) = split_at_axis(&shape, axis);
        let src = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Var::from_op("slice", Tensor::raw(new_shape, out), vec![self.clone()], move |g| {
            vec![Some(g.pad_slice(axis, start, full))]
        })
    }

    /// Places `self` at `start` along `axis` inside zeros of extent `full`.
    pub fn pad_slice(&self, axis: usize, start: usize, full: usize) -> Var<T> {
        let shape = self.shape().to_vec();
        let len = shape[axis];
        assert!(start + len <= full, "pad_slice: {start}+{len} exceeds {full}");
        let mut new_shape = shape.clone();
        new_shape[axis] = full;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let src = self.value().data();
        let mut out = vec![T::zero(); new_shape.iter().product()];
        for o in 0..outer {
            let d = (o * full + start) * inner;
            out[d..d + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        Var::from_op("pad_slice", Tensor::raw(new_shape, out), vec![self.clone()], move |g| {
            vec![Some(g.slice(axis, start, len))]
        })
    }
}
