use crate::real::Real;
use crate::tensor::{gemm, Tensor};
use crate::var::Var;

impl<T: Real> Var<T> {
    /// `[m,k] x [k,n]`, or batched `[b,m,k] x [b,k,n]`.
    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        let (sa, sb) = (self.shape(), other.shape());
        let ok = match (sa.len(), sb.len()) {
            (2, 2) => sa[1] == sb[0],
            (3, 3) => sa[0] == sb[0] && sa[2] == sb[1],
            _ => false,
        };
        assert!(ok, "matmul: shapes {sa:?} and {sb:?} are incompatible");
        let nd = sa.len();
        let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
        let batch = if nd == 3 { sa[0] } else { 1 };
        let mut out = vec![T::zero(); batch * m * n];
        let (a, b) = (self.value().data(), other.value().data());
        for i in 0..batch {
            gemm(
                false,
                false,
                m,
                k,
                n,
                &a[i * m * k..],
                &b[i * k * n..],
                T::zero(),
                &mut out[i * m * n..],
            );
        }
        let shape = if nd == 3 { vec![batch, m, n] } else { vec![m, n] };
        let (x, y) = (self.clone(), other.clone());
        Var::from_op(
            "matmul",
            Tensor::raw(shape, out),
            vec![self.clone(), other.clone()],
            move |g| {
                vec![
                    x.requires_grad().then(|| g.matmul(&y.transpose())),
                    y.requires_grad().then(|| x.transpose().matmul(g)),
                ]
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let last = *shape.last().expect("softmax: scalar input");
        let mut out = self.value().data().to_vec();
        for row in out.chunks_mut(last) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let x = self.clone();
        Var::from_op("softmax", Tensor::raw(shape.clone(), out), vec![self.clone()], move |g| {
            let y = x.softmax();
            let gy = g.mul(&y);
            let mut keep = shape.clone();
            *keep.last_mut().unwrap() = 1;
            let s = gy.sum_to(&keep).broadcast_to(&shape);
            vec![Some(gy.sub(&y.mul(&s)))]
        })
    }

    /// Euclidean norm over the last axis, kept with extent 1.
    ///
    /// The gradient at a zero row is taken to be zero.
    pub fn row_norm(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let last = *shape.last().expect("row_norm: scalar input");
        let norms: Vec<T> = self
            .value()
            .data()
            .chunks(last)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = 1;
        let x = self.clone();
        Var::from_op("row_norm", Tensor::raw(out_shape, norms), vec![self.clone()], move |g| {
            let inv = x.row_norm().recip_or_zero();
            let scale = g.mul(&inv).broadcast_to(&shape);
            vec![Some(x.mul(&scale))]
        })
    }

    /// Per-sample, per-channel mean and standard deviation over every axis
    /// after the first two (`[N,C,...]` to `[N,C,1,...]`).
    pub fn channel_mean_std(&self, eps: f64) -> (Var<T>, Var<T>) {
        let shape = self.shape().to_vec();
        assert!(shape.len() >= 3, "channel_mean_std: need [N,C,spatial..], got {shape:?}");
        let mut keep = shape.clone();
        for d in keep.iter_mut().skip(2) {
            *d = 1;
        }
        let count: usize = shape[2..].iter().product();
        let mean = self.sum_to(&keep).scale(1.0 / count as f64);
        let centered = self.sub(&mean.broadcast_to(&shape));
        let var = centered.square().sum_to(&keep).scale(1.0 / count as f64);
        (mean, var.add_scalar(eps).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::var::backward;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = Var::<f64>::constant(Tensor::zeros(&[3]));
        for &p in x.softmax().value().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn row_norm_values_and_zero_row() {
        let x = Var::leaf(Tensor::new(&[2, 2], vec![3.0f64, 4.0, 0.0, 0.0]).unwrap(), true);
        let n = x.row_norm();
        assert_eq!(n.value().data(), &[5.0, 0.0]);
        let g = backward(&n.sum_all());
        let gx = g.get(&x).unwrap().data();
        for (a, b) in gx.iter().zip([0.6, 0.8, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_gradient_shapes() {
        let a = Var::leaf(Tensor::<f64>::ones(&[2, 3, 4]), true);
        let b = Var::leaf(Tensor::<f64>::ones(&[2, 4, 5]), true);
        let g = backward(&a.matmul(&b).sum_all());
        assert_eq!(g.get(&a).unwrap().shape(), &[2, 3, 4]);
        assert!(g.get(&a).unwrap().data().iter().all(|&v| v == 5.0));
        assert!(g.get(&b).unwrap().data().iter().all(|&v| v == 3.0));
    }
}
