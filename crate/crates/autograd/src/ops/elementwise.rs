use crate::real::Real;
use crate::tensor::Tensor;
use crate::var::Var;

fn same_shape<T: Real>(op: &str, a: &Var<T>, b: &Var<T>) {
    assert!(
        a.shape() == b.shape(),
        "{op}: shapes {:?} and {:?} differ",
        a.shape(),
        b.shape()
    );
}

impl<T: Real> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        same_shape("add", self, other);
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op("add", value, vec![self.clone(), other.clone()], |g| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        same_shape("sub", self, other);
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op("sub", value, vec![self.clone(), other.clone()], |g| {
            vec![Some(g.clone()), Some(g.neg())]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        same_shape("mul", self, other);
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        let (a, b) = (self.clone(), other.clone());
        Var::from_op("mul", value, vec![self.clone(), other.clone()], move |g| {
            vec![
                a.requires_grad().then(|| g.mul(&b)),
                b.requires_grad().then(|| g.mul(&a)),
            ]
        })
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        same_shape("div", self, other);
        let value = self.value().zip_map(other.value(), |a, b| a / b);
        let (a, b) = (self.clone(), other.clone());
        Var::from_op("div", value, vec![self.clone(), other.clone()], move |g| {
            let ga = g.div(&b);
            let gb = b.requires_grad().then(|| ga.mul(&a).div(&b).neg());
            vec![Some(ga), gb]
        })
    }

    pub fn neg(&self) -> Var<T> {
        Var::from_op("neg", self.value().map(|v| -v), vec![self.clone()], |g| {
            vec![Some(g.neg())]
        })
    }

    /// Multiplies by a fixed scalar.
    pub fn scale(&self, c: f64) -> Var<T> {
        let ct = T::c(c);
        Var::from_op("scale", self.value().map(|v| v * ct), vec![self.clone()], move |g| {
            vec![Some(g.scale(c))]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Var<T> {
        let ct = T::c(c);
        Var::from_op("add_scalar", self.value().map(|v| v + ct), vec![self.clone()], |g| {
            vec![Some(g.clone())]
        })
    }

    /// Elementwise product with a tensor that is not differentiated.
    pub fn mul_const(&self, mask: &Tensor<T>) -> Var<T> {
        assert!(
            self.shape() == mask.shape(),
            "mul_const: shapes {:?} and {:?} differ",
            self.shape(),
            mask.shape()
        );
        let value = self.value().zip_map(mask, |a, b| a * b);
        let m = mask.clone();
        Var::from_op("mul_const", value, vec![self.clone()], move |g| {
            vec![Some(g.mul_const(&m))]
        })
    }

    pub fn square(&self) -> Var<T> {
        let x = self.clone();
        Var::from_op("square", self.value().map(|v| v * v), vec![self.clone()], move |g| {
            vec![Some(g.mul(&x).scale(2.0))]
        })
    }

    pub fn sqrt(&self) -> Var<T> {
        let x = self.clone();
        Var::from_op("sqrt", self.value().map(|v| v.sqrt()), vec![self.clone()], move |g| {
            vec![Some(g.div(&x.sqrt().scale(2.0)))]
        })
    }

    pub fn abs(&self) -> Var<T> {
        let sign = self.value().map(|v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        Var::from_op("abs", self.value().map(|v| v.abs()), vec![self.clone()], move |g| {
            vec![Some(g.mul_const(&sign))]
        })
    }

    pub fn exp(&self) -> Var<T> {
        let x = self.clone();
        Var::from_op("exp", self.value().map(|v| v.exp()), vec![self.clone()], move |g| {
            vec![Some(g.mul(&x.exp()))]
        })
    }

    pub fn ln(&self) -> Var<T> {
        let x = self.clone();
        Var::from_op("ln", self.value().map(|v| v.ln()), vec![self.clone()], move |g| {
            vec![Some(g.div(&x))]
        })
    }

    pub fn recip(&self) -> Var<T> {
        let x = self.clone();
        Var::from_op("recip", self.value().map(|v| v.recip()), vec![self.clone()], move |g| {
            vec![Some(g.div(&x.square()).neg())]
        })
    }

    /// `1/x` where `x != 0`, and `0` where `x == 0` (gradient zero there too).
    pub fn recip_or_zero(&self) -> Var<T> {
        let f = |v: T| if v == T::zero() { T::zero() } else { v.recip() };
        let x = self.clone();
        Var::from_op("recip_or_zero", self.value().map(f), vec![self.clone()], move |g| {
            vec![Some(g.mul(&x.recip_or_zero().square()).neg())]
        })
    }

    pub fn tanh(&self) -> Var<T> {
        let x = self.clone();
        Var::from_op("tanh", self.value().map(|v| v.tanh()), vec![self.clone()], move |g| {
            let y = x.tanh();
            vec![Some(g.sub(&g.mul(&y.square())))]
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let f = |v: T| T::one() / (T::one() + (-v).exp());
        let x = self.clone();
        Var::from_op("sigmoid", self.value().map(f), vec![self.clone()], move |g| {
            let y = x.sigmoid();
            let dy = y.sub(&y.square());
            vec![Some(g.mul(&dy))]
        })
    }

    /// `x` for `x > 0`, `slope * x` otherwise.
    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let s = T::c(slope);
        let mask = self.value().map(|v| if v > T::zero() { T::one() } else { s });
        let value = self.value().zip_map(&mask, |v, m| v * m);
        Var::from_op("leaky_relu", value, vec![self.clone()], move |g| {
            vec![Some(g.mul_const(&mask))]
        })
    }
}
