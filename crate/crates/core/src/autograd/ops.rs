use std::sync::Arc;

use ndarray::{ArrayD, Axis, IxDyn, Slice, Zip};

use super::{Graph, Real, Tensor, Var};

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn reduce_to_shape<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut r = g.clone();
    while r.ndim() > shape.len() {
        r = r.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && r.shape()[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    r
}

fn broadcast_binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        Zip::from(&mut out).and(b).for_each(|o, &bv| *o = f(*o, bv));
        return out;
    }
    let nd = a.ndim().max(b.ndim());
    let mut shape = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.ndim() >= nd {
            a.shape()[i + a.ndim() - nd]
        } else {
            1
        };
        let db = if i + b.ndim() >= nd {
            b.shape()[i + b.ndim() - nd]
        } else {
            1
        };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        );
        shape[i] = da.max(db);
    }
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn unary<'g, T: Real>(
    x: Var<'g, T>,
    f: impl Fn(T) -> T,
    // derivative given (input, output)
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'g, T> {
    let xv = x.value();
    let out = xv.mapv(f);
    let outv = Arc::new(out.clone());
    x.graph.op(out, &[x], move |g, _| {
        let mut d = g.clone();
        Zip::from(&mut d)
            .and(&*xv)
            .and(&*outv)
            .for_each(|d, &xi, &yi| *d = *d * df(xi, yi));
        vec![Some(d)]
    })
}

impl<'g, T: Real> Var<'g, T> {
    pub fn add(self, o: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), o.value());
        let out = broadcast_binary(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.op(out, &[self, o], move |g, need| {
            vec![
                need[0].then(|| reduce_to_shape(g, &sa)),
                need[1].then(|| reduce_to_shape(g, &sb)),
            ]
        })
    }

    pub fn sub(self, o: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), o.value());
        let out = broadcast_binary(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.op(out, &[self, o], move |g, need| {
            vec![
                need[0].then(|| reduce_to_shape(g, &sa)),
                need[1].then(|| reduce_to_shape(&g.mapv(|v| -v), &sb)),
            ]
        })
    }

    pub fn mul(self, o: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), o.value());
        let out = broadcast_binary(&a, &b, |x, y| x * y);
        self.graph.op(out, &[self, o], move |g, need| {
            vec![
                need[0].then(|| reduce_to_shape(&broadcast_binary(g, &b, |x, y| x * y), a.shape())),
                need[1].then(|| reduce_to_shape(&broadcast_binary(g, &a, |x, y| x * y), b.shape())),
            ]
        })
    }

    pub fn div(self, o: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), o.value());
        let out = broadcast_binary(&a, &b, |x, y| x / y);
        let outv = Arc::new(out.clone());
        self.graph.op(out, &[self, o], move |g, need| {
            vec![
                need[0].then(|| reduce_to_shape(&broadcast_binary(g, &b, |x, y| x / y), a.shape())),
                need[1].then(|| {
                    // d(a/b)/db = -(a/b)/b
                    let q = broadcast_binary(&outv, &b, |x, y| -x / y);
                    reduce_to_shape(&(g * &q), b.shape())
                }),
            ]
        })
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let out = self.value().mapv(|v| v * c);
        self.graph.op(out, &[self], move |g, _| vec![Some(g.mapv(|v| v * c))])
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        let out = self.value().mapv(|v| v + c);
        self.graph.op(out, &[self], move |g, _| vec![Some(g.clone())])
    }

    pub fn square(self) -> Var<'g, T> {
        let two = T::lit(2.0);
        unary(self, |x| x * x, move |x, _| two * x)
    }

    /// |x| with derivative sign(x) (0 at the origin).
    pub fn abs(self) -> Var<'g, T> {
        unary(
            self,
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sqrt(self) -> Var<'g, T> {
        let half = T::lit(0.5);
        unary(self, |x| x.sqrt(), move |_, y| half / y)
    }

    pub fn tanh(self) -> Var<'g, T> {
        unary(self, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        unary(self, |x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    pub fn relu(self) -> Var<'g, T> {
        unary(
            self,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        unary(
            self,
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let v = self.value();
        let shape = v.raw_dim();
        let out = ArrayD::from_elem(IxDyn(&[]), v.sum());
        self.graph.op(out, &[self], move |g, _| {
            let gv = *g.iter().next().unwrap();
            vec![Some(ArrayD::from_elem(shape.clone(), gv))]
        })
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum_all().scale(T::one() / T::lit(n as f64))
    }

    /// Sum over one axis; `keep` retains it with length one.
    pub fn sum_axis(self, axis: usize, keep: bool) -> Var<'g, T> {
        let v = self.value();
        let in_shape = v.raw_dim();
        let mut out = v.sum_axis(Axis(axis));
        if keep {
            out = out.insert_axis(Axis(axis));
        }
        self.graph.op(out, &[self], move |g, _| {
            let g = if keep {
                g.clone()
            } else {
                g.clone().insert_axis(Axis(axis))
            };
            let b = g.broadcast(in_shape.clone()).expect("sum_axis grad").to_owned();
            vec![Some(b)]
        })
    }

    pub fn mean_axis(self, axis: usize, keep: bool) -> Var<'g, T> {
        let n = self.shape()[axis];
        self.sum_axis(axis, keep).scale(T::one() / T::lit(n as f64))
    }

    /// Sums all axes but the first: `(N, ...) -> (N,)`.
    pub fn sum_per_sample(self) -> Var<'g, T> {
        let n = self.shape()[0];
        self.reshape(&[n, usize::MAX]).sum_axis(1, false)
    }

    /// Mean over all axes but the first: `(N, ...) -> (N,)`.
    pub fn mean_per_sample(self) -> Var<'g, T> {
        let s = self.shape();
        let per: usize = s[1..].iter().product();
        self.sum_per_sample().scale(T::one() / T::lit(per as f64))
    }

    /// Reshape; a single `usize::MAX` entry is inferred.
    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let v = self.value();
        let total = v.len();
        let mut shape = shape.to_vec();
        if let Some(pos) = shape.iter().position(|&d| d == usize::MAX) {
            let known: usize = shape.iter().filter(|&&d| d != usize::MAX).product();
            shape[pos] = total / known.max(1);
        }
        assert_eq!(
            shape.iter().product::<usize>(),
            total,
            "reshape {:?} -> {:?}",
            v.shape(),
            shape
        );
        let in_shape = v.shape().to_vec();
        let out = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&shape))
            .expect("reshape");
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("reshape grad"),
            )]
        })
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice_axis(self, axis: usize, start: usize, end: usize) -> Var<'g, T> {
        let v = self.value();
        let in_shape = v.raw_dim();
        let out = v
            .slice_axis(Axis(axis), Slice::from(start..end))
            .as_standard_layout()
            .into_owned();
        self.graph.op(out, &[self], move |g, _| {
            let mut full = ArrayD::zeros(in_shape.clone());
            full.slice_axis_mut(Axis(axis), Slice::from(start..end)).assign(g);
            vec![Some(full)]
        })
    }

    /// Element-wise product with a constant tensor (broadcasting).
    pub fn mul_const(self, c: &Tensor<T>) -> Var<'g, T> {
        let k = self.graph.constant(c.clone());
        self.mul(k)
    }
}

impl<T: Real> Graph<T> {
    /// Concatenates along `axis`.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        let vals: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        self.op(out, parts, move |g, need| {
            let mut start = 0;
            sizes
                .iter()
                .zip(need)
                .map(|(&len, &n)| {
                    let s = start;
                    start += len;
                    n.then(|| {
                        g.slice_axis(Axis(axis), Slice::from(s..s + len))
                            .as_standard_layout()
                            .into_owned()
                    })
                })
                .collect()
        })
    }

    /// Sum of several same-shape terms.
    pub fn sum_of<'g>(&'g self, terms: &[Var<'g, T>]) -> Var<'g, T> {
        let mut it = terms.iter();
        let first = *it.next().expect("sum_of needs at least one term");
        it.fold(first, |acc, &t| acc.add(t))
    }
}

macro_rules! bin_op {
    ($tr:ident, $m:ident) => {
        impl<'g, T: Real> std::ops::$tr for Var<'g, T> {
            type Output = Var<'g, T>;
            fn $m(self, rhs: Var<'g, T>) -> Var<'g, T> {
                Var::$m(self, rhs)
            }
        }
    };
}
bin_op!(Add, add);
bin_op!(Sub, sub);
bin_op!(Mul, mul);
bin_op!(Div, div);

impl<'g, T: Real> std::ops::Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Var<'g, T> {
        Var::neg(self)
    }
}
