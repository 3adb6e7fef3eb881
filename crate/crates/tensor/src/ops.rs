//! Differentiable operations on [`Var`].
//!
//! Shape errors inside a graph are programming errors and panic with the offending
//! shapes; model entry points validate user-facing shapes before building graphs.

use std::sync::Arc;

use crate::graph::Var;
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::{broadcast_shape, broadcast_strides, broadcast_walk, broadcast_zip, numel, sum_to, Tensor};

fn bz<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    broadcast_zip(a, b, f).unwrap_or_else(|e| panic!("{e}"))
}

fn t<T: Real>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::from_vec(shape, data).expect("kernel produced a buffer of the wrong size")
}

/// Broadcasts `x` up to `shape`.
pub fn expand<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if x.shape() == shape {
        return x.clone();
    }
    let out = broadcast_shape(x.shape(), shape).unwrap_or_else(|e| panic!("{e}"));
    assert_eq!(out, shape, "cannot expand {:?} to {:?}", x.shape(), shape);
    let s = broadcast_strides(x.shape(), shape);
    let mut data = vec![T::zero(); numel(shape)];
    let src = x.data();
    broadcast_walk(shape, &s, &s, |o, i, _| data[o] = src[i]);
    t(shape, data)
}

impl<'g, T: Real> Var<'g, T> {
    fn unary(self, value: Tensor<T>, back: impl Fn(&Tensor<T>) -> Tensor<T> + 'static) -> Var<'g, T> {
        self.graph.op(value, &[self.id], move |g, _| vec![Some(back(g))])
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = bz(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.op(out, &[self.id, other.id], move |g, need| {
            vec![need[0].then(|| sum_to(g, &sa)), need[1].then(|| sum_to(g, &sb))]
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = bz(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.op(out, &[self.id, other.id], move |g, need| {
            vec![need[0].then(|| sum_to(g, &sa)), need[1].then(|| sum_to(&g.map(|x| -x), &sb))]
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = bz(&a, &b, |x, y| x * y);
        self.graph.op(out, &[self.id, other.id], move |g, need| {
            vec![
                need[0].then(|| sum_to(&bz(g, &b, |x, y| x * y), a.shape())),
                need[1].then(|| sum_to(&bz(g, &a, |x, y| x * y), b.shape())),
            ]
        })
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let out = Arc::new(bz(&a, &b, |x, y| x / y));
        let y = out.clone();
        self.graph.op((*out).clone(), &[self.id, other.id], move |g, need| {
            vec![
                need[0].then(|| sum_to(&bz(g, &b, |x, d| x / d), a.shape())),
                need[1].then(|| {
                    let gy = g.zip_map(&y, |x, q| x * q).expect("same shape");
                    sum_to(&bz(&gy, &b, |x, d| -x / d), b.shape())
                }),
            ]
        })
    }

    /// Multiply by a constant tensor (broadcast allowed).
    pub fn mul_tensor(self, c: &Tensor<T>) -> Var<'g, T> {
        self.mul(self.graph.constant(c.clone()))
    }

    pub fn add_tensor(self, c: &Tensor<T>) -> Var<'g, T> {
        self.add(self.graph.constant(c.clone()))
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::c(c);
        let out = self.value().map(|x| x * c);
        self.unary(out, move |g| g.map(|x| x * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::c(c);
        let out = self.value().map(|x| x + c);
        self.unary(out, |g| g.clone())
    }

    /// `c - x`
    pub fn rsub_scalar(self, c: f64) -> Var<'g, T> {
        self.neg().add_scalar(c)
    }

    pub fn sqr(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.unary(out, move |g| g.zip_map(&x, |d, v| d * (v + v)).expect("same shape"))
    }

    pub fn powf(self, p: f64) -> Var<'g, T> {
        let x = self.value();
        let pt = T::c(p);
        let out = x.map(|v| v.powf(pt));
        let pm1 = T::c(p - 1.0);
        self.unary(out, move |g| g.zip_map(&x, |d, v| d * pt * v.powf(pm1)).expect("same shape"))
    }

    pub fn sqrt(self) -> Var<'g, T> {
        let out = Arc::new(self.value().map(|v| v.sqrt()));
        let y = out.clone();
        self.unary((*out).clone(), move |g| g.zip_map(&y, |d, s| d / (s + s)).expect("same shape"))
    }

    pub fn exp(self) -> Var<'g, T> {
        let out = Arc::new(self.value().map(|v| v.exp()));
        let y = out.clone();
        self.unary((*out).clone(), move |g| g.zip_map(&y, |d, e| d * e).expect("same shape"))
    }

    pub fn ln(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v.ln());
        self.unary(out, move |g| g.zip_map(&x, |d, v| d / v).expect("same shape"))
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let out = Arc::new(self.value().map(sigmoid));
        let y = out.clone();
        self.unary((*out).clone(), move |g| g.zip_map(&y, |d, s| d * s * (T::one() - s)).expect("same shape"))
    }

    pub fn tanh(self) -> Var<'g, T> {
        let out = Arc::new(self.value().map(|v| v.tanh()));
        let y = out.clone();
        self.unary((*out).clone(), move |g| g.zip_map(&y, |d, s| d * (T::one() - s * s)).expect("same shape"))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(softplus);
        self.unary(out, move |g| g.zip_map(&x, |d, v| d * sigmoid(v)).expect("same shape"))
    }

    pub fn relu(self) -> Var<'g, T> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let s = T::c(slope);
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { v * s });
        self.unary(out, move |g| g.zip_map(&x, |d, v| if v > T::zero() { d } else { d * s }).expect("same shape"))
    }

    /// `[m, k] @ [k, n]`
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert!(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul {:?} @ {:?}", a.shape(), b.shape());
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        self.graph.op(t(&[m, n], out), &[self.id, other.id], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
                t(&[m, k], ga)
            });
            let gb = need[1].then(|| {
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), a.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut gb, n as isize, 1);
                t(&[k, n], gb)
            });
            vec![ga, gb]
        })
    }

    /// Transpose of a matrix.
    pub fn t(self) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "t() needs a matrix, got {:?}", x.shape());
        let (r, c) = (x.dim(0), x.dim(1));
        self.unary(transpose(&x), move |g| {
            debug_assert_eq!(g.shape(), &[c, r]);
            transpose(g)
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.unary(out, move |g| g.clone().reshape(&old).expect("same numel"))
    }

    pub fn expand(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let out = expand(&x, shape);
        let old = x.shape().to_vec();
        self.unary(out, move |g| sum_to(g, &old))
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().len().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let full = x.shape().to_vec();
        let mut shape = full.clone();
        for &a in axes {
            shape[a] = 1;
        }
        let out = sum_to(&x, &shape);
        self.unary(out, move |g| expand(g, &full))
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'g, T> {
        let shape = self.value().shape().to_vec();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(1.0 / n.max(1) as f64)
    }

    /// Concatenate along `axis`.
    pub fn cat(parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "cat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        for v in &values {
            assert!(
                v.rank() == base.len() && v.shape()[..axis] == base[..axis] && v.shape()[axis + 1..] == base[axis + 1..],
                "cat along {axis}: {:?} vs {:?}",
                v.shape(),
                base
            );
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let sizes: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let graph = parts[0].graph;
        graph.op(t(&shape, data), &ids, move |g, need| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(need)
                .map(|(&s, &n)| {
                    let start = offset;
                    offset += s;
                    n.then(|| {
                        let mut d = Vec::with_capacity(outer * s * inner);
                        for o in 0..outer {
                            let row = o * total * inner;
                            d.extend_from_slice(&g.data()[row + start * inner..row + (start + s) * inner]);
                        }
                        let mut sh = shape.clone();
                        sh[axis] = s;
                        t(&sh, d)
                    })
                })
                .collect()
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let full = x.shape().to_vec();
        assert!(start + len <= full[axis], "narrow {start}+{len} beyond {:?} axis {axis}", full);
        let outer = numel(&full[..axis]);
        let inner = numel(&full[axis + 1..]);
        let dim = full[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let row = o * dim * inner;
            data.extend_from_slice(&x.data()[row + start * inner..row + (start + len) * inner]);
        }
        let mut shape = full.clone();
        shape[axis] = len;
        self.unary(t(&shape, data), move |g| {
            let mut d = vec![T::zero(); numel(&full)];
            for o in 0..outer {
                let row = o * dim * inner;
                d[row + start * inner..row + (start + len) * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            t(&full, d)
        })
    }

    /// Stride-1 convolution, `self: [n, c, h, w]`, `weight: [o, c, k, k]`.
    pub fn conv2d(self, weight: Var<'g, T>, pad: usize) -> Var<'g, T> {
        let (x, w) = (self.value(), weight.value());
        assert!(x.rank() == 4 && w.rank() == 4, "conv2d {:?} with {:?}", x.shape(), w.shape());
        assert!(x.dim(1) == w.dim(1) && w.dim(2) == w.dim(3), "conv2d {:?} with {:?}", x.shape(), w.shape());
        let (n, o) = (x.dim(0), w.dim(0));
        let geom = ConvGeom { c: x.dim(1), h: x.dim(2), w: x.dim(3), k: w.dim(2), pad };
        let out = kernels::conv2d_forward(x.data(), n, &geom, w.data(), o);
        let shape = [n, o, geom.out_h(), geom.out_w()];
        self.graph.op(t(&shape, out), &[self.id, weight.id], move |g, need| {
            vec![
                need[0].then(|| t(x.shape(), kernels::conv2d_backward_input(g.data(), n, &geom, w.data(), o))),
                need[1].then(|| t(w.shape(), kernels::conv2d_backward_weight(x.data(), g.data(), n, &geom, o))),
            ]
        })
    }

    fn planes(&self) -> (Vec<usize>, usize, usize, usize) {
        let s = self.shape();
        assert_eq!(s.len(), 4, "expected NCHW, got {:?}", s);
        (s.clone(), s[0] * s[1], s[2], s[3])
    }

    pub fn avg_pool2(self) -> Var<'g, T> {
        let (s, p, h, w) = self.planes();
        let out = kernels::avg_pool2(self.value().data(), p, h, w);
        self.unary(t(&[s[0], s[1], h / 2, w / 2], out), move |g| t(&s, kernels::avg_pool2_backward(g.data(), p, h, w)))
    }

    pub fn max_pool2(self) -> Var<'g, T> {
        let (s, p, h, w) = self.planes();
        let (out, arg) = kernels::max_pool2(self.value().data(), p, h, w);
        self.unary(t(&[s[0], s[1], h / 2, w / 2], out), move |g| t(&s, kernels::max_pool2_backward(g.data(), &arg, p, h, w)))
    }

    pub fn upsample2(self) -> Var<'g, T> {
        let (s, p, h, w) = self.planes();
        let out = kernels::upsample2(self.value().data(), p, h, w);
        self.unary(t(&[s[0], s[1], 2 * h, 2 * w], out), move |g| t(&s, kernels::upsample2_backward(g.data(), p, h, w)))
    }
}

fn transpose<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.dim(0), x.dim(1));
    let mut d = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            d[j * r + i] = x.data()[i * c + j];
        }
    }
    t(&[c, r], d)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
