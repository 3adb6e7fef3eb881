//! Raw NCHW kernels. Shapes are validated by the callers in `ops`.

use crate::par;
use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &mut cols[((c * g.k + ki) * g.k + kj) * p..][..p];
                for y in 0..oh {
                    let sy = y as isize + ki as isize - g.pad as isize;
                    let dst = &mut row[y * ow..(y + 1) * ow];
                    if sy < 0 || sy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    for (x_out, d) in dst.iter_mut().enumerate() {
                        let sx = x_out as isize + kj as isize - g.pad as isize;
                        *d = if sx < 0 || sx >= g.w as isize { T::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &cols[((c * g.k + ki) * g.k + kj) * p..][..p];
                for y in 0..oh {
                    let sy = y as isize + ki as isize - g.pad as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    for (x_out, &v) in row[y * ow..(y + 1) * ow].iter().enumerate() {
                        let sx = x_out as isize + kj as isize - g.pad as isize;
                        if sx >= 0 && sx < g.w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `x: [n, c, h, w]`, `weight: [o, c, k, k]` -> `[n, o, oh, ow]`, stride 1.
pub fn conv2d_forward<T: Real>(x: &[T], n: usize, g: &ConvGeom, weight: &[T], o: usize) -> Vec<T> {
    let p = g.out_h() * g.out_w();
    let in_stride = g.c * g.h * g.w;
    let rows = g.rows();
    let mut out = vec![T::zero(); n * o * p];
    if n == 0 {
        return out;
    }
    par::for_each_chunk(&mut out, o * p, |i, dst| {
        let xs = &x[i * in_stride..(i + 1) * in_stride];
        if g.is_pointwise() {
            T::gemm(o, rows, p, T::one(), weight, rows as isize, 1, xs, p as isize, 1, T::zero(), dst, p as isize, 1);
        } else {
            let mut cols = vec![T::zero(); rows * p];
            im2col(xs, g, &mut cols);
            T::gemm(o, rows, p, T::one(), weight, rows as isize, 1, &cols, p as isize, 1, T::zero(), dst, p as isize, 1);
        }
    });
    out
}

/// Gradient of the input: `dy: [n, o, oh, ow]` -> `[n, c, h, w]`.
pub fn conv2d_backward_input<T: Real>(dy: &[T], n: usize, g: &ConvGeom, weight: &[T], o: usize) -> Vec<T> {
    let p = g.out_h() * g.out_w();
    let in_stride = g.c * g.h * g.w;
    let rows = g.rows();
    let mut dx = vec![T::zero(); n * in_stride];
    if n == 0 {
        return dx;
    }
    par::for_each_chunk(&mut dx, in_stride, |i, dst| {
        let dys = &dy[i * o * p..(i + 1) * o * p];
        // weight^T: [rows, o]
        if g.is_pointwise() {
            T::gemm(rows, o, p, T::one(), weight, 1, rows as isize, dys, p as isize, 1, T::zero(), dst, p as isize, 1);
        } else {
            let mut cols = vec![T::zero(); rows * p];
            T::gemm(rows, o, p, T::one(), weight, 1, rows as isize, dys, p as isize, 1, T::zero(), &mut cols, p as isize, 1);
            col2im(&cols, g, dst);
        }
    });
    dx
}

/// Gradient of the weight, summed over the batch in sample order.
pub fn conv2d_backward_weight<T: Real>(x: &[T], dy: &[T], n: usize, g: &ConvGeom, o: usize) -> Vec<T> {
    let p = g.out_h() * g.out_w();
    let in_stride = g.c * g.h * g.w;
    let rows = g.rows();
    let partials = par::map_range(n, |i| {
        let xs = &x[i * in_stride..(i + 1) * in_stride];
        let dys = &dy[i * o * p..(i + 1) * o * p];
        let mut dw = vec![T::zero(); o * rows];
        if g.is_pointwise() {
            T::gemm(o, p, rows, T::one(), dys, p as isize, 1, xs, 1, p as isize, T::zero(), &mut dw, rows as isize, 1);
        } else {
            let mut cols = vec![T::zero(); rows * p];
            im2col(xs, g, &mut cols);
            T::gemm(o, p, rows, T::one(), dys, p as isize, 1, &cols, 1, p as isize, T::zero(), &mut dw, rows as isize, 1);
        }
        dw
    });
    let mut total = vec![T::zero(); o * rows];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// 2x2 average pooling with stride 2 over `[planes, h, w]`.
pub fn avg_pool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let q = T::c(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, |pl, dst| {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let a = src[2 * y * w + 2 * xo] + src[2 * y * w + 2 * xo + 1];
                let b = src[(2 * y + 1) * w + 2 * xo] + src[(2 * y + 1) * w + 2 * xo + 1];
                dst[y * ow + xo] = (a + b) * q;
            }
        }
    });
    out
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let q = T::c(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    par::for_each_chunk(&mut dx, h * w, |pl, dst| {
        let src = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * ow + x / 2] * q;
            }
        }
    });
    dx
}

/// 2x2 max pooling; also returns the flat argmax index (within the plane) of each output.
pub fn max_pool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    par::for_each_chunk2(&mut out, oh * ow, &mut arg, oh * ow, |pl, dst, am| {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * y + dy) * w + 2 * xo + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[y * ow + xo] = src[best];
                am[y * ow + xo] = best as u32;
            }
        }
    });
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(dy: &[T], arg: &[u32], planes: usize, h: usize, w: usize) -> Vec<T> {
    let q = (h / 2) * (w / 2);
    let mut dx = vec![T::zero(); planes * h * w];
    par::for_each_chunk(&mut dx, h * w, |pl, dst| {
        for j in 0..q {
            dst[arg[pl * q + j] as usize] += dy[pl * q + j];
        }
    });
    dx
}

/// Nearest-neighbour 2x upsampling over `[planes, h, w]`.
pub fn upsample2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, |pl, dst| {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                dst[y * ow + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    });
    out
}

pub fn upsample2_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ow = 2 * w;
    let mut dx = vec![T::zero(); planes * h * w];
    par::for_each_chunk(&mut dx, h * w, |pl, dst| {
        let src = &dy[pl * 4 * h * w..(pl + 1) * 4 * h * w];
        for y in 0..h {
            for x in 0..w {
                let a = src[2 * y * ow + 2 * x] + src[2 * y * ow + 2 * x + 1];
                let b = src[(2 * y + 1) * ow + 2 * x] + src[(2 * y + 1) * ow + 2 * x + 1];
                dst[y * w + x] = a + b;
            }
        }
    });
    dx
}
