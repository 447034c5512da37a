use std::sync::Arc;

use ndarray::{linalg::general_mat_mul, s, Array2, ArrayD, ArrayView2, Axis, IxDyn, Slice};

use super::{Real, Var};

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn unbroadcast<F: Real>(g: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if g.shape() == shape {
        return g;
    }
    let mut g = g;
    let extra = g.ndim() - shape.len();
    for _ in 0..extra {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

/// `op(a) · op(b)` for 2-D views.
pub(crate) fn gemm<F: Real>(a: ArrayView2<'_, F>, ta: bool, b: ArrayView2<'_, F>, tb: bool) -> Array2<F> {
    let a = if ta { a.reversed_axes() } else { a };
    let b = if tb { b.reversed_axes() } else { b };
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), &a, &b, F::zero(), &mut out);
    out
}

fn as2<F: Real>(x: &ArrayD<F>) -> ArrayView2<'_, F> {
    x.view().into_dimensionality().expect("2-D array")
}

/// Batched or plain matrix product with optional transposes of the last two axes.
fn matmul_impl<F: Real>(a: &ArrayD<F>, ta: bool, b: &ArrayD<F>, tb: bool) -> ArrayD<F> {
    match (a.ndim(), b.ndim()) {
        (2, 2) => gemm(as2(a), ta, as2(b), tb).into_dyn(),
        (3, 3) => {
            let batch = a.shape()[0];
            assert_eq!(batch, b.shape()[0], "batched matmul batch mismatch");
            let outs: Vec<Array2<F>> = (0..batch)
                .map(|i| {
                    let ai = a.index_axis(Axis(0), i).into_dimensionality().unwrap();
                    let bi = b.index_axis(Axis(0), i).into_dimensionality().unwrap();
                    gemm(ai, ta, bi, tb)
                })
                .collect();
            let (m, n) = outs[0].dim();
            let mut out = ArrayD::zeros(IxDyn(&[batch, m, n]));
            for (i, o) in outs.into_iter().enumerate() {
                out.index_axis_mut(Axis(0), i).assign(&o);
            }
            out
        }
        (na, nb) => panic!("matmul expects 2-D or 3-D operands, got {na}-D and {nb}-D"),
    }
}

fn check_matmul_dims(a: &[usize], ta: bool, b: &[usize], tb: bool) {
    let n = a.len();
    let ka = if ta { a[n - 2] } else { a[n - 1] };
    let kb = if tb { b[n - 1] } else { b[n - 2] };
    assert_eq!(ka, kb, "matmul inner dimension mismatch: {a:?} (t={ta}) x {b:?} (t={tb})");
}

impl<'t, F: Real> Var<'t, F> {
    fn binary<Fw, Bw>(self, other: Var<'t, F>, forward: Fw, backward: Bw) -> Var<'t, F>
    where
        Fw: Fn(&ArrayD<F>, &ArrayD<F>) -> ArrayD<F>,
        Bw: Fn(&ArrayD<F>, &ArrayD<F>, &ArrayD<F>) -> (ArrayD<F>, ArrayD<F>) + 'static,
    {
        let a = self.value();
        let b = other.value();
        let out = forward(&a, &b);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.push_op(out, &[self, other], move |g| {
            let (ga, gb) = backward(g, &a, &b);
            vec![Some(unbroadcast(ga, &sa)), Some(unbroadcast(gb, &sb))]
        })
    }

    /// Element-wise sum with broadcasting.
    pub fn add(self, other: Var<'t, F>) -> Var<'t, F> {
        self.binary(other, |a, b| a + b, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(self, other: Var<'t, F>) -> Var<'t, F> {
        self.binary(other, |a, b| a - b, |g, _, _| (g.clone(), g.mapv(|v| -v)))
    }

    pub fn mul(self, other: Var<'t, F>) -> Var<'t, F> {
        self.binary(other, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn div(self, other: Var<'t, F>) -> Var<'t, F> {
        self.binary(
            other,
            |a, b| a / b,
            |g, a, b| {
                let ga = g / b;
                let gb = -(&ga * a) / b;
                (ga, gb)
            },
        )
    }

    fn unary<Fw, Dv>(self, forward: Fw, derivative: Dv) -> Var<'t, F>
    where
        Fw: Fn(F) -> F,
        Dv: Fn(F, F) -> F + 'static,
    {
        let x = self.value();
        let xs = x.as_slice().expect("standard layout");
        let y = ArrayD::from_shape_vec(x.raw_dim(), xs.iter().map(|&v| forward(v)).collect()).unwrap();
        let y_keep = if self.requires_grad() { Some(y.clone()) } else { None };
        self.tape.push_op(y, &[self], move |g| {
            let y = y_keep.as_ref().expect("recorded output");
            let xs = x.as_slice().expect("standard layout");
            let d = g
                .as_slice()
                .expect("standard layout")
                .iter()
                .zip(xs.iter().zip(y.as_slice().unwrap()))
                .map(|(&gv, (&xv, &yv))| gv * derivative(xv, yv))
                .collect();
            vec![Some(ArrayD::from_shape_vec(x.raw_dim(), d).unwrap())]
        })
    }

    pub fn scale(self, c: F) -> Var<'t, F> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: F) -> Var<'t, F> {
        self.unary(move |x| x + c, |_, _| F::one())
    }

    pub fn neg(self) -> Var<'t, F> {
        self.scale(-F::one())
    }

    pub fn sqr(self) -> Var<'t, F> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(self) -> Var<'t, F> {
        self.unary(|x| x.sqrt(), |_, y| F::of(0.5) / y)
    }

    pub fn exp(self) -> Var<'t, F> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        self.unary(sigmoid, |_, y| y * (F::one() - y))
    }

    /// Swish / SiLU: `x * sigmoid(x)`. The sigmoid is kept for the backward pass.
    pub fn silu(self) -> Var<'t, F> {
        let x = self.value();
        let xs = x.as_slice().expect("standard layout");
        let sig: Vec<F> = xs.iter().map(|&v| sigmoid(v)).collect();
        let y = ArrayD::from_shape_vec(x.raw_dim(), xs.iter().zip(&sig).map(|(&v, &s)| v * s).collect()).unwrap();
        let sig = if self.requires_grad() { sig } else { Vec::new() };
        self.tape.push_op(y, &[self], move |g| {
            let xs = x.as_slice().expect("standard layout");
            let d = g
                .as_slice()
                .expect("standard layout")
                .iter()
                .zip(xs.iter().zip(&sig))
                .map(|(&gv, (&xv, &s))| gv * (s + xv * s * (F::one() - s)))
                .collect();
            vec![Some(ArrayD::from_shape_vec(x.raw_dim(), d).unwrap())]
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(self, lo: F, hi: F) -> Var<'t, F> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x < lo || x > hi { F::zero() } else { F::one() },
        )
    }

    pub fn sum_all(self) -> Var<'t, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let total = x.sum();
        self.tape.push_op(ArrayD::from_elem(IxDyn(&[]), total), &[self], move |g| {
            let gv = *g.iter().next().unwrap();
            vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
        })
    }

    pub fn mean_all(self) -> Var<'t, F> {
        let n = F::of(self.value().len() as f64);
        self.sum_all().scale(F::one() / n)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis_keep(self, axis: usize) -> Var<'t, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = x.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.tape.push_op(out, &[self], move |g| {
            let full = g.broadcast(IxDyn(&shape)).expect("broadcast back").to_owned();
            vec![Some(full)]
        })
    }

    /// `op(self) · op(other)` on the last two axes; both 2-D or both 3-D.
    pub fn matmul_t(self, other: Var<'t, F>, ta: bool, tb: bool) -> Var<'t, F> {
        let a = self.value();
        let b = other.value();
        check_matmul_dims(a.shape(), ta, b.shape(), tb);
        let out = matmul_impl(&a, ta, &b, tb);
        self.tape.push_op(out, &[self, other], move |g| {
            let (ga, gb) = match (ta, tb) {
                (false, false) => (matmul_impl(g, false, &b, true), matmul_impl(&a, true, g, false)),
                (false, true) => (matmul_impl(g, false, &b, false), matmul_impl(g, true, &a, false)),
                (true, false) => (matmul_impl(&b, false, g, true), matmul_impl(&a, false, g, false)),
                (true, true) => (matmul_impl(&b, true, g, true), matmul_impl(g, true, &a, true)),
            };
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn matmul(self, other: Var<'t, F>) -> Var<'t, F> {
        self.matmul_t(other, false, false)
    }

    /// `x · wᵀ + b` for `x: (n, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(self, w: Var<'t, F>, b: Option<Var<'t, F>>) -> Var<'t, F> {
        let y = self.matmul_t(w, false, true);
        match b {
            Some(b) => y.add(b),
            None => y,
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, F> {
        let x = self.value();
        let old = x.shape().to_vec();
        assert_eq!(
            old.iter().product::<usize>(),
            shape.iter().product::<usize>(),
            "reshape {old:?} -> {shape:?}"
        );
        let out = x.as_ref().clone().into_shape_with_order(IxDyn(shape)).expect("standard layout");
        self.tape.push_op(out, &[self], move |g| {
            vec![Some(g.clone().into_shape_with_order(IxDyn(&old)).expect("standard layout"))]
        })
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t, F> {
        let x = self.value();
        let out = x.view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.push_op(out, &[self], move |g| {
            vec![Some(g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned())]
        })
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = x
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        self.tape.push_op(out, &[self], move |g| {
            let mut full = ArrayD::zeros(IxDyn(&shape));
            full.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g);
            vec![Some(full)]
        })
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[Var<'t, F>], axis: usize) -> Var<'t, F> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes agree");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        parts[0].tape.push_op(out, parts, move |g| {
            let mut offset = 0;
            sizes
                .iter()
                .map(|&n| {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(offset..offset + n))
                        .as_standard_layout()
                        .into_owned();
                    offset += n;
                    Some(piece)
                })
                .collect()
        })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t, F> {
        let x = self.value();
        let last = x.ndim() - 1;
        let mut y = x.as_ref().clone();
        for mut lane in y.lanes_mut(Axis(last)) {
            let m = lane.fold(F::neg_infinity(), |a, &b| a.max(b));
            lane.mapv_inplace(|v| (v - m).exp());
            let total = lane.sum();
            lane.mapv_inplace(|v| v / total);
        }
        let y_keep = Arc::new(y.clone());
        self.tape.push_op(y, &[self], move |g| {
            let mut out = g.clone();
            for (mut og, yl) in out.lanes_mut(Axis(last)).into_iter().zip(y_keep.lanes(Axis(last))) {
                let dot: F = og.iter().zip(yl.iter()).map(|(&a, &b)| a * b).sum();
                og.zip_mut_with(&yl, |o, &yv| *o = yv * (*o - dot));
            }
            vec![Some(out)]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(self) -> Var<'t, F> {
        let x = self.value();
        let last = x.ndim() - 1;
        let mut y = x.as_ref().clone();
        for mut lane in y.lanes_mut(Axis(last)) {
            let m = lane.fold(F::neg_infinity(), |a, &b| a.max(b));
            let lse = m + lane.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            lane.mapv_inplace(|v| v - lse);
        }
        let y_keep = Arc::new(y.clone());
        self.tape.push_op(y, &[self], move |g| {
            let mut out = g.clone();
            for (mut og, yl) in out.lanes_mut(Axis(last)).into_iter().zip(y_keep.lanes(Axis(last))) {
                let total: F = og.sum();
                og.zip_mut_with(&yl, |o, &yv| *o = *o - yv.exp() * total);
            }
            vec![Some(out)]
        })
    }

    /// Group normalisation of `(b, c, h, w)` with per-channel affine.
    pub fn group_norm(self, gamma: Var<'t, F>, beta: Var<'t, F>, groups: usize, eps: f64) -> Var<'t, F> {
        let x = self.value();
        let (b, c, h, w) = dims4(&x);
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let cg = c / groups;
        let n = cg * h * w;
        let xs = x.as_slice().expect("standard layout");
        let gam = gamma.value();
        let bet = beta.value();
        let gs = gam.as_slice().unwrap();
        let bs = bet.as_slice().unwrap();
        assert_eq!(gs.len(), c);
        let mut xhat = vec![F::zero(); xs.len()];
        let mut inv_std = vec![F::zero(); b * groups];
        let mut out = vec![F::zero(); xs.len()];
        let nf = F::of(n as f64);
        for bg in 0..b * groups {
            let chunk = &xs[bg * n..(bg + 1) * n];
            let mean = chunk.iter().copied().sum::<F>() / nf;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let is = F::one() / (var + F::of(eps)).sqrt();
            inv_std[bg] = is;
            let g0 = bg % groups;
            for (j, &v) in chunk.iter().enumerate() {
                let ch = g0 * cg + j / (h * w);
                let xh = (v - mean) * is;
                xhat[bg * n + j] = xh;
                out[bg * n + j] = xh * gs[ch] + bs[ch];
            }
        }
        let shape = x.shape().to_vec();
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let gam_keep = Arc::clone(&gam);
        self.tape.push_op(out, &[self, gamma, beta], move |g| {
            let gsl = g.as_slice().expect("standard layout");
            let gs = gam_keep.as_slice().unwrap();
            let mut dgamma = vec![F::zero(); c];
            let mut dbeta = vec![F::zero(); c];
            let mut dx = vec![F::zero(); gsl.len()];
            for bg in 0..b * groups {
                let g0 = bg % groups;
                let mut sum_d = F::zero();
                let mut sum_dx = F::zero();
                for j in 0..n {
                    let ch = g0 * cg + j / (h * w);
                    let gv = gsl[bg * n + j];
                    let xh = xhat[bg * n + j];
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                    let d = gv * gs[ch];
                    sum_d += d;
                    sum_dx += d * xh;
                }
                let is = inv_std[bg];
                for j in 0..n {
                    let ch = g0 * cg + j / (h * w);
                    let d = gsl[bg * n + j] * gs[ch];
                    let xh = xhat[bg * n + j];
                    dx[bg * n + j] = is * (d - sum_d / nf - xh * sum_dx / nf);
                }
            }
            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap()),
            ]
        })
    }

    /// Nearest-neighbour 2x upsampling of `(b, c, h, w)`.
    pub fn upsample_nearest2(self) -> Var<'t, F> {
        let x = self.value();
        let (b, c, h, w) = dims4(&x);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        for dy in 0..2 {
            for dx in 0..2 {
                out.slice_mut(s![.., .., dy..;2, dx..;2]).assign(&*x);
            }
        }
        self.tape.push_op(out, &[self], move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
            for dy in 0..2 {
                for dx in 0..2 {
                    gx += &g.slice(s![.., .., dy..;2, dx..;2]);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Non-overlapping `k x k` average pooling of `(b, c, h, w)`.
    pub fn avg_pool(self, k: usize) -> Var<'t, F> {
        if k == 1 {
            return self;
        }
        let x = self.value();
        let (b, c, h, w) = dims4(&x);
        assert!(h % k == 0 && w % k == 0, "avg_pool({k}) on {h}x{w}");
        let (ho, wo) = (h / k, w / k);
        let inv = F::one() / F::of((k * k) as f64);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, ho, wo]));
        for dy in 0..k {
            for dx in 0..k {
                out += &x.slice(s![.., .., dy..;k, dx..;k]);
            }
        }
        out.mapv_inplace(|v| v * inv);
        self.tape.push_op(out, &[self], move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
            let gs = g.mapv(|v| v * inv);
            for dy in 0..k {
                for dx in 0..k {
                    gx.slice_mut(s![.., .., dy..;k, dx..;k]).assign(&gs);
                }
            }
            vec![Some(gx)]
        })
    }
}

pub(crate) fn dims4<F>(x: &ArrayD<F>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected (b, c, h, w), got {s:?}");
    (s[0], s[1], s[2], s[3])
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

macro_rules! var_binop {
    ($tr:ident, $m:ident) => {
        impl<'t, F: Real> std::ops::$tr for Var<'t, F> {
            type Output = Var<'t, F>;
            fn $m(self, rhs: Var<'t, F>) -> Var<'t, F> {
                Var::$m(self, rhs)
            }
        }
    };
}
var_binop!(Add, add);
var_binop!(Sub, sub);
var_binop!(Mul, mul);
var_binop!(Div, div);
