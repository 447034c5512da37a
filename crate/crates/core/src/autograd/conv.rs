use ndarray::{linalg::general_mat_mul, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use super::ops::dims4;
use super::{Real, Var};

/// Stride and zero padding of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

impl Conv2dSpec {
    pub fn same3() -> Self {
        Self { stride: 1, padding: 1 }
    }

    pub fn down3() -> Self {
        Self { stride: 2, padding: 1 }
    }

    pub fn output_size(&self, size: usize, kernel: usize) -> usize {
        (size + 2 * self.padding - kernel) / self.stride + 1
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox·s + kx − p` is in bounds.
fn valid_cols(g: &Geometry, kx: usize) -> (usize, usize) {
    let (s, p) = (g.spec.stride, g.spec.padding);
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if g.w + p > kx { ((g.w + p - kx - 1) / s + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<F: Real>(x: &[F], g: &Geometry, col: &mut [F]) {
    let (k, s, p) = (g.k, g.spec.stride, g.spec.padding as isize);
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        drow.fill(F::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(F::zero());
                    drow[hi..].fill(F::zero());
                    let ix0 = lo * s + kx - g.spec.padding;
                    if s == 1 {
                        drow[lo..hi].copy_from_slice(&srow[ix0..ix0 + hi - lo]);
                    } else {
                        for (d, v) in drow[lo..hi].iter_mut().zip(srow[ix0..].iter().step_by(s)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(col: &[F], g: &Geometry, x: &mut [F]) {
    let (k, s, p) = (g.k, g.spec.stride, g.spec.padding as isize);
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let dst = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * s + kx - g.spec.padding;
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo + lo..oy * g.wo + hi];
                    for (d, &v) in drow[ix0..].iter_mut().step_by(s).zip(srow) {
                        *d += v;
                    }
                }
            }
        }
    }
}

impl<'t, F: Real> Var<'t, F> {
    /// 2-D cross-correlation: `x: (b, c, h, w)`, `weight: (o, c, k, k)`,
    /// optional `bias: (o)`.
    pub fn conv2d(self, weight: Var<'t, F>, bias: Option<Var<'t, F>>, spec: Conv2dSpec) -> Var<'t, F> {
        let x = self.value();
        let w = weight.value();
        let (b, c, h, wd) = dims4(&x);
        let ws = w.shape();
        assert_eq!(ws.len(), 4, "conv weight must be (o, c, k, k)");
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv expects {} input channels, got {c}", ws[1]);
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert!(h + 2 * spec.padding >= k && wd + 2 * spec.padding >= k, "kernel larger than input");
        let geo = Geometry {
            c,
            h,
            w: wd,
            k,
            ho: spec.output_size(h, k),
            wo: spec.output_size(wd, k),
            spec,
        };
        let plane = geo.ho * geo.wo;
        let ckk = c * k * k;
        let xs = x.as_slice().expect("standard layout");
        let w2 = ArrayView2::from_shape((o, ckk), w.as_slice().unwrap()).unwrap();
        let mut out = vec![F::zero(); b * o * plane];
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![F::zero(); ckk * plane] };
        for bi in 0..b {
            let xb = &xs[bi * c * h * wd..(bi + 1) * c * h * wd];
            let colv = if geo.is_pointwise() {
                ArrayView2::from_shape((ckk, plane), xb).unwrap()
            } else {
                im2col(xb, &geo, &mut col);
                ArrayView2::from_shape((ckk, plane), &col[..]).unwrap()
            };
            let mut yb = ArrayViewMut2::from_shape((o, plane), &mut out[bi * o * plane..(bi + 1) * o * plane]).unwrap();
            general_mat_mul(F::one(), &w2, &colv, F::zero(), &mut yb);
        }
        if let Some(bias) = bias {
            let bv = bias.value();
            let bs = bv.as_slice().unwrap();
            assert_eq!(bs.len(), o);
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bval = bs[i % o];
                chunk.iter_mut().for_each(|v| *v += bval);
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[b, o, geo.ho, geo.wo]), out).unwrap();
        let has_bias = bias.is_some();
        let mut parents = vec![self, weight];
        if let Some(bias) = bias {
            parents.push(bias);
        }
        let w_keep = w.clone();
        self.tape.push_op(out, &parents, move |g| {
            let gs = g.as_slice().expect("standard layout");
            let w2 = ArrayView2::from_shape((o, ckk), w_keep.as_slice().unwrap()).unwrap();
            let mut gw = vec![F::zero(); o * ckk];
            let mut gx = vec![F::zero(); b * c * h * wd];
            let mut col = vec![F::zero(); ckk * plane];
            let mut gcol = vec![F::zero(); ckk * plane];
            let xs = x.as_slice().expect("standard layout");
            for bi in 0..b {
                let xb = &xs[bi * c * h * wd..(bi + 1) * c * h * wd];
                let gyb = ArrayView2::from_shape((o, plane), &gs[bi * o * plane..(bi + 1) * o * plane]).unwrap();
                let gxb = &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd];
                if geo.is_pointwise() {
                    let colv = ArrayView2::from_shape((ckk, plane), xb).unwrap();
                    let mut gwv = ArrayViewMut2::from_shape((o, ckk), &mut gw[..]).unwrap();
                    general_mat_mul(F::one(), &gyb, &colv.t(), F::one(), &mut gwv);
                    let mut gxv = ArrayViewMut2::from_shape((ckk, plane), gxb).unwrap();
                    general_mat_mul(F::one(), &w2.t(), &gyb, F::zero(), &mut gxv);
                } else {
                    im2col(xb, &geo, &mut col);
                    let colv = ArrayView2::from_shape((ckk, plane), &col[..]).unwrap();
                    let mut gwv = ArrayViewMut2::from_shape((o, ckk), &mut gw[..]).unwrap();
                    general_mat_mul(F::one(), &gyb, &colv.t(), F::one(), &mut gwv);
                    let mut gcolv = ArrayViewMut2::from_shape((ckk, plane), &mut gcol[..]).unwrap();
                    general_mat_mul(F::one(), &w2.t(), &gyb, F::zero(), &mut gcolv);
                    col2im(&gcol, &geo, gxb);
                }
            }
            let mut grads = vec![
                Some(ArrayD::from_shape_vec(IxDyn(&[b, c, h, wd]), gx).unwrap()),
                Some(ArrayD::from_shape_vec(IxDyn(&[o, c, k, k]), gw).unwrap()),
            ];
            if has_bias {
                let mut gb = vec![F::zero(); o];
                for (i, chunk) in gs.chunks(plane).enumerate() {
                    gb[i % o] += chunk.iter().copied().sum::<F>();
                }
                grads.push(Some(ArrayD::from_shape_vec(IxDyn(&[o]), gb).unwrap()));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_rel_error;
    use super::super::Tape;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation.
    fn naive_conv(x: &ArrayD<f64>, w: &ArrayD<f64>, bias: &[f64], spec: Conv2dSpec) -> ArrayD<f64> {
        let (b, c, h, wd) = dims4(x);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = spec.output_size(h, k);
        let wo = spec.output_size(wd, k);
        ArrayD::from_shape_fn(IxDyn(&[b, o, ho, wo]), |idx| {
            let (bi, oi, oy, ox) = (idx[0], idx[1], idx[2], idx[3]);
            let mut acc = bias[oi];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x[[bi, ci, iy as usize, ix as usize]] * w[[oi, ci, ky, kx]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for ((spec, k), (h, w)) in [
            (Conv2dSpec::same3(), 3),
            (Conv2dSpec::down3(), 3),
            (Conv2dSpec::default(), 1),
            (Conv2dSpec { stride: 1, padding: 0 }, 3),
            (Conv2dSpec { stride: 2, padding: 2 }, 3),
            (Conv2dSpec { stride: 3, padding: 1 }, 3),
        ]
        .into_iter()
        .flat_map(|c| [(c, (6, 6)), (c, (7, 5))])
        {
            let x = rand_array(&mut rng, &[2, 3, h, w]);
            let w = rand_array(&mut rng, &[4, 3, k, k]);
            let bias: Vec<f64> = (0..4).map(|i| i as f64 * 0.1).collect();
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .conv2d(tape.constant(w.clone()), Some(tape.constant(ArrayD::from_shape_vec(IxDyn(&[4]), bias.clone()).unwrap())), spec)
                .value();
            let expect = naive_conv(&x, &w, &bias, spec);
            assert_eq!(y.shape(), expect.shape());
            let diff = (&*y - &expect).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-12, "{spec:?}: {diff}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (spec, k) in [
            (Conv2dSpec::same3(), 3),
            (Conv2dSpec::down3(), 3),
            (Conv2dSpec::default(), 1),
            (Conv2dSpec { stride: 2, padding: 2 }, 3),
        ] {
            let x = rand_array(&mut rng, &[2, 2, 5, 6]);
            let w = rand_array(&mut rng, &[3, 2, k, k]);
            let b = rand_array(&mut rng, &[3]);
            let err = max_rel_error(&[x, w, b], |_, v| v[0].conv2d(v[1], Some(v[2]), spec).sqr().sum_all());
            assert!(err < 1e-4, "{spec:?}: {err}");
        }
    }
}
