//! Adaptive-weight guidance: blends a KOA grade distribution `p` and an
//! intensity map `i` into one conditioning plane `ỹ_pi`, plus the sinusoidal
//! depth embedding.
//!
//! Pipeline, per sample:
//!
//! ```text
//! p_map      = reshape(p · proj)                       (5 -> h·w lift)
//! G_x        = μ_x · sqrt(Σ x² + κ)                    x ∈ {p_map, i_map}
//! Ĝ_x        = G_x / (G_p + G_i + ε)
//! x̃          = x · (1 + sigmoid(ν_x·Ĝ_x + o_x))
//! λ          = softmax_rows((p_map W_pᵀ)(i_map W_iᵀ)ᵀ / sqrt(p_k))   (h x h)
//! ỹ_pi       = λ · (p̃ + ĩ)                             (h x w)
//! ```
//!
//! Rows of a map are attention tokens with `w` features, so `λ` mixes rows of
//! the modulated sum and every output row is a convex combination of them.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, ParamId, ParamStore};

/// Stabiliser inside the gain square root.
pub const KAPPA: f64 = 1e-5;
/// Stabiliser in the gain normalisation denominator.
pub const EPS_STAB: f64 = 1e-8;
pub const NUM_GRADES: usize = 5;

/// Probabilities of the five KOA grades G-0 … G-4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KoaDistribution {
    probs: [f64; NUM_GRADES],
}

impl KoaDistribution {
    pub fn new(probs: [f64; NUM_GRADES]) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Domain(format!("grade probabilities outside [0,1]: {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("grade probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform() -> Self {
        Self {
            probs: [1.0 / NUM_GRADES as f64; NUM_GRADES],
        }
    }

    /// One-hot at `grade` with `smoothing` mass spread evenly over all grades.
    pub fn smoothed_one_hot(grade: usize, smoothing: f64) -> Result<Self> {
        if grade >= NUM_GRADES {
            return Err(Error::Domain(format!("grade {grade} outside 0..=4")));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Domain(format!("label smoothing {smoothing} outside [0,1)")));
        }
        let mut probs = [smoothing / NUM_GRADES as f64; NUM_GRADES];
        probs[grade] += 1.0 - smoothing;
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64; NUM_GRADES] {
        &self.probs
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }
}

/// Radiograph intensities at guidance resolution, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMap {
    values: Array2<f32>,
}

impl IntensityMap {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-6) {
            return Err(Error::Domain("intensity map must be finite and within [-1, 1]".into()));
        }
        Ok(Self { values })
    }

    /// Area-averages `image` down to `height x width`.
    pub fn from_image(image: &Array2<f32>, height: usize, width: usize) -> Result<Self> {
        Self::new(area_downsample(image, height, width)?)
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }
}

/// Block-mean downsampling by an integer factor.
pub fn area_downsample(image: &Array2<f32>, height: usize, width: usize) -> Result<Array2<f32>> {
    let (h, w) = image.dim();
    if height == 0 || width == 0 || h % height != 0 || w % width != 0 {
        return Err(Error::Domain(format!(
            "cannot area-average {h}x{w} down to {height}x{width}"
        )));
    }
    let (fy, fx) = (h / height, w / width);
    let inv = 1.0 / (fy * fx) as f64;
    Ok(Array2::from_shape_fn((height, width), |(y, x)| {
        let block = image.slice(ndarray::s![y * fy..(y + 1) * fy, x * fx..(x + 1) * fx]);
        (block.iter().map(|&v| v as f64).sum::<f64>() * inv) as f32
    }))
}

/// Conditioning signals for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceBundle {
    pub p_map: Array2<f64>,
    pub i_map: Array2<f64>,
    /// Normalised target depth `d / (S − 1)`.
    pub depth: f64,
    pub y_combined: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub height: usize,
    pub width: usize,
    /// Projection dimension `p_k` of `W_p`, `W_i`.
    pub attn_dim: usize,
}

/// `μ · sqrt(Σ map² + κ)` per sample; `map: (b, h, w)` → `(b, 1)`.
pub fn gain<'t, F: Real>(map: Var<'t, F>, mu: Var<'t, F>, kappa: f64) -> Var<'t, F> {
    let s = map.shape();
    map.reshape(&[s[0], s[1] * s[2]])
        .sqr()
        .sum_axis_keep(1)
        .add_scalar(F::of(kappa))
        .sqrt()
        .mul(mu)
}

/// `(G_p, G_i) / (G_p + G_i + ε)`.
pub fn normalize_gains<'t, F: Real>(g_p: Var<'t, F>, g_i: Var<'t, F>, eps: f64) -> (Var<'t, F>, Var<'t, F>) {
    let denom = (g_p + g_i).add_scalar(F::of(eps));
    (g_p / denom, g_i / denom)
}

/// `map · (1 + sigmoid(ν·Ĝ + o))`; `map: (b, h, w)`, `g_hat: (b, 1)`.
pub fn modulate<'t, F: Real>(map: Var<'t, F>, g_hat: Var<'t, F>, nu: Var<'t, F>, o: Var<'t, F>) -> Var<'t, F> {
    let b = g_hat.shape()[0];
    let multiplier = (g_hat * nu + o).sigmoid().add_scalar(F::one()).reshape(&[b, 1, 1]);
    map * multiplier
}

/// Row-softmax of `(p_map W_pᵀ)(i_map W_iᵀ)ᵀ / sqrt(p_k)`; maps are `(b, h, w)`,
/// projections `(p_k, w)`, result `(b, h, h)`.
pub fn joint_weight<'t, F: Real>(
    p_map: Var<'t, F>,
    i_map: Var<'t, F>,
    w_p: Var<'t, F>,
    w_i: Var<'t, F>,
) -> Result<Var<'t, F>> {
    let (ps, is) = (p_map.shape(), i_map.shape());
    let (wps, wis) = (w_p.shape(), w_i.shape());
    if ps != is || wps != wis || wps.len() != 2 || wps[1] != ps[2] {
        return Err(Error::ShapeMismatch {
            expected: vec![ps[0], ps[1], ps[2]],
            got: [is.clone(), wps, wis].concat(),
        });
    }
    let (b, h, w) = (ps[0], ps[1], ps[2]);
    let p_k = w_p.shape()[0];
    let q = p_map.reshape(&[b * h, w]).linear(w_p, None).reshape(&[b, h, p_k]);
    let k = i_map.reshape(&[b * h, w]).linear(w_i, None).reshape(&[b, h, p_k]);
    Ok(q.matmul_t(k, false, true).scale(F::of(1.0 / (p_k as f64).sqrt())).softmax_last())
}

/// `λ · (p̃ + ĩ)` with `λ: (b, h, h)` applied to the rows of the sum.
pub fn combine<'t, F: Real>(lambda: Var<'t, F>, p_tilde: Var<'t, F>, i_tilde: Var<'t, F>) -> Result<Var<'t, F>> {
    let (ls, ps) = (lambda.shape(), p_tilde.shape());
    if ps != i_tilde.shape() || ls.len() != 3 || ls[0] != ps[0] || ls[2] != ps[1] {
        return Err(Error::ShapeMismatch {
            expected: ps,
            got: ls,
        });
    }
    Ok(lambda.matmul(p_tilde + i_tilde))
}

/// Linear lift of grade probabilities `(b, 5)` to `(b, h, w)` through
/// `proj: (5, h·w)`.
pub fn project_koa_to_map<'t, F: Real>(p: Var<'t, F>, proj: Var<'t, F>, h: usize, w: usize) -> Result<Var<'t, F>> {
    let (ps, js) = (p.shape(), proj.shape());
    if ps.len() != 2 || ps[1] != NUM_GRADES || js != [NUM_GRADES, h * w] {
        return Err(Error::ShapeMismatch {
            expected: vec![NUM_GRADES, h * w],
            got: js,
        });
    }
    Ok(p.matmul(proj).reshape(&[ps[0], h, w]))
}

/// Angular frequencies `ω_k = π · 16^(k/(n−1))` of the depth embedding.
pub fn depth_frequencies(half: usize) -> Vec<f64> {
    if half == 1 {
        return vec![std::f64::consts::PI];
    }
    (0..half)
        .map(|k| std::f64::consts::PI * 16f64.powf(k as f64 / (half - 1) as f64))
        .collect()
}

/// `[sin(d·ω_k)…, cos(d·ω_k)…]` for a normalised depth `d ∈ [0, 1]`.
pub fn embed_depth(depth: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Domain(format!("depth embedding dim must be even and positive, got {dim}")));
    }
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::Domain(format!("depth {depth} outside [0, 1]")));
    }
    let freqs = depth_frequencies(dim / 2);
    Ok(freqs
        .iter()
        .map(|w| (depth * w).sin())
        .chain(freqs.iter().map(|w| (depth * w).cos()))
        .collect())
}

/// Every intermediate of one guidance evaluation.
pub struct GuidanceTrace<'t, F: Real> {
    pub p_map: Var<'t, F>,
    pub i_map: Var<'t, F>,
    pub g_p: Var<'t, F>,
    pub g_i: Var<'t, F>,
    pub g_hat_p: Var<'t, F>,
    pub g_hat_i: Var<'t, F>,
    pub p_tilde: Var<'t, F>,
    pub i_tilde: Var<'t, F>,
    pub lambda: Var<'t, F>,
    pub y: Var<'t, F>,
}

/// Learnable parameters of the adaptive-weight module.
#[derive(Debug, Clone)]
pub struct AdaptiveWeight {
    pub cfg: GuidanceConfig,
    pub proj: ParamId,
    pub mu_p: ParamId,
    pub mu_i: ParamId,
    pub nu_p: ParamId,
    pub nu_i: ParamId,
    pub o_p: ParamId,
    pub o_i: ParamId,
    pub w_p: ParamId,
    pub w_i: ParamId,
}

impl AdaptiveWeight {
    pub fn new<F: Real>(b: &mut Builder<'_, F>, cfg: GuidanceConfig) -> Self {
        let hw = cfg.height * cfg.width;
        let wstd = 1.0 / (cfg.width as f64).sqrt();
        Self {
            cfg,
            proj: b.normal("proj", &[NUM_GRADES, hw], 0.5),
            mu_p: b.constant("mu_p", &[1], 1.0),
            mu_i: b.constant("mu_i", &[1], 1.0),
            nu_p: b.constant("nu_p", &[1], 1.0),
            nu_i: b.constant("nu_i", &[1], 1.0),
            o_p: b.constant("o_p", &[1], 0.0),
            o_i: b.constant("o_i", &[1], 0.0),
            w_p: b.normal("w_p", &[cfg.attn_dim, cfg.width], wstd),
            w_i: b.normal("w_i", &[cfg.attn_dim, cfg.width], wstd),
        }
    }

    /// `p: (b, 5)`, `i_map: (b, h, w)`.
    pub fn forward<'t, F: Real>(&self, prm: &Bound<'t, F>, p: Var<'t, F>, i_map: Var<'t, F>) -> Result<GuidanceTrace<'t, F>> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let is = i_map.shape();
        if is.len() != 3 || is[1] != h || is[2] != w {
            return Err(Error::ShapeMismatch {
                expected: vec![is.first().copied().unwrap_or(1), h, w],
                got: is,
            });
        }
        let p_map = project_koa_to_map(p, prm[self.proj], h, w)?;
        let g_p = gain(p_map, prm[self.mu_p], KAPPA);
        let g_i = gain(i_map, prm[self.mu_i], KAPPA);
        let (g_hat_p, g_hat_i) = normalize_gains(g_p, g_i, EPS_STAB);
        let p_tilde = modulate(p_map, g_hat_p, prm[self.nu_p], prm[self.o_p]);
        let i_tilde = modulate(i_map, g_hat_i, prm[self.nu_i], prm[self.o_i]);
        let lambda = joint_weight(p_map, i_map, prm[self.w_p], prm[self.w_i])?;
        let y = combine(lambda, p_tilde, i_tilde)?;
        Ok(GuidanceTrace {
            p_map,
            i_map,
            g_p,
            g_i,
            g_hat_p,
            g_hat_i,
            p_tilde,
            i_tilde,
            lambda,
            y,
        })
    }
}

/// Evaluates the module for one sample outside of training.
pub fn adaptive_weight_module<F: Real>(
    p: &KoaDistribution,
    i: &IntensityMap,
    depth: f64,
    module: &AdaptiveWeight,
    params: &ParamStore<F>,
) -> Result<GuidanceBundle> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::Domain(format!("depth {depth} outside [0, 1]")));
    }
    let (h, w) = (module.cfg.height, module.cfg.width);
    let tape = Tape::inference();
    let prm = params.bind(&tape, false);
    let pv = tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, NUM_GRADES]), |ix| F::of(p.probs()[ix[1]])));
    let iv = tape.constant(
        i.values()
            .mapv(|v| F::of(v as f64))
            .insert_axis(Axis(0))
            .into_dyn(),
    );
    let trace = module.forward(&prm, pv, iv)?;
    let plane = |v: Var<'_, F>| -> Array2<f64> {
        v.value()
            .mapv(|x| x.as_f64())
            .into_shape_with_order((h, w))
            .expect("single sample plane")
    };
    Ok(GuidanceBundle {
        p_map: plane(trace.p_map),
        i_map: plane(trace.i_map),
        depth,
        y_combined: plane(trace.y),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape<f64>, v: f64) -> Var<'_, f64> {
        tape.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    fn map(tape: &Tape<f64>, h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Var<'_, f64> {
        tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, h, w]), |ix| f(ix[1], ix[2])))
    }

    #[test]
    fn gain_examples() {
        let tape = Tape::new();
        let g = gain(map(&tape, 2, 2, |_, _| 1.0), scalar(&tape, 1.0), KAPPA).item();
        assert!((g - (4.0f64 + 1e-5).sqrt()).abs() < 1e-15);
        assert!((g - 2.0000025).abs() < 1e-9);
        let g = gain(map(&tape, 3, 3, |_, _| 0.0), scalar(&tape, 1.0), KAPPA).item();
        assert!((g - 3.1623e-3).abs() < 1e-7);
        let g = gain(map(&tape, 3, 3, |y, x| (y + x) as f64), scalar(&tape, 0.0), KAPPA).item();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn normalize_gains_examples() {
        let tape = Tape::new();
        let (a, b) = normalize_gains(scalar(&tape, 1.0), scalar(&tape, 1.0), EPS_STAB);
        assert!((a.item() - 0.5).abs() < 1e-8 && a.item() == b.item());
        assert!((a.item() + b.item() - 2.0 / (2.0 + 1e-8)).abs() < 1e-15);
        let (a, b) = normalize_gains(scalar(&tape, 0.0), scalar(&tape, 0.0), EPS_STAB);
        assert_eq!((a.item(), b.item()), (0.0, 0.0));
        let (a, b) = normalize_gains(scalar(&tape, 3.0), scalar(&tape, 1.0), EPS_STAB);
        assert!((a.item() - 0.75).abs() < 1e-8 && (b.item() - 0.25).abs() < 1e-8);
    }

    #[test]
    fn modulate_examples() {
        let tape = Tape::new();
        let ones = map(&tape, 2, 2, |_, _| 1.0);
        let g = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1]), 0.5));
        let out = modulate(ones, g, scalar(&tape, 1.0), scalar(&tape, 0.0)).value();
        let expected = 1.0 + 1.0 / (1.0 + (-0.5f64).exp());
        assert!(out.iter().all(|&v| (v - expected).abs() < 1e-15));
        assert!((expected - 1.62246).abs() < 1e-5);

        let zero_logit = modulate(ones, g, scalar(&tape, 0.0), scalar(&tape, 0.0)).value();
        assert!(zero_logit.iter().all(|&v| v == 1.5));
        let low = modulate(ones, g, scalar(&tape, 0.0), scalar(&tape, -800.0)).value();
        assert!(low.iter().all(|&v| v == 1.0));
    }

    /// Independent evaluation of the joint weight with explicit loops.
    fn oracle_joint(p: &[Vec<f64>], i: &[Vec<f64>], wp: &[Vec<f64>], wi: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = p.len();
        let pk = wp.len();
        let proj = |m: &[Vec<f64>], wm: &[Vec<f64>], r: usize| -> Vec<f64> {
            (0..pk)
                .map(|k| m[r].iter().zip(&wm[k]).map(|(a, b)| a * b).sum())
                .collect()
        };
        (0..h)
            .map(|r| {
                let q = proj(p, wp, r);
                let logits: Vec<f64> = (0..h)
                    .map(|c| {
                        let k = proj(i, wi, c);
                        q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (pk as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|v| v / z).collect()
            })
            .collect()
    }

    #[test]
    fn joint_weight_matches_loop_oracle_and_rows_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rnd = |rng: &mut ChaCha8Rng, r: usize, c: usize| -> Vec<Vec<f64>> {
            (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let (p, i) = (rnd(&mut rng, 3, 2), rnd(&mut rng, 3, 2));
        let (wp, wi) = (rnd(&mut rng, 4, 2), rnd(&mut rng, 4, 2));
        let tape = Tape::new();
        let to_var = |m: &Vec<Vec<f64>>, batch: bool| {
            let (r, c) = (m.len(), m[0].len());
            let shape: Vec<usize> = if batch { vec![1, r, c] } else { vec![r, c] };
            tape.constant(ArrayD::from_shape_vec(IxDyn(&shape), m.concat()).unwrap())
        };
        let lam = joint_weight(to_var(&p, true), to_var(&i, true), to_var(&wp, false), to_var(&wi, false))
            .unwrap()
            .value();
        let oracle = oracle_joint(&p, &i, &wp, &wi);
        for r in 0..3 {
            for c in 0..3 {
                assert!((lam[[0, r, c]] - oracle[r][c]).abs() < 1e-14);
            }
            assert!((lam.index_axis(Axis(0), 0).index_axis(Axis(0), r).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_weight_is_uniform_for_equal_logits() {
        let tape = Tape::new();
        // orthogonal projections: every logit is zero
        let p = map(&tape, 3, 2, |_, _| 1.0);
        let wp = tape.constant(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let wi = tape.constant(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.0, 0.0, 0.0, 1.0]).unwrap());
        let lam = joint_weight(p, p, wp, wi).unwrap().value();
        assert!(lam.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let bad = tape.constant(ArrayD::zeros(IxDyn(&[2, 3])));
        assert!(joint_weight(p, p, bad, bad).is_err());
    }

    #[test]
    fn combine_examples() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lam = tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, 3, 3]), |_| rng.random_range(0.0..1.0)));
        let pt = map(&tape, 3, 4, |y, x| (y * 4 + x) as f64 * 0.1);
        let zero = combine(lam, pt, pt.neg()).unwrap().value();
        assert!(zero.iter().all(|&v| v == 0.0));
        let eye = tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, 3, 3]), |ix| (ix[1] == ix[2]) as u8 as f64));
        let it = map(&tape, 3, 4, |y, x| (y as f64 - x as f64) * 0.3);
        let sum = combine(eye, pt, it).unwrap().value();
        assert_eq!(*sum, &*pt.value() + &*it.value());
        // composition oracle: explicit row mixing
        let lv = lam.value();
        let (pv, iv) = (pt.value(), it.value());
        let got = combine(lam, pt, it).unwrap().value();
        for r in 0..3 {
            for c in 0..4 {
                let o: f64 = (0..3).map(|k| lv[[0, r, k]] * (pv[[0, k, c]] + iv[[0, k, c]])).sum();
                assert!((got[[0, r, c]] - o).abs() < 1e-14);
            }
        }
        assert!(combine(lam, pt, map(&tape, 3, 3, |_, _| 0.0)).is_err());
    }

    #[test]
    fn projection_examples() {
        let tape = Tape::new();
        let p = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 5]), vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let zero = tape.constant(ArrayD::zeros(IxDyn(&[5, 6])));
        assert!(project_koa_to_map(p, zero, 2, 3).unwrap().value().iter().all(|&v| v == 0.0));
        let proj = ArrayD::from_shape_fn(IxDyn(&[5, 6]), |ix| (ix[0] * 10 + ix[1]) as f64);
        let out = project_koa_to_map(p, tape.constant(proj.clone()), 2, 3).unwrap().value();
        assert_eq!(out.iter().copied().collect::<Vec<_>>(), (20..26).map(|v| v as f64).collect::<Vec<_>>());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probs: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let pv = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 5]), probs.clone()).unwrap());
        let out = project_koa_to_map(pv, tape.constant(proj.clone()), 2, 3).unwrap().value();
        for j in 0..6 {
            let o: f64 = (0..5).map(|k| probs[k] * proj[[k, j]]).sum();
            assert!((out.as_slice().unwrap()[j] - o).abs() < 1e-12);
        }
        assert!(project_koa_to_map(pv, tape.constant(proj), 3, 3).is_err());
    }

    #[test]
    fn depth_embedding_examples() {
        let e = embed_depth(0.0, 16).unwrap();
        assert!(e[..8].iter().all(|&v| v == 0.0) && e[8..].iter().all(|&v| v == 1.0));
        assert!(embed_depth(0.5, 7).is_err());
        assert!(embed_depth(1.5, 8).is_err());

        let grid: Vec<Vec<f64>> = (0..1000).map(|k| embed_depth(k as f64 / 999.0, 8).unwrap()).collect();
        for a in 0..grid.len() {
            for b in a + 1..grid.len() {
                let d: f64 = grid[a].iter().zip(&grid[b]).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(d > 0.0, "duplicate embedding at {a}, {b}");
            }
        }

        let wmax = depth_frequencies(8).into_iter().fold(0.0, f64::max);
        for &d in &[0.1, 0.5, 0.9] {
            for &delta in &[1e-2, 1e-4, 1e-6] {
                let a = embed_depth(d, 16).unwrap();
                let b = embed_depth(d + delta, 16).unwrap();
                let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!(dist <= wmax * delta * 4.0 + 1e-15);
            }
        }
    }

    #[test]
    fn koa_distribution_validation() {
        assert!(KoaDistribution::new([0.2; 5]).is_ok());
        assert!(KoaDistribution::new([0.5; 5]).is_err());
        assert!(KoaDistribution::new([1.2, -0.2, 0.0, 0.0, 0.0]).is_err());
        let s = KoaDistribution::smoothed_one_hot(2, 0.1).unwrap();
        assert_eq!(s.argmax(), 2);
        assert!((s.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(KoaDistribution::smoothed_one_hot(5, 0.1).is_err());
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let img = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f32);
        let out = area_downsample(&img, 2, 2).unwrap();
        assert_eq!(out, ndarray::arr2(&[[2.5, 4.5], [10.5, 12.5]]));
        assert!(area_downsample(&img, 3, 3).is_err());
    }

    #[test]
    fn module_gradients_match_finite_differences() {
        use crate::autograd::gradcheck::max_rel_error;
        let cfg = GuidanceConfig {
            height: 3,
            width: 4,
            attn_dim: 2,
        };
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let module = AdaptiveWeight::new(&mut Builder::new(&mut store, &mut rng), cfg);
            // move the scalars away from their initial values
            for id in [module.mu_p, module.mu_i, module.nu_p, module.nu_i, module.o_p, module.o_i] {
                store.get_mut(id).mapv_inplace(|_| rng.random_range(0.3..1.5));
            }
            let n_params = store.len();
            let mut inputs: Vec<ArrayD<f64>> = store.iter().map(|(_, _, v)| v.clone()).collect();
            let probs = KoaDistribution::smoothed_one_hot(seed as usize % 5, 0.2).unwrap();
            inputs.push(ArrayD::from_shape_vec(IxDyn(&[2, 5]), [probs.probs().to_vec(), vec![0.2; 5]].concat()).unwrap());
            inputs.push(ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |_| rng.random_range(-1.0..1.0)));
            let probe = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |_| rng.random_range(-1.0..1.0));
            let err = max_rel_error(&inputs, |tape, vars| {
                let prm = Bound::from_vars(vars[..n_params].to_vec());
                let trace = module.forward(&prm, vars[n_params], vars[n_params + 1]).unwrap();
                (trace.y * tape.constant(probe.clone())).sum_all()
            });
            assert!(err < 1e-4, "seed {seed}: relative gradient error {err}");
        }
    }

    #[test]
    fn bundle_matches_scalar_oracle() {
        let cfg = GuidanceConfig {
            height: 2,
            width: 3,
            attn_dim: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let module = AdaptiveWeight::new(&mut Builder::new(&mut store, &mut rng), cfg);
        let p = KoaDistribution::new([0.1, 0.2, 0.4, 0.2, 0.1]).unwrap();
        let i = IntensityMap::new(ndarray::arr2(&[[0.5, -0.25, 0.0], [1.0, -1.0, 0.75]])).unwrap();
        let out = adaptive_weight_module(&p, &i, 0.25, &module, &store).unwrap();

        let get = |id: ParamId| store.get(id).iter().copied().collect::<Vec<f64>>();
        let proj = get(module.proj);
        let pm: Vec<Vec<f64>> = (0..2)
            .map(|r| (0..3).map(|c| (0..5).map(|k| p.probs()[k] * proj[k * 6 + r * 3 + c]).sum()).collect())
            .collect();
        let im: Vec<Vec<f64>> = (0..2).map(|r| (0..3).map(|c| i.values()[[r, c]] as f64).collect()).collect();
        let g = |m: &Vec<Vec<f64>>, mu: f64| mu * (m.concat().iter().map(|v| v * v).sum::<f64>() + KAPPA).sqrt();
        let gp = g(&pm, get(module.mu_p)[0]);
        let gi = g(&im, get(module.mu_i)[0]);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let ap = 1.0 + sig(get(module.nu_p)[0] * gp / (gp + gi + EPS_STAB) + get(module.o_p)[0]);
        let ai = 1.0 + sig(get(module.nu_i)[0] * gi / (gp + gi + EPS_STAB) + get(module.o_i)[0]);
        let rows = |v: Vec<f64>| v.chunks(3).map(|c| c.to_vec()).collect::<Vec<_>>();
        let lam = oracle_joint(&pm, &im, &rows(get(module.w_p)), &rows(get(module.w_i)));
        for r in 0..2 {
            for c in 0..3 {
                let y: f64 = (0..2).map(|k| lam[r][k] * (ap * pm[k][c] + ai * im[k][c])).sum();
                assert!((out.y_combined[[r, c]] - y).abs() < 1e-12);
                assert!((out.p_map[[r, c]] - pm[r][c]).abs() < 1e-14);
            }
        }
        assert_eq!(out.depth, 0.25);
        assert!(adaptive_weight_module(&p, &i, 1.5, &module, &store).is_err());
    }
}
