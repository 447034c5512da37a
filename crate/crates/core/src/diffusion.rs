//! Noise schedule, closed-form forward noising, deterministic DDIM stepping,
//! the ε-prediction loss and the EMA weight tracker.
//!
//! Step indices are 1-based (`1..=T`); index `0` denotes the clean latent with
//! `ᾱ_0 = 1`, so a DDIM step to `0` returns the x0 prediction.

use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::error::{ensure_shape, Error, Result};

/// β/α/ᾱ tables over `T` steps. Entry `k` of each table belongs to step `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas, both endpoints included.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Domain(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if total_steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (total_steps - 1) as f64;
            (0..total_steps).map(|i| beta_start + span * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Domain("every beta must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ᾱ_t` for `t` in `0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.total_steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::IndexOutOfRange {
                index: t,
                min: 0,
                max: self.total_steps(),
            }),
        }
    }

    fn noised_alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::IndexOutOfRange {
                index: 0,
                min: 1,
                max: self.total_steps(),
            });
        }
        self.alpha_bar(t)
    }
}

/// Serializable description of a linear schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.total_steps, self.beta_start, self.beta_end)
    }
}

/// Convenience wrapper matching [`NoiseSchedule::linear`].
pub fn make_linear_schedule(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(total_steps, beta_start, beta_end)
}

/// A `channels x height x width` latent plane.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<F> {
    values: Array3<F>,
}

impl<F: Real> LatentGrid<F> {
    pub fn new(values: Array3<F>) -> Self {
        Self { values }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(Array3::zeros((channels, height, width)))
    }

    pub fn from_elem(shape: (usize, usize, usize), v: F) -> Self {
        Self::new(Array3::from_elem(shape, v))
    }

    /// Unit-Gaussian draws.
    pub fn randn<R: Rng + ?Sized>(shape: (usize, usize, usize), rng: &mut R) -> Self {
        Self::new(Array3::from_shape_simple_fn(shape, || F::of(rng.sample::<f64, _>(StandardNormal))))
    }

    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.values.dim();
        [c, h, w]
    }

    pub fn values(&self) -> &Array3<F> {
        &self.values
    }

    pub fn into_values(self) -> Array3<F> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        Zip::from(&self.values)
            .and(&other.values)
            .fold(F::zero(), |acc, &a, &b| acc.max((a - b).abs()))
    }

    pub fn cast<G: Real>(&self) -> LatentGrid<G> {
        LatentGrid::new(self.values.mapv(|v| G::of(v.as_f64())))
    }

    /// `a·self + b·other`, element-wise.
    fn affine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        ensure_shape(&self.shape(), &other.shape())?;
        let (a, b) = (F::of(a), F::of(b));
        let mut out = self.values.clone();
        Zip::from(&mut out).and(&other.values).for_each(|o, &e| *o = a * *o + b * e);
        Ok(Self::new(out))
    }
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
pub fn forward_noise<F: Real>(
    z0: &LatentGrid<F>,
    t: usize,
    eps: &LatentGrid<F>,
    sched: &NoiseSchedule,
) -> Result<LatentGrid<F>> {
    let ab = sched.noised_alpha_bar(t)?;
    z0.affine(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// `(z_t − √(1−ᾱ_t)·eps_hat) / √ᾱ_t`.
pub fn predict_x0<F: Real>(
    z_t: &LatentGrid<F>,
    eps_hat: &LatentGrid<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid<F>> {
    let ab = sched.noised_alpha_bar(t)?;
    let inv = 1.0 / ab.sqrt();
    z_t.affine(inv, eps_hat, -(1.0 - ab).sqrt() * inv)
}

/// Deterministic (η = 0) DDIM update from step `t` to `t_prev < t`.
pub fn ddim_step<F: Real>(
    z_t: &LatentGrid<F>,
    eps_hat: &LatentGrid<F>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid<F>> {
    if t_prev >= t {
        return Err(Error::Domain(format!("DDIM step must descend, got {t} -> {t_prev}")));
    }
    let x0 = predict_x0(z_t, eps_hat, t, sched)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    x0.affine(ab_prev.sqrt(), eps_hat, (1.0 - ab_prev).sqrt())
}

/// `steps` evenly spaced indices `T = t_1 > ... > t_steps >= 1`.
pub fn uniform_step_indices(total_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total_steps {
        return Err(Error::Domain(format!(
            "inference steps must lie in 1..={total_steps}, got {steps}"
        )));
    }
    let stride = total_steps as f64 / steps as f64;
    Ok((0..steps)
        .map(|i| (total_steps as f64 - stride * i as f64).round() as usize)
        .collect())
}

/// Folds [`ddim_step`] over `step_indices` (strictly decreasing, all `>= 1`);
/// the final entry steps to the clean terminal `0`.
pub fn ddim_sample<F, C, D>(
    mut denoiser: D,
    z_start: LatentGrid<F>,
    conditioning: &C,
    step_indices: &[usize],
    sched: &NoiseSchedule,
) -> Result<LatentGrid<F>>
where
    F: Real,
    C: ?Sized,
    D: FnMut(&LatentGrid<F>, usize, &C) -> Result<LatentGrid<F>>,
{
    if step_indices.is_empty() {
        return Err(Error::Domain("empty DDIM index list".into()));
    }
    if step_indices.windows(2).any(|w| w[1] >= w[0]) || step_indices.last() == Some(&0) {
        return Err(Error::Domain("DDIM indices must be strictly decreasing and >= 1".into()));
    }
    let mut z = z_start;
    for (k, &t) in step_indices.iter().enumerate() {
        let t_prev = step_indices.get(k + 1).copied().unwrap_or(0);
        let eps_hat = denoiser(&z, t, conditioning)?;
        z = ddim_step(&z, &eps_hat, t, t_prev, sched)?;
    }
    Ok(z)
}

/// Mean squared error over all elements.
pub fn diffusion_loss<F: Real>(eps: &LatentGrid<F>, eps_hat: &LatentGrid<F>) -> Result<f64> {
    ensure_shape(&eps.shape(), &eps_hat.shape())?;
    Ok(mean_squared_error(
        eps.values.as_slice().expect("standard layout"),
        eps_hat.values.as_slice().expect("standard layout"),
    ))
}

/// Shared MSE kernel (`diffusion_loss`, reconstruction loss and PSNR use it).
pub fn mean_squared_error<F: Real>(a: &[F], b: &[F]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

/// Exponential moving average of a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<F> {
    decay: f64,
    shadow: Vec<F>,
}

impl<F: Real> EmaState<F> {
    pub fn new(decay: f64, initial: Vec<F>) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Domain(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self { decay, shadow: initial })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &[F] {
        &self.shadow
    }

    /// `shadow ← decay·shadow + (1−decay)·params`.
    pub fn update(&mut self, params: &[F]) -> Result<()> {
        ensure_shape(&[self.shadow.len()], &[params.len()])?;
        let d = F::of(self.decay);
        let one_d = F::of(1.0 - self.decay);
        for (s, &p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + one_d * p;
        }
        Ok(())
    }
}

/// Functional form of [`EmaState::update`].
pub fn ema_update<F: Real>(mut state: EmaState<F>, params: &[F]) -> Result<EmaState<F>> {
    state.update(params)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(seed: u64, shape: (usize, usize, usize)) -> LatentGrid<f64> {
        LatentGrid::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn default_schedule_terminal_alpha_bar_is_small() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let last = s.alpha_bar(1000).unwrap();
        // frozen from an independent cumulative-product evaluation
        assert!((last - 4.035829765375676e-05).abs() < 1e-15);
        assert!(last > 0.0 && last < 1e-2);
        assert!((s.alpha_bar(500).unwrap() - 0.07858724288177824).abs() < 1e-13);
    }

    #[test]
    fn single_step_and_near_identity_schedules() {
        let s = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alphas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
        let s = make_linear_schedule(3, 1e-9, 1e-9).unwrap();
        assert!(s.alpha_bars().iter().all(|&a| (a - 1.0).abs() < 1e-8));
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.03, 0.02).is_err());
        assert!(make_linear_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn schedule_invariants_hold() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let mut running = 1.0;
        for t in 0..1000 {
            assert!(s.betas()[t] > 0.0 && s.betas()[t] < 1.0);
            running *= s.alphas()[t];
            assert!(((s.alpha_bars()[t] - running) / running).abs() < 1e-12);
            if t > 0 {
                assert!(s.alpha_bars()[t] < s.alpha_bars()[t - 1]);
            }
        }
    }

    #[test]
    fn forward_noise_limits() {
        let s = NoiseSchedule::from_betas(vec![1e-300; 4]).unwrap();
        let z0 = grid(1, (2, 3, 3));
        let eps = grid(2, (2, 3, 3));
        assert_eq!(forward_noise(&z0, 2, &eps, &s).unwrap(), z0);

        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let zero = LatentGrid::zeros(2, 3, 3);
        let out = forward_noise(&zero, 40, &eps, &s).unwrap();
        let w = (1.0 - s.alpha_bar(40).unwrap()).sqrt();
        assert!(out.max_abs_diff(&LatentGrid::new(eps.values().mapv(|e| w * e))) < 1e-15);
    }

    #[test]
    fn forward_noise_errors() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let z0 = grid(1, (2, 3, 3));
        assert!(matches!(
            forward_noise(&z0, 11, &z0, &s),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(forward_noise(&z0, 0, &z0, &s), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(
            forward_noise(&z0, 3, &grid(2, (2, 3, 4)), &s),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn forward_noise_moments_match_monte_carlo() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let t = 500;
        let ab = s.alpha_bar(t).unwrap();
        let z0 = grid(3, (1, 2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 20_000;
        let mut sum = Array3::<f64>::zeros((1, 2, 2));
        let mut sum2 = Array3::<f64>::zeros((1, 2, 2));
        for _ in 0..draws {
            let eps = LatentGrid::randn((1, 2, 2), &mut rng);
            let z = forward_noise(&z0, t, &eps, &s).unwrap();
            sum += z.values();
            sum2 += &z.values().mapv(|v| v * v);
        }
        let n = draws as f64;
        for ((&m1, &m2), &x0) in sum.iter().zip(sum2.iter()).zip(z0.values().iter()) {
            let mean = m1 / n;
            let var = m2 / n - mean * mean;
            let se = ((1.0 - ab) / n).sqrt();
            assert!((mean - ab.sqrt() * x0).abs() < 4.0 * se);
            assert!((var - (1.0 - ab)).abs() / (1.0 - ab) < 0.05);
        }
    }

    /// Straight transcription of the x0 formula, independent of `affine`.
    fn oracle_x0(z: &LatentGrid<f64>, e: &LatentGrid<f64>, ab: f64) -> Vec<f64> {
        z.values()
            .iter()
            .zip(e.values().iter())
            .map(|(&zt, &eh)| (zt - (1.0 - ab).sqrt() * eh) / ab.sqrt())
            .collect()
    }

    #[test]
    fn predict_x0_inverts_forward_noise_and_matches_oracle() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let z0 = grid(5, (4, 5, 5));
        let eps = grid(6, (4, 5, 5));
        for t in [1, 10, 50, 100] {
            let zt = forward_noise(&z0, t, &eps, &s).unwrap();
            assert!(predict_x0(&zt, &eps, t, &s).unwrap().max_abs_diff(&z0) < 1e-5);
        }
        let zt = grid(7, (4, 5, 5));
        let out = predict_x0(&zt, &LatentGrid::zeros(4, 5, 5), 10, &s).unwrap();
        let ab = s.alpha_bar(10).unwrap();
        assert!(out.max_abs_diff(&LatentGrid::new(zt.values().mapv(|v| v / ab.sqrt()))) < 1e-14);

        let eh = grid(8, (4, 5, 5));
        let got = predict_x0(&zt, &eh, 10, &s).unwrap();
        for (g, o) in got.values().iter().zip(oracle_x0(&zt, &eh, ab)) {
            assert!((g - o).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_step_matches_oracle_and_identity() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let z0 = grid(9, (4, 4, 4));
        let eps = grid(10, (4, 4, 4));
        let zt = forward_noise(&z0, 60, &eps, &s).unwrap();
        let prev = ddim_step(&zt, &eps, 60, 35, &s).unwrap();
        let expect = forward_noise(&z0, 35, &eps, &s).unwrap();
        let rel = prev.max_abs_diff(&expect) / expect.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(rel < 1e-12);
        assert!(ddim_step(&zt, &eps, 60, 0, &s).unwrap().max_abs_diff(&z0) < 1e-12);

        let eh = grid(11, (4, 4, 4));
        let got = ddim_step(&zt, &eh, 60, 20, &s).unwrap();
        let (ab, abp) = (s.alpha_bar(60).unwrap(), s.alpha_bar(20).unwrap());
        for ((g, x0), e) in got.values().iter().zip(oracle_x0(&zt, &eh, ab)).zip(eh.values().iter()) {
            let o = abp.sqrt() * x0 + (1.0 - abp).sqrt() * e;
            assert!((g - o).abs() < 1e-12);
        }
        assert!(ddim_step(&zt, &eh, 20, 20, &s).is_err());
        assert!(ddim_step(&zt, &eh, 20, 30, &s).is_err());
    }

    #[test]
    fn ddim_sample_with_oracle_denoiser_recovers_x0() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = grid(12, (4, 8, 8));
        let eps = grid(13, (4, 8, 8));
        let zt = forward_noise(&z0, 1000, &eps, &s).unwrap();
        let oracle = |_: &LatentGrid<f64>, _: usize, e: &LatentGrid<f64>| Ok(e.clone());
        let fifty = ddim_sample(oracle, zt.clone(), &eps, &uniform_step_indices(1000, 50).unwrap(), &s).unwrap();
        let full = ddim_sample(oracle, zt.clone(), &eps, &uniform_step_indices(1000, 1000).unwrap(), &s).unwrap();
        assert!(fifty.max_abs_diff(&z0) < 1e-10);
        assert!(fifty.max_abs_diff(&full) < 1e-10);

        let single = ddim_sample(oracle, zt.clone(), &eps, &[1000], &s).unwrap();
        assert_eq!(single, ddim_step(&zt, &eps, 1000, 0, &s).unwrap());

        let z32: LatentGrid<f32> = zt.cast();
        let e32: LatentGrid<f32> = eps.cast();
        let oracle32 = |_: &LatentGrid<f32>, _: usize, e: &LatentGrid<f32>| Ok(e.clone());
        let out = ddim_sample(oracle32, z32, &e32, &uniform_step_indices(1000, 50).unwrap(), &s).unwrap();
        assert!(out.cast::<f64>().max_abs_diff(&z0) < 1e-4);
    }

    #[test]
    fn ddim_sample_rejects_bad_index_lists() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let z = grid(1, (1, 2, 2));
        let id = |z: &LatentGrid<f64>, _: usize, _: &()| Ok(z.clone());
        assert!(ddim_sample(id, z.clone(), &(), &[], &s).is_err());
        assert!(ddim_sample(id, z.clone(), &(), &[5, 7], &s).is_err());
        assert!(ddim_sample(id, z.clone(), &(), &[5, 0], &s).is_err());
        let failing = |_: &LatentGrid<f64>, _: usize, _: &()| Err(Error::NonFinite("denoiser".into()));
        assert!(matches!(ddim_sample(failing, z, &(), &[5], &s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn uniform_indices_are_descending_and_start_at_t() {
        assert_eq!(uniform_step_indices(1000, 4).unwrap(), vec![1000, 750, 500, 250]);
        assert_eq!(uniform_step_indices(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert!(uniform_step_indices(10, 0).is_err());
        assert!(uniform_step_indices(10, 11).is_err());
    }

    #[test]
    fn diffusion_loss_values() {
        let e = grid(1, (4, 3, 3));
        assert_eq!(diffusion_loss(&e, &e).unwrap(), 0.0);
        let ones = LatentGrid::from_elem((4, 3, 3), 1.0);
        assert_eq!(diffusion_loss(&LatentGrid::zeros(4, 3, 3), &ones).unwrap(), 1.0);
        let f = grid(2, (4, 3, 3));
        let oracle: f64 = e
            .values()
            .iter()
            .zip(f.values().iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / 36.0;
        assert!((diffusion_loss(&e, &f).unwrap() - oracle).abs() < 1e-14);
        assert!(diffusion_loss(&e, &grid(2, (4, 3, 2))).is_err());
    }

    #[test]
    fn ema_update_examples() {
        let s = ema_update(EmaState::new(0.0, vec![5.0f64; 3]).unwrap(), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.shadow(), &[1.0, 2.0, 3.0]);

        let mut s = EmaState::new(0.5, vec![0.0f64]).unwrap();
        s.update(&[1.0]).unwrap();
        s.update(&[1.0]).unwrap();
        assert_eq!(s.shadow(), &[0.75]);

        let mut s = EmaState::new(0.99, vec![4.0f64]).unwrap();
        for _ in 0..1000 {
            s.update(&[1.0]).unwrap();
        }
        assert!((s.shadow()[0] - 1.0).abs() <= 3.0 * 0.99f64.powi(1000) + 1e-15);
        assert!(s.update(&[1.0, 2.0]).is_err());
        assert!(EmaState::new(1.0, vec![0.0f64]).is_err());
    }

    proptest! {
        #[test]
        fn loss_is_symmetric_nonnegative_and_zero_iff_equal(
            a in proptest::collection::vec(-10.0f64..10.0, 12),
            b in proptest::collection::vec(-10.0f64..10.0, 12),
        ) {
            let ga = LatentGrid::new(Array3::from_shape_vec((3, 2, 2), a).unwrap());
            let gb = LatentGrid::new(Array3::from_shape_vec((3, 2, 2), b).unwrap());
            let l1 = diffusion_loss(&ga, &gb).unwrap();
            let l2 = diffusion_loss(&gb, &ga).unwrap();
            prop_assert_eq!(l1, l2);
            prop_assert!(l1 >= 0.0);
            prop_assert_eq!(l1 == 0.0, ga == gb);
        }

        #[test]
        fn ddim_round_trip_is_exact_for_oracle_noise(t in 2usize..=1000, frac in 0.0f64..1.0, seed in 0u64..1000) {
            let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
            let t_prev = ((t - 1) as f64 * frac) as usize;
            let z0 = grid(seed, (2, 3, 3));
            let eps = grid(seed + 1, (2, 3, 3));
            let zt = forward_noise(&z0, t, &eps, &s).unwrap();
            let stepped = ddim_step(&zt, &eps, t, t_prev, &s).unwrap();
            let expect = if t_prev == 0 { z0.clone() } else { forward_noise(&z0, t_prev, &eps, &s).unwrap() };
            let scale = expect.values().iter().fold(1e-300f64, |a, v| a.max(v.abs()));
            let tol = 1e-12;
            prop_assert!(stepped.max_abs_diff(&expect) / scale < tol);
        }

        #[test]
        fn ema_is_a_contraction(decay in 0.0f64..0.999, init in -5.0f64..5.0, target in -5.0f64..5.0) {
            let mut s = EmaState::new(decay, vec![init]).unwrap();
            s.update(&[target]).unwrap();
            prop_assert!((s.shadow()[0] - target).abs() <= decay * (init - target).abs() + 1e-12);
        }
    }
}
