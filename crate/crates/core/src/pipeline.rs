//! Two-stage training (autoencoder, then the conditional denoiser), the grade
//! classifier, depth-swept DDIM inference and the interpolation study.

use std::cell::RefCell;
use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{depth_grid, mix_seed, PairedSample, Provenance, Volume};
use crate::diffusion::{ddim_sample, forward_noise, predict_x0, uniform_step_indices, LatentGrid, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{IntensityMap, KoaDistribution, NUM_GRADES};
use crate::metrics::adjacent_slice_correlation;
use crate::networks::{
    check_image, decode, encode_kl, images_to_tensor, koa_classify_stub, latent_to_tensor, sample_posterior,
    tensor_to_images, tensor_to_latent, ClassifierMode, GaussianPosterior, ModelBundle, SliceImage,
};
use crate::nn::{AdamW, AdamWConfig, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Steps per logged epoch; each epoch ends with one evaluation.
    pub epoch_steps: usize,
    /// Stop once this many evaluations pass without improvement (0 disables).
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            epoch_steps: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epoch_steps == 0 {
            return Err(Error::Config("batch_size and epoch_steps must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Where the grade distribution fed to the guidance module comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum GradeSource {
    Classifier,
    GroundTruth { smoothing: f64 },
}

impl GradeSource {
    fn distribution(&self, sample: &PairedSample, bundle: &ModelBundle) -> Result<KoaDistribution> {
        match *self {
            GradeSource::GroundTruth { smoothing } => KoaDistribution::smoothed_one_hot(sample.grade, smoothing),
            GradeSource::Classifier => {
                koa_classify_stub(&sample.xray, &bundle.classifier, &bundle.cls_params, ClassifierMode::Learned)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Autoencoder,
    Diffusion,
    Classifier,
}

/// One logged epoch. Terms that do not apply to a stage are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss_rec: Option<f64>,
    pub loss_kl: Option<f64>,
    pub loss_diff: Option<f64>,
    pub loss_cls: Option<f64>,
    /// Deterministic evaluation on the training set (reconstruction MSE,
    /// mean diffusion loss, or classification accuracy).
    pub eval: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Fingerprint of the frozen autoencoder before and after diffusion training.
    pub frozen_fingerprint: Option<(String, String)>,
}

pub const TRAIN_CSV_HEADER: [&str; 9] = [
    "epoch", "step", "loss_rec", "loss_kl", "loss_diff", "loss_cls", "eval", "wall_seconds", "seed",
];

impl TrainReport {
    fn new(stage: Stage, seed: u64) -> Self {
        Self {
            stage,
            seed,
            epochs: Vec::new(),
            stopped_early: false,
            frozen_fingerprint: None,
        }
    }

    pub fn eval_series(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.eval).collect()
    }

    /// One row per epoch; inapplicable loss terms are left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRAIN_CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.step.to_string(),
                opt(e.loss_rec),
                opt(e.loss_kl),
                opt(e.loss_diff),
                opt(e.loss_cls),
                format!("{:?}", e.eval),
                format!("{:.3}", e.wall_seconds),
                self.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Optimizer state and progress of one training stage; enough to resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub optimizer: AdamW<f32>,
    pub report: TrainReport,
    best_eval: f64,
    since_best: usize,
    wall_offset: f64,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    optimizer_step: u64,
    optimizer: AdamWConfig,
    report: TrainReport,
    best_eval: f64,
    since_best: usize,
    wall_offset: f64,
}

impl TrainState {
    pub fn new(stage: Stage, cfg: &TrainConfig, store: &ParamStore<f32>) -> Self {
        Self {
            step: 0,
            optimizer: AdamW::new(cfg.optimizer, store),
            report: TrainReport::new(stage, cfg.seed),
            best_eval: f64::INFINITY,
            since_best: 0,
            wall_offset: 0.0,
        }
    }

    /// A resumed state keeps its moments and counters but takes the
    /// optimizer hyper-parameters of the current run.
    fn resume_or_new(resume: Option<Self>, stage: Stage, cfg: &TrainConfig, store: &ParamStore<f32>) -> Self {
        match resume {
            Some(mut st) => {
                st.optimizer.cfg = cfg.optimizer;
                st
            }
            None => Self::new(stage, cfg, store),
        }
    }

    /// Adds the optimizer moments under `opt/m/` and `opt/v/` and the
    /// progress counters under the header key `train`.
    pub fn write_into(&self, ck: &mut Checkpoint, store: &ParamStore<f32>) -> Result<()> {
        for ((_, name, _), (m, v)) in store.iter().zip(self.optimizer.m.iter().zip(&self.optimizer.v)) {
            ck.push(format!("opt/m/{name}"), m.clone());
            ck.push(format!("opt/v/{name}"), v.clone());
        }
        let header = StateHeader {
            step: self.step,
            optimizer_step: self.optimizer.step,
            optimizer: self.optimizer.cfg,
            report: self.report.clone(),
            best_eval: if self.best_eval.is_finite() { self.best_eval } else { f64::MAX },
            since_best: self.since_best,
            wall_offset: self.wall_offset,
        };
        ck.header.insert(
            "train".into(),
            toml::Value::try_from(header).map_err(|e| Error::Config(e.to_string()))?,
        );
        Ok(())
    }

    /// Restores the state written by [`TrainState::write_into`], or `None`
    /// when the checkpoint carries no training progress for `stage`.
    pub fn read_from(ck: &Checkpoint, stage: Stage, store: &ParamStore<f32>) -> Result<Option<Self>> {
        let Some(v) = ck.header.get("train") else {
            return Ok(None);
        };
        let h: StateHeader = v.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if h.report.stage != stage {
            return Ok(None);
        }
        let mut optimizer = AdamW::new(h.optimizer, store);
        optimizer.step = h.optimizer_step;
        for (i, (_, name, p)) in store.iter().enumerate() {
            for (prefix, slot) in [("m", &mut optimizer.m[i]), ("v", &mut optimizer.v[i])] {
                let key = format!("opt/{prefix}/{name}");
                let t = ck.get(&key).ok_or_else(|| Error::Missing(format!("tensor {key}")))?;
                crate::error::ensure_shape(p.shape(), t.shape())?;
                *slot = t.clone();
            }
        }
        Ok(Some(Self {
            step: h.step,
            optimizer,
            report: h.report,
            best_eval: if h.best_eval == f64::MAX { f64::INFINITY } else { h.best_eval },
            since_best: h.since_best,
            wall_offset: h.wall_offset,
        }))
    }

    /// Records an evaluation; returns true when patience is exhausted.
    fn observe(&mut self, eval: f64, lower_is_better: bool, patience: usize) -> bool {
        let v = if lower_is_better { eval } else { -eval };
        if v < self.best_eval {
            self.best_eval = v;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        patience > 0 && self.since_best >= patience
    }
}

/// Called after every epoch with the current bundle and state, e.g. to
/// write a checkpoint.
pub type EpochHook<'a> = dyn FnMut(&ModelBundle, &TrainState) -> Result<()> + 'a;

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, step))
}

fn ensure_finite(what: &str, v: f64, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss at step {step}: {v}")))
    }
}

#[derive(Default)]
struct Accum {
    n: usize,
    sums: [f64; 4],
}

impl Accum {
    fn add(&mut self, k: usize, v: f64) {
        self.sums[k] += v;
        if k == 0 {
            self.n += 1;
        }
    }

    fn mean(&self, k: usize) -> Option<f64> {
        (self.n > 0).then(|| self.sums[k] / self.n as f64)
    }
}

/// Shared epoch loop: `step` runs one optimizer step and returns loss terms,
/// `eval` scores the model at each epoch boundary.
struct Loop<'a> {
    cfg: &'a TrainConfig,
    lower_is_better: bool,
    early_stop: bool,
}

impl Loop<'_> {
    fn run(
        &self,
        bundle: &mut ModelBundle,
        state: &mut TrainState,
        step: &mut dyn FnMut(&mut ModelBundle, &mut TrainState, &mut ChaCha8Rng, &mut Accum) -> Result<()>,
        eval: &mut dyn FnMut(&ModelBundle, &Accum) -> Result<(f64, [Option<f64>; 4])>,
        hook: &mut EpochHook<'_>,
    ) -> Result<()> {
        let start = Instant::now();
        let mut acc = Accum::default();
        while (state.step as usize) < self.cfg.steps && !state.report.stopped_early {
            let mut rng = step_rng(self.cfg.seed, state.step);
            step(bundle, state, &mut rng, &mut acc)?;
            state.step += 1;
            let boundary = state.step as usize % self.cfg.epoch_steps == 0 || state.step as usize == self.cfg.steps;
            if boundary {
                let (score, terms) = eval(bundle, &acc)?;
                let wall = state.wall_offset + start.elapsed().as_secs_f64();
                state.report.epochs.push(EpochRecord {
                    epoch: state.report.epochs.len(),
                    step: state.step,
                    loss_rec: terms[0],
                    loss_kl: terms[1],
                    loss_diff: terms[2],
                    loss_cls: terms[3],
                    eval: score,
                    wall_seconds: wall,
                });
                if state.observe(score, self.lower_is_better, if self.early_stop { self.cfg.patience } else { 0 }) {
                    state.report.stopped_early = true;
                }
                let saved = state.wall_offset;
                state.wall_offset = wall;
                hook(bundle, state)?;
                state.wall_offset = saved;
                acc = Accum::default();
            }
        }
        state.wall_offset += start.elapsed().as_secs_f64();
        Ok(())
    }
}

/// Every slice of every sample, in order.
fn all_slices(data: &[PairedSample]) -> Vec<SliceImage> {
    data.iter().flat_map(|s| s.volume.slices()).collect()
}

/// Reconstruction MSE through the posterior mean, the deterministic
/// training-set score used for early stopping.
pub fn reconstruction_error(bundle: &ModelBundle, slices: &[SliceImage]) -> Result<f64> {
    if slices.is_empty() {
        return Err(Error::Domain("no slices to evaluate".into()));
    }
    let ae = &bundle.autoencoder;
    let mut total = 0.0;
    for chunk in slices.chunks(16) {
        let tape = Tape::inference();
        let p = bundle.ae_params.bind(&tape, false);
        let refs: Vec<&SliceImage> = chunk.iter().collect();
        let x = tape.constant(images_to_tensor::<f32>(&refs, ae.cfg.image_channels));
        let (mean, _) = ae.encode(&p, x);
        let x_hat = ae.decode(&p, mean);
        let d = (x_hat - x).sqr().mean_all().item() as f64;
        total += d * chunk.len() as f64;
    }
    Ok(total / slices.len() as f64)
}

/// Stage one: E1 and D on per-slice reconstruction plus KL.
///
/// Pass a previously saved state to resume; the per-step randomness depends
/// only on `(cfg.seed, step)`, so a resumed run continues the same curve.
pub fn train_autoencoder(
    bundle: &mut ModelBundle,
    data: &[PairedSample],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    hook: &mut EpochHook<'_>,
) -> Result<TrainState> {
    cfg.validate()?;
    let slices = all_slices(data);
    if slices.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    for s in &slices {
        check_image(s, bundle.config.autoencoder.input_resolution)?;
    }
    // fixed evaluation subset spread over the corpus
    let eval_n = slices.len().min(32);
    let eval_set: Vec<SliceImage> = (0..eval_n).map(|k| slices[k * slices.len() / eval_n].clone()).collect();
    let mut state = TrainState::resume_or_new(resume, Stage::Autoencoder, cfg, &bundle.ae_params);

    let channels = bundle.config.autoencoder.image_channels;
    let mut step = |bundle: &mut ModelBundle, st: &mut TrainState, rng: &mut ChaCha8Rng, acc: &mut Accum| -> Result<()> {
        let picks: Vec<&SliceImage> = (0..cfg.batch_size).map(|_| &slices[rng.random_range(0..slices.len())]).collect();
        let (grads, rec, kl) = {
            let tape = Tape::new();
            let p = bundle.ae_params.bind(&tape, true);
            let x = tape.constant(images_to_tensor::<f32>(&picks, channels));
            let loss = bundle.autoencoder.loss(&p, x, rng);
            let total = loss.total.item() as f64;
            ensure_finite("autoencoder", total, st.step)?;
            (p.grads(&loss.total.backward()), loss.rec.item() as f64, loss.kl.item() as f64)
        };
        st.optimizer.update(&mut bundle.ae_params, &grads);
        acc.add(0, rec);
        acc.add(1, kl);
        Ok(())
    };
    let mut eval = |bundle: &ModelBundle, acc: &Accum| -> Result<(f64, [Option<f64>; 4])> {
        let e = reconstruction_error(bundle, &eval_set)?;
        Ok((e, [acc.mean(0), acc.mean(1), None, None]))
    };
    Loop {
        cfg,
        lower_is_better: true,
        early_stop: true,
    }
    .run(bundle, &mut state, &mut step, &mut eval, hook)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub train: TrainConfig,
    pub grades: GradeSource,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                steps: 5000,
                patience: 0,
                ..TrainConfig::default()
            },
            grades: GradeSource::GroundTruth { smoothing: 0.1 },
        }
    }
}

/// Per-sample inputs of the diffusion stage that do not change while it trains.
struct Prepared {
    xray: ArrayD<f32>,
    probs: [f64; NUM_GRADES],
    i_map: Array2<f32>,
    posteriors: Vec<GaussianPosterior>,
    depths: Vec<f64>,
    slices: Vec<SliceImage>,
}

fn prepare(bundle: &ModelBundle, data: &[PairedSample], grades: GradeSource) -> Result<Vec<Prepared>> {
    let g = bundle.config.guidance;
    data.iter()
        .map(|s| {
            let slices = s.volume.slices();
            Ok(Prepared {
                xray: images_to_tensor(&[&s.xray], bundle.config.condition.image_channels),
                probs: *grades.distribution(s, bundle)?.probs(),
                i_map: IntensityMap::from_image(&s.xray, g.height, g.width)?.values().clone(),
                posteriors: slices
                    .iter()
                    .map(|x| encode_kl(x, &bundle.autoencoder, &bundle.ae_params))
                    .collect::<Result<_>>()?,
                depths: s.volume.depths().to_vec(),
                slices,
            })
        })
        .collect()
}

fn stack<F: Copy + num_traits::Zero>(parts: &[ArrayD<F>]) -> ArrayD<F> {
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal item shapes")
}

/// Stage two: E2, the U-Net and the guidance module on the ε objective with
/// E1/D frozen. The EMA shadow follows every step. The reconstruction error
/// of the one-step estimate of the clean slice is logged, never optimized.
pub fn train_diffusion(
    bundle: &mut ModelBundle,
    data: &[PairedSample],
    cfg: &DiffusionTrainConfig,
    resume: Option<TrainState>,
    hook: &mut EpochHook<'_>,
) -> Result<TrainState> {
    cfg.train.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    let frozen_before = bundle.ae_params.fingerprint();
    let sched = bundle.config.schedule.build()?;
    let prepared = prepare(bundle, data, cfg.grades)?;
    let mut state = TrainState::resume_or_new(resume, Stage::Diffusion, &cfg.train, &bundle.diff_params);
    let scale = bundle.config.latent_scale;
    let total_t = sched.total_steps();
    let latent_shape = {
        let [c, h, w] = prepared[0].posteriors[0].mean.shape();
        (c, h, w)
    };

    // (sample, slice, t, z_t, eps_hat) of item 0 in the latest batch, for monitoring
    let last: RefCell<Option<(usize, usize, usize, LatentGrid<f32>, LatentGrid<f32>)>> = RefCell::new(None);
    let mut step = |bundle: &mut ModelBundle, st: &mut TrainState, rng: &mut ChaCha8Rng, acc: &mut Accum| -> Result<()> {
        let b = cfg.train.batch_size;
        let mut xr = Vec::with_capacity(b);
        let mut probs = Vec::with_capacity(b);
        let mut imaps = Vec::with_capacity(b);
        let mut zts = Vec::with_capacity(b);
        let mut eps = Vec::with_capacity(b);
        let mut steps = Vec::with_capacity(b);
        let mut depths = Vec::with_capacity(b);
        let mut first = (0, 0, 0);
        for item in 0..b {
            let si = rng.random_range(0..prepared.len());
            let pr = &prepared[si];
            let k = rng.random_range(0..pr.posteriors.len());
            let t = rng.random_range(1..=total_t);
            let z0 = sample_posterior(&pr.posteriors[k], scale, rng);
            let e = LatentGrid::<f32>::randn(latent_shape, rng);
            zts.push(forward_noise(&z0, t, &e, &sched)?);
            eps.push(e);
            xr.push(pr.xray.clone());
            probs.push(ArrayD::from_shape_vec(IxDyn(&[1, NUM_GRADES]), pr.probs.iter().map(|&v| v as f32).collect()).expect("5 probs"));
            imaps.push(pr.i_map.clone().insert_axis(Axis(0)).into_dyn());
            steps.push(t as f64);
            depths.push(pr.depths[k]);
            if item == 0 {
                first = (si, k, t);
            }
        }
        let (grads, loss, eps_hat0) = {
            let tape = Tape::new();
            let p = bundle.diff_params.bind(&tape, true);
            let cond = bundle.denoiser.condition(
                &p,
                tape.constant(stack(&xr)),
                tape.constant(stack(&probs)),
                tape.constant(stack(&imaps)),
                depths,
            )?;
            let zt_refs: Vec<&LatentGrid<f32>> = zts.iter().collect();
            let eps_refs: Vec<&LatentGrid<f32>> = eps.iter().collect();
            let eps_hat = bundle.denoiser.eps(&p, tape.constant(latent_to_tensor(&zt_refs)), &steps, &cond)?;
            let loss = (eps_hat - tape.constant(latent_to_tensor(&eps_refs))).sqr().mean_all();
            let l = loss.item() as f64;
            ensure_finite("diffusion", l, st.step)?;
            (p.grads(&loss.backward()), l, tensor_to_latent(&eps_hat.value(), 0))
        };
        st.optimizer.update(&mut bundle.diff_params, &grads);
        bundle.ema.update(&bundle.diff_params.flatten())?;
        acc.add(0, loss);
        *last.borrow_mut() = Some((first.0, first.1, first.2, zts.swap_remove(0), eps_hat0));
        Ok(())
    };
    let mut eval = |bundle: &ModelBundle, acc: &Accum| -> Result<(f64, [Option<f64>; 4])> {
        let diff = acc.mean(0).unwrap_or(f64::NAN);
        let rec = match &*last.borrow() {
            Some((si, k, t, z_t, eps_hat)) => {
                let z0_hat = predict_x0(z_t, eps_hat, *t, &sched)?;
                let x_hat = decode(&z0_hat, scale, &bundle.autoencoder, &bundle.ae_params)?;
                let x = &prepared[*si].slices[*k];
                Some(crate::diffusion::mean_squared_error(
                    x.as_slice().expect("standard layout"),
                    x_hat.as_slice().expect("standard layout"),
                ))
            }
            None => None,
        };
        Ok((diff, [rec, None, Some(diff), None]))
    };
    Loop {
        cfg: &cfg.train,
        lower_is_better: true,
        early_stop: cfg.train.patience > 0,
    }
    .run(bundle, &mut state, &mut step, &mut eval, hook)?;

    let frozen_after = bundle.ae_params.fingerprint();
    if frozen_after != frozen_before {
        return Err(Error::Domain("autoencoder parameters changed during diffusion training".into()));
    }
    state.report.frozen_fingerprint = Some((frozen_before, frozen_after));
    Ok(state)
}

/// Fraction of samples whose argmax grade matches the label.
pub fn classifier_accuracy(bundle: &ModelBundle, data: &[PairedSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    let mut hits = 0usize;
    for chunk in data.chunks(32) {
        let tape = Tape::inference();
        let p = bundle.cls_params.bind(&tape, false);
        let refs: Vec<&SliceImage> = chunk.iter().map(|s| &s.xray).collect();
        let logits = bundle
            .classifier
            .logits(&p, tape.constant(images_to_tensor::<f32>(&refs, bundle.config.classifier.image_channels)))
            .value();
        for (r, s) in chunk.iter().enumerate() {
            let row = logits.index_axis(Axis(0), r);
            let arg = (0..NUM_GRADES).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            hits += usize::from(arg == s.grade);
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Cross-entropy training of the grade classifier on radiographs.
pub fn train_classifier(
    bundle: &mut ModelBundle,
    data: &[PairedSample],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    hook: &mut EpochHook<'_>,
) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    if let Some(s) = data.iter().find(|s| s.grade >= NUM_GRADES) {
        return Err(Error::Domain(format!("grade {} out of range", s.grade)));
    }
    let mut state = TrainState::resume_or_new(resume, Stage::Classifier, cfg, &bundle.cls_params);
    let channels = bundle.config.classifier.image_channels;
    let mut step = |bundle: &mut ModelBundle, st: &mut TrainState, rng: &mut ChaCha8Rng, acc: &mut Accum| -> Result<()> {
        let picks: Vec<&PairedSample> = (0..cfg.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let (grads, loss) = {
            let tape = Tape::new();
            let p = bundle.cls_params.bind(&tape, true);
            let refs: Vec<&SliceImage> = picks.iter().map(|s| &s.xray).collect();
            let logits = bundle.classifier.logits(&p, tape.constant(images_to_tensor::<f32>(&refs, channels)));
            let onehot = ArrayD::from_shape_fn(IxDyn(&[picks.len(), NUM_GRADES]), |ix| {
                if picks[ix[0]].grade == ix[1] {
                    1.0f32
                } else {
                    0.0
                }
            });
            let loss = (logits.log_softmax_last() * tape.constant(onehot))
                .sum_all()
                .scale(-1.0 / picks.len() as f32);
            let l = loss.item() as f64;
            ensure_finite("classifier", l, st.step)?;
            (p.grads(&loss.backward()), l)
        };
        st.optimizer.update(&mut bundle.cls_params, &grads);
        acc.add(0, loss);
        Ok(())
    };
    let mut eval =
        |bundle: &ModelBundle, acc: &Accum| -> Result<(f64, [Option<f64>; 4])> { Ok((classifier_accuracy(bundle, data)?, [None, None, None, acc.mean(0)])) };
    Loop {
        cfg,
        lower_is_better: false,
        early_stop: cfg.patience > 0,
    }
    .run(bundle, &mut state, &mut step, &mut eval, hook)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    /// DDIM steps per slice.
    pub steps: usize,
    pub seed: u64,
    /// Slice-parallel worker threads; results do not depend on this.
    pub workers: usize,
    pub classifier: ClassifierMode,
    /// Sample with the EMA shadow rather than the live weights.
    pub use_ema: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            seed: 0,
            workers: 1,
            classifier: ClassifierMode::Learned,
            use_ema: true,
        }
    }
}

/// Depth-independent conditioning of one radiograph, computed once per volume.
#[derive(Debug, Clone)]
pub struct PreparedCondition {
    params: ParamStore<f32>,
    cond_latent: ArrayD<f32>,
    context: ArrayD<f32>,
    guide: ArrayD<f32>,
    sched: NoiseSchedule,
    latent_shape: (usize, usize, usize),
}

pub fn prepare_condition(x_c: &SliceImage, bundle: &ModelBundle, mode: ClassifierMode, use_ema: bool) -> Result<PreparedCondition> {
    check_image(x_c, bundle.config.condition.input_resolution)?;
    let params = if use_ema { bundle.ema_params() } else { bundle.diff_params.clone() };
    let probs = koa_classify_stub(x_c, &bundle.classifier, &bundle.cls_params, mode)?;
    let g = bundle.config.guidance;
    let i_map = IntensityMap::from_image(x_c, g.height, g.width)?;
    let (cond_latent, context, guide) = {
        let tape = Tape::inference();
        let p = params.bind(&tape, false);
        let pv = ArrayD::from_shape_vec(IxDyn(&[1, NUM_GRADES]), probs.probs().iter().map(|&v| v as f32).collect()).expect("5 probs");
        let c = bundle.denoiser.condition(
            &p,
            tape.constant(images_to_tensor(&[x_c], bundle.config.condition.image_channels)),
            tape.constant(pv),
            tape.constant(i_map.values().clone().insert_axis(Axis(0)).into_dyn()),
            Vec::new(),
        )?;
        (
            c.cond_latent.value().as_ref().clone(),
            c.context.value().as_ref().clone(),
            c.guide.value().as_ref().clone(),
        )
    };
    let a = &bundle.config.autoencoder;
    let r = a.latent_resolution();
    Ok(PreparedCondition {
        params,
        cond_latent,
        context,
        guide,
        sched: bundle.config.schedule.build()?,
        latent_shape: (a.latent_channels, r, r),
    })
}

/// Noise estimate for one latent `z` at timestep `t` and `depth`.
pub fn predict_noise(prep: &PreparedCondition, bundle: &ModelBundle, z: &LatentGrid<f32>, t: usize, depth: f64) -> Result<LatentGrid<f32>> {
    let tape = Tape::inference();
    let p = prep.params.bind(&tape, false);
    let c = crate::networks::Conditioning {
        cond_latent: tape.constant(prep.cond_latent.clone()),
        context: tape.constant(prep.context.clone()),
        guide: tape.constant(prep.guide.clone()),
        depths: vec![depth],
    };
    let eps = bundle.denoiser.eps(&p, tape.constant(latent_to_tensor(&[z])), &[t as f64], &c)?;
    Ok(tensor_to_latent(&eps.value(), 0))
}

/// DDIM from a seeded unit-Gaussian latent at one depth, then decode.
pub fn sample_slice(prep: &PreparedCondition, bundle: &ModelBundle, depth: f64, steps: usize, seed: u64) -> Result<SliceImage> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::Domain(format!("depth {depth} outside [0, 1]")));
    }
    let indices = uniform_step_indices(prep.sched.total_steps(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_t = LatentGrid::<f32>::randn(prep.latent_shape, &mut rng);
    let z0 = ddim_sample(
        |z: &LatentGrid<f32>, t: usize, _: &()| predict_noise(prep, bundle, z, t, depth),
        z_t,
        &(),
        &indices,
        &prep.sched,
    )?;
    if !z0.is_finite() {
        return Err(Error::NonFinite("sampled latent".into()));
    }
    decode(&z0, bundle.config.latent_scale, &bundle.autoencoder, &bundle.ae_params)
}

/// One slice at `depth` for radiograph `x_c`, deterministic in `seed`.
pub fn infer_slice(x_c: &SliceImage, depth: f64, bundle: &ModelBundle, cfg: &InferConfig) -> Result<SliceImage> {
    if cfg.steps == 0 {
        return Err(Error::Domain("steps must be at least 1".into()));
    }
    let prep = prepare_condition(x_c, bundle, cfg.classifier, cfg.use_ema)?;
    sample_slice(&prep, bundle, depth, cfg.steps, cfg.seed)
}

/// Seed of slice `k` in a volume generated with `run_seed`.
pub fn slice_seed(run_seed: u64, k: usize) -> u64 {
    mix_seed(run_seed, k as u64)
}

/// `s` slices at depths `k/(s−1)`; slice `k` is sampled with
/// [`slice_seed`]`(cfg.seed, k)`, so the result does not depend on the
/// worker count or evaluation order.
pub fn infer_volume(x_c: &SliceImage, s: usize, bundle: &ModelBundle, cfg: &InferConfig) -> Result<Volume> {
    infer_volume_timed(x_c, s, bundle, cfg).map(|(v, _)| v)
}

/// As [`infer_volume`], also returning the wall-clock seconds of each slice.
pub fn infer_volume_timed(x_c: &SliceImage, s: usize, bundle: &ModelBundle, cfg: &InferConfig) -> Result<(Volume, Vec<f64>)> {
    let depths = depth_grid(s)?;
    if cfg.steps == 0 || cfg.workers == 0 {
        return Err(Error::Domain("steps and workers must be at least 1".into()));
    }
    let prep = prepare_condition(x_c, bundle, cfg.classifier, cfg.use_ema)?;
    let run = |k: usize| -> Result<(SliceImage, f64)> {
        let t0 = Instant::now();
        let img = sample_slice(&prep, bundle, depths[k], cfg.steps, slice_seed(cfg.seed, k))?;
        Ok((img, t0.elapsed().as_secs_f64()))
    };
    let out: Vec<(SliceImage, f64)> = if cfg.workers == 1 {
        (0..s).map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..s).into_par_iter().map(run).collect::<Result<_>>())?
    };
    let (slices, times): (Vec<SliceImage>, Vec<f64>) = out.into_iter().unzip();
    Ok((Volume::from_slices(&slices, depths, Provenance::Generated)?, times))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpRow {
    pub slices: usize,
    pub correlation: f64,
}

/// Mean adjacent-slice correlation of generated volumes for each slice count.
pub fn interp_study(x_c: &SliceImage, slice_counts: &[usize], bundle: &ModelBundle, cfg: &InferConfig) -> Result<Vec<InterpRow>> {
    slice_counts
        .iter()
        .map(|&s| {
            let v = infer_volume(x_c, s, bundle, cfg)?;
            Ok(InterpRow {
                slices: s,
                correlation: adjacent_slice_correlation(&v)?,
            })
        })
        .collect()
}

pub const INTERP_CSV_HEADER: [&str; 3] = ["slices", "correlation", "reference"];

/// `slices,correlation,reference`; the reference column repeats the
/// ground-truth correlation when one is known.
pub fn write_interp_csv<W: Write>(rows: &[InterpRow], reference: Option<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(INTERP_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.slices.to_string(),
            format!("{:?}", r.correlation),
            reference.map(|v| format!("{v:?}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Decoded images of a batch of latents; used by tooling that inspects the
/// autoencoder directly.
pub fn reconstruct(bundle: &ModelBundle, slices: &[SliceImage]) -> Result<Vec<SliceImage>> {
    let ae = &bundle.autoencoder;
    let tape = Tape::inference();
    let p = bundle.ae_params.bind(&tape, false);
    let refs: Vec<&SliceImage> = slices.iter().collect();
    let (mean, _) = ae.encode(&p, tape.constant(images_to_tensor::<f32>(&refs, ae.cfg.image_channels)));
    Ok(tensor_to_images(&ae.decode(&p, mean).value()))
}
