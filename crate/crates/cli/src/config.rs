//! Run configuration: a preset, optionally overlaid by a TOML file, then by
//! command-line flags.

use std::path::{Path, PathBuf};

use pseudomri::data::{PhantomConfig, RegionSpec};
use pseudomri::metrics::{CannyParams, EvalSettings, SsimParams, UNIT_PEAK};
use pseudomri::networks::{ClassifierMode, ModelConfig};
use pseudomri::nn::AdamWConfig;
use pseudomri::pipeline::{DiffusionTrainConfig, GradeSource, InferConfig, TrainConfig};
use pseudomri::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable that overrides `paths.root`.
pub const OUT_ENV: &str = "PSEUDOMRI_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 64x64 phantoms, 16 slices, small networks.
    DeskScale,
    /// Full-size networks, 256 px data, lr 1e-6 and batch 64.
    PaperScale,
    /// A few seconds per stage; for checking that a setup works.
    Smoke,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::DeskScale => "desk-scale",
            Preset::PaperScale => "paper-scale",
            Preset::Smoke => "smoke",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Base for every relative path below.
    pub root: PathBuf,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            root: PathBuf::from("."),
            dataset: PathBuf::from("data"),
            checkpoints: PathBuf::from("checkpoints"),
            outputs: PathBuf::from("outputs"),
        }
    }
}

impl Paths {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.resolve(&self.dataset)
    }

    pub fn manifest(&self) -> PathBuf {
        self.dataset_dir().join(pseudomri::data::DatasetManifest::FILE_NAME)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.resolve(&self.checkpoints)
    }

    pub fn ae_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("ae.ckpt")
    }

    pub fn diff_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("diff.ckpt")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.outputs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Number of phantoms generated by `gen-data`.
    pub samples: usize,
    /// `[train, val]`.
    pub split: [usize; 2],
    pub phantom: PhantomConfig,
}

/// Optimizer and loop settings of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Steps between evaluations and checkpoints.
    pub epoch_steps: usize,
    /// Evaluations without improvement before stopping (0 disables).
    pub patience: usize,
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                lr: self.lr,
                warmup_steps: self.warmup_steps,
                weight_decay: self.weight_decay,
                clip_norm: self.clip_norm,
                ..AdamWConfig::default()
            },
            epoch_steps: self.epoch_steps,
            patience: self.patience,
            seed,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        self.to_train_config(0)
            .validate()
            .map_err(|e| Error::Config(format!("{what}: {e}")))?;
        if !(self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("{what}: weight_decay and clip_norm must be non-negative")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSection {
    /// Slices per generated volume.
    pub slices: usize,
    /// DDIM steps per slice.
    pub steps: usize,
    pub workers: usize,
    pub use_ema: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub ssim: SsimParams,
    pub canny: CannyParams,
    /// Region for RSSIM. When absent the region stored with the prediction
    /// is used, then the whole image.
    pub region: Option<RegionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpSection {
    pub slice_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Seeds data generation, splitting, initialisation, training and sampling.
    pub seed: u64,
    pub paths: Paths,
    pub data: DataSection,
    pub model: ModelConfig,
    /// Grade distribution used by the guidance module, in training and at
    /// inference.
    pub grade_source: GradeSource,
    pub train_ae: TrainSection,
    pub train_classifier: TrainSection,
    pub train_diff: TrainSection,
    pub infer: InferSection,
    pub metrics: MetricsSection,
    pub interp: InterpSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::DeskScale => desk(),
            Preset::PaperScale => paper(),
            Preset::Smoke => smoke(),
        }
    }

    /// Preset, then the file (any subset of keys), then flags, then the
    /// output-root environment variable unless `--out` was given.
    pub fn load(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let text = match file {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::Missing(format!("config file {}", p.display())));
                }
                std::fs::read_to_string(p)?
            }
            None => String::new(),
        };
        let out_env = std::env::var_os(OUT_ENV).map(PathBuf::from);
        Self::resolve(&text, flags, out_env)
    }

    pub fn resolve(text: &str, flags: &Overrides, out_env: Option<PathBuf>) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let preset = match (flags.preset, file.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("preset: {e}")))?,
            (None, None) => Preset::DeskScale,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, file);
        base.insert("preset".into(), toml::Value::String(preset.name().into()));
        let mut cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if let Some(w) = flags.workers {
            cfg.infer.workers = w;
        }
        if let Some(out) = flags.out.clone().or(out_env) {
            cfg.paths.root = out;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let d = &self.data;
        if d.samples == 0 {
            return Err(Error::Config("data.samples must be at least 1".into()));
        }
        if d.split.contains(&0) {
            return Err(Error::Config("data.split parts must be positive".into()));
        }
        if d.phantom.resolution != self.model.autoencoder.input_resolution {
            return Err(Error::Config(format!(
                "phantom resolution {} differs from the model input resolution {}",
                d.phantom.resolution, self.model.autoencoder.input_resolution
            )));
        }
        if d.phantom.slices < 2 || !(d.phantom.base_gap > 0.0 && d.phantom.base_gap < 0.5) || !(d.phantom.xray_noise >= 0.0) {
            return Err(Error::Config("phantom needs >= 2 slices, base_gap in (0, 0.5), xray_noise >= 0".into()));
        }
        self.train_ae.validate("train_ae")?;
        self.train_classifier.validate("train_classifier")?;
        self.train_diff.validate("train_diff")?;
        if let GradeSource::GroundTruth { smoothing } = self.grade_source {
            if !(0.0..1.0).contains(&smoothing) {
                return Err(Error::Config("grade_source.smoothing must lie in [0, 1)".into()));
            }
        }
        let i = &self.infer;
        if i.slices == 0 || i.workers == 0 {
            return Err(Error::Config("infer.slices and infer.workers must be positive".into()));
        }
        if i.steps == 0 || i.steps > self.model.schedule.total_steps {
            return Err(Error::Config(format!(
                "infer.steps must lie in [1, {}]",
                self.model.schedule.total_steps
            )));
        }
        let m = &self.metrics;
        if m.ssim.window % 2 == 0 || !(m.ssim.sigma > 0.0) || !(m.ssim.k1 > 0.0 && m.ssim.k2 > 0.0) {
            return Err(Error::Config("metrics.ssim needs an odd window and positive sigma, k1, k2".into()));
        }
        let c = &m.canny;
        if !(c.sigma > 0.0 && 0.0 < c.low && c.low < c.high && c.high <= 1.0) {
            return Err(Error::Config("metrics.canny needs sigma > 0 and 0 < low < high <= 1".into()));
        }
        if let Some(r) = m.region {
            let n = self.model.autoencoder.input_resolution;
            if r.is_empty() || r.row1 > n || r.col1 > n {
                return Err(Error::Config(format!("metrics.region {r:?} does not fit a {n}x{n} image")));
            }
        }
        if self.interp.slice_counts.is_empty() || self.interp.slice_counts.iter().any(|&s| s < 2) {
            return Err(Error::Config("interp.slice_counts needs entries of at least 2".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn ae_train(&self) -> TrainConfig {
        self.train_ae.to_train_config(self.seed)
    }

    pub fn classifier_train(&self) -> TrainConfig {
        self.train_classifier.to_train_config(self.seed)
    }

    pub fn diff_train(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            train: self.train_diff.to_train_config(self.seed),
            grades: self.grade_source,
        }
    }

    /// Inference settings; `grade` is the known grade of the input, needed
    /// when the grade source is the ground truth.
    pub fn infer_config(&self, grade: Option<usize>) -> Result<InferConfig> {
        let classifier = match (self.grade_source, grade) {
            (GradeSource::Classifier, _) => ClassifierMode::Learned,
            (GradeSource::GroundTruth { smoothing }, Some(grade)) => ClassifierMode::Bypass { grade, smoothing },
            (GradeSource::GroundTruth { .. }, None) => {
                return Err(Error::Config(
                    "grade_source is ground-truth but the input has no known grade; pass --sample or --grade".into(),
                ))
            }
        };
        Ok(InferConfig {
            steps: self.infer.steps,
            seed: self.seed,
            workers: self.infer.workers,
            classifier,
            use_ema: self.infer.use_ema,
        })
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            peak: UNIT_PEAK,
            ssim: self.metrics.ssim,
            canny: self.metrics.canny,
        }
    }
}

/// Recursive overlay of `top` onto `base`; tables merge, everything else is
/// replaced.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn train(steps: usize, batch_size: usize, lr: f64, epoch_steps: usize, patience: usize) -> TrainSection {
    TrainSection {
        steps,
        batch_size,
        lr,
        warmup_steps: 100.min(steps / 10),
        weight_decay: 1e-2,
        clip_norm: 1.0,
        epoch_steps,
        patience,
    }
}

fn metrics() -> MetricsSection {
    MetricsSection {
        ssim: SsimParams::default(),
        canny: CannyParams::default(),
        region: None,
    }
}

fn desk() -> RunConfig {
    RunConfig {
        preset: Preset::DeskScale,
        seed: 0,
        paths: Paths::default(),
        data: DataSection {
            samples: 100,
            split: [7, 3],
            phantom: PhantomConfig::default(),
        },
        model: ModelConfig::desk_scale(),
        grade_source: GradeSource::Classifier,
        train_ae: train(2000, 8, 1e-3, 100, 10),
        train_classifier: train(600, 16, 3e-3, 100, 0),
        train_diff: train(5000, 8, 2e-4, 250, 0),
        infer: InferSection {
            slices: 16,
            steps: 50,
            workers: 1,
            use_ema: true,
        },
        metrics: metrics(),
        interp: InterpSection {
            slice_counts: vec![8, 16, 32],
        },
    }
}

fn paper() -> RunConfig {
    let mut model = ModelConfig::paper_scale();
    model.ema_decay = 0.99;
    model.latent_scale = 0.2;
    RunConfig {
        preset: Preset::PaperScale,
        seed: 0,
        paths: Paths::default(),
        data: DataSection {
            samples: 4262,
            split: [7, 3],
            phantom: PhantomConfig {
                resolution: 256,
                slices: 50,
                ..PhantomConfig::default()
            },
        },
        model,
        grade_source: GradeSource::Classifier,
        train_ae: train(100_000, 64, 1e-6, 1000, 10),
        train_classifier: train(10_000, 64, 1e-4, 1000, 0),
        train_diff: train(100_000, 64, 1e-6, 1000, 0),
        infer: InferSection {
            slices: 50,
            steps: 50,
            workers: 1,
            use_ema: true,
        },
        metrics: metrics(),
        interp: InterpSection {
            slice_counts: vec![25, 50, 100],
        },
    }
}

fn smoke() -> RunConfig {
    RunConfig {
        preset: Preset::Smoke,
        seed: 0,
        paths: Paths::default(),
        data: DataSection {
            samples: 10,
            split: [7, 3],
            phantom: PhantomConfig {
                resolution: 32,
                slices: 6,
                ..PhantomConfig::default()
            },
        },
        model: ModelConfig::tiny(32),
        grade_source: GradeSource::GroundTruth { smoothing: 0.1 },
        train_ae: train(10, 2, 1e-3, 5, 0),
        train_classifier: train(0, 2, 1e-3, 5, 0),
        train_diff: train(10, 2, 1e-3, 5, 0),
        infer: InferSection {
            slices: 6,
            steps: 5,
            workers: 1,
            use_ema: true,
        },
        metrics: metrics(),
        interp: InterpSection {
            slice_counts: vec![3, 6, 12],
        },
    }
}
