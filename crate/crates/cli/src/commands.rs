//! The operator verbs. Each one reads the resolved [`RunConfig`], writes its
//! artifacts together with a copy of that config, and returns what it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use pseudomri::checkpoint::Checkpoint;
use pseudomri::data::{
    generate_phantom_dataset, load_dataset, read_slice, read_volume, save_dataset, write_tensor, DatasetManifest,
    PairedSample, RegionSpec, Split, Volume,
};
use pseudomri::metrics::{adjacent_slice_correlation, evaluate_volumes, read_png, write_png, EvalReport};
use pseudomri::networks::{ModelBundle, SliceImage};
use pseudomri::pipeline::{
    infer_volume_timed, interp_study as run_interp, train_autoencoder, train_classifier, train_diffusion,
    write_interp_csv, InterpRow, Stage, TrainReport, TrainState,
};
use pseudomri::{Error, Result};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "run_config.toml";
pub const REGION_FILE: &str = "region.toml";

/// Process exit code for an error: 3 for numeric failure, 2 for bad or
/// missing input, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => 3,
        Error::Domain(_)
        | Error::ShapeMismatch { .. }
        | Error::IndexOutOfRange { .. }
        | Error::Checksum { .. }
        | Error::Format { .. }
        | Error::Missing(_)
        | Error::Config(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

fn run_table(cfg: &RunConfig) -> Result<toml::Table> {
    let mut t = toml::Table::new();
    t.insert(
        "run".into(),
        toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?,
    );
    Ok(t)
}

fn save_checkpoint(path: &Path, cfg: &RunConfig, bundle: &ModelBundle, state: Option<(&TrainState, Stage)>) -> Result<()> {
    let mut ck = bundle.to_checkpoint(run_table(cfg)?)?;
    if let Some((st, stage)) = state {
        let store = match stage {
            Stage::Autoencoder => &bundle.ae_params,
            Stage::Diffusion => &bundle.diff_params,
            Stage::Classifier => &bundle.cls_params,
        };
        st.write_into(&mut ck, store)?;
    }
    ck.write_atomic(path)
}

fn read_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Missing(format!("{what} checkpoint {}", path.display())));
    }
    Checkpoint::read(path)
}

fn write_report(dir: &Path, report: &TrainReport, cfg: &RunConfig) -> Result<PathBuf> {
    write_config(dir, cfg)?;
    let path = dir.join("report.csv");
    report.write_csv(fs::File::create(&path)?)?;
    Ok(path)
}

fn print_epoch(st: &TrainState) {
    if let Some(e) = st.report.epochs.last() {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        println!(
            "  epoch {:>4} step {:>6}  rec {}  kl {}  diff {}  cls {}  eval {:.6}  {:.1}s",
            e.epoch,
            e.step,
            opt(e.loss_rec),
            opt(e.loss_kl),
            opt(e.loss_diff),
            opt(e.loss_cls),
            e.eval,
            e.wall_seconds
        );
    }
}

fn training_set(cfg: &RunConfig) -> Result<(DatasetManifest, Vec<PairedSample>)> {
    let (manifest, samples) = load_dataset(&cfg.paths.manifest())?;
    if manifest.resolution != cfg.model.autoencoder.input_resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from the model input resolution {}",
            manifest.resolution, cfg.model.autoencoder.input_resolution
        )));
    }
    let train_ids = manifest.ids(Split::Train);
    let train: Vec<PairedSample> = samples.into_iter().filter(|s| train_ids.contains(&s.id.as_str())).collect();
    if train.is_empty() {
        return Err(Error::Domain("dataset has no training samples".into()));
    }
    Ok((manifest, train))
}

/// Generates and writes the phantom corpus; returns the manifest and a
/// digest over every tensor checksum.
pub fn gen_data(cfg: &RunConfig) -> Result<(DatasetManifest, String)> {
    let d = &cfg.data;
    let samples = generate_phantom_dataset(d.samples, &d.phantom, cfg.seed)?;
    let dir = cfg.paths.dataset_dir();
    let manifest = save_dataset(&dir, &samples, Some((&d.phantom, cfg.seed)), d.split, cfg.seed)?;
    write_config(&dir, cfg)?;
    let mut h = Sha256::new();
    for e in &manifest.samples {
        for p in [&e.xray, &e.volume] {
            let mut side = dir.join(p).into_os_string();
            side.push(".toml");
            h.update(fs::read(PathBuf::from(side))?);
        }
    }
    let digest = hex::encode(h.finalize());
    println!(
        "wrote {} samples ({} train / {} val) to {}",
        manifest.samples.len(),
        manifest.ids(Split::Train).len(),
        manifest.ids(Split::Val).len(),
        dir.display()
    );
    println!("corpus digest {digest}");
    Ok((manifest, digest))
}

/// Stage one: the autoencoder, then the grade classifier. Checkpoints go to
/// `ae.ckpt` after every epoch; with `resume` the run continues from it.
pub fn train_ae(cfg: &RunConfig, resume: bool) -> Result<ModelBundle> {
    let (_, train) = training_set(cfg)?;
    let path = cfg.paths.ae_checkpoint();
    let (mut bundle, ae_state, cls_state) = if resume {
        let ck = read_checkpoint(&path, "autoencoder")?;
        let bundle = ModelBundle::from_checkpoint(&ck)?;
        check_model(cfg, &bundle)?;
        let ae = TrainState::read_from(&ck, Stage::Autoencoder, &bundle.ae_params)?;
        let cls = TrainState::read_from(&ck, Stage::Classifier, &bundle.cls_params)?;
        println!("resuming from {}", path.display());
        (bundle, ae, cls)
    } else {
        (ModelBundle::new(cfg.model.clone(), cfg.seed)?, None, None)
    };
    println!(
        "autoencoder: {} parameters, {} training samples",
        bundle.ae_params.num_scalars(),
        train.len()
    );
    let out = cfg.paths.output_dir();

    if cls_state.is_none() {
        let st = train_autoencoder(&mut bundle, &train, &cfg.ae_train(), ae_state, &mut |b, st| {
            print_epoch(st);
            save_checkpoint(&path, cfg, b, Some((st, Stage::Autoencoder)))
        })?;
        save_checkpoint(&path, cfg, &bundle, Some((&st, Stage::Autoencoder)))?;
        let csv = write_report(&out.join("train_ae"), &st.report, cfg)?;
        println!("autoencoder done at step {}; report {}", st.step, csv.display());
    }

    if cfg.train_classifier.steps > 0 {
        println!("classifier: {} parameters", bundle.cls_params.num_scalars());
        let st = train_classifier(&mut bundle, &train, &cfg.classifier_train(), cls_state, &mut |b, st| {
            print_epoch(st);
            save_checkpoint(&path, cfg, b, Some((st, Stage::Classifier)))
        })?;
        save_checkpoint(&path, cfg, &bundle, Some((&st, Stage::Classifier)))?;
        let csv = write_report(&out.join("train_classifier"), &st.report, cfg)?;
        println!("classifier done at step {}; report {}", st.step, csv.display());
    }
    println!("autoencoder fingerprint {}", bundle.ae_params.fingerprint());
    println!("checkpoint {}", path.display());
    Ok(bundle)
}

fn check_model(cfg: &RunConfig, bundle: &ModelBundle) -> Result<()> {
    if bundle.config != cfg.model {
        return Err(Error::Config(
            "the checkpoint's model config differs from the run config".into(),
        ));
    }
    Ok(())
}

/// Stage two: the denoiser with the autoencoder from `ae.ckpt` frozen.
pub fn train_diff(cfg: &RunConfig, resume: bool) -> Result<ModelBundle> {
    let (_, train) = training_set(cfg)?;
    let path = cfg.paths.diff_checkpoint();
    let (mut bundle, state) = if resume {
        let ck = read_checkpoint(&path, "diffusion")?;
        let bundle = ModelBundle::from_checkpoint(&ck)?;
        let st = TrainState::read_from(&ck, Stage::Diffusion, &bundle.diff_params)?;
        println!("resuming from {}", path.display());
        (bundle, st)
    } else {
        let ck = read_checkpoint(&cfg.paths.ae_checkpoint(), "autoencoder")?;
        (ModelBundle::from_checkpoint(&ck)?, None)
    };
    check_model(cfg, &bundle)?;
    println!(
        "denoiser: {} parameters, {} training samples",
        bundle.diff_params.num_scalars(),
        train.len()
    );
    let st = train_diffusion(&mut bundle, &train, &cfg.diff_train(), state, &mut |b, st| {
        print_epoch(st);
        save_checkpoint(&path, cfg, b, Some((st, Stage::Diffusion)))
    })?;
    save_checkpoint(&path, cfg, &bundle, Some((&st, Stage::Diffusion)))?;
    if let Some((before, after)) = &st.report.frozen_fingerprint {
        println!("autoencoder fingerprint before {before}");
        println!("autoencoder fingerprint after  {after}");
        println!("autoencoder frozen: {}", if before == after { "yes" } else { "NO" });
    }
    let csv = write_report(&cfg.paths.output_dir().join("train_diff"), &st.report, cfg)?;
    println!("diffusion done at step {}; report {}; checkpoint {}", st.step, csv.display(), path.display());
    Ok(bundle)
}

/// Conditioning radiograph for inference.
#[derive(Debug, Clone)]
pub enum Input {
    /// A sample of the configured dataset, by id.
    Sample(String),
    /// A tensor file written by this tool, or an 8-bit PNG mapped onto
    /// `[-1, 1]`; `grade` is only needed with ground-truth grades.
    File { path: PathBuf, grade: Option<usize> },
}

struct Resolved {
    name: String,
    xray: SliceImage,
    grade: Option<usize>,
    volume: Option<Volume>,
    region: Option<RegionSpec>,
}

fn resolve_input(cfg: &RunConfig, input: &Input) -> Result<Resolved> {
    match input {
        Input::Sample(id) => {
            let (_, samples) = load_dataset(&cfg.paths.manifest())?;
            let s = samples
                .into_iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::Missing(format!("sample {id} in {}", cfg.paths.manifest().display())))?;
            Ok(Resolved {
                name: s.id,
                xray: s.xray,
                grade: Some(s.grade),
                volume: Some(s.volume),
                region: Some(s.region),
            })
        }
        Input::File { path, grade } => {
            if !path.exists() {
                return Err(Error::Missing(format!("radiograph {}", path.display())));
            }
            let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
            let xray = if is_png { read_png(path, (-1.0, 1.0))? } else { read_slice(path)? };
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "input".into());
            Ok(Resolved {
                name,
                xray,
                grade: *grade,
                volume: None,
                region: None,
            })
        }
    }
}

fn load_diffusion(cfg: &RunConfig) -> Result<ModelBundle> {
    let ck = read_checkpoint(&cfg.paths.diff_checkpoint(), "diffusion")?;
    ModelBundle::from_checkpoint(&ck)
}

#[derive(Debug, Clone)]
pub struct InferOutput {
    pub dir: PathBuf,
    pub volume: Volume,
    pub seconds: Vec<f64>,
}

/// Generates `infer.slices` slices and writes `volume.f32`, one PNG per
/// slice, `timing.csv`, and the RSSIM region when the input is a dataset
/// sample.
pub fn infer(cfg: &RunConfig, input: &Input) -> Result<InferOutput> {
    let bundle = load_diffusion(cfg)?;
    let inp = resolve_input(cfg, input)?;
    let icfg = cfg.infer_config(inp.grade)?;
    let s = cfg.infer.slices;
    let (volume, seconds) = infer_volume_timed(&inp.xray, s, &bundle, &icfg)?;
    let dir = cfg.paths.output_dir().join("infer").join(&inp.name);
    fs::create_dir_all(&dir)?;
    write_tensor(&dir.join("volume.f32"), volume.data())?;
    let mut timing = csv::Writer::from_path(dir.join("timing.csv"))?;
    timing.write_record(["slice", "depth", "seconds"])?;
    for (k, (&d, &t)) in volume.depths().iter().zip(&seconds).enumerate() {
        write_png(&dir.join(format!("slice_{k:03}.png")), &volume.slice(k), (-1.0, 1.0))?;
        timing.write_record([k.to_string(), format!("{d:?}"), format!("{t:?}")])?;
        println!("  slice {k:>3} depth {d:.4}  {:.1} ms", t * 1e3);
    }
    timing.flush()?;
    if let Some(r) = inp.region {
        fs::write(dir.join(REGION_FILE), toml::to_string(&r).map_err(|e| Error::Config(e.to_string()))?)?;
    }
    write_config(&dir, cfg)?;
    println!(
        "{} slices in {:.2} s with {} worker(s); written to {}",
        s,
        seconds.iter().sum::<f64>(),
        icfg.workers,
        dir.display()
    );
    Ok(InferOutput { dir, volume, seconds })
}

fn volume_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("volume.f32")
    } else {
        p.to_path_buf()
    }
}

/// Scores a predicted volume against a ground-truth volume. Either path may
/// be a tensor file or a directory holding `volume.f32`.
pub fn eval(cfg: &RunConfig, pred: &Path, gt: &Path) -> Result<(PathBuf, EvalReport)> {
    let (pp, gp) = (volume_path(pred), volume_path(gt));
    let pv = read_volume(&pp)?;
    let gv = read_volume(&gp)?;
    let (h, w) = gv.resolution();
    let stored = pp.parent().map(|d| d.join(REGION_FILE)).filter(|p| p.exists());
    let region = match (cfg.metrics.region, stored) {
        (Some(r), _) => r,
        (None, Some(p)) => toml::from_str(&fs::read_to_string(&p)?).map_err(|e| Error::Format {
            path: p.clone(),
            reason: e.to_string(),
        })?,
        (None, None) => RegionSpec::full(h, w),
    };
    let mut report = evaluate_volumes(&pv, &gv, &region, &cfg.eval_settings())?;
    // a directory is named after itself, a bare tensor file after its stem
    let name = |given: &Path, file: &Path| {
        let n = if given.is_dir() { given.file_name() } else { file.file_stem() };
        n.map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "volume".into())
    };
    report.model_id = name(pred, &pp);
    report.dataset_id = gp.display().to_string();
    let dir = cfg.paths.output_dir().join("eval").join(&report.model_id);
    fs::create_dir_all(&dir)?;
    report.write_csv(fs::File::create(dir.join("eval.csv"))?)?;
    report.write_summary_csv(fs::File::create(dir.join("summary.csv"))?)?;
    write_config(&dir, cfg)?;
    println!(
        "median psnr {:.3} dB  ssim {:.4}  rssim {:.4}  correlation pred {:.4} / gt {:.4}",
        report.median_psnr, report.median_ssim, report.median_rssim, report.correlation_pred, report.correlation_gt
    );
    println!("report {}", dir.display());
    Ok((dir, report))
}

/// Adjacent-slice correlation of generated volumes for each slice count in
/// `interp.slice_counts`, with the ground-truth correlation as reference
/// when the input is a dataset sample.
pub fn interp_study(cfg: &RunConfig, input: &Input) -> Result<(PathBuf, Vec<InterpRow>, Option<f64>)> {
    let bundle = load_diffusion(cfg)?;
    let inp = resolve_input(cfg, input)?;
    let icfg = cfg.infer_config(inp.grade)?;
    let rows = run_interp(&inp.xray, &cfg.interp.slice_counts, &bundle, &icfg)?;
    let reference = inp.volume.as_ref().map(adjacent_slice_correlation).transpose()?;
    let dir = cfg.paths.output_dir().join("interp").join(&inp.name);
    fs::create_dir_all(&dir)?;
    write_interp_csv(&rows, reference, fs::File::create(dir.join("interp.csv"))?)?;
    write_config(&dir, cfg)?;
    for r in &rows {
        println!("  s = {:>4}  correlation {:.4}", r.slices, r.correlation);
    }
    if let Some(r) = reference {
        println!("  ground truth    {r:.4}");
    }
    println!("written to {}", dir.display());
    Ok((dir, rows, reference))
}
