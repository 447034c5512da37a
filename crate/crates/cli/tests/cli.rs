use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pseudomri::checkpoint::Checkpoint;
use pseudomri::data::{read_volume, DatasetManifest};
use pseudomri::networks::ModelBundle;
use pseudomri_cli::commands::{self, Input};
use pseudomri_cli::config::{Overrides, Preset, RunConfig, OUT_ENV};

fn bin(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pseudomri"))
        .args(args)
        .args(["--preset", "smoke", "--out"])
        .arg(root)
        .env_remove(OUT_ENV)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn smoke(root: &Path) -> RunConfig {
    let flags = Overrides {
        preset: Some(Preset::Smoke),
        out: Some(root.to_path_buf()),
        ..Default::default()
    };
    RunConfig::resolve("", &flags, None).unwrap()
}

/// Dataset plus both training stages under `root`.
fn trained(root: &Path) -> RunConfig {
    let cfg = smoke(root);
    commands::gen_data(&cfg).unwrap();
    commands::train_ae(&cfg, false).unwrap();
    commands::train_diff(&cfg, false).unwrap();
    cfg
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn presets_resolve_and_flags_override_the_file() {
    let desk = RunConfig::resolve("", &Overrides::default(), None).unwrap();
    assert_eq!(desk.preset, Preset::DeskScale);
    assert_eq!(desk.model.autoencoder.input_resolution, 64);
    assert_eq!(desk.data.phantom.slices, 16);

    let paper = RunConfig::preset(Preset::PaperScale);
    paper.validate().unwrap();
    assert_eq!(paper.train_diff.lr, 1e-6);
    assert_eq!(paper.train_diff.batch_size, 64);
    assert_eq!(paper.model.schedule.total_steps, 1000);
    assert_eq!(paper.model.ema_decay, 0.99);
    assert_eq!(paper.model.latent_scale, 0.2);

    let file = "preset = \"smoke\"\nseed = 5\n[infer]\nsteps = 7\n[paths]\nroot = \"from-file\"\n";
    let cfg = RunConfig::resolve(file, &Overrides::default(), None).unwrap();
    assert_eq!((cfg.preset, cfg.seed, cfg.infer.steps, cfg.infer.slices), (Preset::Smoke, 5, 7, 6));
    assert_eq!(cfg.paths.root, PathBuf::from("from-file"));

    let env = RunConfig::resolve(file, &Overrides::default(), Some("env-root".into())).unwrap();
    assert_eq!(env.paths.root, PathBuf::from("env-root"));
    let flags = Overrides {
        seed: Some(9),
        workers: Some(3),
        out: Some("flag-root".into()),
        preset: Some(Preset::DeskScale),
    };
    let cfg = RunConfig::resolve(file, &flags, Some("env-root".into())).unwrap();
    assert_eq!((cfg.preset, cfg.seed, cfg.infer.workers), (Preset::DeskScale, 9, 3));
    assert_eq!(cfg.paths.root, PathBuf::from("flag-root"));

    // the printed config reads back to itself
    assert_eq!(RunConfig::resolve(&cfg.to_toml(), &Overrides::default(), None).unwrap(), RunConfig {
        paths: cfg.paths.clone(),
        ..cfg.clone()
    });

    for bad in ["[infer]\nsteps = 0", "[infer]\nsteps = 1001", "unknown = 1", "[metrics.ssim]\nwindow = 10", "[data]\nsamples = 0"] {
        assert!(RunConfig::resolve(bad, &Overrides::default(), None).is_err(), "{bad}");
    }
}

#[test]
fn gen_data_is_reproducible_and_rejects_zero_samples() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = bin(a.path(), &["gen-data"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("# resolved config") && stdout.contains("preset = \"smoke\""));
    let digest = |s: &str| s.lines().find(|l| l.starts_with("corpus digest")).unwrap().to_string();
    let again = bin(b.path(), &["gen-data"]);
    assert_eq!(digest(&stdout), digest(&String::from_utf8_lossy(&again.stdout)));

    let m: DatasetManifest = toml::from_str(&fs::read_to_string(a.path().join("data/manifest.toml")).unwrap()).unwrap();
    assert_eq!(m.samples.len(), 10);
    for e in &m.samples {
        assert!(a.path().join("data").join(&e.xray).exists());
        assert_eq!(
            fs::read(a.path().join("data").join(&e.volume)).unwrap(),
            fs::read(b.path().join("data").join(&e.volume)).unwrap()
        );
    }
    assert!(a.path().join("data").join(commands::CONFIG_FILE).exists());

    let c = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin(c.path(), &["gen-data", "--samples", "0"])), 2);
    assert!(!c.path().join("data").exists());
    assert_eq!(code(&bin(c.path(), &["gen-data", "--no-such-flag"])), 2);
    let cfg_path = c.path().join("missing.toml");
    assert_eq!(code(&bin(c.path(), &["gen-data", "--config", cfg_path.to_str().unwrap()])), 2);
}

#[test]
fn training_writes_checkpoints_and_resumes_on_the_same_curve() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(code(&bin(root, &["train-ae"])), 2, "no dataset yet");
    assert_eq!(code(&bin(root, &["gen-data"])), 0);
    assert_eq!(code(&bin(root, &["train-diff"])), 2, "no autoencoder yet");

    let out = bin(root, &["train-ae"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ck = Checkpoint::read(&root.join("checkpoints/ae.ckpt")).unwrap();
    let straight = ModelBundle::from_checkpoint(&ck).unwrap();
    assert!(ck.header.contains_key("run"));
    let (header, full) = csv_rows(&root.join("outputs/train_ae/report.csv"));
    assert_eq!(header, pseudomri::pipeline::TRAIN_CSV_HEADER);
    assert_eq!(full.len(), 2);

    // five steps, then resume to ten
    let half = tempfile::tempdir().unwrap();
    let cfg_file = half.path().join("half.toml");
    fs::write(&cfg_file, "[train_ae]\nsteps = 5\n").unwrap();
    let cf = cfg_file.to_str().unwrap();
    assert_eq!(code(&bin(half.path(), &["gen-data"])), 0);
    assert_eq!(code(&bin(half.path(), &["train-ae", "--config", cf])), 0);
    let out = bin(half.path(), &["train-ae", "--resume"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let resumed = ModelBundle::from_checkpoint(&Checkpoint::read(&half.path().join("checkpoints/ae.ckpt")).unwrap()).unwrap();
    assert_eq!(resumed.ae_params.fingerprint(), straight.ae_params.fingerprint());
    let (_, rows) = csv_rows(&half.path().join("outputs/train_ae/report.csv"));
    let strip = |r: &[Vec<String>]| r.iter().map(|x| x[..7].to_vec()).collect::<Vec<_>>();
    assert_eq!(strip(&rows), strip(&full));

    let out = bin(root, &["train-diff"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("autoencoder frozen: yes"), "{stdout}");
    let diff = ModelBundle::from_checkpoint(&Checkpoint::read(&root.join("checkpoints/diff.ckpt")).unwrap()).unwrap();
    assert_eq!(diff.ae_params.fingerprint(), straight.ae_params.fingerprint());
    assert_eq!(code(&bin(root, &["train-diff", "--resume"])), 0);
}

#[test]
fn non_finite_training_exits_3_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(code(&bin(root, &["gen-data"])), 0);
    assert_eq!(code(&bin(root, &["train-ae"])), 0);
    let ckpt = root.join("checkpoints/ae.ckpt");
    let before = fs::read(&ckpt).unwrap();

    let cfg_file = root.join("blowup.toml");
    fs::write(&cfg_file, "[train_ae]\nsteps = 40\nlr = 1e30\nwarmup_steps = 0\nclip_norm = 0.0\nepoch_steps = 20\n").unwrap();
    let out = bin(root, &["train-ae", "--resume", "--config", cfg_file.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    let after = fs::read(&ckpt).unwrap();
    assert_eq!(before, after);
    ModelBundle::from_checkpoint(&Checkpoint::read(&ckpt).unwrap()).unwrap();
}

#[test]
fn infer_eval_and_interp_study() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(code(&bin(root, &["infer", "--sample", "p00001"])), 2, "no checkpoint");
    let cfg = trained(root);

    let out = bin(root, &["infer", "--sample", "p00001"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).matches("ms\n").count(), 6);
    let vdir = root.join("outputs/infer/p00001");
    let pngs = fs::read_dir(&vdir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 6);
    let first = fs::read(vdir.join("volume.f32")).unwrap();
    assert_eq!(code(&bin(root, &["infer", "--sample", "p00001", "--workers", "3"])), 0);
    assert_eq!(fs::read(vdir.join("volume.f32")).unwrap(), first);
    assert!(vdir.join(commands::CONFIG_FILE).exists() && vdir.join(commands::REGION_FILE).exists());

    // a file input with a known grade equals the dataset sample
    let xray = root.join("data/xray/p00001.f32");
    let out = bin(root, &["infer", "--xray", xray.to_str().unwrap(), "--grade", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(root.join("outputs/infer/p00001/volume.f32")).unwrap(), first);
    assert_eq!(code(&bin(root, &["infer", "--xray", xray.to_str().unwrap()])), 2, "ground-truth grades need a grade");
    assert_eq!(code(&bin(root, &["infer", "--sample", "nope"])), 2);

    // pred = gt gives a perfect report
    let gt = root.join("data/volume/p00001.f32");
    let (edir, report) = commands::eval(&cfg, &gt, &gt).unwrap();
    assert!(report.psnr.iter().all(|p| p.is_infinite()));
    assert!(report.ssim.iter().chain(&report.rssim).all(|&s| s == 1.0));
    assert_eq!(report.correlation_pred, report.correlation_gt);
    let (header, rows) = csv_rows(&edir.join("eval.csv"));
    assert_eq!(header, pseudomri::metrics::EVAL_CSV_HEADER);
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[2] == "inf"));

    let out = bin(root, &["eval", "--pred", vdir.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let (_, rows) = csv_rows(&root.join("outputs/eval/p00001/eval.csv"));
    assert_eq!(rows.len(), 6);

    let out = bin(root, &["infer", "--sample", "p00002", "--slices", "4"]);
    assert_eq!(code(&out), 0);
    let short = root.join("outputs/infer/p00002");
    assert_eq!(code(&bin(root, &["eval", "--pred", short.to_str().unwrap(), "--gt", gt.to_str().unwrap()])), 2);
    assert_eq!(code(&bin(root, &["eval", "--pred", "missing", "--gt", gt.to_str().unwrap()])), 2);

    // interpolation study: one row per count, values survive an independent reader
    let (idir, rows, reference) = commands::interp_study(&cfg, &Input::Sample("p00001".into())).unwrap();
    assert_eq!(rows.len(), 3);
    let (header, parsed) = csv_rows(&idir.join("interp.csv"));
    assert_eq!(header, pseudomri::pipeline::INTERP_CSV_HEADER);
    for (r, p) in rows.iter().zip(&parsed) {
        assert_eq!(p[0].parse::<usize>().unwrap(), r.slices);
        assert!((p[1].parse::<f64>().unwrap() - r.correlation).abs() < 1e-9);
        assert!((p[2].parse::<f64>().unwrap() - reference.unwrap()).abs() < 1e-9);
    }
    let out = bin(root, &["interp-study", "--sample", "p00001", "--counts", "2,4"]);
    assert_eq!(code(&out), 0);
    assert_eq!(csv_rows(&idir.join("interp.csv")).1.len(), 2);
}

#[test]
fn inference_time_grows_linearly_with_slice_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trained(dir.path());
    let per_slice: Vec<f64> = [8, 16, 32]
        .iter()
        .map(|&s| {
            cfg.infer.slices = s;
            let out = commands::infer(&cfg, &Input::Sample("p00000".into())).unwrap();
            assert_eq!(read_volume(&out.dir.join("volume.f32")).unwrap().depth_count(), s);
            out.seconds.iter().sum::<f64>() / s as f64
        })
        .collect();
    let (lo, hi) = per_slice.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi / lo < 2.0, "per-slice seconds {per_slice:?}");
}
