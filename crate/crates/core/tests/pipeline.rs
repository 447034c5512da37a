use pseudomri::checkpoint::Checkpoint;
use pseudomri::data::{depth_grid, generate_phantom_dataset, PairedSample, PhantomConfig};
use pseudomri::networks::{ClassifierMode, ModelBundle, ModelConfig};
use pseudomri::pipeline::*;
use pseudomri::Error;

fn corpus(n: usize) -> Vec<PairedSample> {
    let cfg = PhantomConfig {
        resolution: 32,
        slices: 6,
        ..Default::default()
    };
    generate_phantom_dataset(n, &cfg, 17).unwrap()
}

fn bundle() -> ModelBundle {
    ModelBundle::new(ModelConfig::tiny(32), 3).unwrap()
}

fn short(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        epoch_steps: 2,
        ..Default::default()
    }
}

fn diff_cfg(steps: usize) -> DiffusionTrainConfig {
    DiffusionTrainConfig {
        train: TrainConfig { patience: 0, ..short(steps) },
        ..Default::default()
    }
}

fn infer_cfg(steps: usize, seed: u64) -> InferConfig {
    InferConfig {
        steps,
        seed,
        workers: 1,
        classifier: ClassifierMode::Bypass { grade: 1, smoothing: 0.1 },
        use_ema: true,
    }
}

fn no_hook() -> impl FnMut(&ModelBundle, &TrainState) -> pseudomri::Result<()> {
    |_, _| Ok(())
}

#[test]
fn autoencoder_training_is_deterministic_and_zero_steps_is_a_no_op() {
    let data = corpus(2);
    let mut a = bundle();
    let before = a.ae_params.fingerprint();
    let st = train_autoencoder(&mut a, &data, &short(0), None, &mut no_hook()).unwrap();
    assert_eq!(a.ae_params.fingerprint(), before);
    assert!(st.report.epochs.is_empty());

    let run = || {
        let mut b = bundle();
        let st = train_autoencoder(&mut b, &data, &short(6), None, &mut no_hook()).unwrap();
        (b.ae_params.fingerprint(), st.report)
    };
    let (f1, r1) = run();
    let (f2, r2) = run();
    assert_eq!(f1, f2);
    assert_ne!(f1, before);
    assert_eq!(r1.eval_series(), r2.eval_series());
    assert_eq!(r1.epochs.len(), 3);
    assert!(r1.epochs.iter().all(|e| e.loss_rec.is_some() && e.loss_kl.is_some() && e.loss_diff.is_none()));

    let mut buf = Vec::new();
    r1.write_csv(&mut buf).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(rdr.headers().unwrap(), TRAIN_CSV_HEADER.as_slice());
    assert_eq!(rdr.records().count(), r1.epochs.len());

    assert!(matches!(
        train_autoencoder(&mut bundle(), &[], &short(2), None, &mut no_hook()),
        Err(Error::Domain(_))
    ));
}

#[test]
fn resumed_training_continues_the_same_curve() {
    let data = corpus(2);
    let mut straight = bundle();
    let full = train_autoencoder(&mut straight, &data, &short(8), None, &mut no_hook()).unwrap();

    // stop after two epochs, round-trip through a checkpoint, finish
    let mut saved: Option<Vec<u8>> = None;
    let mut first = bundle();
    train_autoencoder(&mut first, &data, &short(4), None, &mut |b: &ModelBundle, st: &TrainState| {
        let mut ck = b.to_checkpoint(toml::Table::new())?;
        st.write_into(&mut ck, &b.ae_params)?;
        saved = Some(ck.to_bytes());
        Ok(())
    })
    .unwrap();
    let ck = Checkpoint::from_bytes(&saved.unwrap(), std::path::Path::new("mem")).unwrap();
    let mut resumed = ModelBundle::from_checkpoint(&ck).unwrap();
    let state = TrainState::read_from(&ck, Stage::Autoencoder, &resumed.ae_params).unwrap().unwrap();
    assert_eq!(state.step, 4);
    assert!(TrainState::read_from(&ck, Stage::Diffusion, &resumed.diff_params).unwrap().is_none());
    let rest = train_autoencoder(&mut resumed, &data, &short(8), Some(state), &mut no_hook()).unwrap();

    assert_eq!(resumed.ae_params.fingerprint(), straight.ae_params.fingerprint());
    assert_eq!(rest.report.eval_series(), full.report.eval_series());
}

#[test]
fn diffusion_stage_freezes_the_autoencoder_and_moves_the_ema() {
    let data = corpus(2);
    let mut b = bundle();
    let ae = b.ae_params.fingerprint();
    let live0 = b.diff_params.flatten();
    let st = train_diffusion(&mut b, &data, &diff_cfg(4), None, &mut no_hook()).unwrap();
    assert_eq!(b.ae_params.fingerprint(), ae);
    let (before, after) = st.report.frozen_fingerprint.clone().unwrap();
    assert_eq!(before, after);
    assert_ne!(b.diff_params.flatten(), live0);
    assert_ne!(b.ema.shadow(), b.diff_params.flatten().as_slice());
    for e in &st.report.epochs {
        assert!(e.loss_diff.unwrap().is_finite());
        assert!(e.loss_rec.unwrap().is_finite());
    }

    // decay 0 makes the shadow track the live weights exactly
    let mut cfg = ModelConfig::tiny(32);
    cfg.ema_decay = 0.0;
    let mut z = ModelBundle::new(cfg, 3).unwrap();
    train_diffusion(&mut z, &data, &diff_cfg(2), None, &mut no_hook()).unwrap();
    assert_eq!(z.ema.shadow(), z.diff_params.flatten().as_slice());
}

#[test]
fn non_finite_loss_is_reported() {
    let data = corpus(1);
    let mut b = bundle();
    let id = b.ae_params.id("d.conv_out.bias").unwrap();
    b.ae_params.get_mut(id).fill(f32::NAN);
    assert!(matches!(
        train_autoencoder(&mut b, &data, &short(2), None, &mut no_hook()),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn inference_is_seeded_and_slice_independent() {
    let data = corpus(1);
    let mut b = bundle();
    train_diffusion(&mut b, &data, &diff_cfg(2), None, &mut no_hook()).unwrap();
    let x = &data[0].xray;

    let a = infer_slice(x, 0.25, &b, &infer_cfg(4, 9)).unwrap();
    assert_eq!(a.dim(), (32, 32));
    assert_eq!(a, infer_slice(x, 0.25, &b, &infer_cfg(4, 9)).unwrap());
    assert_ne!(a, infer_slice(x, 0.25, &b, &infer_cfg(4, 10)).unwrap());

    let cfg = infer_cfg(3, 5);
    let serial = infer_volume(x, 5, &b, &cfg).unwrap();
    assert_eq!(serial.depths(), depth_grid(5).unwrap().as_slice());
    let parallel = infer_volume(x, 5, &b, &InferConfig { workers: 3, ..cfg }).unwrap();
    assert_eq!(serial.data(), parallel.data());

    // slices generated one at a time, in reverse order
    for k in (0..5).rev() {
        let one = infer_slice(x, serial.depths()[k], &b, &InferConfig { seed: slice_seed(5, k), ..cfg }).unwrap();
        assert_eq!(one, serial.slice(k));
    }

    assert!(infer_volume(x, 0, &b, &cfg).is_err());
    assert_eq!(infer_volume(x, 1, &b, &cfg).unwrap().depths(), &[0.0]);
    assert!(infer_slice(x, 1.5, &b, &cfg).is_err());
    assert!(infer_slice(&ndarray::Array2::zeros((16, 16)), 0.5, &b, &cfg).is_err());
}

#[test]
fn doubled_slice_grid_contains_the_original() {
    let s = 9;
    let fine = depth_grid(2 * s - 1).unwrap();
    for (k, d) in depth_grid(s).unwrap().into_iter().enumerate() {
        assert!((fine[2 * k] - d).abs() < 1e-15);
    }
    assert!(fine.iter().skip(1).step_by(2).all(|d| !depth_grid(s).unwrap().contains(d)));
}

#[test]
fn constant_model_gives_perfectly_correlated_volumes() {
    let data = corpus(1);
    let mut b = bundle();
    for name in ["d.conv_out.weight", "d.conv_out.bias"] {
        let id = b.ae_params.id(name).unwrap();
        b.ae_params.get_mut(id).fill(if name.ends_with("bias") { 0.3 } else { 0.0 });
    }
    let rows = interp_study(&data[0].xray, &[2, 4, 8], &b, &infer_cfg(2, 1)).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.correlation == 1.0));

    let mut buf = Vec::new();
    write_interp_csv(&rows, Some(0.9), &mut buf).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(rdr.headers().unwrap(), INTERP_CSV_HEADER.as_slice());
    let parsed: Vec<(usize, f64)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap())
        })
        .collect();
    assert_eq!(parsed, vec![(2, 1.0), (4, 1.0), (8, 1.0)]);
}

#[test]
fn classifier_learns_phantom_grades() {
    let cfg = PhantomConfig {
        resolution: 32,
        slices: 6,
        ..Default::default()
    };
    let train = generate_phantom_dataset(100, &cfg, 1).unwrap();
    let held_out = generate_phantom_dataset(50, &cfg, 2).unwrap();
    let mut b = bundle();
    let tc = TrainConfig {
        steps: 600,
        batch_size: 16,
        epoch_steps: 100,
        patience: 0,
        optimizer: pseudomri::nn::AdamWConfig {
            lr: 3e-3,
            ..Default::default()
        },
        seed: 0,
    };
    let st = train_classifier(&mut b, &train, &tc, None, &mut no_hook()).unwrap();
    let acc = classifier_accuracy(&b, &held_out).unwrap();
    assert!(acc >= 0.9, "held-out accuracy {acc}, curve {:?}", st.report.eval_series());
    let p = pseudomri::networks::koa_classify_stub(&held_out[0].xray, &b.classifier, &b.cls_params, ClassifierMode::Learned).unwrap();
    assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
}
