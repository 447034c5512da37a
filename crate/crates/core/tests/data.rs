use ndarray::{Array2, Array3};
use proptest::prelude::*;
use pseudomri::data::*;
use pseudomri::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> PhantomConfig {
    PhantomConfig {
        resolution: 32,
        slices: 8,
        ..Default::default()
    }
}

#[test]
fn normalization_examples() {
    let c = Array2::from_elem((4, 4), 3.0f32);
    assert!(normalize_intensity(&c).unwrap().iter().all(|&v| v == 0.0));
    let img = ndarray::arr2(&[[0.0f32, 127.5], [255.0, 63.75]]);
    let n = normalize_intensity(&img).unwrap();
    assert_eq!((n[[0, 0]], n[[0, 1]], n[[1, 0]], n[[1, 1]]), (-1.0, 0.0, 1.0, -0.5));
    assert!(normalize_intensity(&Array2::<f32>::zeros((0, 3))).is_err());
    assert!(normalize_intensity(&ndarray::arr1(&[1.0f32, f32::NAN])).is_err());
}

proptest! {
    #[test]
    fn normalization_hits_both_extremes(values in proptest::collection::vec(-1e4f32..1e4, 2..200)) {
        prop_assume!(values.iter().any(|&v| v != values[0]));
        let a = ndarray::Array1::from(values);
        let n = normalize_intensity(&a).unwrap();
        let lo = n.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = n.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!(lo, -1.0);
        prop_assert_eq!(hi, 1.0);
        prop_assert!(n.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn triplication_round_trips(values in proptest::collection::vec(-1f32..1.0, 16)) {
        let img = Array3::from_shape_vec((1, 4, 4), values).unwrap();
        let t = triplicate_channels(&img).unwrap();
        prop_assert_eq!(t.dim(), (3, 4, 4));
        for c in 0..3 {
            prop_assert_eq!(t.index_axis(ndarray::Axis(0), c), img.index_axis(ndarray::Axis(0), 0));
        }
        prop_assert_eq!(channel_mean(&t), img.index_axis(ndarray::Axis(0), 0).to_owned());
        prop_assert!(triplicate_channels(&t).is_err());
    }
}

fn indexed_volume(s: usize) -> Volume {
    Volume::new(Array3::from_shape_fn((s, 2, 2), |(k, _, _)| k as f32), Provenance::Real).unwrap()
}

#[test]
fn slice_range_extraction() {
    let out = extract_slice_range(&indexed_volume(80), SliceRange::Standard).unwrap();
    assert_eq!(out.depth_count(), 50);
    // first kept slice is the 13th of the series
    assert_eq!(out.slice(0)[[0, 0]] + 1.0, 13.0);
    assert_eq!(out.slice(49)[[0, 0]] + 1.0, 62.0);
    let src: Vec<f32> = (0..50).map(|k| out.slice(k)[[0, 0]]).collect();
    assert!(src.windows(2).all(|w| w[1] == w[0] + 1.0));

    let generic = extract_slice_range(&indexed_volume(160), SliceRange::Generic { lo: 0.16 }).unwrap();
    assert_eq!(generic.depth_count(), 50);
    assert_eq!(generic.slice(0)[[0, 0]], 25.0);

    assert!(matches!(
        extract_slice_range(&indexed_volume(81), SliceRange::Standard),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(extract_slice_range(&indexed_volume(55), SliceRange::Generic { lo: 0.16 }).is_err());
}

#[test]
fn phantom_corpus_is_deterministic() {
    let a = generate_phantom_dataset(6, &small_cfg(), 42).unwrap();
    let b = generate_phantom_dataset(6, &small_cfg(), 42).unwrap();
    assert_eq!(a, b);
    let c = generate_phantom_dataset(6, &small_cfg(), 43).unwrap();
    assert_ne!(a[0].volume, c[0].volume);
    for s in &a {
        assert_eq!(s.volume.depth_count(), 8);
        assert!(s.volume.data().iter().chain(s.xray.iter()).all(|v| v.abs() <= 1.0));
        assert!(!s.region.is_empty());
    }
    assert!(generate_phantom_dataset(0, &small_cfg(), 1).is_err());
}

#[test]
fn gap_narrows_with_grade() {
    let cfg = PhantomConfig::default();
    // matched randomness: the same stream for every grade
    let gaps: Vec<f64> = (0..5)
        .map(|g| phantom_geometry(&cfg, g, &mut ChaCha8Rng::seed_from_u64(9)).gap_width)
        .collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");

    // mean over the generator's jitter, measured in pixels on the rendered volume
    let mut mean_gap = [0.0f64; 5];
    let n = 40;
    let corpus = generate_phantom_dataset(5 * n, &cfg, 3).unwrap();
    for s in &corpus {
        let mid = s.volume.slice(cfg.slices / 2);
        let col = mid.column(cfg.resolution / 2);
        let dark = (16..48).filter(|&r| col[r] < 0.0).count();
        mean_gap[s.grade] += dark as f64 / n as f64;
    }
    assert!(mean_gap.windows(2).all(|w| w[1] < w[0]), "{mean_gap:?}");
}

#[test]
fn radiograph_is_the_noisy_projection() {
    let cfg = PhantomConfig::default();
    for s in generate_phantom_dataset(5, &cfg, 11).unwrap() {
        let proj = project_volume(s.volume.data()).unwrap();
        let resid: Vec<f64> = proj.iter().zip(s.xray.iter()).map(|(a, b)| (a - b) as f64).collect();
        let rms = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
        let max = resid.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        assert!(rms < 1.1 * cfg.xray_noise, "rms {rms}");
        assert!(max < 6.0 * cfg.xray_noise, "max {max}");
    }
}

#[test]
fn save_load_round_trip_split_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_phantom_dataset(10, &small_cfg(), 5).unwrap();
    let manifest = save_dataset(dir.path(), &samples, Some((&small_cfg(), 5)), [7, 3], 1).unwrap();
    assert_eq!(manifest.ids(Split::Train).len(), 7);
    assert_eq!(manifest.ids(Split::Val).len(), 3);

    let (m2, loaded) = load_dataset(&dir.path().join(DatasetManifest::FILE_NAME)).unwrap();
    assert_eq!(m2, manifest);
    assert_eq!(loaded, samples);

    let victim = dir.path().join(&manifest.samples[3].volume);
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[17] ^= 0x40;
    std::fs::write(&victim, bytes).unwrap();
    assert!(matches!(
        load_dataset(&dir.path().join(DatasetManifest::FILE_NAME)),
        Err(Error::Checksum { .. })
    ));
    std::fs::remove_file(&victim).unwrap();
    assert!(matches!(
        load_dataset(&dir.path().join(DatasetManifest::FILE_NAME)),
        Err(Error::Missing(_))
    ));
}

#[test]
fn split_is_exact_disjoint_and_seeded() {
    let samples = generate_phantom_dataset(2, &small_cfg(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut m = save_dataset(dir.path(), &samples, None, [7, 3], 0).unwrap();
    let template = m.samples[0].clone();
    for n in [10usize, 20, 100] {
        m.samples = (0..n)
            .map(|i| SampleEntry {
                id: format!("s{i}"),
                ..template.clone()
            })
            .collect();
        split_dataset(&mut m, [7, 3], 4).unwrap();
        let train = m.ids(Split::Train);
        let val = m.ids(Split::Val);
        assert_eq!((train.len(), val.len()), (7 * n / 10, 3 * n / 10));
        assert!(train.iter().all(|id| !val.contains(id)));
        let before: Vec<_> = m.samples.iter().map(|s| s.split).collect();
        split_dataset(&mut m, [7, 3], 4).unwrap();
        assert_eq!(before, m.samples.iter().map(|s| s.split).collect::<Vec<_>>());
    }
    m.samples.truncate(1);
    assert!(split_dataset(&mut m, [7, 3], 4).is_err());
}

#[test]
fn tensor_files_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let a = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i * 12 + j * 4 + k) as f32 * -0.37);
    let p = dir.path().join("t.f32");
    write_tensor(&p, &a).unwrap();
    let b = read_tensor(&p).unwrap();
    assert_eq!(b.shape(), &[2, 3, 4]);
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
