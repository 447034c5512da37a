//! Preprocessing, the procedural knee phantom, and the on-disk paired
//! dataset (raw little-endian `f32` tensors with TOML sidecars and a TOML
//! manifest).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array, Array3, Axis, Dimension, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::SliceImage;

/// Slices kept from a standard 80-slice T1 series.
pub const KEPT_SLICES: usize = 50;
pub const SERIES_SLICES: usize = 80;
/// 0-based index of the first kept slice (the 13th).
pub const FIRST_KEPT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Generated,
}

/// Ordered stack of slices with their normalised depths.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    depths: Vec<f64>,
    pub provenance: Provenance,
}

impl Volume {
    /// Depths default to the uniform grid `k / (S − 1)`.
    pub fn new(data: Array3<f32>, provenance: Provenance) -> Result<Self> {
        let s = data.len_of(Axis(0));
        let depths = depth_grid(s)?;
        Self::with_depths(data, depths, provenance)
    }

    pub fn with_depths(data: Array3<f32>, depths: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if depths.len() != data.len_of(Axis(0)) {
            return Err(Error::ShapeMismatch {
                expected: vec![data.len_of(Axis(0))],
                got: vec![depths.len()],
            });
        }
        if depths.windows(2).any(|w| w[1] <= w[0]) || depths.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::Domain("depths must be strictly increasing within [0, 1]".into()));
        }
        Ok(Self {
            data,
            depths,
            provenance,
        })
    }

    pub fn from_slices(slices: &[SliceImage], depths: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::Domain("volume needs at least one slice".into()));
        }
        let dim = slices[0].dim();
        if slices.iter().any(|s| s.dim() != dim) {
            return Err(Error::Domain("all slices must share one resolution".into()));
        }
        let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
        let data = ndarray::stack(Axis(0), &views).expect("equal shapes");
        Self::with_depths(data, depths, provenance)
    }

    pub fn depth_count(&self) -> usize {
        self.depths.len()
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn slice(&self, k: usize) -> SliceImage {
        self.data.index_axis(Axis(0), k).to_owned()
    }

    pub fn slices(&self) -> Vec<SliceImage> {
        (0..self.depth_count()).map(|k| self.slice(k)).collect()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.data.len_of(Axis(1)), self.data.len_of(Axis(2)))
    }
}

/// `k / (s − 1)` for `k = 0..s`; a single slice sits at depth 0.
pub fn depth_grid(s: usize) -> Result<Vec<f64>> {
    match s {
        0 => Err(Error::Domain("empty depth grid".into())),
        1 => Ok(vec![0.0]),
        _ => Ok((0..s).map(|k| k as f64 / (s - 1) as f64).collect()),
    }
}

/// Affine map of `[min, max]` onto `[-1, 1]`; constant input maps to zeros.
pub fn normalize_intensity<D: Dimension>(img: &Array<f32, D>) -> Result<Array<f32, D>> {
    if img.is_empty() {
        return Err(Error::Domain("cannot normalise an empty image".into()));
    }
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image to normalise".into()));
    }
    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    if hi == lo {
        return Ok(img.mapv(|_| 0.0));
    }
    let span = hi - lo;
    Ok(img.mapv(|v| (2.0 * ((v as f64 - lo) / span) - 1.0) as f32))
}

/// `(1, h, w)` -> `(3, h, w)` with identical channels.
pub fn triplicate_channels(img: &Array3<f32>) -> Result<Array3<f32>> {
    if img.len_of(Axis(0)) != 1 {
        return Err(Error::Domain(format!(
            "triplication expects one channel, got {}",
            img.len_of(Axis(0))
        )));
    }
    Ok(ndarray::concatenate(Axis(0), &[img.view(), img.view(), img.view()]).expect("same shape"))
}

/// Channel mean, the inverse of triplication.
pub fn channel_mean(img: &Array3<f32>) -> SliceImage {
    img.mapv(f64::from).mean_axis(Axis(0)).expect("at least one channel").mapv(|v| v as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SliceRange {
    /// 80-slice series, slices 13–62 (1-based).
    Standard,
    /// Any series: 50 slices from `floor(lo · S)`.
    Generic { lo: f64 },
}

pub fn extract_slice_range(vol: &Volume, range: SliceRange) -> Result<Volume> {
    let s = vol.depth_count();
    let start = match range {
        SliceRange::Standard => {
            if s != SERIES_SLICES {
                return Err(Error::ShapeMismatch {
                    expected: vec![SERIES_SLICES],
                    got: vec![s],
                });
            }
            FIRST_KEPT
        }
        SliceRange::Generic { lo } => {
            if !(0.0..1.0).contains(&lo) {
                return Err(Error::Domain(format!("slice range start {lo} outside [0, 1)")));
            }
            (lo * s as f64).floor() as usize
        }
    };
    if start + KEPT_SLICES > s {
        return Err(Error::IndexOutOfRange {
            index: start + KEPT_SLICES,
            min: 0,
            max: s,
        });
    }
    let data = vol
        .data
        .slice_axis(Axis(0), ndarray::Slice::from(start..start + KEPT_SLICES))
        .to_owned();
    Volume::new(data, vol.provenance)
}

/// Pixel rectangle `[row0, row1) x [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl RegionSpec {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            row0: 0,
            row1: h,
            col0: 0,
            col1: w,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.row1 <= self.row0 || self.col1 <= self.col0
    }

    pub fn crop(&self, img: &SliceImage) -> Result<SliceImage> {
        let (h, w) = img.dim();
        if self.is_empty() || self.row1 > h || self.col1 > w {
            return Err(Error::Domain(format!("region {self:?} invalid for a {h}x{w} image")));
        }
        Ok(img.slice(ndarray::s![self.row0..self.row1, self.col0..self.col1]).to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub resolution: usize,
    pub slices: usize,
    /// Joint gap (fraction of image height) of a grade-0 knee.
    pub base_gap: f64,
    /// Standard deviation of the radiograph noise.
    pub xray_noise: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            slices: 16,
            base_gap: 0.12,
            xray_noise: 0.01,
        }
    }
}

/// Ground-truth geometry of one phantom, in fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomGeometry {
    pub gap_width: f64,
    pub joint_center: f64,
    pub osteophyte_radius: f64,
    pub bone_half_width: f64,
    pub femur_height: f64,
    pub tibia_height: f64,
}

impl PhantomGeometry {
    /// Band around the joint: the gap plus one third of each bone, across
    /// the widest bone extent.
    pub fn region(&self, h: usize, w: usize) -> RegionSpec {
        let top = self.joint_center - self.gap_width / 2.0 - self.femur_height / 3.0;
        let bottom = self.joint_center + self.gap_width / 2.0 + self.tibia_height / 3.0;
        let px = |f: f64, n: usize| ((f * n as f64).round().max(0.0) as usize).min(n);
        RegionSpec {
            row0: px(top, h),
            row1: px(bottom, h),
            col0: px(0.5 - self.bone_half_width, w),
            col1: px(0.5 + self.bone_half_width, w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub xray: SliceImage,
    pub volume: Volume,
    pub grade: usize,
    pub region: RegionSpec,
}

/// Deterministic 64-bit mix of a run seed and an index (splitmix64 finaliser).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Geometry of phantom `index` for `grade`; the gap and osteophytes follow
/// the grade, everything else is per-sample jitter.
pub fn phantom_geometry(cfg: &PhantomConfig, grade: usize, rng: &mut impl Rng) -> PhantomGeometry {
    let g = grade as f64;
    let jitter = |rng: &mut dyn rand::RngCore, a: f64| rng.random_range(-a..=a);
    let joint_center = 0.5 + jitter(rng, 0.03);
    PhantomGeometry {
        gap_width: cfg.base_gap * (1.0 - 0.2 * g) * (1.0 + jitter(rng, 0.05)),
        joint_center,
        osteophyte_radius: (0.012 * g) * (1.0 + jitter(rng, 0.1)),
        bone_half_width: 0.3 + jitter(rng, 0.03),
        femur_height: joint_center,
        tibia_height: 1.0 - joint_center,
    }
}

fn smoothstep(edge_width: f64, signed_distance: f64) -> f64 {
    0.5 * (1.0 + (signed_distance / edge_width).tanh())
}

/// Raw (unnormalised) phantom volume for a geometry.
pub fn render_phantom(cfg: &PhantomConfig, geo: &PhantomGeometry, phase: f64) -> Array3<f32> {
    let (r, s) = (cfg.resolution, cfg.slices);
    let edge = 1.0 / r as f64;
    Array3::from_shape_fn((s, r, r), |(k, y, x)| {
        let d = if s > 1 { k as f64 / (s - 1) as f64 } else { 0.5 };
        let u = (x as f64 + 0.5) / r as f64;
        let v = (y as f64 + 0.5) / r as f64;
        // bones narrow toward the ends of the depth range
        let hw = geo.bone_half_width * (1.0 - ((d - 0.5) / 0.6).powi(2)).sqrt();
        let du = (u - 0.5) / hw;
        let lateral = smoothstep(edge, hw - (u - 0.5).abs());
        let center = geo.joint_center + 0.01 * (std::f64::consts::TAU * (d + phase)).sin();
        let half_gap = geo.gap_width / 2.0;

        let femur_edge = center - half_gap - 0.06 * du.powi(4).min(4.0);
        let femur = smoothstep(edge, femur_edge - v) * lateral;
        let tibia_edge = center + half_gap + 0.03 * du.powi(2).min(4.0);
        let tibia = smoothstep(edge, v - tibia_edge) * smoothstep(edge, 1.05 * hw - (u - 0.5).abs());
        // cortical rim brighter than marrow
        let marrow = |dist: f64| 0.7 + 0.3 * (-dist / 0.04).exp();
        let bone = femur * marrow((femur_edge - v).max(0.0)) + tibia * marrow((v - tibia_edge).max(0.0));

        let mut spurs = 0.0;
        if geo.osteophyte_radius > 0.0 {
            for side in [-1.0, 1.0] {
                let uc = 0.5 + side * hw;
                for vc in [center - half_gap, center + half_gap] {
                    let dist2 = (u - uc).powi(2) + (v - vc).powi(2);
                    spurs += (-dist2 / geo.osteophyte_radius.powi(2)).exp();
                }
            }
        }
        let tissue = 0.25
            * smoothstep(3.0 * edge, 0.45 - (u - 0.5).abs())
            * (1.0 + 0.15 * (3.0 * u + 2.0 * d + phase).sin() * (4.0 * v).cos());
        (tissue + bone.max(0.9 * spurs.min(1.0))) as f32
    })
}

/// Normalised mean projection along the slice axis.
pub fn project_volume(volume: &Array3<f32>) -> Result<SliceImage> {
    normalize_intensity(&volume.mean_axis(Axis(0)).expect("nonempty volume"))
}

/// Phantom `index` of a corpus: grade cycles through 0..=4, all randomness
/// comes from `mix_seed(seed, index)`.
pub fn generate_phantom(cfg: &PhantomConfig, seed: u64, index: usize) -> Result<PairedSample> {
    let grade = index % 5;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index as u64));
    let geo = phantom_geometry(cfg, grade, &mut rng);
    let phase = rng.random_range(0.0..1.0);
    let raw = render_phantom(cfg, &geo, phase);
    let volume = normalize_intensity(&raw)?;
    let projection = project_volume(&volume)?;
    let xray = projection.mapv(|v| {
        let n: f64 = rng.sample(StandardNormal);
        (v as f64 + cfg.xray_noise * n).clamp(-1.0, 1.0) as f32
    });
    Ok(PairedSample {
        id: format!("p{index:05}"),
        xray,
        volume: Volume::new(volume, Provenance::Real)?,
        grade,
        region: geo.region(cfg.resolution, cfg.resolution),
    })
}

pub fn generate_phantom_dataset(n: usize, cfg: &PhantomConfig, seed: u64) -> Result<Vec<PairedSample>> {
    if n == 0 {
        return Err(Error::Domain("phantom corpus needs at least one sample".into()));
    }
    if cfg.resolution < 8 || cfg.slices < 2 {
        return Err(Error::Config("phantoms need resolution >= 8 and at least 2 slices".into()));
    }
    (0..n).into_par_iter().map(|i| generate_phantom(cfg, seed, i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub grade: usize,
    pub split: Split,
    /// Paths relative to the manifest directory.
    pub xray: PathBuf,
    pub volume: PathBuf,
    pub region: RegionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub resolution: usize,
    pub slices: usize,
    /// `[train, val]` parts of the split ratio.
    pub split_ratio: [usize; 2],
    pub split_seed: u64,
    pub generator_seed: Option<u64>,
    pub generator: Option<PhantomConfig>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.toml";

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.samples.iter().filter(|s| s.split == split).map(|s| s.id.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(&s.id) {
                return Err(Error::Config(format!("duplicate sample id {}", s.id)));
            }
            if s.grade > 4 {
                return Err(Error::Config(format!("sample {} has grade {}", s.id, s.grade)));
            }
        }
        Ok(())
    }
}

/// Deterministic shuffled split with `round(n · train / (train + val))`
/// training samples.
pub fn split_dataset(manifest: &mut DatasetManifest, ratio: [usize; 2], seed: u64) -> Result<()> {
    let n = manifest.samples.len();
    if n < 2 || ratio[0] == 0 || ratio[1] == 0 {
        return Err(Error::Domain(format!("cannot split {n} samples with ratio {ratio:?}")));
    }
    let n_train = ((n * ratio[0]) as f64 / (ratio[0] + ratio[1]) as f64).round() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        manifest.samples[i].split = if rank < n_train { Split::Train } else { Split::Val };
    }
    manifest.split_ratio = ratio;
    manifest.split_seed = seed;
    Ok(())
}

/// Sidecar descriptor of a raw tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub sha256: String,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

/// Writes `<path>` (raw `f32` little-endian) and `<path>.toml`.
pub fn write_tensor<D: Dimension>(path: &Path, a: &Array<f32, D>) -> Result<TensorMeta> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let bytes: Vec<u8> = a.iter().flat_map(|v| v.to_le_bytes()).collect();
    let meta = TensorMeta {
        shape: a.shape().to_vec(),
        dtype: "f32le".into(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    fs::write(path, &bytes)?;
    fs::write(
        sidecar(path),
        toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    Ok(meta)
}

/// Reads and checksums a tensor written by [`write_tensor`].
pub fn read_tensor(path: &Path) -> Result<Array<f32, IxDyn>> {
    let side = sidecar(path);
    if !path.exists() || !side.exists() {
        return Err(Error::Missing(format!("tensor {}", path.display())));
    }
    let meta: TensorMeta = toml::from_str(&fs::read_to_string(&side)?).map_err(|e| Error::Format {
        path: side.clone(),
        reason: e.to_string(),
    })?;
    if meta.dtype != "f32le" {
        return Err(Error::Format {
            path: side,
            reason: format!("unsupported dtype {}", meta.dtype),
        });
    }
    let bytes = fs::read(path)?;
    let actual = hex::encode(Sha256::digest(&bytes));
    if actual != meta.sha256 {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: meta.sha256,
            actual,
        });
    }
    let n: usize = meta.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} bytes for shape {:?}", bytes.len(), meta.shape),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array::from_shape_vec(IxDyn(&meta.shape), data).expect("checked length"))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let a = read_tensor(path)?;
    let a = a.into_dimensionality::<ndarray::Ix3>().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        reason: "volume must be 3-D".into(),
    })?;
    Volume::new(a, Provenance::Real)
}

pub fn read_slice(path: &Path) -> Result<SliceImage> {
    read_tensor(path)?
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: "slice must be 2-D".into(),
        })
}

/// Writes all samples under `dir` and the manifest; returns the manifest.
pub fn save_dataset(
    dir: &Path,
    samples: &[PairedSample],
    generator: Option<(&PhantomConfig, u64)>,
    ratio: [usize; 2],
    split_seed: u64,
) -> Result<DatasetManifest> {
    let first = samples.first().ok_or_else(|| Error::Domain("no samples to save".into()))?;
    let (res, _) = first.volume.resolution();
    let s = first.volume.depth_count();
    let entries = samples
        .par_iter()
        .map(|smp| -> Result<SampleEntry> {
            if smp.volume.depth_count() != s || smp.volume.resolution() != (res, res) || smp.xray.dim() != (res, res) {
                return Err(Error::Domain(format!("sample {} does not match the corpus shape", smp.id)));
            }
            let xray = PathBuf::from("xray").join(format!("{}.f32", smp.id));
            let volume = PathBuf::from("volume").join(format!("{}.f32", smp.id));
            write_tensor(&dir.join(&xray), &smp.xray)?;
            write_tensor(&dir.join(&volume), smp.volume.data())?;
            Ok(SampleEntry {
                id: smp.id.clone(),
                grade: smp.grade,
                split: Split::Train,
                xray,
                volume,
                region: smp.region,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest {
        version: 1,
        resolution: res,
        slices: s,
        split_ratio: ratio,
        split_seed,
        generator_seed: generator.map(|g| g.1),
        generator: generator.map(|g| g.0.clone()),
        samples: entries,
    };
    manifest.validate()?;
    if manifest.samples.len() >= 2 {
        split_dataset(&mut manifest, ratio, split_seed)?;
    }
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string(manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(DatasetManifest::FILE_NAME), text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Error::Missing(format!("manifest {}", path.display())));
    }
    let m: DatasetManifest = toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    m.validate()?;
    Ok(m)
}

/// Loads and validates every sample of a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<PairedSample>)> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .samples
        .par_iter()
        .map(|e| -> Result<PairedSample> {
            let xray = read_slice(&dir.join(&e.xray))?;
            let volume = read_volume(&dir.join(&e.volume))?;
            if volume.depth_count() != manifest.slices
                || volume.resolution() != (manifest.resolution, manifest.resolution)
                || xray.dim() != (manifest.resolution, manifest.resolution)
            {
                return Err(Error::Format {
                    path: dir.join(&e.volume),
                    reason: format!("sample {} does not match the manifest shape", e.id),
                });
            }
            if xray.iter().chain(volume.data().iter()).any(|v| !(v.abs() <= 1.0)) {
                return Err(Error::Format {
                    path: dir.join(&e.volume),
                    reason: format!("sample {} has intensities outside [-1, 1]", e.id),
                });
            }
            Ok(PairedSample {
                id: e.id.clone(),
                xray,
                volume,
                grade: e.grade,
                region: e.region,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
