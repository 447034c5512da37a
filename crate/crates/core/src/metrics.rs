//! Image and volume quality metrics: PSNR, SSIM, edge-map SSIM over a region,
//! adjacent-slice correlation and Sobel difference maps.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{RegionSpec, Volume};
use crate::error::{ensure_shape, Error, Result};
use crate::networks::SliceImage;

/// Dynamic range of images normalized to [-1, 1].
pub const UNIT_PEAK: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CannyParams {
    pub sigma: f64,
    /// Hysteresis thresholds as fractions of the maximum gradient magnitude.
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            low: 0.1,
            high: 0.2,
        }
    }
}

fn to_f64(a: &SliceImage) -> Array2<f64> {
    a.mapv(f64::from)
}

/// Peak signal-to-noise ratio in dB. Identical images give `f64::INFINITY`.
pub fn psnr(a: &SliceImage, b: &SliceImage, peak: f64) -> Result<f64> {
    ensure_shape(a.shape(), b.shape())?;
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("peak must be positive, got {peak}")));
    }
    if a.is_empty() {
        return Err(Error::Domain("empty image".into()));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    let k: Vec<f64> = (0..window)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode correlation with a symmetric kernel.
fn filter_valid(a: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let n = k.len();
    let (h, w) = a.dim();
    let rows = Array2::from_shape_fn((h, w + 1 - n), |(i, j)| (0..n).map(|t| k[t] * a[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(i, j)| (0..n).map(|t| k[t] * rows[[i + t, j]]).sum::<f64>())
}

/// Mean structural similarity over the valid region of a Gaussian-weighted window.
pub fn ssim(a: &SliceImage, b: &SliceImage, params: &SsimParams, peak: f64) -> Result<f64> {
    ensure_shape(a.shape(), b.shape())?;
    let SsimParams { window, sigma, k1, k2 } = *params;
    if window % 2 == 0 || window == 0 {
        return Err(Error::Domain(format!("ssim window must be odd, got {window}")));
    }
    let (h, w) = a.dim();
    if window > h || window > w {
        return Err(Error::Domain(format!("ssim window {window} larger than image {h}x{w}")));
    }
    let k = gaussian_kernel(window, sigma);
    let x = to_f64(a);
    let y = to_f64(b);
    let mx = filter_valid(&x, &k);
    let my = filter_valid(&y, &k);
    let sxx = filter_valid(&(&x * &x), &k);
    let syy = filter_valid(&(&y * &y), &k);
    let sxy = filter_valid(&(&x * &y), &k);
    let c1 = (k1 * peak).powi(2);
    let c2 = (k2 * peak).powi(2);
    let mut total = 0.0;
    Zip::from(&mx).and(&my).and(&sxx).and(&syy).and(&sxy).for_each(|&mx, &my, &sxx, &syy, &sxy| {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cxy = sxy - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    });
    Ok((total / mx.len() as f64).clamp(-1.0, 1.0))
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Same-size separable Gaussian blur with replicated borders.
pub fn gaussian_blur(a: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let r = (4.0 * sigma).ceil() as isize;
    let k = gaussian_kernel(2 * r as usize + 1, sigma);
    let (h, w) = a.dim();
    let rows = Array2::from_shape_fn((h, w), |(i, j)| {
        (-r..=r).map(|t| k[(t + r) as usize] * a[[i, clamp_index(j as isize + t, w)]]).sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        (-r..=r).map(|t| k[(t + r) as usize] * rows[[clamp_index(i as isize + t, h), j]]).sum::<f64>()
    })
}

/// Sobel derivatives (along columns, along rows) with replicated borders.
pub fn sobel(a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = a.dim();
    let at = |i: usize, j: usize, di: isize, dj: isize| a[[clamp_index(i as isize + di, h), clamp_index(j as isize + dj, w)]];
    let gx = Array2::from_shape_fn((h, w), |(i, j)| {
        (at(i, j, -1, 1) + 2.0 * at(i, j, 0, 1) + at(i, j, 1, 1)) - (at(i, j, -1, -1) + 2.0 * at(i, j, 0, -1) + at(i, j, 1, -1))
    });
    let gy = Array2::from_shape_fn((h, w), |(i, j)| {
        (at(i, j, 1, -1) + 2.0 * at(i, j, 1, 0) + at(i, j, 1, 1)) - (at(i, j, -1, -1) + 2.0 * at(i, j, -1, 0) + at(i, j, -1, 1))
    });
    (gx, gy)
}

pub fn sobel_magnitude(a: &SliceImage) -> Array2<f64> {
    let (gx, gy) = sobel(&to_f64(a));
    Zip::from(&gx).and(&gy).map_collect(|x, y| x.hypot(*y))
}

/// |‖∇a‖ − ‖∇b‖| scaled so its maximum is 1 (all zeros when the magnitudes agree).
pub fn sobel_difference_map(a: &SliceImage, b: &SliceImage) -> Result<SliceImage> {
    ensure_shape(a.shape(), b.shape())?;
    let d = (sobel_magnitude(a) - sobel_magnitude(b)).mapv(f64::abs);
    let max = d.iter().cloned().fold(0.0, f64::max);
    Ok(if max > 0.0 { d.mapv(|v| (v / max) as f32) } else { d.mapv(|_| 0.0) })
}

/// Binary Canny edge map: Gaussian smoothing, Sobel gradients, non-maximum
/// suppression and hysteresis at fractions of the maximum magnitude.
pub fn canny(a: &SliceImage, params: &CannyParams) -> Result<SliceImage> {
    if !(params.sigma > 0.0) || !(0.0..=params.high).contains(&params.low) || params.high > 1.0 {
        return Err(Error::Domain(format!("invalid canny parameters {params:?}")));
    }
    let (h, w) = a.dim();
    let smooth = gaussian_blur(&to_f64(a), params.sigma);
    let (gx, gy) = sobel(&smooth);
    let mag = Zip::from(&gx).and(&gy).map_collect(|x, y| x.hypot(*y));
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let mut edges = Array2::<f32>::zeros((h, w));
    // flat images (up to rounding) have no edges
    if max <= 1e-9 {
        return Ok(edges);
    }
    let (lo, hi) = (params.low * max, params.high * max);

    let mut nms = Array2::<f64>::zeros((h, w));
    for i in 1..h.saturating_sub(1) {
        for j in 1..w.saturating_sub(1) {
            let m = mag[[i, j]];
            if m < lo || m == 0.0 {
                continue;
            }
            // quantize the gradient direction to one of four neighbour pairs
            let angle = gy[[i, j]].atan2(gx[[i, j]]).to_degrees().rem_euclid(180.0);
            let (di, dj): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let n1 = mag[[(i as isize + di) as usize, (j as isize + dj) as usize]];
            let n2 = mag[[(i as isize - di) as usize, (j as isize - dj) as usize]];
            // ties keep only the pixel on the far side so edges stay one pixel wide
            if m > n1 && m >= n2 {
                nms[[i, j]] = m;
            }
        }
    }

    let mut stack: Vec<(usize, usize)> = Vec::new();
    for ((i, j), &m) in nms.indexed_iter() {
        if m >= hi {
            edges[[i, j]] = 1.0;
            stack.push((i, j));
        }
    }
    while let Some((i, j)) = stack.pop() {
        for di in -1isize..=1 {
            for dj in -1isize..=1 {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                    continue;
                }
                let (ni, nj) = (ni as usize, nj as usize);
                if edges[[ni, nj]] == 0.0 && nms[[ni, nj]] >= lo {
                    edges[[ni, nj]] = 1.0;
                    stack.push((ni, nj));
                }
            }
        }
    }
    Ok(edges)
}

/// SSIM of Canny edge maps restricted to `region`. Two edge-free crops score 1.
pub fn rssim(a: &SliceImage, b: &SliceImage, canny_params: &CannyParams, region: &RegionSpec, ssim_params: &SsimParams) -> Result<f64> {
    ensure_shape(a.shape(), b.shape())?;
    if region.is_empty() {
        return Err(Error::Domain("empty region".into()));
    }
    let ea = region.crop(&canny(a, canny_params)?)?;
    let eb = region.crop(&canny(b, canny_params)?)?;
    // small regions shrink the window to the largest odd size that fits
    let side = ea.nrows().min(ea.ncols());
    let params = SsimParams {
        window: ssim_params.window.min(side - (1 - side % 2)),
        ..*ssim_params
    };
    ssim(&ea, &eb, &params, 1.0)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    match (saa == 0.0, sbb == 0.0) {
        (true, true) => {
            if a == b {
                1.0
            } else {
                0.0
            }
        }
        (false, false) => sab / (saa * sbb).sqrt(),
        _ => 0.0,
    }
}

/// Mean Pearson correlation between consecutive slices.
///
/// A pair of constant slices counts as 1 if they are equal and 0 otherwise; a
/// constant slice next to a varying one counts as 0.
pub fn adjacent_slice_correlation(vol: &Volume) -> Result<f64> {
    let s = vol.depth_count();
    if s < 2 {
        return Err(Error::Domain(format!("need at least 2 slices, got {s}")));
    }
    let flat: Vec<Vec<f64>> = (0..s).map(|k| vol.slice(k).iter().map(|&v| f64::from(v)).collect()).collect();
    Ok(flat.windows(2).map(|p| pearson(&p[0], &p[1])).sum::<f64>() / (s - 1) as f64)
}

/// Median with NaN rejected; infinities sort to the ends.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else if v[n / 2 - 1] == v[n / 2] {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub peak: f64,
    pub ssim: SsimParams,
    pub canny: CannyParams,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            peak: UNIT_PEAK,
            ssim: SsimParams::default(),
            canny: CannyParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    pub slices: usize,
    pub depths: Vec<f64>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub rssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_rssim: f64,
    pub median_psnr: f64,
    pub median_ssim: f64,
    pub median_rssim: f64,
    pub correlation_pred: f64,
    pub correlation_gt: f64,
}

pub const EVAL_CSV_HEADER: [&str; 5] = ["slice", "depth", "psnr", "ssim", "rssim"];

pub fn format_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:?}")
    }
}

pub fn parse_metric(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        _ => s.parse().map_err(|_| Error::Domain(format!("not a metric value: {s:?}"))),
    }
}

impl EvalReport {
    /// Per-slice rows: `slice,depth,psnr,ssim,rssim`. Infinite PSNR is written as `inf`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(EVAL_CSV_HEADER)?;
        for k in 0..self.slices {
            w.write_record([
                k.to_string(),
                format!("{:?}", self.depths[k]),
                format_metric(self.psnr[k]),
                format_metric(self.ssim[k]),
                format_metric(self.rssim[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Volume-level rows: `metric,value`.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "value"])?;
        let rows: [(&str, String); 12] = [
            ("model_id", self.model_id.clone()),
            ("dataset_id", self.dataset_id.clone()),
            ("slices", self.slices.to_string()),
            ("mean_psnr", format_metric(self.mean_psnr)),
            ("mean_ssim", format_metric(self.mean_ssim)),
            ("mean_rssim", format_metric(self.mean_rssim)),
            ("median_psnr", format_metric(self.median_psnr)),
            ("median_ssim", format_metric(self.median_ssim)),
            ("median_rssim", format_metric(self.median_rssim)),
            ("correlation_pred", format_metric(self.correlation_pred)),
            ("correlation_gt", format_metric(self.correlation_gt)),
            ("correlation_gap", format_metric(self.correlation_gt - self.correlation_pred)),
        ];
        for (k, v) in rows {
            w.write_record([k, v.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-slice PSNR, SSIM and RSSIM plus medians and adjacent-slice correlations.
pub fn evaluate_volumes(pred: &Volume, gt: &Volume, region: &RegionSpec, settings: &EvalSettings) -> Result<EvalReport> {
    if pred.depth_count() != gt.depth_count() || pred.resolution() != gt.resolution() {
        return Err(Error::ShapeMismatch {
            expected: gt.data().shape().to_vec(),
            got: pred.data().shape().to_vec(),
        });
    }
    let s = gt.depth_count();
    let per_slice: Vec<(f64, f64, f64)> = (0..s)
        .into_par_iter()
        .map(|k| {
            let (p, g) = (pred.slice(k), gt.slice(k));
            Ok((
                psnr(&p, &g, settings.peak)?,
                ssim(&p, &g, &settings.ssim, settings.peak)?,
                rssim(&p, &g, &settings.canny, region, &settings.ssim)?,
            ))
        })
        .collect::<Result<_>>()?;
    let psnr_v: Vec<f64> = per_slice.iter().map(|r| r.0).collect();
    let ssim_v: Vec<f64> = per_slice.iter().map(|r| r.1).collect();
    let rssim_v: Vec<f64> = per_slice.iter().map(|r| r.2).collect();
    let med = |v: &[f64]| median(v).ok_or_else(|| Error::NonFinite("metric".into()));
    Ok(EvalReport {
        model_id: String::new(),
        dataset_id: String::new(),
        slices: s,
        depths: gt.depths().to_vec(),
        mean_psnr: mean(&psnr_v),
        mean_ssim: mean(&ssim_v),
        mean_rssim: mean(&rssim_v),
        median_psnr: med(&psnr_v)?,
        median_ssim: med(&ssim_v)?,
        median_rssim: med(&rssim_v)?,
        psnr: psnr_v,
        ssim: ssim_v,
        rssim: rssim_v,
        correlation_pred: adjacent_slice_correlation(pred)?,
        correlation_gt: adjacent_slice_correlation(gt)?,
    })
}

/// Writes an 8-bit grayscale PNG, mapping `range` linearly onto 0..=255.
pub fn write_png(path: &Path, img: &SliceImage, range: (f32, f32)) -> Result<()> {
    let (h, w) = img.dim();
    let (lo, hi) = range;
    if !(hi > lo) {
        return Err(Error::Domain(format!("invalid png range {range:?}")));
    }
    let bytes: Vec<u8> = img
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from image");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png(path: &Path, range: (f32, f32)) -> Result<SliceImage> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let (lo, hi) = range;
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        lo + (hi - lo) * f32::from(img.get_pixel(j as u32, i as u32)[0]) / 255.0
    }))
}
