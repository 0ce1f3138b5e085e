//! Degradation descriptors: a 32-dimensional statistic vector per image.
//!
//! The descriptor is computed on a center crop whose side is at most 128 and
//! a multiple of 8, with the crop origin also rounded down to a multiple of
//! 8. That keeps the crop's 8x8 grid aligned with compression blocks laid out
//! from the image origin, so the blockiness component measures real block
//! boundaries rather than arbitrary interior columns.
//!
//! Seven components are designated severity proxies, each moving
//! monotonically with one degradation family:
//!
//! | index | component        | responds to      |
//! |-------|------------------|------------------|
//! | 0     | `hf_rms`         | noise (rises)    |
//! | 2     | `grad_mean`      | blur (falls)     |
//! | 4     | `dark_mean`      | haze (rises)     |
//! | 6     | `lum_mean`       | low light (falls)|
//! | 15    | `streak_aniso`   | rain (rises)     |
//! | 16    | `bright_density` | snow (rises)     |
//! | 17    | `blockiness`     | compression (rises) |
//!
//! Raw components have wildly different scales; cluster and router code
//! standardizes them with a [`Standardizer`] fitted on the training corpus.

use serde::{Deserialize, Serialize};

use crate::filters::{box3_mean, conv2d_reflect, median3, min3, reflect_index};
use crate::image::Image;

/// Number of descriptor components.
pub const DR_DIM: usize = 32;

/// Largest crop side used for extraction.
pub const CROP_MAX_SIDE: usize = 128;

/// Component names, indexed like the descriptor.
pub const COMPONENT_NAMES: [&str; DR_DIM] = [
    "hf_rms",
    "hf_mad",
    "grad_mean",
    "grad_p90",
    "dark_mean",
    "sat_mean",
    "lum_mean",
    "lum_std",
    "lum_p05",
    "lum_p95",
    "local_contrast",
    "lap_rms",
    "autocorr_h",
    "autocorr_v",
    "hf_ratio",
    "streak_aniso",
    "bright_density",
    "blockiness",
    "bright_blob_density",
    "chroma_std",
    "r_mean",
    "b_minus_r",
    "rg_corr",
    "grad_p50",
    "flat_frac",
    "hf_chroma_rms",
    "energy_h",
    "energy_d45",
    "energy_dm45",
    "energy_v",
    "dark_p10",
    "lum_entropy",
];

/// Noise severity proxy (rises with noise sigma).
pub const IDX_HF_RMS: usize = 0;
/// Blur severity proxy (falls with blur sigma).
pub const IDX_GRAD_MEAN: usize = 2;
/// Haze severity proxy (rises with scattering).
pub const IDX_DARK_MEAN: usize = 4;
/// Low-light severity proxy (falls with gamma).
pub const IDX_LUM_MEAN: usize = 6;
/// Rain severity proxy (rises with streak count).
pub const IDX_STREAK_ANISO: usize = 15;
/// Snow severity proxy (rises with coverage).
pub const IDX_BRIGHT_DENSITY: usize = 16;
/// Compression severity proxy (rises as quality drops).
pub const IDX_BLOCKINESS: usize = 17;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("standardizer needs at least 2 sample vectors, got {0}")]
    TooFewSamples(usize),
    #[error("vector length {got} does not match expected {want}")]
    DimensionMismatch { want: usize, got: usize },
}

/// Per-component affine normalization: `(x - mean) / std`, with the
/// population standard deviation floored at 1e-6 so constant components
/// cannot blow up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, FeatureError> {
        if v.len() != self.mean.len() {
            return Err(FeatureError::DimensionMismatch { want: self.mean.len(), got: v.len() });
        }
        Ok(v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }
}

/// Fits a [`Standardizer`] (per-component mean and floored population
/// standard deviation) on at least two equally sized vectors.
pub fn fit_standardizer(rows: &[Vec<f64>]) -> Result<Standardizer, FeatureError> {
    if rows.len() < 2 {
        return Err(FeatureError::TooFewSamples(rows.len()));
    }
    let dim = rows[0].len();
    for row in rows {
        if row.len() != dim {
            return Err(FeatureError::DimensionMismatch { want: dim, got: row.len() });
        }
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; dim];
    for row in rows {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m).powi(2) / n;
        }
    }
    let std = var.iter().map(|v| v.max(0.0).sqrt().max(1e-6)).collect();
    Ok(Standardizer { mean, std })
}

/// Extracts the 32-component degradation descriptor. Deterministic; the
/// returned vector always has length [`DR_DIM`].
pub fn extract_dr(img: &Image) -> Vec<f64> {
    let crop = Crop::center(img);
    let (h, w, n) = (crop.h, crop.w, (crop.h * crop.w) as f64);
    let lum = &crop.lum;

    let box_l = box3_mean(lum, h, w);
    let hf_rms = rms_diff(lum, &box_l);
    let med_l = median3(lum, h, w);
    let hf_mad = lum.iter().zip(&med_l).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;

    let mut grads: Vec<f64> = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let gx = (lum[y * w + reflect_index(x as isize + 1, w)]
                - lum[y * w + reflect_index(x as isize - 1, w)])
                / 2.0;
            let gy = (lum[reflect_index(y as isize + 1, h) * w + x]
                - lum[reflect_index(y as isize - 1, h) * w + x])
                / 2.0;
            grads.push((gx * gx + gy * gy).sqrt());
        }
    }
    let grad_mean = grads.iter().sum::<f64>() / n;
    let flat_frac = grads.iter().filter(|g| **g < 0.01).count() as f64 / n;
    let mut sorted_grads = grads;
    sorted_grads.sort_by(f64::total_cmp);
    let grad_p90 = percentile(&sorted_grads, 0.90);
    let grad_p50 = percentile(&sorted_grads, 0.50);

    let min_channel: Vec<f64> = (0..h * w)
        .map(|i| crop.r[i].min(crop.g[i]).min(crop.b[i]))
        .collect();
    let dark = min3(&min_channel, h, w);
    let dark_mean = dark.iter().sum::<f64>() / n;
    let mut sorted_dark = dark;
    sorted_dark.sort_by(f64::total_cmp);
    let dark_p10 = percentile(&sorted_dark, 0.10);

    let sat: Vec<f64> = (0..h * w)
        .map(|i| {
            crop.r[i].max(crop.g[i]).max(crop.b[i]) - crop.r[i].min(crop.g[i]).min(crop.b[i])
        })
        .collect();
    let sat_mean = sat.iter().sum::<f64>() / n;
    let chroma_std = population_std(&sat);

    let lum_mean = lum.iter().sum::<f64>() / n;
    let lum_std = population_std(lum);
    let mut sorted_lum = lum.clone();
    sorted_lum.sort_by(f64::total_cmp);
    let lum_p05 = percentile(&sorted_lum, 0.05);
    let lum_p95 = percentile(&sorted_lum, 0.95);

    let sq: Vec<f64> = lum.iter().map(|v| v * v).collect();
    let box_sq = box3_mean(&sq, h, w);
    let local_contrast = box_sq
        .iter()
        .zip(&box_l)
        .map(|(m2, m1)| (m2 - m1 * m1).max(0.0).sqrt())
        .sum::<f64>()
        / n;

    let lap_kernel = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    let lap = conv2d_reflect(lum, h, w, &lap_kernel, 3);
    let lap_rms = (lap.iter().map(|v| v * v).sum::<f64>() / n).sqrt();

    let autocorr_h = lag1_correlation(lum, h, w, 0, 1);
    let autocorr_v = lag1_correlation(lum, h, w, 1, 0);
    let hf_ratio = hf_rms / (lum_std + 1e-6);

    let energy_h = directional_rms(lum, h, w, 0, 1);
    let energy_v = directional_rms(lum, h, w, 1, 0);
    let energy_d45 = directional_rms(lum, h, w, 1, 1);
    let energy_dm45 = directional_rms(lum, h, w, -1, 1);
    let probes = [energy_h, energy_d45, energy_dm45];
    let streak_aniso = probes.iter().fold(f64::MIN, |a, b| a.max(*b))
        - probes.iter().fold(f64::MAX, |a, b| a.min(*b));

    let bright_density = lum.iter().filter(|v| **v > 0.8).count() as f64 / n;
    let blockiness = grid_blockiness(lum, h, w);

    let mut blobs = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = lum[y * w + x];
            if c > 0.7
                && c > lum[y * w + x - 1]
                && c > lum[y * w + x + 1]
                && c > lum[(y - 1) * w + x]
                && c > lum[(y + 1) * w + x]
            {
                blobs += 1;
            }
        }
    }
    let bright_blob_density = blobs as f64 / n;

    let r_mean = crop.r.iter().sum::<f64>() / n;
    let b_mean = crop.b.iter().sum::<f64>() / n;
    let rg_corr = pearson(&crop.r, &crop.g);

    let rg_diff: Vec<f64> = crop.r.iter().zip(&crop.g).map(|(a, b)| a - b).collect();
    let box_rg = box3_mean(&rg_diff, h, w);
    let hf_chroma_rms = rms_diff(&rg_diff, &box_rg);

    let lum_entropy = histogram_entropy(lum);

    vec![
        hf_rms,
        hf_mad,
        grad_mean,
        grad_p90,
        dark_mean,
        sat_mean,
        lum_mean,
        lum_std,
        lum_p05,
        lum_p95,
        local_contrast,
        lap_rms,
        autocorr_h,
        autocorr_v,
        hf_ratio,
        streak_aniso,
        bright_density,
        blockiness,
        bright_blob_density,
        chroma_std,
        r_mean,
        b_mean - r_mean,
        rg_corr,
        grad_p50,
        flat_frac,
        hf_chroma_rms,
        energy_h,
        energy_d45,
        energy_dm45,
        energy_v,
        dark_p10,
        lum_entropy,
    ]
}

struct Crop {
    h: usize,
    w: usize,
    r: Vec<f64>,
    g: Vec<f64>,
    b: Vec<f64>,
    lum: Vec<f64>,
}

impl Crop {
    /// Center crop with side `min(h, w, 128)` floored to a multiple of 8 and
    /// origin rounded down to a multiple of 8 (block-grid alignment).
    fn center(img: &Image) -> Self {
        let (h, w) = (img.height(), img.width());
        let side = h.min(w).min(CROP_MAX_SIDE) / 8 * 8;
        let oy = (h - side) / 2 / 8 * 8;
        let ox = (w - side) / 2 / 8 * 8;
        let mut planes = [Vec::new(), Vec::new(), Vec::new()];
        for (c, plane) in planes.iter_mut().enumerate() {
            let src = img.channel(c);
            plane.reserve(side * side);
            for y in 0..side {
                let row = &src[(oy + y) * w + ox..(oy + y) * w + ox + side];
                plane.extend_from_slice(row);
            }
        }
        let [r, g, b] = planes;
        let lum = r
            .iter()
            .zip(g.iter().zip(&b))
            .map(|(r, (g, b))| (r + g + b) / 3.0)
            .collect();
        Crop { h: side, w: side, r, g, b, lum }
    }
}

fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).max(0.0).sqrt()
}

/// Nearest-rank percentile on an ascending-sorted slice, `p` in `[0, 1]`.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * p).round() as usize]
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let denom = population_std(a) * population_std(b);
    if denom < 1e-12 {
        0.0
    } else {
        cov / denom
    }
}

/// Pearson correlation between the plane and itself shifted by `(dy, dx)`,
/// over the valid overlap.
fn lag1_correlation(plane: &[f64], h: usize, w: usize, dy: usize, dx: usize) -> f64 {
    let mut a = Vec::with_capacity(h * w);
    let mut b = Vec::with_capacity(h * w);
    for y in 0..h - dy {
        for x in 0..w - dx {
            a.push(plane[y * w + x]);
            b.push(plane[(y + dy) * w + (x + dx)]);
        }
    }
    pearson(&a, &b)
}

/// RMS of the forward difference along `(dy, dx)`, normalized by the step
/// length so diagonals compare with the axes.
fn directional_rms(plane: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let step = ((dy * dy + dx * dx) as f64).sqrt();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        let ty = y as isize + dy;
        if ty < 0 || ty >= h as isize {
            continue;
        }
        for x in 0..w {
            let tx = x as isize + dx;
            if tx < 0 || tx >= w as isize {
                continue;
            }
            let d = (plane[ty as usize * w + tx as usize] - plane[y * w + x]) / step;
            sum += d * d;
            count += 1;
        }
    }
    (sum / count.max(1) as f64).sqrt()
}

/// Mean absolute step across 8-grid boundaries minus the mean absolute step
/// elsewhere, summed over columns and rows. Near zero for natural content,
/// positive when the 8x8 block grid carries discontinuities.
fn grid_blockiness(plane: &[f64], h: usize, w: usize) -> f64 {
    let axis = |major: usize, minor: usize, idx: &dyn Fn(usize, usize) -> usize| -> f64 {
        let (mut on, mut on_n, mut off, mut off_n) = (0.0, 0usize, 0.0, 0usize);
        for a in 0..major {
            for b in 1..minor {
                let d = (plane[idx(a, b)] - plane[idx(a, b - 1)]).abs();
                if b % 8 == 0 {
                    on += d;
                    on_n += 1;
                } else {
                    off += d;
                    off_n += 1;
                }
            }
        }
        if on_n == 0 || off_n == 0 {
            return 0.0;
        }
        on / on_n as f64 - off / off_n as f64
    };
    axis(h, w, &|y, x| y * w + x) + axis(w, h, &|x, y| y * w + x)
}

/// Shannon entropy (nats) of a 16-bin histogram over `[0, 1]`.
fn histogram_entropy(v: &[f64]) -> f64 {
    let mut bins = [0usize; 16];
    for x in v {
        let b = ((x.clamp(0.0, 1.0) * 16.0) as usize).min(15);
        bins[b] += 1;
    }
    let n = v.len() as f64;
    bins.iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.ln()
        })
        .sum()
}
