//! The degradation operators.
//!
//! Each operator validates its parameters, applies one physical model, and
//! clips the result back into `[0, 1]`. Operators that need randomness take
//! an explicit seed so replays are exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DegradeError;
use crate::filters::conv2d_reflect;
use crate::image::Image;

/// Dense odd-sized square kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    /// Unit impulse; convolution with it is the identity.
    pub fn delta(size: usize) -> Self {
        let mut weights = vec![0.0; size * size];
        weights[(size / 2) * size + size / 2] = 1.0;
        Self { size, weights }
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Rotated anisotropic Gaussian kernel, normalized to sum 1. Isotropic blur
/// is the special case `sigma_x == sigma_y` (the angle is then irrelevant).
pub fn gaussian_kernel(
    ksize: usize,
    sigma_x: f64,
    sigma_y: f64,
    angle_deg: f64,
) -> Result<Kernel, DegradeError> {
    if ksize % 2 == 0 {
        return Err(DegradeError::EvenKernel(ksize));
    }
    for (name, v) in [("sigma_x", sigma_x), ("sigma_y", sigma_y)] {
        if !(v > 0.0) {
            return Err(DegradeError::ParamOutOfRange { name, value: v, lo: f64::MIN_POSITIVE, hi: f64::INFINITY });
        }
    }
    let r = (ksize / 2) as isize;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut weights = Vec::with_capacity(ksize * ksize);
    for dy in -r..=r {
        for dx in -r..=r {
            let u = dx as f64 * cos + dy as f64 * sin;
            let v = -(dx as f64) * sin + dy as f64 * cos;
            weights.push((-(u * u / (2.0 * sigma_x * sigma_x) + v * v / (2.0 * sigma_y * sigma_y))).exp());
        }
    }
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Ok(Kernel { size: ksize, weights })
}

/// Binary line segment kernel of the given length, width, and direction
/// (degrees from horizontal), normalized to sum 1. For a horizontal
/// direction the support is exactly `length` columns by `width` rows.
pub fn line_kernel(length: usize, width: usize, direction_deg: f64) -> Result<Kernel, DegradeError> {
    if length == 0 || width == 0 {
        return Err(DegradeError::ParamOutOfRange {
            name: "line kernel extent",
            value: length.min(width) as f64,
            lo: 1.0,
            hi: f64::INFINITY,
        });
    }
    let mut size = length + width;
    if size % 2 == 0 {
        size += 1;
    }
    let r = (size / 2) as isize;
    let (sin, cos) = direction_deg.to_radians().sin_cos();
    // Even lengths get a half-pixel offset along the line so the support
    // still spans exactly `length` samples.
    let u_off = if length % 2 == 0 { 0.5 } else { 0.0 };
    let half_len = (length as f64 - 1.0) / 2.0 + 1e-9;
    let half_wid = (width as f64 - 1.0) / 2.0 + 1e-9;
    let mut weights = vec![0.0; size * size];
    let mut count = 0usize;
    for dy in -r..=r {
        for dx in -r..=r {
            let u = dx as f64 * cos + dy as f64 * sin;
            let v = -(dx as f64) * sin + dy as f64 * cos;
            if (u - u_off).abs() <= half_len && v.abs() <= half_wid {
                weights[((dy + r) as usize) * size + (dx + r) as usize] = 1.0;
                count += 1;
            }
        }
    }
    debug_assert!(count > 0);
    for w in &mut weights {
        *w /= count as f64;
    }
    Ok(Kernel { size, weights })
}

/// Convolves all channels with a normalized odd kernel under reflected
/// borders.
pub fn apply_blur(img: &Image, kernel: &Kernel) -> Result<Image, DegradeError> {
    if kernel.size % 2 == 0 {
        return Err(DegradeError::EvenKernel(kernel.size));
    }
    let sum = kernel.sum();
    if (sum - 1.0).abs() > 1e-8 {
        return Err(DegradeError::UnnormalizedKernel(sum));
    }
    let (h, w) = (img.height(), img.width());
    let mut planes = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        planes.extend(conv2d_reflect(img.channel(c), h, w, &kernel.weights, kernel.size));
    }
    Ok(Image::from_planar(h, w, planes)?)
}

/// Adds i.i.d. zero-mean Gaussian noise with standard deviation `sigma`
/// (unit dynamic range), then clips. `sigma == 0` returns the input
/// unchanged.
pub fn apply_noise(img: &Image, sigma: f64, seed: u64) -> Result<Image, DegradeError> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(DegradeError::ParamOutOfRange { name: "sigma", value: sigma, lo: 0.0, hi: 1.0 });
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let (h, w) = (img.height(), img.width());
    let planes: Vec<f64> = img.planar().iter().map(|v| v + normal.sample(&mut rng)).collect();
    Ok(Image::from_planar(h, w, planes)?)
}

/// Adds `count` gray rain streaks: seeded impulses convolved with a
/// normalized line kernel, scaled so a streak darkens by roughly a quarter
/// to a half of its seed amplitude, then `clip(y + r)`.
pub fn apply_rain(
    img: &Image,
    count: u32,
    direction_deg: f64,
    length: usize,
    width: usize,
    seed: u64,
) -> Result<Image, DegradeError> {
    if !(super::ranges::RAIN_DIRECTION.0..=super::ranges::RAIN_DIRECTION.1).contains(&direction_deg) {
        return Err(DegradeError::ParamOutOfRange {
            name: "direction_deg",
            value: direction_deg,
            lo: super::ranges::RAIN_DIRECTION.0,
            hi: super::ranges::RAIN_DIRECTION.1,
        });
    }
    if !(super::ranges::RAIN_LENGTH.0..=super::ranges::RAIN_LENGTH.1).contains(&length) {
        return Err(DegradeError::ParamOutOfRange {
            name: "length",
            value: length as f64,
            lo: super::ranges::RAIN_LENGTH.0 as f64,
            hi: super::ranges::RAIN_LENGTH.1 as f64,
        });
    }
    if !super::ranges::RAIN_WIDTHS.contains(&width) {
        return Err(DegradeError::BadRainWidth(width));
    }
    if count == 0 {
        return Ok(img.clone());
    }
    let kernel = line_kernel(length, width, direction_deg)?;
    let (h, w) = (img.height(), img.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut streaks = vec![0.0; h * w];
    let r = (kernel.size / 2) as isize;
    let gain = 0.5 * (length * width) as f64;
    for _ in 0..count {
        let cy = rng.gen_range(0..h) as isize;
        let cx = rng.gen_range(0..w) as isize;
        let amp = rng.gen_range(0.5..1.0) * gain;
        for ky in 0..kernel.size {
            let y = cy + ky as isize - r;
            if y < 0 || y >= h as isize {
                continue;
            }
            let krow = &kernel.weights[ky * kernel.size..(ky + 1) * kernel.size];
            let srow = &mut streaks[y as usize * w..(y as usize + 1) * w];
            for (kx, kv) in krow.iter().enumerate() {
                if *kv == 0.0 {
                    continue;
                }
                let x = cx + kx as isize - r;
                if x >= 0 && x < w as isize {
                    srow[x as usize] += amp * kv;
                }
            }
        }
    }
    let mut planes = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        planes.extend(img.channel(c).iter().zip(&streaks).map(|(v, s)| v + s));
    }
    Ok(Image::from_planar(h, w, planes)?)
}

/// Alpha-blends white snow over the image: `y * (1 - m) + m`.
pub fn apply_snow(img: &Image, mask: &[f64]) -> Result<Image, DegradeError> {
    let (h, w) = (img.height(), img.width());
    if mask.len() != h * w {
        return Err(DegradeError::FieldSizeMismatch { what: "snow mask", need: h * w, got: mask.len() });
    }
    if let Some(bad) = mask.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(DegradeError::MaskOutOfRange(*bad));
    }
    let mut planes = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        planes.extend(img.channel(c).iter().zip(mask).map(|(v, m)| v * (1.0 - m) + m));
    }
    Ok(Image::from_planar(h, w, planes)?)
}

/// Atmospheric scattering: `x = T y + a (1 - T)` with transmission
/// `T = exp(-beta_s * depth)` per pixel.
pub fn apply_haze(img: &Image, airlight: f64, beta_s: f64, depth: &[f64]) -> Result<Image, DegradeError> {
    if !(0.0..=1.0).contains(&airlight) {
        return Err(DegradeError::ParamOutOfRange { name: "airlight", value: airlight, lo: 0.0, hi: 1.0 });
    }
    if beta_s < 0.0 {
        return Err(DegradeError::ParamOutOfRange { name: "beta_s", value: beta_s, lo: 0.0, hi: f64::INFINITY });
    }
    let (h, w) = (img.height(), img.width());
    if depth.len() != h * w {
        return Err(DegradeError::FieldSizeMismatch { what: "depth map", need: h * w, got: depth.len() });
    }
    if let Some(bad) = depth.iter().find(|d| **d < 0.0) {
        return Err(DegradeError::ParamOutOfRange { name: "depth", value: *bad, lo: 0.0, hi: f64::INFINITY });
    }
    let transmission: Vec<f64> = depth.iter().map(|d| (-beta_s * d).exp()).collect();
    let mut planes = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        planes.extend(
            img.channel(c)
                .iter()
                .zip(&transmission)
                .map(|(v, t)| t * v + airlight * (1.0 - t)),
        );
    }
    Ok(Image::from_planar(h, w, planes)?)
}

/// Gamma-darkens via the max-channel illumination map:
/// `x = (y / I) * I^gamma` with `I` floored at 1e-3. `gamma == 1` is the
/// identity.
pub fn apply_lowlight(img: &Image, gamma: f64) -> Result<Image, DegradeError> {
    if gamma < 1.0 {
        return Err(DegradeError::ParamOutOfRange { name: "gamma", value: gamma, lo: 1.0, hi: f64::INFINITY });
    }
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    let factor: Vec<f64> = (0..n)
        .map(|i| {
            let illum = r[i].max(g[i]).max(b[i]).max(1e-3);
            illum.powf(gamma - 1.0)
        })
        .collect();
    let mut planes = Vec::with_capacity(3 * n);
    for c in 0..3 {
        planes.extend(img.channel(c).iter().zip(&factor).map(|(v, f)| v * f));
    }
    Ok(Image::from_planar(h, w, planes)?)
}

/// Standard base luminance quantization table, row-major.
const JPEG_BASE_TABLE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Quality-scaled quantization table (the conventional piecewise mapping,
/// entries clamped to `[1, 255]`).
fn jpeg_table(quality: u32) -> [f64; 64] {
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality } as f64;
    let mut table = [0.0; 64];
    for (t, base) in table.iter_mut().zip(&JPEG_BASE_TABLE) {
        *t = ((base * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    table
}

/// Orthonormal 8-point DCT-II matrix.
fn dct8_matrix() -> [f64; 64] {
    let mut c = [0.0; 64];
    for k in 0..8 {
        let alpha = if k == 0 { (1.0_f64 / 8.0).sqrt() } else { (2.0_f64 / 8.0).sqrt() };
        for n in 0..8 {
            c[k * 8 + n] = alpha * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / 16.0).cos();
        }
    }
    c
}

/// Compression proxy: per-channel 8x8 block DCT, luminance-table
/// quantization at the given quality, and inverse transform. No chroma
/// subsampling or entropy coding; the distortion is the quantization itself.
pub fn apply_jpeg(img: &Image, quality: u32) -> Result<Image, DegradeError> {
    if !(1..=100).contains(&quality) {
        return Err(DegradeError::ParamOutOfRange { name: "quality", value: quality as f64, lo: 1.0, hi: 100.0 });
    }
    let table = jpeg_table(quality);
    let dct = dct8_matrix();
    let (h, w) = (img.height(), img.width());
    let (bh, bw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let mut planes = Vec::with_capacity(3 * h * w);
    let mut padded = vec![0.0; bh * bw];
    for c in 0..3 {
        let src = img.channel(c);
        // Edge-replicated padding up to block multiples, shifted to
        // [-128, 127] on the byte scale.
        for y in 0..bh {
            let sy = y.min(h - 1);
            for x in 0..bw {
                let sx = x.min(w - 1);
                padded[y * bw + x] = src[sy * w + sx] * 255.0 - 128.0;
            }
        }
        for by in (0..bh).step_by(8) {
            for bx in (0..bw).step_by(8) {
                jpeg_block(&mut padded, bw, by, bx, &dct, &table);
            }
        }
        for y in 0..h {
            for x in 0..w {
                planes.push((padded[y * bw + x] + 128.0) / 255.0);
            }
        }
    }
    Ok(Image::from_planar(h, w, planes)?)
}

fn jpeg_block(plane: &mut [f64], stride: usize, by: usize, bx: usize, dct: &[f64; 64], table: &[f64; 64]) {
    let mut block = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            block[y * 8 + x] = plane[(by + y) * stride + bx + x];
        }
    }
    // F = C B C^T, quantize, B = C^T F C.
    let mut tmp = [0.0; 64];
    mat8_mul(dct, &block, &mut tmp, false, false);
    let mut freq = [0.0; 64];
    mat8_mul(&tmp, dct, &mut freq, false, true);
    for (f, q) in freq.iter_mut().zip(table) {
        *f = (*f / q).round() * q;
    }
    mat8_mul(dct, &freq, &mut tmp, true, false);
    mat8_mul(&tmp, dct, &mut block, false, false);
    for y in 0..8 {
        for x in 0..8 {
            plane[(by + y) * stride + bx + x] = block[y * 8 + x];
        }
    }
}

/// `out = op(a) * op(b)` over 8x8 matrices, where `op` transposes its
/// argument when the corresponding flag is set.
fn mat8_mul(a: &[f64; 64], b: &[f64; 64], out: &mut [f64; 64], ta: bool, tb: bool) {
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                let av = if ta { a[k * 8 + i] } else { a[i * 8 + k] };
                let bv = if tb { b[j * 8 + k] } else { b[k * 8 + j] };
                acc += av * bv;
            }
            out[i * 8 + j] = acc;
        }
    }
}
