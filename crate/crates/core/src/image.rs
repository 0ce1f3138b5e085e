//! Planar RGB image buffers, fidelity metrics, and 8-bit PNG round-trip.

use std::path::Path;

use crate::filters::sep_filter_reflect;

/// Smallest accepted edge length for any image.
pub const MIN_SIDE: usize = 8;

/// PSNR sentinel for identical images, and the cap applied near it so tables
/// stay finite and monotone.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image dimensions {h}x{w} are below the {MIN_SIDE}x{MIN_SIDE} minimum")]
    TooSmall { h: usize, w: usize },
    #[error("buffer holds {got} samples but {h}x{w} planar RGB needs {need}")]
    BadBufferLen { h: usize, w: usize, need: usize, got: usize },
    #[error("dimension mismatch: {ah}x{aw} vs {bh}x{bw}")]
    DimensionMismatch { ah: usize, aw: usize, bh: usize, bw: usize },
    #[error("crop {y}+{ch}x{x}+{cw} exceeds image {h}x{w}")]
    CropOutOfBounds { x: usize, y: usize, cw: usize, ch: usize, h: usize, w: usize },
    #[error("png file is {0:?}, expected 8-bit RGB")]
    NotRgb8(image::ColorType),
    #[error("png decode/encode failed: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Planar RGB raster with `f64` samples in `[0, 1]`.
///
/// The sample for channel `c` at row `y`, column `x` lives at
/// `data[c * h * w + y * w + x]`. Every constructor and operation clips its
/// output back into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Image {
    /// Constant-valued image; `v` is clipped into `[0, 1]`.
    pub fn constant(h: usize, w: usize, v: f64) -> Result<Self, ImageError> {
        check_dims(h, w)?;
        Ok(Self { h, w, data: vec![v.clamp(0.0, 1.0); 3 * h * w] })
    }

    /// Builds an image from `f(c, y, x)`, clipping each sample.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self, ImageError> {
        check_dims(h, w)?;
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Ok(Self { h, w, data })
    }

    /// Wraps an existing planar buffer of length `3 * h * w`, clipping it.
    pub fn from_planar(h: usize, w: usize, mut data: Vec<f64>) -> Result<Self, ImageError> {
        check_dims(h, w)?;
        if data.len() != 3 * h * w {
            return Err(ImageError::BadBufferLen { h, w, need: 3 * h * w, got: data.len() });
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Immutable view of one channel plane.
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.h * self.w + y * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[c * self.h * self.w + y * self.w + x] = v.clamp(0.0, 1.0);
    }

    /// Whole planar buffer, channel-major.
    pub fn planar(&self) -> &[f64] {
        &self.data
    }

    /// Clips every sample into `[0, 1]` in place.
    pub fn clip_in_place(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Copies out an axis-aligned square crop.
    pub fn crop(&self, x: usize, y: usize, ch: usize, cw: usize) -> Result<Image, ImageError> {
        if x + cw > self.w || y + ch > self.h {
            return Err(ImageError::CropOutOfBounds { x, y, cw, ch, h: self.h, w: self.w });
        }
        check_dims(ch, cw)?;
        let mut data = Vec::with_capacity(3 * ch * cw);
        for c in 0..3 {
            let plane = self.channel(c);
            for yy in 0..ch {
                let row = &plane[(y + yy) * self.w + x..(y + yy) * self.w + x + cw];
                data.extend_from_slice(row);
            }
        }
        Ok(Image { h: ch, w: cw, data })
    }

    /// Mean luminance plane `(r + g + b) / 3`.
    pub fn luminance(&self) -> Vec<f64> {
        let n = self.h * self.w;
        let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
        (0..n).map(|i| (r[i] + g[i] + b[i]) / 3.0).collect()
    }
}

fn check_dims(h: usize, w: usize) -> Result<(), ImageError> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(ImageError::TooSmall { h, w });
    }
    Ok(())
}

fn check_same_dims(a: &Image, b: &Image) -> Result<(), ImageError> {
    if a.h != b.h || a.w != b.w {
        return Err(ImageError::DimensionMismatch { ah: a.h, aw: a.w, bh: b.h, bw: b.w });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB against a unit dynamic range,
/// `10 * log10(1 / MSE)`, capped at [`PSNR_CAP`]. Identical images hit the
/// cap exactly.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, ImageError> {
    check_same_dims(a, b)?;
    let mut acc = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = x - y;
        acc += d * d;
    }
    let mse = acc / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5) and stabilizers `C1 = 0.01^2`, `C2 = 0.03^2` on unit dynamic
/// range, averaged over pixels and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, ImageError> {
    check_same_dims(a, b)?;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let taps = crate::filters::gaussian_taps(1.5, 5);
    let (h, w) = (a.h, a.w);
    let n = h * w;
    let mut total = 0.0;
    for c in 0..3 {
        let pa = a.channel(c);
        let pb = b.channel(c);
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = sep_filter_reflect(pa, h, w, &taps);
        let mu_b = sep_filter_reflect(pb, h, w, &taps);
        let m_aa = sep_filter_reflect(&aa, h, w, &taps);
        let m_bb = sep_filter_reflect(&bb, h, w, &taps);
        let m_ab = sep_filter_reflect(&ab, h, w, &taps);
        let mut acc = 0.0;
        for i in 0..n {
            let va = m_aa[i] - mu_a[i] * mu_a[i];
            let vb = m_bb[i] - mu_b[i] * mu_b[i];
            let cov = m_ab[i] - mu_a[i] * mu_b[i];
            let num = (2.0 * mu_a[i] * mu_b[i] + C1) * (2.0 * cov + C2);
            let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + C1) * (va + vb + C2);
            acc += num / den;
        }
        total += acc / n as f64;
    }
    Ok(total / 3.0)
}

/// Loads an 8-bit RGB PNG, mapping samples to `v / 255`.
pub fn load_png(path: &Path) -> Result<Image, ImageError> {
    let decoded = image::open(path)?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(buf) => buf,
        other => return Err(ImageError::NotRgb8(other.color())),
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    check_dims(h, w)?;
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(Image { h, w, data })
}

/// Saves as 8-bit RGB PNG. Samples quantize by round-half-up on `v * 255`,
/// so a constant 0.5 image round-trips to 128/255.
pub fn save_png(img: &Image, path: &Path) -> Result<(), ImageError> {
    let (h, w) = (img.h, img.w);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = quantize(img.get(c, y, x));
            }
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |c, y, x| {
            (x as f64 / w as f64 + y as f64 / (2 * h) as f64 + c as f64 * 0.1) % 1.0
        })
        .unwrap()
    }

    #[test]
    fn rejects_small_dimensions() {
        assert!(matches!(Image::constant(4, 4, 0.5), Err(ImageError::TooSmall { .. })));
        assert!(matches!(Image::constant(8, 7, 0.5), Err(ImageError::TooSmall { .. })));
        assert!(Image::constant(8, 8, 0.5).is_ok());
    }

    #[test]
    fn constructors_clip() {
        let img = Image::from_planar(8, 8, vec![-0.5; 192]).unwrap();
        assert_eq!(img.get(0, 0, 0), 0.0);
        let img = Image::constant(8, 8, 1.7).unwrap();
        assert_eq!(img.get(2, 7, 7), 1.0);
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let img = ramp(16, 16);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_known_offset() {
        // Uniform offset of 0.1: MSE = 0.01, PSNR = 20 dB exactly.
        let a = Image::constant(8, 8, 0.4).unwrap();
        let b = Image::constant(8, 8, 0.5).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "psnr {p}");
    }

    #[test]
    fn psnr_never_exceeds_cap() {
        let a = Image::constant(8, 8, 0.5).unwrap();
        let mut b = a.clone();
        b.set(0, 0, 0, 0.5 + 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), PSNR_CAP);
    }

    #[test]
    fn psnr_dimension_mismatch_errors() {
        let a = Image::constant(8, 8, 0.5).unwrap();
        let b = Image::constant(8, 9, 0.5).unwrap();
        assert!(matches!(psnr(&a, &b), Err(ImageError::DimensionMismatch { .. })));
    }

    #[test]
    fn ssim_identical_is_one() {
        let img = ramp(32, 24);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_opposite_constants_near_zero() {
        // Closed form for two constants: C1 / (1 + C1) ~ 1e-4.
        let a = Image::constant(16, 16, 0.0).unwrap();
        let b = Image::constant(16, 16, 1.0).unwrap();
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.01, "ssim {s}");
        assert!((s - 1e-4 / 1.0001).abs() < 1e-9);
    }

    #[test]
    fn ssim_in_unit_range_for_unit_images() {
        let a = ramp(16, 16);
        let b = Image::constant(16, 16, 0.3).unwrap();
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = ramp(16, 16);
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        // One quantization step of error at most.
        for (a, b) in img.planar().iter().zip(back.planar()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // A second round trip is exact.
        save_png(&back, &path).unwrap();
        let again = load_png(&path).unwrap();
        assert_eq!(back, again);
    }

    #[test]
    fn half_gray_rounds_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let img = Image::constant(8, 8, 0.5).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.get(0, 0, 0), 128.0 / 255.0);
    }

    #[test]
    fn crop_bounds_checked() {
        let img = ramp(16, 16);
        assert!(img.crop(8, 8, 8, 8).is_ok());
        assert!(matches!(img.crop(9, 8, 8, 8), Err(ImageError::CropOutOfBounds { .. })));
    }
}
