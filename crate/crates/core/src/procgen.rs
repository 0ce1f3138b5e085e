//! Procedural generation of clean test scenes, depth fields, and snow masks.
//!
//! The desk-scale corpus does not ship photographic data; clean images are
//! drawn from a seeded generator that layers smooth color fields, occluding
//! shapes, and fine texture so that blur, noise, and compression all leave a
//! measurable footprint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

/// Smoothly interpolated lattice noise in `[0, 1]` with roughly `cell`-sized
/// features.
pub fn value_noise(h: usize, w: usize, cell: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert!(cell >= 1.0);
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell;
        let gy = fy.floor() as usize;
        let ty = smoothstep(fy - gy as f64);
        for x in 0..w {
            let fx = x as f64 / cell;
            let gx = fx.floor() as usize;
            let tx = smoothstep(fx - gx as f64);
            let v00 = lattice[gy * gw + gx];
            let v01 = lattice[gy * gw + gx + 1];
            let v10 = lattice[(gy + 1) * gw + gx];
            let v11 = lattice[(gy + 1) * gw + gx + 1];
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            out[y * w + x] = top + (bot - top) * ty;
        }
    }
    out
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Seeded clean scene: gradient background, a handful of soft-edged shapes,
/// and low-amplitude texture.
pub fn make_clean_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette: Vec<[f64; 3]> = (0..4)
        .map(|_| [rng.gen_range(0.08..0.92), rng.gen_range(0.08..0.92), rng.gen_range(0.08..0.92)])
        .collect();
    let field = value_noise(h, w, (h.min(w) as f64 / 2.5).max(4.0), &mut rng);
    let mut planes = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for i in 0..h * w {
            planes[c * h * w + i] = palette[0][c] + (palette[1][c] - palette[0][c]) * field[i];
        }
    }

    let shapes = rng.gen_range(6..12);
    for _ in 0..shapes {
        let color_base = palette[rng.gen_range(0..palette.len())];
        let mut color = [0.0; 3];
        for c in 0..3 {
            color[c] = (color_base[c] + rng.gen_range(-0.12..0.12)).clamp(0.02, 0.98);
        }
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let rx = rng.gen_range(0.06..0.30) * w as f64;
        let ry = rng.gen_range(0.06..0.30) * h as f64;
        let rectangular = rng.gen_bool(0.4);
        let feather = 1.5;
        let x0 = ((cx - rx - 2.0).floor().max(0.0)) as usize;
        let x1 = ((cx + rx + 2.0).ceil().min(w as f64)) as usize;
        let y0 = ((cy - ry - 2.0).floor().max(0.0)) as usize;
        let y1 = ((cy + ry + 2.0).ceil().min(h as f64)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                // Signed distance to the shape edge in pixels, approximately.
                let d = if rectangular {
                    (dx.abs().max(dy.abs()) - 1.0) * rx.min(ry)
                } else {
                    ((dx * dx + dy * dy).sqrt() - 1.0) * rx.min(ry)
                };
                let alpha = (0.5 - d / feather).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    for c in 0..3 {
                        let p = &mut planes[c * h * w + y * w + x];
                        *p += (color[c] - *p) * alpha;
                    }
                }
            }
        }
    }

    let texture = value_noise(h, w, 2.5, &mut rng);
    let amp = rng.gen_range(0.015..0.04);
    for c in 0..3 {
        for i in 0..h * w {
            planes[c * h * w + i] += amp * (texture[i] - 0.5);
        }
    }
    Image::from_planar(h, w, planes).expect("generator dimensions are validated by callers")
}

/// Seeded smooth depth field normalized to span `[0, 1]`.
pub fn make_depth_field(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse = value_noise(h, w, (h.min(w) as f64 / 3.0).max(2.0), &mut rng);
    let fine = value_noise(h, w, (h.min(w) as f64 / 8.0).max(1.5), &mut rng);
    let mut depth: Vec<f64> = coarse.iter().zip(&fine).map(|(a, b)| a + 0.35 * b).collect();
    let lo = depth.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = depth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.5; h * w];
    }
    for d in &mut depth {
        *d = (*d - lo) / (hi - lo);
    }
    depth
}

/// Seeded snow mask in `[0, 1]`: elliptical flakes with Gaussian falloff,
/// a fraction of them elongated into fall streaks. `coverage` scales the
/// expected mask mass per pixel.
pub fn make_snow_mask(h: usize, w: usize, coverage: f64, seed: u64) -> Vec<f64> {
    assert!((0.0..=1.0).contains(&coverage));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![0.0; h * w];
    if coverage == 0.0 {
        return mask;
    }
    // Mean mass of one flake is about 2*pi*rx*ry*intensity ~ 29 px.
    let flakes = ((coverage * (h * w) as f64 / 29.0).round() as usize).max(1);
    for _ in 0..flakes {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let rx: f64 = rng.gen_range(1.2..3.0);
        let mut ry: f64 = rng.gen_range(1.2..3.0);
        let intensity = rng.gen_range(0.6..1.0);
        let streak = rng.gen_bool(0.3);
        let angle = if streak {
            ry *= rng.gen_range(2.0..4.0);
            rng.gen_range(-30.0_f64..30.0).to_radians()
        } else {
            0.0
        };
        let (sin, cos) = angle.sin_cos();
        let reach = 3.0 * rx.max(ry);
        let x0 = ((cx - reach).floor().max(0.0)) as usize;
        let x1 = ((cx + reach).ceil().min(w as f64)) as usize;
        let y0 = ((cy - reach).floor().max(0.0)) as usize;
        let y1 = ((cy + reach).ceil().min(h as f64)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = (dx * cos + dy * sin) / rx;
                let v = (-dx * sin + dy * cos) / ry;
                let d2 = u * u + v * v;
                if d2 < 9.0 {
                    mask[y * w + x] += intensity * (-d2 / 2.0).exp();
                }
            }
        }
    }
    for m in &mut mask {
        *m = m.clamp(0.0, 1.0);
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        let a = make_clean_image(64, 48, 11);
        let b = make_clean_image(64, 48, 11);
        assert_eq!(a, b);
        assert_ne!(a, make_clean_image(64, 48, 12));
        assert_eq!(make_depth_field(16, 16, 3), make_depth_field(16, 16, 3));
        assert_eq!(make_snow_mask(16, 16, 0.2, 3), make_snow_mask(16, 16, 0.2, 3));
    }

    #[test]
    fn clean_images_have_structure() {
        let img = make_clean_image(96, 96, 5);
        let lum = img.luminance();
        let mean: f64 = lum.iter().sum::<f64>() / lum.len() as f64;
        let var: f64 = lum.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / lum.len() as f64;
        assert!(var.sqrt() > 0.03, "flat scene: std {}", var.sqrt());
    }

    #[test]
    fn depth_field_spans_unit_range() {
        let d = make_depth_field(32, 32, 9);
        let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn snow_mass_scales_with_coverage() {
        let mean = |m: &[f64]| m.iter().sum::<f64>() / m.len() as f64;
        let mut lows = 0.0;
        let mut highs = 0.0;
        for seed in 0..10 {
            lows += mean(&make_snow_mask(64, 64, 0.08, seed));
            highs += mean(&make_snow_mask(64, 64, 0.35, seed));
        }
        assert!(highs > 2.0 * lows, "coverage response too weak: {lows} vs {highs}");
    }

    #[test]
    fn snow_mask_in_unit_range() {
        let m = make_snow_mask(32, 32, 0.5, 1);
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
