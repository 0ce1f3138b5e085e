//! Small-kernel filtering on single-channel planes.
//!
//! A plane is a row-major `&[f64]` of `h * w` samples. Out-of-range taps are
//! resolved by symmetric reflection about the border (`[a b c] -> a a b c c`),
//! folded as many times as needed so kernels larger than the plane stay
//! defined.

/// Maps a possibly out-of-range coordinate into `0..n` by symmetric
/// reflection.
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as isize;
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Convolves a plane with a dense odd-sized square kernel under reflected
/// borders. `kernel` is row-major `ksize * ksize`.
pub fn conv2d_reflect(plane: &[f64], h: usize, w: usize, kernel: &[f64], ksize: usize) -> Vec<f64> {
    assert_eq!(plane.len(), h * w);
    assert_eq!(kernel.len(), ksize * ksize);
    assert_eq!(ksize % 2, 1, "kernel size must be odd");
    let r = (ksize / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in -r..=r {
                let sy = reflect_index(y as isize + ky, h);
                let krow = &kernel[((ky + r) as usize) * ksize..((ky + r) as usize + 1) * ksize];
                let srow = &plane[sy * w..(sy + 1) * w];
                for kx in -r..=r {
                    let sx = reflect_index(x as isize + kx, w);
                    acc += krow[(kx + r) as usize] * srow[sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Separable filter: convolves rows then columns with a normalized 1-D tap
/// set under reflected borders.
pub fn sep_filter_reflect(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    assert_eq!(plane.len(), h * w);
    assert_eq!(taps.len() % 2, 1, "tap count must be odd");
    let r = (taps.len() / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        let dst = &mut rows[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, tap) in taps.iter().enumerate() {
                acc += tap * src[reflect_index(x as isize + t as isize - r, w)];
            }
            dst[x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        for y in 0..h {
            let mut acc = 0.0;
            for (t, tap) in taps.iter().enumerate() {
                acc += tap * rows[reflect_index(y as isize + t as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Normalized Gaussian taps with the given standard deviation and radius.
pub fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    assert!(sigma > 0.0);
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|t| {
            let d = t as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// 3x3 box mean under reflected borders.
pub fn box3_mean(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let taps = [1.0 / 3.0; 3];
    sep_filter_reflect(plane, h, w, &taps)
}

/// 3x3 minimum filter under reflected borders.
pub fn min3(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(plane.len(), h * w);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::INFINITY;
            for dy in -1..=1_isize {
                let sy = reflect_index(y as isize + dy, h);
                for dx in -1..=1_isize {
                    let sx = reflect_index(x as isize + dx, w);
                    m = m.min(plane[sy * w + sx]);
                }
            }
            out[y * w + x] = m;
        }
    }
    out
}

/// 3x3 median filter under reflected borders.
pub fn median3(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(plane.len(), h * w);
    let mut out = vec![0.0; h * w];
    let mut window = [0.0; 9];
    for y in 0..h {
        for x in 0..w {
            let mut n = 0;
            for dy in -1..=1_isize {
                let sy = reflect_index(y as isize + dy, h);
                for dx in -1..=1_isize {
                    let sx = reflect_index(x as isize + dx, w);
                    window[n] = plane[sy * w + sx];
                    n += 1;
                }
            }
            window.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out[y * w + x] = window[4];
        }
    }
    out
}
