//! Coarse-to-fine splat rendering of color pyramids and image metrics.
//!
//! Each output pixel takes the level-0 color where that pixel is covered.
//! Holes are filled from the finest coarser level whose bin `(x >> t, y >> t)`
//! is covered, and pixels uncovered at every level get the background.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::raster::{RasterImage, RasterPyramid};

pub const DEFAULT_BACKGROUND: f32 = 0.5;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// A masked pixel counts as a hole when it carries the no-color sentinel.
#[inline]
fn color_at(level: &RasterImage, x: u32, y: u32) -> Option<[f32; 3]> {
    if x >= level.width || y >= level.height || !level.is_masked(x, y) {
        return None;
    }
    let f = level.feature(x, y);
    if f.iter().any(|&v| v < 0.0) {
        return None;
    }
    Some([f[0], f[1], f[2]])
}

/// Renders the pyramid at level-0 resolution with a gray `background`.
pub fn render_rgb(pyramid: &RasterPyramid, background: f32) -> Result<RgbImage> {
    if pyramid.channels() != 3 {
        return Err(Error::domain(format!(
            "render needs a 3-channel color pyramid, got {} channels",
            pyramid.channels()
        )));
    }
    if !(0.0..=1.0).contains(&background) {
        return Err(Error::domain(format!("background {background} outside [0, 1]")));
    }
    let base = pyramid
        .level(0)
        .ok_or_else(|| Error::domain("pyramid has no level 0"))?;
    let coarser: Vec<&RasterImage> = pyramid.levels.iter().filter(|l| l.level > 0).collect();
    if coarser.is_empty() {
        return Err(Error::domain("pyramid has no level coarser than 0"));
    }
    let (w, h) = (base.width, base.height);
    let mut data = vec![0f32; w as usize * h as usize * 3];
    data.par_chunks_mut(w as usize * 3)
        .enumerate()
        .for_each(|(y, row)| {
            let y = y as u32;
            for x in 0..w {
                let rgb = color_at(base, x, y)
                    .or_else(|| {
                        coarser
                            .iter()
                            .find_map(|l| color_at(l, x >> l.level, y >> l.level))
                    })
                    .unwrap_or([background; 3]);
                let i = x as usize * 3;
                for c in 0..3 {
                    row[i + c] = rgb[c].clamp(0.0, 1.0);
                }
            }
        });
    RgbImage::from_data(w, h, data)
}

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "image dims differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

/// Peak signal-to-noise ratio in dB with peak 1; identical images give `+∞`.
pub fn psnr(img: &RgbImage, reference: &RgbImage) -> Result<f64> {
    check_dims(img, reference)?;
    let n = img.data().len();
    if n == 0 {
        return Err(Error::domain("empty image"));
    }
    let sse: f64 = img
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let mse = sse / n as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-0.5 * x * x / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable weighted sum over every full window position.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|j| k[j] * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|j| k[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let k = gaussian_kernel();
    let product = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let aa = filter_valid(&product(a, a), w, h, &k);
    let bb = filter_valid(&product(b, b), w, h, &k);
    let ab = filter_valid(&product(a, b), w, h, &k);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / mu_a.len() as f64
}

/// Mean structural similarity: 11×11 Gaussian window (σ = 1.5), dynamic
/// range 1, averaged over window positions fully inside the image and then
/// over channels.
pub fn ssim(img: &RgbImage, reference: &RgbImage) -> Result<f64> {
    check_dims(img, reference)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::domain(format!(
            "{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let per_channel: Vec<f64> = (0..3)
        .into_par_iter()
        .map(|c| ssim_plane(&img.channel(c), &reference.channel(c), w, h))
        .collect();
    Ok(per_channel.iter().sum::<f64>() / 3.0)
}
