//! Gaussian-windowed SSIM on the luma channel.
//!
//! Window 11x11 with sigma 1.5, stabilisers `C1 = (0.01 L)^2` and
//! `C2 = (0.03 L)^2` with dynamic range `L = 1`. Borders replicate the edge
//! pixel.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// BT.601 luma in [0, 1].
pub fn luma(img: &RgbImage) -> Grid<f64> {
    Grid::from_fn(img.width() as usize, img.height() as usize, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
    })
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable convolution with edge replication.
pub fn separable_filter(src: &Grid<f64>, kernel: &[f64]) -> Grid<f64> {
    let (w, h) = src.dims();
    let half = (kernel.len() / 2) as isize;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;

    let mut tmp = Grid::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, weight) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + k as isize - half, w);
                acc += weight * src.get(sx, y);
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = Grid::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, weight) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + k as isize - half, h);
                acc += weight * tmp.get(x, sy);
            }
            out.set(x, y, acc);
        }
    }
    out
}

fn check_size(w: usize, h: usize) -> Result<()> {
    if w < WINDOW || h < WINDOW {
        return Err(Error::TooSmall {
            width: w,
            height: h,
            min: WINDOW,
        });
    }
    Ok(())
}

/// Per-pixel SSIM between two luma grids.
pub fn ssim_map_luma(a: &Grid<f64>, b: &Grid<f64>) -> Result<Grid<f64>> {
    a.ensure_same_dims(b)?;
    let (w, h) = a.dims();
    check_size(w, h)?;
    let kernel = gaussian_kernel(WINDOW, SIGMA);

    let aa = Grid::from_fn(w, h, |x, y| a.get(x, y) * a.get(x, y));
    let bb = Grid::from_fn(w, h, |x, y| b.get(x, y) * b.get(x, y));
    let ab = Grid::from_fn(w, h, |x, y| a.get(x, y) * b.get(x, y));

    let mu_a = separable_filter(a, &kernel);
    let mu_b = separable_filter(b, &kernel);
    let e_aa = separable_filter(&aa, &kernel);
    let e_bb = separable_filter(&bb, &kernel);
    let e_ab = separable_filter(&ab, &kernel);

    Ok(Grid::from_fn(w, h, |x, y| {
        let (ma, mb) = (*mu_a.get(x, y), *mu_b.get(x, y));
        let var_a = (e_aa.get(x, y) - ma * ma).max(0.0);
        let var_b = (e_bb.get(x, y) - mb * mb).max(0.0);
        let cov = e_ab.get(x, y) - ma * mb;
        ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
            / ((ma * ma + mb * mb + C1) * (var_a + var_b + C2))
    }))
}

pub fn ssim_map(real: &RgbImage, edited: &RgbImage) -> Result<Grid<f64>> {
    ssim_map_luma(&luma(real), &luma(edited))
}

/// Mean SSIM over the whole image.
pub fn mean_ssim(real: &RgbImage, edited: &RgbImage) -> Result<f64> {
    Ok(ssim_map(real, edited)?.mean())
}

/// Un-normalised `1 - SSIM` map clamped to [0, 1].
pub fn dssim_raw(real: &RgbImage, edited: &RgbImage) -> Result<Grid<f64>> {
    Ok(ssim_map(real, edited)?.map(|s| (1.0 - s).clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sums_to_one_and_is_symmetric() {
        let k = gaussian_kernel(WINDOW, SIGMA);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(k[i], k[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn identical_images_have_unit_ssim() {
        let img = RgbImage::from_fn(16, 16, |x, y| {
            image::Rgb([(x * 13) as u8, (y * 7) as u8, 90])
        });
        let m = ssim_map(&img, &img).unwrap();
        assert!(m.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn too_small_rejected() {
        let img = RgbImage::new(10, 40);
        let err = ssim_map(&img, &img).unwrap_err();
        assert!(matches!(err, Error::TooSmall { min: 11, .. }));
    }
}
