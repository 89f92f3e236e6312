//! Fidelity, naturalness and feature-distance metrics, plus run evaluation.

mod niqe;
mod report;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::latent_codec::CodecParams;
use crate::scene_data::CameraPose;

pub use niqe::{niqe, niqe_with, NiqeModel, NIQE_FEATURES, NIQE_MIN_SIDE, NIQE_PATCH};
pub use report::{
    comparison_csv, comparison_text, evaluate_run, evaluate_run_with, evaluate_runs, ComparisonRow, MetricReport, RowStatus,
};

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `10·log10(max_val² / MSE)`; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    check_dims(a, b)?;
    if !(max_val > 0.0) {
        return Err(Error::config("max_val must be positive"));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    Ok(psnr_from_mse(mse, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// Mean per-image PSNR at `max_val = 1`.
pub fn mean_psnr(a: &[Image], b: &[Image]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("{} images vs {} references", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += psnr(x, y, 1.0)?;
    }
    Ok(total / a.len() as f64)
}

/// Mean squared distance between codec encoder activations, averaged over stages.
pub fn perc_proxy(a: &Image, b: &Image, codec: &CodecParams) -> Result<f64> {
    check_dims(a, b)?;
    let fa = codec.features(a)?;
    let fb = codec.features(b)?;
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let sq: f64 = x.data.iter().zip(&y.data).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum();
        total += sq / x.data.len().max(1) as f64;
    }
    Ok(total / fa.len().max(1) as f64)
}

fn bilinear(img: &Image, u: f64, v: f64) -> Option<[f32; 3]> {
    let (x, y) = (u - 0.5, v - 0.5);
    if x < 0.0 || y < 0.0 || x > (img.width - 1) as f64 || y > (img.height - 1) as f64 {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
    Some(std::array::from_fn(|k| {
        (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (c[k] * (1.0 - fx) + d[k] * fx) * fy
    }))
}

fn surface_point(pose: &CameraPose, x: usize, y: usize, t: f32) -> Vector3<f64> {
    let (o, d) = pose.pixel_ray(x, y);
    Vector3::new(
        (o[0] + t * d[0]) as f64,
        (o[1] + t * d[1]) as f64,
        (o[2] + t * d[2]) as f64,
    )
}

/// Mean absolute colour difference between corresponding pixels of view
/// pairs, with correspondences from known per-pixel depth (ray distances, as
/// from [`crate::radiance_field::render_depth`]). A pixel of view `i` counts
/// only if its surface point lands inside view `j` and view `j`'s own surface
/// point there is within `occlusion_tol`. Averaged per ordered pair, then over pairs.
pub fn epipolar_photometric_error(
    images: &[Image],
    poses: &[CameraPose],
    depths: &[Vec<Option<f32>>],
    occlusion_tol: f64,
) -> Result<f64> {
    if images.len() != poses.len() || images.len() != depths.len() || images.len() < 2 {
        return Err(Error::shape("need at least two views with matching images, poses and depths"));
    }
    for (img, d) in images.iter().zip(depths) {
        if d.len() != img.width * img.height {
            return Err(Error::shape("depth map size differs from its image"));
        }
    }
    let mut pair_errors = Vec::new();
    for i in 0..images.len() {
        for j in 0..images.len() {
            if i == j {
                continue;
            }
            let (src, dst) = (&images[i], &images[j]);
            let (mut sum, mut count) = (0.0f64, 0usize);
            for y in 0..src.height {
                for x in 0..src.width {
                    let Some(t) = depths[i][y * src.width + x] else { continue };
                    let p = surface_point(&poses[i], x, y, t);
                    let Some((u, v, _)) = poses[j].project(&p) else { continue };
                    let Some(c) = bilinear(dst, u, v) else { continue };
                    let (nx, ny) = ((u.floor() as usize).min(dst.width - 1), (v.floor() as usize).min(dst.height - 1));
                    let Some(tj) = depths[j][ny * dst.width + nx] else { continue };
                    if (surface_point(&poses[j], nx, ny, tj) - p).norm() > occlusion_tol {
                        continue;
                    }
                    let s = src.pixel(x, y);
                    sum += (0..3).map(|k| (s[k] - c[k]).abs() as f64).sum::<f64>() / 3.0;
                    count += 1;
                }
            }
            if count > 0 {
                pair_errors.push(sum / count as f64);
            }
        }
    }
    if pair_errors.is_empty() {
        return Err(Error::numerical("no co-visible pixels between any view pair"));
    }
    Ok(pair_errors.iter().sum::<f64>() / pair_errors.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, [0.6; 3]);
        let p = psnr(&a, &b, 1.0).unwrap();
        let mse = (0.6f32 as f64 - 0.5).powi(2);
        assert!((p - 10.0 * (1.0 / mse).log10()).abs() < 1e-12);
        assert!((psnr_from_mse(1.0, 255.0) - 48.130_803_608_679_1).abs() < 1e-9);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert!(psnr(&a, &Image::filled(4, 3, [0.5; 3]), 1.0).is_err());
    }

    #[test]
    fn bilinear_hits_pixel_centres() {
        let mut img = Image::new(3, 2);
        img.set_pixel(1, 1, [0.2, 0.4, 0.6]);
        assert_eq!(bilinear(&img, 1.5, 1.5).unwrap(), [0.2, 0.4, 0.6]);
        assert!(bilinear(&img, 0.2, 1.0).is_none());
        let mid = bilinear(&img, 2.0, 1.5).unwrap();
        assert!((mid[0] - 0.1).abs() < 1e-6);
    }
}
