use std::f32::consts::TAU;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CameraPose, GroundTruthField, MultiViewDataset};
use crate::error::{Error, Result};
use crate::imaging::downsample_x4;
use crate::radiance_field::{render_image, Aabb, RenderOptions};

/// Knobs of the procedural scene generator that are not part of its signature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub camera_radius: f64,
    pub fov_degrees: f64,
    /// Texture frequency range, in cycles per world unit.
    pub min_freq: f32,
    pub max_freq: f32,
    pub peak_density: (f32, f32),
    pub n_samples: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            camera_radius: 3.2,
            fov_degrees: 40.0,
            min_freq: 3.0,
            max_freq: 7.0,
            peak_density: (100.0, 300.0),
            n_samples: 256,
        }
    }
}

struct Blob {
    center: [f32; 3],
    radius: f32,
    peak: f32,
    base: [f32; 3],
    waves: Vec<Wave>,
}

struct Wave {
    dir: [f32; 3],
    freq: f32,
    phase: f32,
    amp: [f32; 3],
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let z: f32 = rng.random_range(-1.0..1.0);
    let phi: f32 = rng.random_range(0.0..TAU);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

impl Blob {
    fn sample(rng: &mut ChaCha8Rng, p: &SceneParams) -> Blob {
        let center = [
            rng.random_range(-0.55..0.55),
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.55..0.55),
        ];
        let base = [
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
        ];
        let waves = (0..2)
            .map(|_| Wave {
                dir: unit_vector(rng),
                freq: rng.random_range(p.min_freq..p.max_freq),
                phase: rng.random_range(0.0..TAU),
                amp: [
                    rng.random_range(0.12..0.3),
                    rng.random_range(0.12..0.3),
                    rng.random_range(0.12..0.3),
                ],
            })
            .collect();
        Blob {
            center,
            radius: rng.random_range(0.12..0.26),
            peak: rng.random_range(p.peak_density.0..p.peak_density.1),
            base,
            waves,
        }
    }

    fn density(&self, x: [f32; 3]) -> f32 {
        let d2: f32 = (0..3).map(|i| (x[i] - self.center[i]).powi(2)).sum();
        self.peak * (-d2 / (2.0 * self.radius * self.radius)).exp()
    }

    fn color(&self, x: [f32; 3]) -> [f32; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (TAU * w.freq * (w.dir[0] * x[0] + w.dir[1] * x[1] + w.dir[2] * x[2]) + w.phase).sin();
            for k in 0..3 {
                c[k] += w.amp[k] * s;
            }
        }
        c.map(|v| v.clamp(0.02, 0.98))
    }
}

fn camera_poses(n_views: usize, lr_size: usize, p: &SceneParams) -> Result<Vec<CameraPose>> {
    let half_fov = (p.fov_degrees / 2.0).to_radians();
    let focal = lr_size as f64 / 2.0 / half_fov.tan();
    (0..n_views)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n_views as f64;
            let elevation = 0.35 + 0.2 * (2.0 * a).sin();
            let r = p.camera_radius;
            let eye = Vector3::new(
                r * elevation.cos() * a.sin(),
                r * elevation.sin(),
                r * elevation.cos() * a.cos(),
            );
            CameraPose::look_at(eye, Vector3::zeros(), Vector3::y(), focal, lr_size, lr_size)
        })
        .collect()
}

const BLOB_COUNTS: std::ops::RangeInclusive<usize> = 3..=6;

fn blob_prompt(n: usize) -> String {
    format!("a scene with {n} blobs")
}

/// Every prompt a synthetic scene can carry.
pub fn synthetic_prompts() -> Vec<String> {
    BLOB_COUNTS.map(blob_prompt).collect()
}

/// Procedural scene of 3–6 Gaussian blobs with sinusoidal colour textures,
/// together with HR renders from a ring of cameras and their 4× box-downsampled
/// LR counterparts.
pub fn generate_synthetic_scene(
    seed: u64,
    grid_res: usize,
    n_views: usize,
    hr_size: usize,
) -> Result<(GroundTruthField, MultiViewDataset)> {
    generate_with(seed, grid_res, n_views, hr_size, &SceneParams::default())
}

pub(crate) fn generate_with(
    seed: u64,
    grid_res: usize,
    n_views: usize,
    hr_size: usize,
    params: &SceneParams,
) -> Result<(GroundTruthField, MultiViewDataset)> {
    if grid_res < 16 {
        return Err(Error::config(format!("grid_res {grid_res} must be at least 16")));
    }
    if hr_size == 0 || !hr_size.is_multiple_of(4) {
        return Err(Error::config(format!("hr_size {hr_size} must be a positive multiple of 4")));
    }
    if n_views < 2 {
        return Err(Error::config("need at least two views"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_blobs = rng.random_range(BLOB_COUNTS);
    let blobs: Vec<Blob> = (0..n_blobs).map(|_| Blob::sample(&mut rng, params)).collect();

    let bbox = Aabb::cube(1.0);
    let n = grid_res * grid_res * grid_res;
    let mut density = vec![0.0f32; n];
    let mut color = vec![0.0f32; 3 * n];
    let step = 2.0 / (grid_res - 1) as f32;
    for k in 0..grid_res {
        for j in 0..grid_res {
            for i in 0..grid_res {
                let x = [-1.0 + i as f32 * step, -1.0 + j as f32 * step, -1.0 + k as f32 * step];
                let v = (k * grid_res + j) * grid_res + i;
                let mut total = 0.0;
                let mut c = [0.0f32; 3];
                let mut weight = 0.0;
                for b in &blobs {
                    let d = b.density(x);
                    total += d;
                    // Colour blends by density share with a floor so empty space stays smooth.
                    let w = d + 1e-6;
                    let bc = b.color(x);
                    for ch in 0..3 {
                        c[ch] += w * bc[ch];
                    }
                    weight += w;
                }
                density[v] = total;
                for ch in 0..3 {
                    color[v * 3 + ch] = (c[ch] / weight).clamp(0.0, 1.0);
                }
            }
        }
    }
    let gt = GroundTruthField {
        res: grid_res,
        bbox,
        density,
        color,
    };
    gt.validate()?;

    let lr_size = hr_size / 4;
    let poses = camera_poses(n_views, lr_size, params)?;
    let field = gt.to_radiance_field()?;
    let r = params.camera_radius as f32;
    let near_far = ((r - 2.0).max(0.1), r + 2.0);
    let opts = RenderOptions {
        n_samples: params.n_samples,
        ..Default::default()
    };
    let mut hr_images = Vec::with_capacity(n_views);
    let mut lr_images = Vec::with_capacity(n_views);
    for pose in &poses {
        let hr = render_image(&field, &pose.scaled(4.0), hr_size, hr_size, near_far.0, near_far.1, &opts)?
            .clamp01();
        lr_images.push(downsample_x4(&hr)?);
        hr_images.push(hr);
    }
    let ds = MultiViewDataset {
        hr_images: Some(hr_images),
        lr_images,
        poses,
        scene_id: format!("synthetic-{seed}"),
        prompt: blob_prompt(n_blobs),
        bbox,
        near_far,
    };
    ds.validate()?;
    Ok((gt, ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_synthetic_scene(1, 8, 4, 16).is_err());
        assert!(generate_synthetic_scene(1, 16, 4, 18).is_err());
        assert!(generate_synthetic_scene(1, 16, 1, 16).is_err());
    }

    #[test]
    fn small_scene_has_consistent_shapes_and_content() {
        let (gt, ds) = generate_synthetic_scene(3, 16, 4, 16).unwrap();
        assert_eq!(gt.density.len(), 16 * 16 * 16);
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.lr_images[0].dims(), (4, 4));
        assert_eq!(ds.hr_images.as_ref().unwrap()[0].dims(), (16, 16));
        let peak = gt.density.iter().cloned().fold(0.0, f32::max);
        assert!(peak > 10.0);
        // Something other than the white background must be visible.
        let hr = &ds.hr_images.as_ref().unwrap()[0];
        assert!(hr.data.iter().any(|v| *v < 0.9));
    }
}
