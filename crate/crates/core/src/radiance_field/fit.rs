use std::path::PathBuf;

use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::render::{composite_backward, RayTrace};
use super::{sigmoid, Aabb, RadianceField};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::radiance_field::{RayBatch, RenderOptions};
use crate::scene_data::CameraPose;

/// Momentum-free adaptive step (RMSProp with bias correction). Only vertices
/// touched by a batch are visited; the second-moment decay they missed while
/// untouched is applied lazily, which matches the dense update exactly
/// because untouched vertices have zero gradient.
#[derive(Clone, Debug)]
pub struct FieldOptimizer {
    pub rho: f32,
    pub eps: f32,
    /// Weights of the squared-difference smoothness penalty between
    /// neighbouring raw density and colour values, applied around the
    /// vertices each batch touches.
    pub tv_density: f32,
    pub tv_color: f32,
    step: u32,
    sq: Vec<f32>,
    last: Vec<u32>,
    grad: Vec<f32>,
    mark: Vec<u32>,
    touched: Vec<u32>,
}

impl FieldOptimizer {
    pub fn new(field: &RadianceField) -> Self {
        let n = field.num_vertices();
        FieldOptimizer {
            rho: 0.99,
            eps: 1e-8,
            tv_density: 0.0,
            tv_color: 0.0,
            step: 0,
            sq: vec![0.0; n * 4],
            last: vec![0; n],
            grad: vec![0.0; n * 4],
            mark: vec![u32::MAX; n],
            touched: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    fn accumulate(&mut self, vertex: u32, g: [f32; 4]) {
        let v = vertex as usize;
        if self.mark[v] != self.step {
            self.mark[v] = self.step;
            self.touched.push(vertex);
        }
        for k in 0..4 {
            self.grad[v * 4 + k] += g[k];
        }
    }

    fn add_smoothness(&mut self, params: &[f32], res: usize) {
        if self.tv_density == 0.0 && self.tv_color == 0.0 {
            return;
        }
        let w = [self.tv_density, self.tv_color, self.tv_color, self.tv_color];
        let seeds = self.touched.clone();
        let plane = res * res;
        for vtx in seeds {
            let v = vtx as usize;
            let (i, j, k) = (v % res, (v / res) % res, v / plane);
            for (ok, stride) in [(i + 1 < res, 1), (j + 1 < res, res), (k + 1 < res, plane)] {
                if !ok {
                    continue;
                }
                let u = v + stride;
                let mut gv = [0.0f32; 4];
                for c in 0..4 {
                    gv[c] = w[c] * (params[v * 4 + c] - params[u * 4 + c]);
                }
                self.accumulate(vtx, gv);
                self.accumulate(u as u32, gv.map(|g| -g));
            }
        }
    }

    fn apply(&mut self, params: &mut [f32], lr: f32) {
        let step = self.step + 1;
        let correction = 1.0 - self.rho.powi(step as i32);
        for &vtx in &self.touched {
            let v = vtx as usize;
            let decay = self.rho.powi((step - self.last[v]) as i32);
            for k in 0..4 {
                let i = v * 4 + k;
                let g = self.grad[i];
                self.sq[i] = self.sq[i] * decay + (1.0 - self.rho) * g * g;
                let denom = (self.sq[i] / correction).sqrt() + self.eps;
                params[i] -= lr * g / denom;
            }
            self.last[v] = step;
        }
        self.clear_touched();
        self.step = step;
    }

    fn clear_touched(&mut self) {
        for &vtx in &self.touched {
            let v = vtx as usize;
            self.grad[v * 4..v * 4 + 4].fill(0.0);
            self.mark[v] = u32::MAX;
        }
        self.touched.clear();
    }
}

/// One descent step on the mean absolute colour error over the batch.
/// Returns the loss before the step.
pub fn fit_step<R: Rng>(
    field: &mut RadianceField,
    opt: &mut FieldOptimizer,
    rays: &RayBatch,
    lr: f32,
    opts: &RenderOptions,
    mut jitter: Option<&mut R>,
) -> Result<f32> {
    rays.validate()?;
    let targets = rays
        .targets
        .as_ref()
        .ok_or_else(|| Error::config("fit_step needs rays with target colours"))?;
    if opt.sq.len() != field.params.len() {
        return Err(Error::shape("optimizer state does not match field size"));
    }
    let n = rays.len().max(1) as f32;
    let scale = 1.0 / (3.0 * n);
    let mut loss = 0.0f64;
    let mut trace = RayTrace::default();
    for (r, (&o, &d)) in rays.origins.iter().zip(&rays.directions).enumerate() {
        let c = trace.trace(field, o, d, rays.near, rays.far, opts, jitter.as_deref_mut());
        let target = targets[r];
        let mut upstream = [0.0f32; 3];
        for k in 0..3 {
            let e = c[k] - target[k];
            loss += e.abs() as f64;
            upstream[k] = if e > 0.0 {
                scale
            } else if e < 0.0 {
                -scale
            } else {
                0.0
            };
        }
        if upstream == [0.0; 3] || trace.ts.is_empty() {
            continue;
        }
        let m = trace.sigma.len();
        trace.d_sigma.resize(m, 0.0);
        trace.d_color.resize(m, [0.0; 3]);
        composite_backward(
            &trace.sigma,
            &trace.deltas,
            &trace.color,
            opts.background,
            upstream,
            &mut trace.d_sigma,
            &mut trace.d_color,
        );
        for i in 0..m {
            let Some(fp) = trace.footprints[i] else { continue };
            let raw = trace.raw[i];
            let mut g = [trace.d_sigma[i] * sigmoid(raw[0]), 0.0, 0.0, 0.0];
            for k in 0..3 {
                let s = trace.color[i][k];
                g[k + 1] = trace.d_color[i][k] * s * (1.0 - s);
            }
            for corner in 0..8 {
                let w = fp.weight[corner];
                opt.accumulate(fp.vertex[corner], [w * g[0], w * g[1], w * g[2], w * g[3]]);
            }
        }
    }
    let loss = (loss / (3.0 * n as f64)) as f32;
    if !loss.is_finite() {
        opt.clear_touched();
        return Err(Error::numerical(format!("non-finite photometric loss {loss}")));
    }
    if lr == 0.0 {
        opt.clear_touched();
        return Ok(loss);
    }
    opt.add_smoothness(&field.params, field.res);
    opt.apply(&mut field.params, lr);
    Ok(loss)
}

/// Uniform pixel subset of one image, without replacement.
pub fn sample_rays<R: Rng>(
    image: &Image,
    pose: &CameraPose,
    batch: usize,
    near: f32,
    far: f32,
    rng: &mut R,
) -> Result<RayBatch> {
    sample_rays_multi(std::slice::from_ref(image), std::slice::from_ref(pose), batch, near, far, false, rng)
}

/// Uniform subset of all (view, pixel) pairs, without replacement. Each pose's
/// intrinsics must match its image's resolution. With `subpixel` the ray passes
/// through a uniform random point of the pixel instead of its centre, so the
/// target colour is fitted as the average over the pixel's area.
pub fn sample_rays_multi<R: Rng>(
    images: &[Image],
    poses: &[CameraPose],
    batch: usize,
    near: f32,
    far: f32,
    subpixel: bool,
    rng: &mut R,
) -> Result<RayBatch> {
    if images.len() != poses.len() || images.is_empty() {
        return Err(Error::shape("sample_rays needs one pose per image"));
    }
    let sizes: Vec<usize> = images.iter().map(|im| im.width * im.height).collect();
    let total: usize = sizes.iter().sum();
    if batch > total {
        return Err(Error::config(format!(
            "ray batch {batch} exceeds the {total} available pixels"
        )));
    }
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for s in &sizes {
        offsets.push(acc);
        acc += s;
    }
    let mut rays = RayBatch {
        near,
        far,
        targets: Some(Vec::with_capacity(batch)),
        views: Some(Vec::with_capacity(batch)),
        ..Default::default()
    };
    for flat in index::sample(rng, total, batch).into_iter() {
        let view = offsets.partition_point(|&o| o <= flat) - 1;
        let local = flat - offsets[view];
        let img = &images[view];
        let (x, y) = (local % img.width, local / img.width);
        let (o, d) = if subpixel {
            let (du, dv): (f64, f64) = (rng.random(), rng.random());
            poses[view].ray(x as f64 + du, y as f64 + dv)
        } else {
            poses[view].pixel_ray(x, y)
        };
        rays.origins.push(o);
        rays.directions.push(d);
        rays.targets.as_mut().unwrap().push(img.pixel(x, y));
        rays.views.as_mut().unwrap().push(view);
    }
    Ok(rays)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub grid_res: usize,
    pub lr: f32,
    /// Learning rate multiplier reached at the last step (exponential decay).
    pub lr_decay: f32,
    pub batch_rays: usize,
    pub n_samples: usize,
    pub background: [f32; 3],
    pub init_raw_density: f32,
    pub seed: u64,
    pub tv_density: f32,
    pub tv_color: f32,
    /// Number of halvings of `grid_res` to fit before the final resolution.
    pub coarse_levels: usize,
    /// Cast training rays through random points inside each pixel.
    pub subpixel: bool,
    /// Write `field_step#####.bin` every this many steps (0 disables).
    pub checkpoint_every: usize,
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 10_000,
            grid_res: 64,
            lr: 0.05,
            lr_decay: 0.1,
            batch_rays: 1024,
            n_samples: 64,
            background: [1.0; 3],
            init_raw_density: -3.0,
            subpixel: true,
            tv_density: 0.0,
            tv_color: 0.0,
            coarse_levels: 2,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl FitConfig {
    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            n_samples: self.n_samples,
            background: self.background,
            jitter_seed: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitStats {
    pub losses: Vec<f32>,
}

/// Consecutive-step divergence guard shared by NeRF fitting loops.
pub(crate) struct DivergenceGuard {
    initial: Option<f32>,
    streak: usize,
}

impl DivergenceGuard {
    pub fn new() -> Self {
        DivergenceGuard {
            initial: None,
            streak: 0,
        }
    }

    pub fn observe(&mut self, loss: f32, step: usize) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if loss > 10.0 * initial {
            self.streak += 1;
            if self.streak >= 100 {
                return Err(Error::numerical(format!(
                    "diverged: loss {loss} above 10x initial {initial} for 100 steps (step {step})"
                )));
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

/// Runs a fitting loop against fixed images from the given poses, starting
/// from `field`. Shared by the low-resolution fit and I3DS synchronisation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_to_images(
    field: &mut RadianceField,
    opt: &mut FieldOptimizer,
    images: &[Image],
    poses: &[CameraPose],
    near: f32,
    far: f32,
    steps: usize,
    batch: usize,
    lr: (f32, f32),
    subpixel: bool,
    opts: &RenderOptions,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(usize, &RadianceField) -> Result<()>,
) -> Result<Vec<f32>> {
    let total: usize = images.iter().map(|i| i.width * i.height).sum();
    let batch = batch.min(total);
    let mut guard = DivergenceGuard::new();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let rays = sample_rays_multi(images, poses, batch, near, far, subpixel, rng)?;
        let step_lr = lr.0 * (lr.1 / lr.0).powf(step as f32 / steps as f32);
        let loss = fit_step(field, opt, &rays, step_lr, opts, Some(&mut *rng)).map_err(|e| match e {
            Error::Numerical(msg) => {
                let view = rays.views.as_ref().and_then(|v| v.first()).copied();
                Error::numerical(format!("{msg} at iteration {step} (first ray from pose {view:?})"))
            }
            other => other,
        })?;
        guard.observe(loss, step)?;
        losses.push(loss);
        on_step(step + 1, field)?;
    }
    Ok(losses)
}

/// Fits a field of `config.grid_res³` vertices to the low-resolution images of
/// the listed views.
pub fn fit_lr_nerf(
    dataset: &crate::scene_data::MultiViewDataset,
    views: &[usize],
    config: &FitConfig,
) -> Result<(RadianceField, FitStats)> {
    if views.len() < 2 {
        return Err(Error::config("fit_lr_nerf needs at least two training views"));
    }
    if views.iter().any(|&v| v >= dataset.lr_images.len()) {
        return Err(Error::config("training view index out of range"));
    }
    let bbox: Aabb = dataset.bbox;
    let images: Vec<Image> = views.iter().map(|&v| dataset.lr_images[v].clone()).collect();
    let poses: Vec<CameraPose> = views.iter().map(|&v| dataset.poses[v].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let opts = config.render_options();
    let (near, far) = dataset.near_far;
    let every = config.checkpoint_every;
    let dir = config.checkpoint_dir.clone();

    // Coarse-to-fine: the step budget is split evenly over resolutions
    // grid_res/2^L, …, grid_res/2, grid_res, each stage starting from the
    // trilinear upsampling of the previous one.
    let levels = if config.steps == 0 { 0 } else { config.coarse_levels };
    let stages: Vec<(usize, usize)> = (0..=levels)
        .map(|l| {
            let res = (config.grid_res >> (levels - l)).max(2);
            let lo = config.steps * l / (levels + 1);
            let hi = config.steps * (l + 1) / (levels + 1);
            (res, hi - lo)
        })
        .collect();
    let lr_at = |step: usize| config.lr * config.lr_decay.powf(step as f32 / config.steps.max(1) as f32);
    let mut field = RadianceField::constant(stages[0].0, bbox, config.init_raw_density, [0.0; 3])?;
    let mut losses = Vec::with_capacity(config.steps);
    for (res, steps) in stages {
        if field.resolution() != res {
            field = field.upsample(res)?;
        }
        let mut opt = FieldOptimizer::new(&field);
        opt.tv_density = config.tv_density;
        opt.tv_color = config.tv_color;
        let offset = losses.len();
        let stage_losses = fit_to_images(
            &mut field,
            &mut opt,
            &images,
            &poses,
            near,
            far,
            steps,
            config.batch_rays,
            (lr_at(offset), lr_at(offset + steps)),
            config.subpixel,
            &opts,
            &mut rng,
            |step, f| {
                let step = offset + step;
                if let (true, Some(dir)) = (every > 0 && step % every == 0, dir.as_ref()) {
                    f.save(&dir.join(format!("field_step{step:05}.bin")), json!({ "step": step }))?;
                }
                Ok(())
            },
        )?;
        losses.extend(stage_losses);
    }
    Ok((field, FitStats { losses }))
}
