use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sigmoid, softplus, Footprint, RadianceField};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::scene_data::CameraPose;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    pub n_samples: usize,
    pub background: [f32; 3],
    /// `None` places samples at bin midpoints; `Some(seed)` jitters them
    /// within their strata from a fixed stream.
    pub jitter_seed: Option<u64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            n_samples: 64,
            background: [1.0; 3],
            jitter_seed: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<[f32; 3]>,
    pub directions: Vec<[f32; 3]>,
    pub near: f32,
    pub far: f32,
    /// Target colours, when the batch was sampled from an image.
    pub targets: Option<Vec<[f32; 3]>>,
    /// Source view of each ray, when known.
    pub views: Option<Vec<usize>>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.origins.len() != self.directions.len() {
            return Err(Error::shape("ray origins and directions differ in length"));
        }
        if let Some(t) = &self.targets {
            if t.len() != self.origins.len() {
                return Err(Error::shape("ray targets differ in length"));
            }
        }
        if !(self.near < self.far) {
            return Err(Error::config(format!(
                "near {} must be below far {}",
                self.near, self.far
            )));
        }
        for d in &self.directions {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::config(format!("ray direction not unit length ({n})")));
            }
        }
        Ok(())
    }
}

/// Emission-absorption quadrature
/// `C = Σ Tᵢ (1 − exp(−σᵢδᵢ)) cᵢ + T_N · background`, `Tᵢ = exp(−Σ_{j<i} σⱼδⱼ)`.
pub fn composite<T: Real>(sigma: &[T], delta: &[T], color: &[[T; 3]], background: [T; 3]) -> [T; 3] {
    let mut out = [T::zero(); 3];
    let mut trans = T::one();
    for i in 0..sigma.len() {
        let decay = (-(sigma[i] * delta[i])).exp();
        let w = trans * (T::one() - decay);
        for c in 0..3 {
            out[c] += w * color[i][c];
        }
        trans *= decay;
    }
    for c in 0..3 {
        out[c] += trans * background[c];
    }
    out
}

/// Per-sample contribution weights `Tᵢ (1 − exp(−σᵢδᵢ))`.
pub fn composite_weights<T: Real>(sigma: &[T], delta: &[T]) -> Vec<T> {
    let mut trans = T::one();
    sigma
        .iter()
        .zip(delta)
        .map(|(&s, &d)| {
            let decay = (-(s * d)).exp();
            let w = trans * (T::one() - decay);
            trans *= decay;
            w
        })
        .collect()
}

/// Vector-Jacobian product of [`composite`]: given `g = ∂L/∂C`, writes
/// `∂L/∂σᵢ` and `∂L/∂cᵢ`.
pub fn composite_backward<T: Real>(
    sigma: &[T],
    delta: &[T],
    color: &[[T; 3]],
    background: [T; 3],
    upstream: [T; 3],
    d_sigma: &mut [T],
    d_color: &mut [[T; 3]],
) {
    let n = sigma.len();
    let dot = |a: [T; 3]| a[0] * upstream[0] + a[1] * upstream[1] + a[2] * upstream[2];
    // Forward pass storing transmittance before each sample.
    let mut trans_before = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n);
    let mut trans = T::one();
    for i in 0..n {
        trans_before.push(trans);
        let decay = (-(sigma[i] * delta[i])).exp();
        weights.push(trans * (T::one() - decay));
        trans *= decay;
    }
    trans_before.push(trans);
    // Suffix S_k = Σ_{i>k} wᵢ (g·cᵢ) + T_N (g·bg), built back to front.
    let mut suffix = trans * dot(background);
    for k in (0..n).rev() {
        let gc = dot(color[k]);
        d_sigma[k] = delta[k] * (trans_before[k + 1] * gc - suffix);
        for c in 0..3 {
            d_color[k][c] = weights[k] * upstream[c];
        }
        suffix += weights[k] * gc;
    }
}

/// Sample distances and spacings along a ray segment `[t0, t1]`.
pub(crate) fn stratify<R: Rng>(t0: f32, t1: f32, n: usize, jitter: Option<&mut R>, ts: &mut Vec<f32>, deltas: &mut Vec<f32>) {
    ts.clear();
    deltas.clear();
    let step = (t1 - t0) / n as f32;
    match jitter {
        Some(rng) => {
            for i in 0..n {
                let u: f32 = rng.random();
                ts.push(t0 + (i as f32 + u) * step);
            }
        }
        None => {
            for i in 0..n {
                ts.push(t0 + (i as f32 + 0.5) * step);
            }
        }
    }
    for i in 0..n {
        let next = if i + 1 < n { ts[i + 1] } else { t1 };
        deltas.push((next - ts[i]).max(0.0));
    }
}

/// Per-ray scratch space reused across rays.
#[derive(Default)]
pub(crate) struct RayTrace {
    pub ts: Vec<f32>,
    pub deltas: Vec<f32>,
    pub sigma: Vec<f32>,
    pub color: Vec<[f32; 3]>,
    pub raw: Vec<[f32; 4]>,
    pub footprints: Vec<Option<Footprint>>,
    pub d_sigma: Vec<f32>,
    pub d_color: Vec<[f32; 3]>,
}

impl RayTrace {
    /// Traces one ray through `field`, filling per-sample state. Returns the
    /// composited colour.
    pub fn trace<R: Rng>(
        &mut self,
        field: &RadianceField,
        origin: [f32; 3],
        dir: [f32; 3],
        near: f32,
        far: f32,
        opts: &RenderOptions,
        jitter: Option<&mut R>,
    ) -> [f32; 3] {
        self.sigma.clear();
        self.color.clear();
        self.raw.clear();
        self.footprints.clear();
        let Some((t0, t1)) = field.bbox.clip_ray(origin, dir, near, far) else {
            self.ts.clear();
            self.deltas.clear();
            return opts.background;
        };
        stratify(t0, t1, opts.n_samples, jitter, &mut self.ts, &mut self.deltas);
        for &t in &self.ts {
            let p = [
                origin[0] + t * dir[0],
                origin[1] + t * dir[1],
                origin[2] + t * dir[2],
            ];
            let fp = field.footprint(p);
            match fp {
                Some(ref f) => {
                    let raw = field.raw_at(f);
                    self.raw.push(raw);
                    self.sigma.push(softplus(raw[0]));
                    self.color
                        .push([sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])]);
                }
                None => {
                    self.raw.push([f32::NEG_INFINITY, 0.0, 0.0, 0.0]);
                    self.sigma.push(0.0);
                    self.color.push([0.0; 3]);
                }
            }
            self.footprints.push(fp);
        }
        composite(&self.sigma, &self.deltas, &self.color, opts.background)
    }
}

/// Renders every ray in the batch.
pub fn render_rays(field: &RadianceField, rays: &RayBatch, opts: &RenderOptions) -> Result<Vec<[f32; 3]>> {
    if opts.n_samples < 2 {
        return Err(Error::config("n_samples must be at least 2"));
    }
    rays.validate()?;
    let mut trace = RayTrace::default();
    let mut rng = opts.jitter_seed.map(ChaCha8Rng::seed_from_u64);
    Ok(rays
        .origins
        .iter()
        .zip(&rays.directions)
        .map(|(&o, &d)| trace.trace(field, o, d, rays.near, rays.far, opts, rng.as_mut()))
        .collect())
}

/// Renders a `width × height` image; `pose` intrinsics must match that size.
pub fn render_image(
    field: &RadianceField,
    pose: &CameraPose,
    width: usize,
    height: usize,
    near: f32,
    far: f32,
    opts: &RenderOptions,
) -> Result<Image> {
    pose.validate()?;
    let mut rays = RayBatch {
        near,
        far,
        ..Default::default()
    };
    for y in 0..height {
        for x in 0..width {
            let (o, d) = pose.pixel_ray(x, y);
            rays.origins.push(o);
            rays.directions.push(d);
        }
    }
    let colors = render_rays(field, &rays, opts)?;
    Image::from_vec(width, height, colors.into_iter().flatten().collect())
}

/// Expected ray termination distance per pixel, row-major. Pixels whose
/// accumulated opacity stays below `min_opacity` hit the background and get `None`.
#[allow(clippy::too_many_arguments)]
pub fn render_depth(
    field: &RadianceField,
    pose: &CameraPose,
    width: usize,
    height: usize,
    near: f32,
    far: f32,
    opts: &RenderOptions,
    min_opacity: f32,
) -> Result<Vec<Option<f32>>> {
    pose.validate()?;
    if opts.n_samples < 2 {
        return Err(Error::config("n_samples must be at least 2"));
    }
    let mut trace = RayTrace::default();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (o, d) = pose.pixel_ray(x, y);
            trace.trace::<ChaCha8Rng>(field, o, d, near, far, opts, None);
            let w = composite_weights(&trace.sigma, &trace.deltas);
            let opacity: f32 = w.iter().sum();
            if opacity < min_opacity {
                out.push(None);
            } else {
                let t: f32 = w.iter().zip(&trace.ts).map(|(w, t)| w * t).sum();
                out.push(Some(t / opacity));
            }
        }
    }
    Ok(out)
}
