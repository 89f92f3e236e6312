//! Dense voxel radiance field with a hand-differentiated volume renderer.

mod fit;
mod render;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::tensor::hash_blocks;

pub(crate) use fit::fit_to_images;
pub use fit::{
    fit_lr_nerf, fit_step, sample_rays, sample_rays_multi, FieldOptimizer, FitConfig, FitStats,
};
pub use render::{
    composite, composite_backward, composite_weights, render_depth, render_image, render_rays, RayBatch,
    RenderOptions,
};

const FIELD_KIND: [u8; 4] = *b"FELD";

/// Axis-aligned world bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

impl Aabb {
    pub fn cube(half: f32) -> Self {
        Aabb {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn size(&self) -> [f32; 3] {
        [0, 1, 2].map(|i| self.max[i] - self.min[i])
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|i| self.max[i] > self.min[i] && self.min[i].is_finite() && self.max[i].is_finite()) {
            Ok(())
        } else {
            Err(Error::config(format!("degenerate bounding box {self:?}")))
        }
    }

    /// Parametric interval of the ray inside the box, intersected with `[near, far]`.
    pub fn clip_ray(&self, o: [f32; 3], d: [f32; 3], near: f32, far: f32) -> Option<(f32, f32)> {
        let mut t0 = near;
        let mut t1 = far;
        for i in 0..3 {
            if d[i].abs() < 1e-12 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[i];
            let (mut a, mut b) = ((self.min[i] - o[i]) * inv, (self.max[i] - o[i]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn inverse_softplus(y: f32) -> f32 {
    let y = y.max(1e-6);
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn logit(p: f32) -> f32 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln()
}

/// Trainable voxel field. Raw values live on the `res³` lattice of vertices
/// spanning `bbox`; density is `softplus(raw)` and colour is `sigmoid(raw)`,
/// both applied after trilinear interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    res: usize,
    bbox: Aabb,
    /// Four interleaved raw values per vertex: density, r, g, b.
    params: Vec<f32>,
}

/// Trilinear footprint of a point: 8 vertex indices and weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Footprint {
    pub vertex: [u32; 8],
    pub weight: [f32; 8],
}

impl RadianceField {
    pub fn constant(res: usize, bbox: Aabb, raw_density: f32, raw_color: [f32; 3]) -> Result<Self> {
        if res < 2 {
            return Err(Error::config("field resolution must be at least 2"));
        }
        bbox.validate()?;
        let mut params = Vec::with_capacity(res * res * res * 4);
        for _ in 0..res * res * res {
            params.push(raw_density);
            params.extend_from_slice(&raw_color);
        }
        Ok(RadianceField { res, bbox, params })
    }

    /// Builds a field whose vertices hold the given activated density and colour.
    pub fn from_activated(res: usize, bbox: Aabb, density: &[f32], color: &[f32]) -> Result<Self> {
        let n = res * res * res;
        if density.len() != n || color.len() != 3 * n {
            return Err(Error::shape(format!(
                "grid of {res}³ needs {n} densities and {} colours",
                3 * n
            )));
        }
        let mut field = RadianceField::constant(res, bbox, 0.0, [0.0; 3])?;
        for v in 0..n {
            field.params[v * 4] = inverse_softplus(density[v]);
            for c in 0..3 {
                field.params[v * 4 + 1 + c] = logit(color[v * 3 + c]);
            }
        }
        Ok(field)
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn bbox(&self) -> Aabb {
        self.bbox
    }

    pub fn raw_params(&self) -> &[f32] {
        &self.params
    }


    pub fn num_vertices(&self) -> usize {
        self.res * self.res * self.res
    }

    pub fn vertex_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.res + j) * self.res + i
    }

    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> [f32; 3] {
        let s = self.bbox.size();
        let n = (self.res - 1) as f32;
        [
            self.bbox.min[0] + s[0] * i as f32 / n,
            self.bbox.min[1] + s[1] * j as f32 / n,
            self.bbox.min[2] + s[2] * k as f32 / n,
        ]
    }

    pub(crate) fn footprint(&self, p: [f32; 3]) -> Option<Footprint> {
        let s = self.bbox.size();
        let n = (self.res - 1) as f32;
        let mut base = [0usize; 3];
        let mut frac = [0f32; 3];
        for a in 0..3 {
            let g = (p[a] - self.bbox.min[a]) / s[a] * n;
            if !(g >= 0.0 && g <= n) {
                return None;
            }
            let i = (g.floor() as usize).min(self.res - 2);
            base[a] = i;
            frac[a] = g - i as f32;
        }
        let mut fp = Footprint {
            vertex: [0; 8],
            weight: [0.0; 8],
        };
        for corner in 0..8 {
            let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            fp.vertex[corner] = self.vertex_index(base[0] + dx, base[1] + dy, base[2] + dz) as u32;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            fp.weight[corner] = wx * wy * wz;
        }
        Some(fp)
    }

    /// Interpolated raw values `[density, r, g, b]` at the footprint.
    pub(crate) fn raw_at(&self, fp: &Footprint) -> [f32; 4] {
        let mut acc = [0f32; 4];
        for c in 0..8 {
            let base = fp.vertex[c] as usize * 4;
            let w = fp.weight[c];
            let p = &self.params[base..base + 4];
            for k in 0..4 {
                acc[k] += w * p[k];
            }
        }
        acc
    }

    /// Density and colour at a world point; zero density outside the box.
    pub fn query(&self, p: [f32; 3]) -> (f32, [f32; 3]) {
        match self.footprint(p) {
            None => (0.0, [0.0; 3]),
            Some(fp) => {
                let raw = self.raw_at(&fp);
                (softplus(raw[0]), [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])])
            }
        }
    }

    /// Resamples the raw grids onto a `new_res³` lattice over the same box.
    pub fn upsample(&self, new_res: usize) -> Result<Self> {
        let mut out = RadianceField::constant(new_res, self.bbox, 0.0, [0.0; 3])?;
        for k in 0..new_res {
            for j in 0..new_res {
                for i in 0..new_res {
                    let p = out.vertex_position(i, j, k);
                    let fp = self
                        .footprint(p)
                        .expect("vertex positions lie inside the box");
                    let raw = self.raw_at(&fp);
                    let v = out.vertex_index(i, j, k);
                    out.params[v * 4..v * 4 + 4].copy_from_slice(&raw);
                }
            }
        }
        Ok(out)
    }

    pub fn hash(&self) -> String {
        hash_blocks([("field", &self.params[..])])
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::new(
            FIELD_KIND,
            json!({
                "resolution": self.res,
                "bbox": self.bbox,
                "extra": meta,
            }),
        );
        c.push("params", vec![self.num_vertices(), 4], self.params.clone());
        c
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_container(meta).write(path)
    }

    /// Loads a field and returns it together with the caller metadata stored alongside.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let c = Container::read(path, FIELD_KIND)?;
        let res = c.meta["resolution"]
            .as_u64()
            .ok_or_else(|| Error::ingestion(path, "missing resolution"))? as usize;
        let bbox: Aabb = serde_json::from_value(c.meta["bbox"].clone())
            .map_err(|e| Error::ingestion(path, format!("bbox: {e}")))?;
        let params = c.require("params", res * res * res * 4, path)?.to_vec();
        Ok((
            RadianceField { res, bbox, params },
            c.meta["extra"].clone(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_field(res: usize) -> RadianceField {
        let mut f = RadianceField::constant(res, Aabb::cube(1.0), 0.0, [0.0; 3]).unwrap();
        for k in 0..res {
            for j in 0..res {
                for i in 0..res {
                    let p = f.vertex_position(i, j, k);
                    let v = f.vertex_index(i, j, k);
                    f.params[v * 4] = p[0] + 2.0 * p[1] - p[2];
                    f.params[v * 4 + 1] = p[2];
                }
            }
        }
        f
    }

    #[test]
    fn trilinear_reproduces_linear_functions() {
        let f = ramp_field(5);
        for p in [[0.1, -0.3, 0.77], [-1.0, 1.0, 0.0], [0.999, 0.25, -0.5]] {
            let fp = f.footprint(p).unwrap();
            let raw = f.raw_at(&fp);
            assert!((raw[0] - (p[0] + 2.0 * p[1] - p[2])).abs() < 1e-5);
            assert!((fp.weight.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert!(f.footprint([1.2, 0.0, 0.0]).is_none());
    }

    #[test]
    fn interpolation_is_continuous_across_cells() {
        let mut f = RadianceField::constant(4, Aabb::cube(1.0), 0.0, [0.0; 3]).unwrap();
        for (i, v) in f.params.iter_mut().enumerate() {
            *v = ((i * 7919) % 13) as f32 * 0.1;
        }
        // Cell boundary at x = -1/3 in a 4-vertex grid on [-1, 1].
        let b = -1.0 / 3.0;
        let (lo, _) = f.query([b - 1e-5, 0.2, 0.4]);
        let (hi, _) = f.query([b + 1e-5, 0.2, 0.4]);
        assert!((lo - hi).abs() < 1e-3);
    }

    #[test]
    fn activated_round_trip_and_ranges() {
        let res = 3;
        let n = res * res * res;
        let density: Vec<f32> = (0..n).map(|i| i as f32 * 0.5).collect();
        let color: Vec<f32> = (0..3 * n).map(|i| (i % 10) as f32 / 9.0).collect();
        let f = RadianceField::from_activated(res, Aabb::cube(1.0), &density, &color).unwrap();
        let (s, c) = f.query(f.vertex_position(2, 1, 0));
        assert!((s - density[f.vertex_index(2, 1, 0)]).abs() < 1e-3);
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn upsample_preserves_trilinear_values() {
        let f = ramp_field(5);
        let g = f.upsample(9).unwrap();
        for p in [[0.3, -0.2, 0.1], [0.9, 0.9, -0.9]] {
            assert!((f.query(p).0 - g.query(p).0).abs() < 1e-4);
        }
    }

    #[test]
    fn clip_ray_against_box() {
        let b = Aabb::cube(1.0);
        let (t0, t1) = b.clip_ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0], 0.0, 10.0).unwrap();
        assert!((t0 - 2.0).abs() < 1e-6 && (t1 - 4.0).abs() < 1e-6);
        assert!(b.clip_ray([0.0, 2.0, -3.0], [0.0, 0.0, 1.0], 0.0, 10.0).is_none());
        assert!(b.clip_ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0], 0.0, 1.0).is_none());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let f = ramp_field(4);
        f.save(&path, json!({"step": 12})).unwrap();
        let (g, meta) = RadianceField::load(&path).unwrap();
        assert_eq!(f, g);
        assert_eq!(meta["step"], 12);
        assert_eq!(f.hash(), g.hash());
    }
}
