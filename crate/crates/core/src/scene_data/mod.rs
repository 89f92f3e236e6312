//! Multi-view datasets: synthetic ground-truth scenes and LLFF captures.

mod camera;
mod io;
mod llff;
mod synthetic;

use std::path::Path;

use serde_json::json;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::radiance_field::{Aabb, RadianceField};

pub use camera::{CameraPose, PoseRecord, ORTHONORMAL_TOL};
pub use io::{load_dataset, write_dataset, DatasetFiles};
pub use llff::load_llff;
pub use synthetic::{generate_synthetic_scene, synthetic_prompts, SceneParams};

const GT_KIND: [u8; 4] = *b"GTFD";

/// Posed low-resolution views, plus the 4× ground truth when it exists.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    pub hr_images: Option<Vec<Image>>,
    pub lr_images: Vec<Image>,
    /// Intrinsics are for the low-resolution images.
    pub poses: Vec<CameraPose>,
    pub scene_id: String,
    /// Text description used as the denoiser's prompt.
    pub prompt: String,
    pub bbox: Aabb,
    pub near_far: (f32, f32),
}

impl MultiViewDataset {
    pub fn validate(&self) -> Result<()> {
        if self.lr_images.len() != self.poses.len() {
            return Err(Error::shape(format!(
                "{} LR images but {} poses",
                self.lr_images.len(),
                self.poses.len()
            )));
        }
        for p in &self.poses {
            p.validate()?;
        }
        if let Some(hr) = &self.hr_images {
            if hr.len() != self.lr_images.len() {
                return Err(Error::shape("HR and LR view counts differ"));
            }
            for (h, l) in hr.iter().zip(&self.lr_images) {
                if h.width != 4 * l.width || h.height != 4 * l.height {
                    return Err(Error::shape(format!(
                        "HR {}×{} is not 4× LR {}×{}",
                        h.width, h.height, l.width, l.height
                    )));
                }
            }
        }
        let all = self.lr_images.iter().chain(self.hr_images.iter().flatten());
        if !all.into_iter().all(Image::in_unit_range) {
            return Err(Error::numerical("pixel values outside [0, 1]"));
        }
        if !(self.near_far.0 < self.near_far.1) {
            return Err(Error::config("near must be below far"));
        }
        self.bbox.validate()
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn lr_size(&self) -> (usize, usize) {
        self.lr_images.first().map(Image::dims).unwrap_or((0, 0))
    }

    /// Pose with intrinsics for the 4× image.
    pub fn hr_pose(&self, view: usize) -> CameraPose {
        self.poses[view].scaled(4.0)
    }

    /// Train/test split holding out every `every`-th view (indices `every-1`, `2·every-1`, …).
    pub fn split(&self, every: usize) -> (Vec<usize>, Vec<usize>) {
        split_views(self.len(), every)
    }
}

pub fn split_views(n: usize, every: usize) -> (Vec<usize>, Vec<usize>) {
    if every == 0 {
        return ((0..n).collect(), Vec::new());
    }
    (0..n).partition(|i| (i + 1) % every != 0)
}

/// Activated density and colour on a `res³` lattice; the synthetic oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthField {
    pub res: usize,
    pub bbox: Aabb,
    /// Indexed like [`RadianceField::vertex_index`].
    pub density: Vec<f32>,
    /// Three values per vertex.
    pub color: Vec<f32>,
}

impl GroundTruthField {
    pub fn validate(&self) -> Result<()> {
        let n = self.res * self.res * self.res;
        if self.density.len() != n || self.color.len() != 3 * n {
            return Err(Error::shape("ground-truth grid sizes disagree with resolution"));
        }
        if !self.density.iter().all(|d| *d >= 0.0) {
            return Err(Error::numerical("negative ground-truth density"));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::numerical("ground-truth colour outside [0, 1]"));
        }
        Ok(())
    }

    pub fn to_radiance_field(&self) -> Result<RadianceField> {
        RadianceField::from_activated(self.res, self.bbox, &self.density, &self.color)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(GT_KIND, json!({ "resolution": self.res, "bbox": self.bbox }));
        c.push("density", vec![self.res; 3], self.density.clone());
        c.push("color", vec![self.res, self.res, self.res, 3], self.color.clone());
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, GT_KIND)?;
        let res = c.meta["resolution"]
            .as_u64()
            .ok_or_else(|| Error::ingestion(path, "missing resolution"))? as usize;
        let bbox: Aabb = serde_json::from_value(c.meta["bbox"].clone())
            .map_err(|e| Error::ingestion(path, format!("bbox: {e}")))?;
        let n = res * res * res;
        let gt = GroundTruthField {
            res,
            bbox,
            density: c.require("density", n, path)?.to_vec(),
            color: c.require("color", 3 * n, path)?.to_vec(),
        };
        gt.validate().map_err(|e| Error::ingestion(path, e.to_string()))?;
        Ok(gt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_holds_out_every_fifth() {
        let (train, test) = split_views(20, 5);
        assert_eq!(test, vec![4, 9, 14, 19]);
        assert_eq!(train.len(), 16);
        let (train, test) = split_views(3, 0);
        assert_eq!(train, vec![0, 1, 2]);
        assert!(test.is_empty());
    }
}
