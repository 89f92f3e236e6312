use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use ndarray_npy::read_npy;

use super::{CameraPose, MultiViewDataset};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::radiance_field::Aabb;

const POSES_FILE: &str = "poses_bounds.npy";

fn read_poses_bounds(path: &Path) -> Result<Array2<f64>> {
    if !path.is_file() {
        return Err(Error::ingestion(path, "poses file not found"));
    }
    match read_npy::<_, Array2<f64>>(path) {
        Ok(a) => Ok(a),
        Err(_) => read_npy::<_, Array2<f32>>(path)
            .map(|a| a.mapv(f64::from))
            .map_err(|e| Error::ingestion(path, format!("not a 2-D float array: {e}"))),
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Reads an LLFF capture: `images/` plus `poses_bounds.npy` with 17 numbers
/// per view (a row-major 3×5 `[down, right, back, centre, hwf]` matrix and
/// the near/far depth bounds). Images become the low-resolution inputs.
pub fn load_llff(dir: &Path) -> Result<MultiViewDataset> {
    let img_dir = dir.join("images");
    if !img_dir.is_dir() {
        return Err(Error::ingestion(&img_dir, "missing images directory"));
    }
    let files = image_files(&img_dir)?;
    if files.is_empty() {
        return Err(Error::ingestion(&img_dir, "no images found"));
    }
    let pose_path = dir.join(POSES_FILE);
    let pb = read_poses_bounds(&pose_path)?;
    let n = files.len();
    if pb.nrows() != n || pb.ncols() != 17 {
        return Err(Error::ingestion(
            &pose_path,
            format!("expected {n}×17 entries (one row per image), found {}×{}", pb.nrows(), pb.ncols()),
        ));
    }
    let mut lr_images = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    let (mut near, mut far) = (f64::INFINITY, 0.0f64);
    for (i, file) in files.iter().enumerate() {
        let img = Image::load(file)?;
        let row = pb.row(i);
        let m = |r: usize, c: usize| row[r * 5 + c];
        let col = |c: usize| Vector3::new(m(0, c), m(1, c), m(2, c));
        let (h, w, f) = (m(0, 4), m(1, 4), m(2, 4));
        if !(h > 0.0 && w > 0.0 && f > 0.0) {
            return Err(Error::ingestion(&pose_path, format!("row {i}: bad height/width/focal")));
        }
        let rotation = Matrix3::from_columns(&[col(1), col(0), -col(2)]);
        let focal = f * img.width as f64 / w;
        let pose = CameraPose {
            rotation,
            translation: col(3),
            fx: focal,
            fy: focal,
            cx: img.width as f64 / 2.0,
            cy: img.height as f64 / 2.0,
        };
        pose.validate()
            .map_err(|e| Error::ingestion(&pose_path, format!("row {i}: {e}")))?;
        near = near.min(row[15]);
        far = far.max(row[16]);
        lr_images.push(img);
        poses.push(pose);
    }
    if !(near > 0.0 && far > near) {
        return Err(Error::ingestion(&pose_path, "depth bounds must satisfy 0 < near < far"));
    }
    // Everything a camera can see within the far bound.
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for p in &poses {
        for a in 0..3 {
            lo[a] = lo[a].min((p.translation[a] - far) as f32);
            hi[a] = hi[a].max((p.translation[a] + far) as f32);
        }
    }
    let ds = MultiViewDataset {
        hr_images: None,
        lr_images,
        poses,
        scene_id: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "llff".into()),
        prompt: "a photo of a scene".into(),
        bbox: Aabb { min: lo, max: hi },
        near_far: ((near * 0.9) as f32, (far * 1.1) as f32),
    };
    ds.validate()?;
    Ok(ds)
}
