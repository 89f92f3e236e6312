use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CameraPose, GroundTruthField, MultiViewDataset};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::radiance_field::Aabb;

#[derive(Serialize, Deserialize)]
struct PosesFile {
    scene_id: String,
    prompt: String,
    bbox: Aabb,
    near: f32,
    far: f32,
    poses: Vec<CameraPose>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

/// Files written by [`write_dataset`], relative to the dataset directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub files: Vec<ManifestEntry>,
}

fn frame_name(i: usize) -> String {
    format!("{i:04}.png")
}

/// Writes `hr/####.png`, `lr/####.png`, `poses.json`, `field.bin` (when a
/// ground truth is given) and a `manifest.json` hashing every file.
pub fn write_dataset(
    dir: &Path,
    dataset: &MultiViewDataset,
    ground_truth: Option<&GroundTruthField>,
) -> Result<DatasetFiles> {
    dataset.validate()?;
    let mut rel: Vec<String> = Vec::new();
    for sub in ["lr", "hr"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for (i, img) in dataset.lr_images.iter().enumerate() {
        let name = format!("lr/{}", frame_name(i));
        img.save_png(&dir.join(&name))?;
        rel.push(name);
    }
    for (i, img) in dataset.hr_images.iter().flatten().enumerate() {
        let name = format!("hr/{}", frame_name(i));
        img.save_png(&dir.join(&name))?;
        rel.push(name);
    }
    let poses = PosesFile {
        scene_id: dataset.scene_id.clone(),
        prompt: dataset.prompt.clone(),
        bbox: dataset.bbox,
        near: dataset.near_far.0,
        far: dataset.near_far.1,
        poses: dataset.poses.clone(),
    };
    let path = dir.join("poses.json");
    fs::write(&path, serde_json::to_vec_pretty(&poses)?).map_err(|e| Error::io(&path, e))?;
    rel.push("poses.json".into());
    if let Some(gt) = ground_truth {
        gt.save(&dir.join("field.bin"))?;
        rel.push("field.bin".into());
    }
    let mut files = Vec::with_capacity(rel.len());
    for name in rel {
        let p = dir.join(&name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        files.push(ManifestEntry {
            path: name,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = DatasetFiles { files };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    v.sort();
    Ok(v)
}

/// Reads a directory produced by [`write_dataset`]. The ground truth is
/// returned when `field.bin` is present.
pub fn load_dataset(dir: &Path) -> Result<(MultiViewDataset, Option<GroundTruthField>)> {
    let path = dir.join("poses.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let poses: PosesFile =
        serde_json::from_slice(&text).map_err(|e| Error::ingestion(&path, e.to_string()))?;
    let lr_images = sorted_pngs(&dir.join("lr"))?
        .iter()
        .map(|p| Image::load(p))
        .collect::<Result<Vec<_>>>()?;
    let hr_files = sorted_pngs(&dir.join("hr"))?;
    let hr_images = if hr_files.is_empty() {
        None
    } else {
        Some(hr_files.iter().map(|p| Image::load(p)).collect::<Result<Vec<_>>>()?)
    };
    if lr_images.len() != poses.poses.len() {
        return Err(Error::ingestion(
            &path,
            format!("expected {} poses to match lr/, found {}", lr_images.len(), poses.poses.len()),
        ));
    }
    let ds = MultiViewDataset {
        hr_images,
        lr_images,
        poses: poses.poses,
        scene_id: poses.scene_id,
        prompt: poses.prompt,
        bbox: poses.bbox,
        near_far: (poses.near, poses.far),
    };
    ds.validate()?;
    let field = dir.join("field.bin");
    let gt = if field.is_file() {
        Some(GroundTruthField::load(&field)?)
    } else {
        None
    };
    Ok((ds, gt))
}
