//! Refits the NIQE pristine model shipped in `data/niqe_pristine.json` from
//! the HR views of the synthetic pretraining scenes.
//!
//! cargo run --release -p vsdnerf --example fit_niqe_model [out.json]

use std::path::PathBuf;

use vsdnerf::metrics::NiqeModel;
use vsdnerf::scene_data::generate_synthetic_scene;

const SEEDS: std::ops::Range<u64> = 1000..1008;

fn main() -> vsdnerf::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/niqe_pristine.json"));
    let mut images = Vec::new();
    for seed in SEEDS {
        let (_, ds) = generate_synthetic_scene(seed, 64, 16, 128)?;
        images.extend(ds.hr_images.expect("synthetic scenes carry HR views"));
    }
    let source = format!("synthetic scenes {}..{}, 16 HR views each at 128px", SEEDS.start, SEEDS.end);
    let model = NiqeModel::fit(&images, &source)?;
    std::fs::write(&out, serde_json::to_string_pretty(&model)?).map_err(|e| vsdnerf::Error::io(&out, e))?;
    println!("{} patches -> {}", model.n_patches, out.display());
    Ok(())
}
