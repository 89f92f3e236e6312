//! The commands behind the binary, callable as a library.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use vsdnerf::diffusion::{build_denoiser_corpus, pretrain_denoiser, Denoiser, PromptVocab};
use vsdnerf::i3ds::{run_i3ds, FrozenModels, Method, RunLayout, RunManifest};
use vsdnerf::imaging::Image;
use vsdnerf::latent_codec::{train_codec, CodecParams};
use vsdnerf::metrics::{comparison_csv, comparison_text, evaluate_run_with, evaluate_runs, ComparisonRow, MetricReport};
use vsdnerf::radiance_field::{fit_lr_nerf, RadianceField};
use vsdnerf::scene_data::{
    generate_synthetic_scene, load_dataset, load_llff, synthetic_prompts, write_dataset, MultiViewDataset,
};
use vsdnerf::{Error, Result};

use crate::config::{Paths, RunConfig, SceneSource};
use crate::lock::{RunLock, RunStatus};

fn is_non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::ingestion(path, e.to_string()))
}

fn clear_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Directories written by `generate`.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub scenes: Vec<PathBuf>,
    pub files: usize,
}

/// Writes the evaluation scene (synthetic sources only) and the pretraining
/// corpus. Refuses to touch non-empty directories unless `force`.
pub fn generate(cfg: &RunConfig, force: bool) -> Result<GenerateSummary> {
    let paths = cfg.paths();
    let mut jobs: Vec<(PathBuf, u64, usize, usize, usize)> = Vec::new();
    if cfg.scene.source == SceneSource::Synthetic {
        let s = &cfg.scene;
        jobs.push((paths.scene_dir.clone(), s.synthetic_seed, s.gt_res, s.n_views, s.hr_size));
    }
    let c = &cfg.corpus;
    for &seed in &c.seeds {
        jobs.push((paths.corpus_scene(seed), seed, c.gt_res, c.n_views, c.hr_size));
    }
    if !force {
        if let Some((dir, ..)) = jobs.iter().find(|j| is_non_empty(&j.0)) {
            return Err(Error::config(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    let mut files = 0;
    for (dir, seed, gt_res, n_views, hr_size) in &jobs {
        clear_dir(dir)?;
        let (gt, ds) = generate_synthetic_scene(*seed, *gt_res, *n_views, *hr_size)?;
        files += write_dataset(dir, &ds, Some(&gt))?.files.len();
    }
    Ok(GenerateSummary {
        scenes: jobs.into_iter().map(|j| j.0).collect(),
        files,
    })
}

/// The evaluation dataset named by the config, with the prompt override applied.
pub fn load_scene(cfg: &RunConfig) -> Result<MultiViewDataset> {
    let paths = cfg.paths();
    let mut ds = match cfg.scene.source {
        SceneSource::Synthetic => load_dataset(&paths.scene_dir)?.0,
        SceneSource::Llff => load_llff(&paths.scene_dir)?,
    };
    if let Some(p) = &cfg.scene.prompt {
        ds.prompt = p.clone();
    }
    Ok(ds)
}

/// Training and held-out view indices.
pub fn split(cfg: &RunConfig, ds: &MultiViewDataset) -> (Vec<usize>, Vec<usize>) {
    ds.split(cfg.scene.holdout_every)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelHashes {
    pub codec_key: String,
    pub codec: String,
    pub denoiser_key: String,
    pub denoiser: String,
}

fn key_of(v: serde_json::Value) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Prompts every pretrained denoiser knows.
pub fn pretrain_vocab(cfg: &RunConfig) -> PromptVocab {
    let mut vocab = PromptVocab::default();
    for p in synthetic_prompts() {
        vocab.insert(&p);
    }
    vocab.insert("a photo of a scene");
    if let Some(p) = &cfg.scene.prompt {
        vocab.insert(p);
    }
    vocab
}

/// Trains the codec and then the denoiser on the corpus. Either stage is
/// skipped when its checkpoint already matches the current settings.
pub fn pretrain(cfg: &RunConfig) -> Result<ModelHashes> {
    let paths = cfg.paths();
    let corpus: Vec<MultiViewDataset> = cfg
        .corpus
        .seeds
        .iter()
        .map(|&s| load_dataset(&paths.corpus_scene(s)).map(|d| d.0))
        .collect::<Result<_>>()?;
    fs::create_dir_all(&paths.models_dir).map_err(|e| Error::io(&paths.models_dir, e))?;
    let previous: ModelHashes = if paths.hashes().is_file() { read_json(&paths.hashes())? } else { ModelHashes::default() };
    let mut hashes = ModelHashes {
        codec_key: key_of(json!({ "codec": cfg.codec, "corpus": cfg.corpus })),
        ..Default::default()
    };

    let reuse_codec = previous.codec_key == hashes.codec_key
        && paths.codec().is_file()
        && CodecParams::load(&paths.codec()).is_ok_and(|c| c.hash() == previous.codec);
    let codec = if reuse_codec {
        CodecParams::load(&paths.codec())?
    } else {
        let images: Vec<Image> = corpus.iter().flat_map(|d| d.hr_images.clone().unwrap_or_default()).collect();
        let codec = train_codec(&images, &cfg.codec)?;
        codec.save(&paths.codec())?;
        codec
    };
    hashes.codec = codec.hash();
    hashes.denoiser_key = key_of(json!({ "codec": hashes.codec, "pretrain": cfg.pretrain, "corpus": cfg.corpus }));
    write_json(&paths.hashes(), &ModelHashes { denoiser_key: String::new(), denoiser: String::new(), ..hashes.clone() })?;

    let reuse_denoiser = previous.denoiser_key == hashes.denoiser_key
        && paths.denoiser().is_file()
        && Denoiser::load(&paths.denoiser()).is_ok_and(|d| d.hash() == previous.denoiser);
    let denoiser = if reuse_denoiser {
        Denoiser::load(&paths.denoiser())?
    } else {
        let mut vocab = pretrain_vocab(cfg);
        let samples = build_denoiser_corpus(&codec, &corpus, &mut vocab)?;
        let (denoiser, _) = pretrain_denoiser(&samples, &vocab, &cfg.pretrain)?;
        denoiser.save(&paths.denoiser())?;
        denoiser
    };
    hashes.denoiser = denoiser.hash();
    write_json(&paths.hashes(), &hashes)?;
    Ok(hashes)
}

/// Fits the LR field on the training split and writes it to `paths.lr_field`.
pub fn fit_lr(cfg: &RunConfig) -> Result<PathBuf> {
    let ds = load_scene(cfg)?;
    let (train, _) = split(cfg, &ds);
    let (field, stats) = fit_lr_nerf(&ds, &train, &cfg.fit)?;
    let out = cfg.paths().lr_field;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let meta = json!({
        "scene": ds.scene_id,
        "train_views": train,
        "final_loss": stats.losses.last(),
        "fit": cfg.fit,
    });
    field.save(&out, meta)?;
    Ok(out)
}

fn load_models(paths: &Paths) -> Result<(CodecParams, Denoiser)> {
    let codec = CodecParams::load(&paths.codec())?;
    let denoiser = Denoiser::load(&paths.denoiser())?;
    if paths.hashes().is_file() {
        let h: ModelHashes = read_json(&paths.hashes())?;
        if h.codec != codec.hash() || h.denoiser != denoiser.hash() {
            return Err(Error::Freeze(format!(
                "checkpoints in {} differ from the hashes recorded at pretraining",
                paths.models_dir.display()
            )));
        }
    }
    Ok((codec, denoiser))
}

/// Runs the rounds into `out_dir`, evaluates the final field and writes
/// `report.json`. `status.json` records progress and failures.
pub fn superres_into(cfg: &RunConfig, out_dir: &Path, resume: bool, force: bool) -> Result<MetricReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let _lock = RunLock::acquire(out_dir)?;
    let status = RunStatus::new("superres");
    status.write(out_dir)?;
    let result = superres_locked(cfg, out_dir, resume, force);
    match &result {
        Ok(_) => status.completed().write(out_dir)?,
        Err(e) => status.failed(e).write(out_dir)?,
    }
    result
}

pub fn superres(cfg: &RunConfig, resume: bool, force: bool) -> Result<MetricReport> {
    superres_into(cfg, &cfg.paths().output_dir, resume, force)
}

fn superres_locked(cfg: &RunConfig, out_dir: &Path, resume: bool, force: bool) -> Result<MetricReport> {
    let layout = RunLayout::new(out_dir);
    let config_path = out_dir.join("config.json");
    if resume && config_path.is_file() {
        let previous: RunConfig = read_json(&config_path)?;
        if previous.hash() != cfg.hash() {
            return Err(Error::config(format!(
                "{} was started with a different configuration; cannot resume",
                out_dir.display()
            )));
        }
    } else if !resume && (layout.final_field().exists() || layout.round_dir(1).exists()) {
        if !force {
            return Err(Error::config(format!(
                "{} already holds a run; pass --resume to continue it or --force to start over",
                out_dir.display()
            )));
        }
        for entry in fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))? {
            let p = entry.map_err(|e| Error::io(out_dir, e))?.path();
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name == crate::lock::LOCK_FILE || name == crate::lock::STATUS_FILE {
                continue;
            }
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            } else {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let paths = cfg.paths();
    let ds = load_scene(cfg)?;
    let (train, test) = split(cfg, &ds);
    let (codec, denoiser) = load_models(&paths)?;
    if !paths.lr_field.is_file() {
        return Err(Error::ingestion(&paths.lr_field, "LR field not found; run fit-lr first"));
    }
    let (lr_field, _) = RadianceField::load(&paths.lr_field)?;
    write_json(&config_path, cfg)?;
    layout.write_manifest(&RunManifest {
        method: cfg.method,
        config_hash: cfg.hash(),
        train_views: train.clone(),
        test_views: test,
        n_samples: cfg.i3ds.n_samples,
        background: cfg.i3ds.background,
    })?;
    let models = FrozenModels { codec: &codec, denoiser: &denoiser };
    run_i3ds(&lr_field, &ds, &train, models, &cfg.i3ds, Some(out_dir), resume)?;
    let report = evaluate_run_with(out_dir, &ds, &codec, cfg.metrics.psnr_max_val)?;
    report.save(&out_dir.join("report.json"))?;
    Ok(report)
}

/// Evaluates finished runs against the configured scene.
pub fn evaluate(cfg: &RunConfig, run_dirs: &[PathBuf]) -> Result<Vec<ComparisonRow>> {
    let ds = load_scene(cfg)?;
    let codec = CodecParams::load(&cfg.paths().codec())?;
    Ok(evaluate_runs(run_dirs, &ds, &codec, cfg.metrics.psnr_max_val))
}

/// Writes `comparison.csv` and `comparison.txt` into `dir`.
pub fn write_tables(dir: &Path, rows: &[ComparisonRow]) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("comparison.csv");
    let txt = dir.join("comparison.txt");
    fs::write(&csv, comparison_csv(rows)).map_err(|e| Error::io(&csv, e))?;
    fs::write(&txt, comparison_text(rows)).map_err(|e| Error::io(&txt, e))?;
    Ok((csv, txt))
}

/// Runs every listed method into `<base>/<method>` and tabulates them.
/// A method that fails shows up as a `FAILED` row.
pub fn compare(cfg: &RunConfig, methods: &[Method], base: &Path, resume: bool, force: bool) -> Result<Vec<ComparisonRow>> {
    let mut dirs = Vec::new();
    for &m in methods {
        let mut c = cfg.clone();
        c.method = m;
        let c = c.resolved();
        let dir = base.join(m.name());
        // Failures are recorded in the run's status.json and surface as FAILED rows.
        let _ = superres_into(&c, &dir, resume, force);
        dirs.push(dir);
    }
    let rows = evaluate(cfg, &dirs)?;
    write_tables(base, &rows)?;
    Ok(rows)
}
