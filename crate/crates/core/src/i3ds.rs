//! Alternating 3D super-resolution: per-view latent upscaling followed by
//! re-fitting the field to the upscaled views.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffusion::{Conditioning, Denoiser, VIEW_CLASSES};
use crate::error::{Error, Result};
use crate::imaging::{downsample_x4, Image};
use crate::latent_codec::{decode, encode, upsample_x4, CodecParams, LatentImage};
use crate::metrics::mean_psnr;
use crate::radiance_field::{fit_to_images, render_image, FieldOptimizer, RadianceField, RenderOptions};
use crate::scene_data::{CameraPose, MultiViewDataset};
use crate::vsd::{fresh_adapters, sds_upscale, vsd_upscale, write_loss_trace, LossRecord, LoraTrainer, VsdConfig};

/// How each view is upscaled in the latent space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Adapter update after every `lora_interval`-th residual step.
    #[default]
    VsdLoraSpaced,
    /// Adapter update after every residual step.
    VsdLora,
    Sds,
    /// No residual steps: the target is `decode(encode(upsampled render))`.
    Identity,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::VsdLoraSpaced, Method::VsdLora, Method::Sds, Method::Identity];

    pub fn name(self) -> &'static str {
        match self {
            Method::VsdLoraSpaced => "vsd_lora_spaced",
            Method::VsdLora => "vsd_lora",
            Method::Sds => "sds",
            Method::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method '{s}' (expected vsd_lora_spaced, vsd_lora, sds or identity)")))
    }

    pub fn uses_adapters(self) -> bool {
        matches!(self, Method::VsdLoraSpaced | Method::VsdLora)
    }

    /// The residual-step config this method actually runs.
    pub fn effective_vsd(self, vsd: &VsdConfig) -> VsdConfig {
        let mut v = vsd.clone();
        match self {
            Method::VsdLora => v.lora_interval = 1,
            Method::Identity => v.steps = 0,
            _ => {}
        }
        v
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct I3dsConfig {
    pub rounds: usize,
    pub max_sync_iter: usize,
    pub method: Method,
    pub vsd: VsdConfig,
    pub batch_rays: usize,
    /// Sync learning rate, decayed exponentially to `sync_lr_end` within each round.
    pub sync_lr: f32,
    pub sync_lr_end: f32,
    /// The field is resampled to this resolution before the first sync.
    pub sr_grid_res: usize,
    pub n_samples: usize,
    pub background: [f32; 3],
    pub subpixel: bool,
    /// Start every round from fresh adapters instead of carrying them over.
    pub reset_adapters: bool,
    /// Render the training views after each sync and report their PSNR against the HR ground truth.
    pub eval_renders: bool,
    pub seed: u64,
}

impl Default for I3dsConfig {
    fn default() -> Self {
        I3dsConfig {
            rounds: 4,
            max_sync_iter: 500,
            method: Method::VsdLoraSpaced,
            vsd: VsdConfig::default(),
            batch_rays: 1024,
            sync_lr: 0.003,
            sync_lr_end: 0.0006,
            sr_grid_res: 128,
            n_samples: 64,
            background: [1.0; 3],
            subpixel: true,
            reset_adapters: false,
            eval_renders: true,
            seed: 0,
        }
    }
}

impl I3dsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.batch_rays == 0 {
            return Err(Error::config("batch_rays must be positive"));
        }
        if !(self.sync_lr > 0.0 && self.sync_lr_end > 0.0) {
            return Err(Error::config("sync learning rates must be positive"));
        }
        if self.sr_grid_res < 2 {
            return Err(Error::config("sr_grid_res must be at least 2"));
        }
        if self.n_samples < 2 {
            return Err(Error::config("n_samples must be at least 2"));
        }
        Ok(())
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            n_samples: self.n_samples,
            background: self.background,
            jitter_seed: None,
        }
    }
}

/// The frozen networks shared by every round.
#[derive(Clone, Copy)]
pub struct FrozenModels<'a> {
    pub codec: &'a CodecParams,
    pub denoiser: &'a Denoiser,
}

impl FrozenModels<'_> {
    fn hashes(&self) -> (String, String) {
        (self.codec.hash(), self.denoiser.hash())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub method: Method,
    /// Last residual-step loss per view, in `views` order (0 when no steps ran).
    pub vsd_final_losses: Vec<f64>,
    pub sync_losses: Vec<f32>,
    /// Mean PSNR of the SR targets against the HR ground truth.
    pub target_psnr_db: Option<f64>,
    /// Mean PSNR of the re-fitted field's HR renders of the training views.
    pub render_psnr_db: Option<f64>,
    pub field_hash: String,
    pub adapter_hash: String,
    pub upscale_seconds: f64,
    pub sync_seconds: f64,
}

pub struct UpscaleOutput {
    pub targets: Vec<Image>,
    pub traces: Vec<Vec<LossRecord>>,
}

/// Seed for an independent stream keyed by `(seed, round, stage, view)`.
fn stream_seed(seed: u64, round: usize, stage: u64, view: usize) -> u64 {
    let mut z = seed ^ 0x9e37_79b9_7f4a_7c15;
    for k in [round as u64, stage, view as u64] {
        z = z.wrapping_add(k.wrapping_mul(0xbf58_476d_1ce4_e5b9)).wrapping_add(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 29;
    }
    z
}

fn check_views(dataset: &MultiViewDataset, views: &[usize]) -> Result<()> {
    if views.is_empty() {
        return Err(Error::config("no training views"));
    }
    if let Some(&v) = views.iter().find(|&&v| v >= dataset.len()) {
        return Err(Error::config(format!("view {v} out of range for {} views", dataset.len())));
    }
    Ok(())
}

/// Renders each training view at LR (box-averaged from an HR render), upsamples
/// it ×4 and upscales it in the latent space. The field and the frozen models
/// are read-only here; only the adapters in `trainer` change.
pub fn upscale_stage(
    field: &RadianceField,
    dataset: &MultiViewDataset,
    views: &[usize],
    models: FrozenModels<'_>,
    trainer: &mut LoraTrainer<f32>,
    config: &I3dsConfig,
    round: usize,
) -> Result<UpscaleOutput> {
    check_views(dataset, views)?;
    let denoiser = models.denoiser;
    let prompt_id = denoiser.vocab.require(&dataset.prompt)?;
    let vsd = config.method.effective_vsd(&config.vsd);
    let (w, h) = dataset.lr_size();
    let (near, far) = dataset.near_far;
    let opts = config.render_options();
    let mut targets = Vec::with_capacity(views.len());
    let mut traces = Vec::with_capacity(views.len());
    for &v in views {
        // Area-sampled LR render, matching how the LR observations were formed.
        let hr = render_image(field, &dataset.hr_pose(v), 4 * w, 4 * h, near, far, &opts)?.clamp01();
        let render = downsample_x4(&hr)?;
        let x0 = encode(&upsample_x4(&render), models.codec)?.data;
        let cond = Conditioning {
            t: 0,
            prompt_id,
            class_id: dataset.poses[v].azimuth_bucket(VIEW_CLASSES),
            lr_latent: encode(&upsample_x4(&dataset.lr_images[v]), models.codec)?.data,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, round, 0, v));
        let (latent, records) = match config.method {
            Method::Sds => sds_upscale(&x0, &cond, v, &denoiser.params, &denoiser.schedule, &vsd, &mut rng)?,
            _ => vsd_upscale(&x0, &cond, v, &denoiser.params, trainer, &denoiser.schedule, &vsd, &mut rng)?,
        };
        if !latent.is_finite() {
            return Err(Error::numerical(format!("upscaled latent of view {v} is non-finite in round {round}")));
        }
        targets.push(decode(&LatentImage::new(latent).with_view(v), models.codec)?.clamp01());
        traces.push(records);
    }
    Ok(UpscaleOutput { targets, traces })
}

/// Fits the field to the SR targets for `max_sync_iter` iterations, first
/// resampling it to `sr_grid_res` if it is coarser. Returns the loss trace.
pub fn sync_stage(
    field: &mut RadianceField,
    targets: &[Image],
    hr_poses: &[CameraPose],
    near_far: (f32, f32),
    config: &I3dsConfig,
    round: usize,
) -> Result<Vec<f32>> {
    if targets.len() != hr_poses.len() || targets.is_empty() {
        return Err(Error::shape(format!("{} targets for {} poses", targets.len(), hr_poses.len())));
    }
    if field.resolution() < config.sr_grid_res {
        *field = field.upsample(config.sr_grid_res)?;
    }
    let mut opt = FieldOptimizer::new(field);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, round, 1, 0));
    fit_to_images(
        field,
        &mut opt,
        targets,
        hr_poses,
        near_far.0,
        near_far.1,
        config.max_sync_iter,
        config.batch_rays,
        (config.sync_lr, config.sync_lr_end),
        config.subpixel,
        &config.render_options(),
        &mut rng,
        |_, _| Ok(()),
    )
}

fn freeze_check(what: &str, before: &str, after: &str) -> Result<()> {
    if before != after {
        return Err(Error::Freeze(format!("{what} changed: {before} -> {after}")));
    }
    Ok(())
}

fn initial_trainer(denoiser: &Denoiser, config: &I3dsConfig, round: usize) -> Result<LoraTrainer<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, round, 2, 0));
    let mut adapters = fresh_adapters(&denoiser.params, config.vsd.lora_rank, &mut rng)?;
    for a in adapters.iter_mut() {
        a.scale = config.vsd.lora_scale as f32;
    }
    Ok(LoraTrainer::new(adapters, config.vsd.eta_lora))
}

/// What `evaluate_run` needs to know about a run besides its field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub method: Method,
    pub config_hash: String,
    pub train_views: Vec<usize>,
    pub test_views: Vec<usize>,
    pub n_samples: usize,
    pub background: [f32; 3],
}

/// Run directory layout.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        RunLayout { root: root.to_path_buf() }
    }

    pub fn round_dir(&self, round: usize) -> PathBuf {
        self.root.join(format!("round_{round:02}"))
    }

    pub fn field_checkpoint(&self, round: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("field_round{round:02}.bin"))
    }

    pub fn lora_checkpoint(&self, round: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("lora_round{round:02}.bin"))
    }

    pub fn final_field(&self) -> PathBuf {
        self.root.join("field_sr.bin")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn write_manifest(&self, m: &RunManifest) -> Result<()> {
        Self::mkdir(&self.root)?;
        let p = self.manifest();
        std::fs::write(&p, serde_json::to_vec_pretty(m)?).map_err(|e| Error::io(&p, e))
    }

    pub fn read_manifest(&self) -> Result<RunManifest> {
        let p = self.manifest();
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::ingestion(&p, e.to_string()))
    }

    fn round_report(&self, round: usize) -> PathBuf {
        self.round_dir(round).join("report.json")
    }

    /// Highest round whose report and checkpoints all exist.
    pub fn last_complete_round(&self, rounds: usize, with_adapters: bool) -> Option<usize> {
        (1..=rounds).rev().find(|&r| {
            self.round_report(r).is_file()
                && self.field_checkpoint(r).is_file()
                && (!with_adapters || self.lora_checkpoint(r).is_file())
        })
    }

    fn mkdir(path: &Path) -> Result<()> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
    }

    fn write_round(
        &self,
        report: &RoundReport,
        views: &[usize],
        out: &UpscaleOutput,
        field: &RadianceField,
        trainer: Option<&LoraTrainer<f32>>,
    ) -> Result<()> {
        let dir = self.round_dir(report.round);
        let tdir = dir.join("targets");
        let ldir = dir.join("losses");
        Self::mkdir(&tdir)?;
        Self::mkdir(&ldir)?;
        Self::mkdir(&self.root.join("checkpoints"))?;
        for ((&v, img), trace) in views.iter().zip(&out.targets).zip(&out.traces) {
            img.save_png(&tdir.join(format!("{v:04}.png")))?;
            write_loss_trace(&ldir.join(format!("{v:04}.csv")), trace)?;
        }
        let sync: String = std::iter::once("iter,loss\n".to_string())
            .chain(report.sync_losses.iter().enumerate().map(|(i, l)| format!("{i},{l:.9e}\n")))
            .collect();
        let p = dir.join("sync_loss.csv");
        std::fs::write(&p, sync).map_err(|e| Error::io(&p, e))?;
        let meta = json!({ "round": report.round, "method": report.method });
        field.save(&self.field_checkpoint(report.round), meta.clone())?;
        if let Some(trainer) = trainer {
            trainer.save(&self.lora_checkpoint(report.round), meta)?;
        }
        // The report goes last: its presence marks the round as complete.
        let p = self.round_report(report.round);
        std::fs::write(&p, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(&p, e))
    }
}

pub struct I3dsOutcome {
    pub field: RadianceField,
    pub reports: Vec<RoundReport>,
    pub trainer: LoraTrainer<f32>,
}

/// Runs `config.rounds` upscale/sync rounds starting from the LR field.
/// With `out_dir`, per-round artifacts are written there; with `resume`,
/// rounds already completed in `out_dir` are loaded instead of re-run.
pub fn run_i3ds(
    lr_field: &RadianceField,
    dataset: &MultiViewDataset,
    views: &[usize],
    models: FrozenModels<'_>,
    config: &I3dsConfig,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<I3dsOutcome> {
    config.validate()?;
    config.vsd.validate(&models.denoiser.schedule)?;
    check_views(dataset, views)?;
    models.denoiser.vocab.require(&dataset.prompt)?;
    let layout = out_dir.map(RunLayout::new);
    let frozen = models.hashes();
    let hr_poses: Vec<CameraPose> = views.iter().map(|&v| dataset.hr_pose(v)).collect();
    let hr_gt: Option<Vec<Image>> = dataset
        .hr_images
        .as_ref()
        .map(|hr| views.iter().map(|&v| hr[v].clone()).collect());

    let mut field = lr_field.clone();
    let mut trainer = initial_trainer(models.denoiser, config, 0)?;
    let mut reports = Vec::new();
    let mut start = 1;
    if let (Some(layout), true) = (&layout, resume) {
        if let Some(done) = layout.last_complete_round(config.rounds, config.method.uses_adapters()) {
            for r in 1..=done {
                let p = layout.round_report(r);
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                reports.push(serde_json::from_slice(&bytes).map_err(|e| Error::ingestion(&p, e.to_string()))?);
            }
            field = RadianceField::load(&layout.field_checkpoint(done))?.0;
            if config.method.uses_adapters() {
                trainer = LoraTrainer::load(&layout.lora_checkpoint(done), &models.denoiser.params)?.0;
            }
            start = done + 1;
        }
    }

    for round in start..=config.rounds {
        if config.reset_adapters && round > 1 {
            trainer = initial_trainer(models.denoiser, config, round)?;
        }
        let field_before = field.hash();
        let clock = Instant::now();
        let out = upscale_stage(&field, dataset, views, models, &mut trainer, config, round)?;
        let upscale_seconds = clock.elapsed().as_secs_f64();
        freeze_check("field during upscale", &field_before, &field.hash())?;
        if !trainer.adapters.is_finite() {
            return Err(Error::numerical(format!("adapters became non-finite in round {round}")));
        }

        let adapter_hash = trainer.adapters.hash();
        let clock = Instant::now();
        let sync_losses = sync_stage(&mut field, &out.targets, &hr_poses, dataset.near_far, config, round)?;
        let sync_seconds = clock.elapsed().as_secs_f64();
        freeze_check("adapters during sync", &adapter_hash, &trainer.adapters.hash())?;

        let render_psnr_db = match (&hr_gt, config.eval_renders) {
            (Some(gt), true) => {
                let opts = config.render_options();
                let (n, f) = dataset.near_far;
                let renders = hr_poses
                    .iter()
                    .zip(gt)
                    .map(|(p, g)| render_image(&field, p, g.width, g.height, n, f, &opts).map(Image::clamp01))
                    .collect::<Result<Vec<_>>>()?;
                Some(mean_psnr(&renders, gt)?)
            }
            _ => None,
        };
        let report = RoundReport {
            round,
            method: config.method,
            vsd_final_losses: out.traces.iter().map(|t| t.last().map_or(0.0, |r| r.l_vsd)).collect(),
            sync_losses,
            target_psnr_db: hr_gt.as_ref().map(|gt| mean_psnr(&out.targets, gt)).transpose()?,
            render_psnr_db,
            field_hash: field.hash(),
            adapter_hash,
            upscale_seconds,
            sync_seconds,
        };
        if let Some(layout) = &layout {
            let adapters = config.method.uses_adapters().then_some(&trainer);
            layout.write_round(&report, views, &out, &field, adapters)?;
        }
        reports.push(report);
    }

    let after = models.hashes();
    freeze_check("codec", &frozen.0, &after.0)?;
    freeze_check("denoiser", &frozen.1, &after.1)?;
    if let Some(layout) = &layout {
        let meta = json!({ "rounds": config.rounds, "method": config.method });
        field.save(&layout.final_field(), meta)?;
    }
    Ok(I3dsOutcome { field, reports, trainer })
}
