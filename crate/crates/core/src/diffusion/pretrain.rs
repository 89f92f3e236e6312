use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::DenoiserMeta;
use super::{
    add_noise, gaussian_like, Conditioning, Denoiser, DenoiserConfig, DenoiserParams, GradRequest, NoiseSchedule,
    PromptVocab, ScheduleKind,
};
use crate::error::{Error, Result};
use crate::latent_codec::{encode, upsample_x4, CodecParams};
use crate::nn::Adam;
use crate::scene_data::MultiViewDataset;
use crate::tensor::Tensor;

/// Number of azimuth buckets used as class labels.
pub const VIEW_CLASSES: usize = 8;

/// One training tuple: clean HR latent and its encoded LR conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserSample {
    pub hr_latent: Tensor<f32>,
    pub lr_latent: Tensor<f32>,
    pub prompt_id: usize,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Side of the square latent crop used per training sample.
    pub crop: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub schedule: ScheduleKind,
    pub network: DenoiserConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            crop: 16,
            seed: 0,
            val_fraction: 0.1,
            schedule: ScheduleKind::Cosine,
            network: DenoiserConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainStats {
    pub losses: Vec<f32>,
    pub val_mse: f32,
    pub n_train: usize,
    pub n_val: usize,
}

/// Encodes every HR view and its 4×-upsampled LR view. Prompts are added to `vocab`.
pub fn build_denoiser_corpus(
    codec: &CodecParams,
    datasets: &[MultiViewDataset],
    vocab: &mut PromptVocab,
) -> Result<Vec<DenoiserSample>> {
    let mut out = Vec::new();
    for ds in datasets {
        let hr = ds.hr_images.as_ref().ok_or_else(|| {
            Error::config(format!("scene {} has no HR views to pretrain on", ds.scene_id))
        })?;
        let prompt_id = vocab.insert(&ds.prompt);
        for (v, (hr_img, lr_img)) in hr.iter().zip(&ds.lr_images).enumerate() {
            out.push(DenoiserSample {
                hr_latent: encode(hr_img, codec)?.data,
                lr_latent: encode(&upsample_x4(lr_img), codec)?.data,
                prompt_id,
                class_id: ds.poses[v].azimuth_bucket(VIEW_CLASSES),
            });
        }
    }
    Ok(out)
}

fn crop(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    let mut out = Tensor::zeros(t.channels, size, size);
    for c in 0..t.channels {
        let src = t.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..size {
            dst[y * size..(y + 1) * size].copy_from_slice(&src[(y0 + y) * t.width + x0..(y0 + y) * t.width + x0 + size]);
        }
    }
    out
}

fn split_indices(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let every = (n / n_val).max(1);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for i in 0..n {
        if i % every == every - 1 && val.len() < n_val {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    if train.is_empty() {
        train = val.clone();
    }
    (train, val)
}

/// Mean squared noise-prediction error over `samples`, with `draws` seeded
/// `(t, ε)` draws per sample on full-size latents.
pub fn validation_mse(
    params: &DenoiserParams<f32>,
    sched: &NoiseSchedule,
    samples: &[DenoiserSample],
    draws: usize,
    seed: u64,
) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for s in samples {
        for _ in 0..draws {
            let t = rng.random_range(1..=sched.t_max());
            let eps = gaussian_like::<f32, _>(s.hr_latent.shape(), &mut rng);
            let x_t = add_noise(&s.hr_latent, t, &eps, sched)?;
            let cond = Conditioning {
                t,
                prompt_id: s.prompt_id,
                class_id: s.class_id,
                lr_latent: s.lr_latent.clone(),
            };
            let pred = params.predict(&x_t, &cond, None)?;
            total += pred
                .data
                .iter()
                .zip(&eps.data)
                .map(|(p, e)| ((p - e) as f64).powi(2))
                .sum::<f64>();
            count += eps.len();
        }
    }
    if count == 0 {
        return Err(Error::config("validation set is empty"));
    }
    Ok((total / count as f64) as f32)
}

/// Trains the noise predictor with the squared-error objective and returns it frozen.
pub fn pretrain_denoiser(
    samples: &[DenoiserSample],
    vocab: &PromptVocab,
    config: &PretrainConfig,
) -> Result<(Denoiser, PretrainStats)> {
    if samples.len() < 2 {
        return Err(Error::config("pretraining needs at least two samples"));
    }
    let net = &config.network;
    if vocab.len() > net.n_prompts {
        return Err(Error::config(format!(
            "{} prompts exceed the {} embedding rows",
            vocab.len(),
            net.n_prompts
        )));
    }
    let (_, h, w) = samples[0].hr_latent.shape();
    if config.crop == 0 || !config.crop.is_multiple_of(4) || config.crop > h.min(w) {
        return Err(Error::config(format!(
            "crop {} must be a positive multiple of 4 no larger than the {h}×{w} latent",
            config.crop
        )));
    }
    if config.batch == 0 {
        return Err(Error::config("batch must be positive"));
    }
    let sched = NoiseSchedule::new(config.schedule, net.t_max);
    let mut params = DenoiserParams::<f32>::init(net.clone(), config.seed)?;
    let (train, val) = split_indices(samples.len(), config.val_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut adam = Adam::new(config.lr);
    let mut losses = Vec::with_capacity(config.steps);
    let size = config.crop;
    let n_elem = (net.latent_channels * size * size * config.batch) as f32;

    for step in 0..config.steps {
        let mut acc = params.zeros_like();
        let mut loss = 0.0f32;
        for _ in 0..config.batch {
            let s = &samples[train[rng.random_range(0..train.len())]];
            let y0 = rng.random_range(0..=h - size);
            let x0 = rng.random_range(0..=w - size);
            let hr = crop(&s.hr_latent, y0, x0, size);
            let t = rng.random_range(1..=sched.t_max());
            let eps = gaussian_like::<f32, _>(hr.shape(), &mut rng);
            let x_t = add_noise(&hr, t, &eps, &sched)?;
            let cond = Conditioning {
                t,
                prompt_id: s.prompt_id,
                class_id: s.class_id,
                lr_latent: crop(&s.lr_latent, y0, x0, size),
            };
            let (pred, trace) = params.forward(&x_t, &cond, None)?;
            let diff = pred.zip_map(&eps, |p, e| p - e);
            loss += diff.data.iter().map(|d| d * d).sum::<f32>();
            let dout = diff.map(|d| 2.0 * d / n_elem);
            let req = GradRequest { base: true, ..Default::default() };
            let g = params.backward(&dout, &trace, None, req)?.base.expect("requested");
            for (a, b) in acc.blocks_mut().into_iter().zip(g.blocks()) {
                crate::nn::add_assign(a, b.2);
            }
        }
        let loss = loss / n_elem;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("denoiser pretraining loss is {loss} at step {step}")));
        }
        losses.push(loss);
        let grads: Vec<Vec<f32>> = acc.blocks().into_iter().map(|(_, _, b)| b.to_vec()).collect();
        adam.update(params.blocks_mut(), grads.iter().map(|g| &g[..]).collect());
    }
    if !params.is_finite() {
        return Err(Error::numerical("denoiser weights became non-finite"));
    }
    let val_samples: Vec<DenoiserSample> = val.iter().map(|&i| samples[i].clone()).collect();
    let val_mse = validation_mse(&params, &sched, &val_samples, 4, config.seed.wrapping_add(1))?;
    let stats = PretrainStats {
        losses,
        val_mse,
        n_train: train.len(),
        n_val: val.len(),
    };
    let denoiser = Denoiser {
        params,
        schedule: sched,
        vocab: vocab.clone(),
        meta: DenoiserMeta {
            steps: config.steps,
            seed: config.seed,
            val_mse,
        },
    };
    Ok((denoiser, stats))
}
