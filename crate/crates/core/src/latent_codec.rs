//! Convolutional autoencoder mapping images to 4×-downsampled latents.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{
    conv2d_backward, sigmoid, silu_backward, silu_tensor, upconv2x2_backward, Adam, Conv, ConvSpec,
    UpConv,
};
use crate::tensor::{hash_blocks, Tensor};

pub use crate::imaging::upsample_x4;

const CODEC_KIND: [u8; 4] = *b"CDEC";
pub const LATENT_CHANNELS: usize = 4;
pub const CODEC_SCALE: usize = 4;

/// Encoded image: `channels × H/scale × W/scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage {
    pub data: Tensor<f32>,
    pub scale: usize,
    pub source_view: Option<usize>,
}

impl LatentImage {
    pub fn new(data: Tensor<f32>) -> Self {
        LatentImage {
            data,
            scale: CODEC_SCALE,
            source_view: None,
        }
    }

    pub fn with_view(mut self, view: usize) -> Self {
        self.source_view = Some(view);
        self
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.shape()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecMeta {
    pub epochs: usize,
    pub seed: u64,
    pub val_mse: f32,
    /// Per-channel statistics used to standardise raw encoder outputs.
    pub latent_mean: Vec<f32>,
    pub latent_std: Vec<f32>,
}

/// Encoder `3→32→64→64→C` (two stride-2 stages) and a mirrored decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecParams {
    enc: [Conv<f32>; 4],
    dec_in: Conv<f32>,
    up1: UpConv<f32>,
    up2: UpConv<f32>,
    dec_out: Conv<f32>,
    pub meta: CodecMeta,
}

struct EncodeTrace {
    input: Tensor<f32>,
    cols: [Vec<f32>; 4],
    pre: [Tensor<f32>; 3],
    act: [Tensor<f32>; 3],
}

struct DecodeTrace {
    z: Tensor<f32>,
    cols_in: Vec<f32>,
    pre: [Tensor<f32>; 3],
    act: [Tensor<f32>; 3],
    cols_out: Vec<f32>,
}

struct CodecGrads {
    enc: Vec<(Vec<f32>, Vec<f32>)>,
    dec: Vec<(Vec<f32>, Vec<f32>)>,
}

impl CodecParams {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = LATENT_CHANNELS;
        CodecParams {
            enc: [
                Conv::init(ConvSpec::same(3, 32, 3), 1.0, &mut rng),
                Conv::init(ConvSpec::down(32, 64), 1.0, &mut rng),
                Conv::init(ConvSpec::down(64, 64), 1.0, &mut rng),
                Conv::init(ConvSpec::same(64, c, 1), 0.5, &mut rng),
            ],
            dec_in: Conv::init(ConvSpec::same(c, 64, 3), 1.0, &mut rng),
            up1: UpConv::init(64, 64, 1.0, &mut rng),
            up2: UpConv::init(64, 32, 1.0, &mut rng),
            dec_out: Conv::init(ConvSpec::same(32, 3, 3), 0.5, &mut rng),
            meta: CodecMeta {
                seed,
                latent_mean: vec![0.0; c],
                latent_std: vec![1.0; c],
                ..Default::default()
            },
        }
    }

    fn blocks(&self) -> Vec<(&'static str, &[f32])> {
        let mut v: Vec<(&'static str, &[f32])> = Vec::new();
        let names = ["enc0", "enc1", "enc2", "enc3"];
        for (n, l) in names.iter().zip(&self.enc) {
            v.push((n, &l.weight.data));
            v.push((n, &l.bias));
        }
        v.push(("dec_in", &self.dec_in.weight.data));
        v.push(("dec_in", &self.dec_in.bias));
        v.push(("up1", &self.up1.weight.data));
        v.push(("up1", &self.up1.bias));
        v.push(("up2", &self.up2.weight.data));
        v.push(("up2", &self.up2.bias));
        v.push(("dec_out", &self.dec_out.weight.data));
        v.push(("dec_out", &self.dec_out.bias));
        v.push(("latent_mean", &self.meta.latent_mean));
        v.push(("latent_std", &self.meta.latent_std));
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = Vec::new();
        for l in self.enc.iter_mut() {
            v.push(&mut l.weight.data);
            v.push(&mut l.bias);
        }
        v.push(&mut self.dec_in.weight.data);
        v.push(&mut self.dec_in.bias);
        v.push(&mut self.up1.weight.data);
        v.push(&mut self.up1.bias);
        v.push(&mut self.up2.weight.data);
        v.push(&mut self.up2.bias);
        v.push(&mut self.dec_out.weight.data);
        v.push(&mut self.dec_out.bias);
        v
    }

    pub fn num_params(&self) -> usize {
        self.enc.iter().map(Conv::num_params).sum::<usize>()
            + self.dec_in.num_params()
            + self.up1.num_params()
            + self.up2.num_params()
            + self.dec_out.num_params()
    }

    pub fn hash(&self) -> String {
        hash_blocks(self.blocks())
    }

    fn check_image(&self, w: usize, h: usize) -> Result<()> {
        if w == 0 || h == 0 || !w.is_multiple_of(CODEC_SCALE) || !h.is_multiple_of(CODEC_SCALE) {
            return Err(Error::shape(format!(
                "image {w}×{h} is not divisible by the codec scale {CODEC_SCALE}"
            )));
        }
        Ok(())
    }

    fn encode_trace(&self, x: Tensor<f32>) -> (Tensor<f32>, EncodeTrace) {
        let (p0, c0) = self.enc[0].forward(&x);
        let a0 = silu_tensor(&p0);
        let (p1, c1) = self.enc[1].forward(&a0);
        let a1 = silu_tensor(&p1);
        let (p2, c2) = self.enc[2].forward(&a1);
        let a2 = silu_tensor(&p2);
        let (z, c3) = self.enc[3].forward(&a2);
        (
            z,
            EncodeTrace {
                input: x,
                cols: [c0, c1, c2, c3],
                pre: [p0, p1, p2],
                act: [a0, a1, a2],
            },
        )
    }

    fn decode_trace(&self, z: Tensor<f32>) -> (Tensor<f32>, DecodeTrace) {
        let (p0, cols_in) = self.dec_in.forward(&z);
        let a0 = silu_tensor(&p0);
        let p1 = self.up1.forward(&a0);
        let a1 = silu_tensor(&p1);
        let p2 = self.up2.forward(&a1);
        let a2 = silu_tensor(&p2);
        let (logits, cols_out) = self.dec_out.forward(&a2);
        let y = logits.map(sigmoid);
        (
            y,
            DecodeTrace {
                z,
                cols_in,
                pre: [p0, p1, p2],
                act: [a0, a1, a2],
                cols_out,
            },
        )
    }

    fn normalize(&self, mut z: Tensor<f32>) -> Tensor<f32> {
        for c in 0..z.channels {
            let (m, s) = (self.meta.latent_mean[c], self.meta.latent_std[c]);
            z.channel_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        z
    }

    fn denormalize(&self, mut z: Tensor<f32>) -> Tensor<f32> {
        for c in 0..z.channels {
            let (m, s) = (self.meta.latent_mean[c], self.meta.latent_std[c]);
            z.channel_mut(c).iter_mut().for_each(|v| *v = *v * s + m);
        }
        z
    }

    /// Encoder activations after each nonlinearity, used by the perceptual proxy.
    pub fn features(&self, image: &Image) -> Result<Vec<Tensor<f32>>> {
        self.check_image(image.width, image.height)?;
        let (_, tr) = self.encode_trace(image.to_tensor());
        Ok(tr.act.into())
    }

    /// Backward through the decoder given the gradient w.r.t. its output image.
    /// Returns parameter gradients and the gradient w.r.t. the raw latent.
    fn decode_backward(
        &self,
        tr: &DecodeTrace,
        y: &Tensor<f32>,
        dy: &Tensor<f32>,
    ) -> (Vec<(Vec<f32>, Vec<f32>)>, Tensor<f32>) {
        let dlogit = dy.zip_map(y, |g, s| g * s * (1.0 - s));
        let (h2, w2) = (tr.act[2].height, tr.act[2].width);
        let g_out = conv2d_backward(&dlogit, &tr.cols_out, &self.dec_out.weight, &self.dec_out.spec, (h2, w2), true, true);
        let d2 = silu_backward(g_out.input.as_ref().unwrap(), &tr.pre[2]);
        let g_up2 = upconv2x2_backward(&d2, &tr.act[1], &self.up2.weight, true, true);
        let d1 = silu_backward(g_up2.input.as_ref().unwrap(), &tr.pre[1]);
        let g_up1 = upconv2x2_backward(&d1, &tr.act[0], &self.up1.weight, true, true);
        let d0 = silu_backward(g_up1.input.as_ref().unwrap(), &tr.pre[0]);
        let g_in = conv2d_backward(&d0, &tr.cols_in, &self.dec_in.weight, &self.dec_in.spec, (tr.z.height, tr.z.width), true, true);
        let grads = vec![
            (g_in.weight.unwrap().data, g_in.bias),
            (g_up1.weight.unwrap().data, g_up1.bias),
            (g_up2.weight.unwrap().data, g_up2.bias),
            (g_out.weight.unwrap().data, g_out.bias),
        ];
        (grads, g_in.input.unwrap())
    }

    fn encode_backward(&self, tr: &EncodeTrace, dz: &Tensor<f32>) -> Vec<(Vec<f32>, Vec<f32>)> {
        let mut grads = Vec::with_capacity(4);
        let mut upstream = dz.clone();
        for l in (0..4).rev() {
            let input = if l == 0 { &tr.input } else { &tr.act[l - 1] };
            let g = conv2d_backward(
                &upstream,
                &tr.cols[l],
                &self.enc[l].weight,
                &self.enc[l].spec,
                (input.height, input.width),
                true,
                l > 0,
            );
            grads.push((g.weight.unwrap().data, g.bias));
            if l > 0 {
                upstream = silu_backward(g.input.as_ref().unwrap(), &tr.pre[l - 1]);
            }
        }
        grads.reverse();
        grads
    }

    /// Squared-error reconstruction gradient for one image, summed into a loss.
    fn reconstruction_grads(&self, image: &Tensor<f32>, weight: f32) -> (f32, CodecGrads) {
        let (z, etr) = self.encode_trace(image.clone());
        let (y, dtr) = self.decode_trace(z);
        let n = y.len() as f32;
        let loss: f32 = y.data.iter().zip(&image.data).map(|(a, b)| (a - b) * (a - b)).sum();
        let dy = y.zip_map(image, |a, b| 2.0 * (a - b) / n * weight);
        let (dec, dz) = self.decode_backward(&dtr, &y, &dy);
        let enc = self.encode_backward(&etr, &dz);
        (loss / n, CodecGrads { enc, dec })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            CODEC_KIND,
            serde_json::json!({ "meta": self.meta, "hash": self.hash() }),
        );
        let names = [
            "enc0", "enc1", "enc2", "enc3", "dec_in", "up1", "up2", "dec_out",
        ];
        let params: Vec<(&[f32], &[f32], Vec<usize>)> = self
            .enc
            .iter()
            .map(|l| (&l.weight.data[..], &l.bias[..], vec![l.weight.rows, l.weight.cols]))
            .chain([
                (&self.dec_in.weight.data[..], &self.dec_in.bias[..], vec![self.dec_in.weight.rows, self.dec_in.weight.cols]),
                (&self.up1.weight.data[..], &self.up1.bias[..], vec![self.up1.weight.rows, self.up1.weight.cols]),
                (&self.up2.weight.data[..], &self.up2.bias[..], vec![self.up2.weight.rows, self.up2.weight.cols]),
                (&self.dec_out.weight.data[..], &self.dec_out.bias[..], vec![self.dec_out.weight.rows, self.dec_out.weight.cols]),
            ])
            .collect();
        for (name, (w, b, dims)) in names.iter().zip(params) {
            c.push(format!("{name}.weight"), dims, w.to_vec());
            c.push(format!("{name}.bias"), vec![b.len()], b.to_vec());
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, CODEC_KIND)?;
        let meta: CodecMeta = serde_json::from_value(c.meta["meta"].clone())
            .map_err(|e| Error::ingestion(path, format!("codec metadata: {e}")))?;
        let mut codec = CodecParams::init(0);
        codec.meta = meta;
        let names = [
            "enc0", "enc1", "enc2", "enc3", "dec_in", "up1", "up2", "dec_out",
        ];
        let blocks = codec.blocks_mut();
        for (i, block) in blocks.into_iter().enumerate() {
            let name = names[i / 2];
            let key = if i % 2 == 0 { format!("{name}.weight") } else { format!("{name}.bias") };
            block.copy_from_slice(c.require(&key, block.len(), path)?);
        }
        if codec.meta.latent_mean.len() != LATENT_CHANNELS || codec.meta.latent_std.len() != LATENT_CHANNELS {
            return Err(Error::ingestion(path, "latent statistics have the wrong length"));
        }
        if let Some(h) = c.meta["hash"].as_str() {
            if h != codec.hash() {
                return Err(Error::ingestion(path, "codec hash does not match its weights"));
            }
        }
        Ok(codec)
    }
}

pub fn encode(image: &Image, codec: &CodecParams) -> Result<LatentImage> {
    codec.check_image(image.width, image.height)?;
    let (z, _) = codec.encode_trace(image.to_tensor());
    Ok(LatentImage::new(codec.normalize(z)))
}

pub fn decode(latent: &LatentImage, codec: &CodecParams) -> Result<Image> {
    if latent.data.channels != LATENT_CHANNELS {
        return Err(Error::shape(format!(
            "latent has {} channels, codec expects {LATENT_CHANNELS}",
            latent.data.channels
        )));
    }
    let (y, _) = codec.decode_trace(codec.denormalize(latent.data.clone()));
    Image::from_tensor(&y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    /// Side of the square training crops, a multiple of 4.
    pub crop: usize,
    pub lr: f64,
    /// Learning rate multiplier reached at the last epoch (exponential decay).
    pub lr_decay: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub seed: u64,
    /// Fraction of images held out for validation.
    pub val_fraction: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            epochs: 40,
            steps_per_epoch: 150,
            batch: 8,
            crop: 32,
            lr: 2e-3,
            lr_decay: 0.1,
            patience: 5,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

fn crop(image: &Image, x0: usize, y0: usize, size: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(3, size, size);
    for c in 0..3 {
        let ch = t.channel_mut(c);
        for y in 0..size {
            for x in 0..size {
                ch[y * size + x] = image.data[((y0 + y) * image.width + x0 + x) * 3 + c];
            }
        }
    }
    t
}

/// Mean squared reconstruction error over whole images.
pub fn reconstruction_mse(codec: &CodecParams, images: &[Image]) -> Result<f32> {
    let mut total = 0.0f64;
    for img in images {
        let rec = decode(&encode(img, codec)?, codec)?;
        let se: f64 = rec.data.iter().zip(&img.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        total += se / img.data.len() as f64;
    }
    Ok((total / images.len().max(1) as f64) as f32)
}

/// Trains the autoencoder on random crops with Adam on the squared error,
/// then records per-channel latent statistics over the training images.
/// Validation is the trailing `val_fraction` of the images. Training stops
/// after `patience` epochs without improvement and returns the parameters
/// with the best validation error.
pub fn train_codec(images: &[Image], config: &CodecTrainConfig) -> Result<CodecParams> {
    if images.len() < 2 {
        return Err(Error::config("train_codec needs at least two images"));
    }
    if config.crop == 0 || !config.crop.is_multiple_of(CODEC_SCALE) {
        return Err(Error::config("codec crop size must be a positive multiple of 4"));
    }
    for img in images {
        if img.width < config.crop || img.height < config.crop {
            return Err(Error::config("training image smaller than the crop size"));
        }
        codec_check(img)?;
    }
    let n_val = ((images.len() as f64 * config.val_fraction).round() as usize).clamp(1, images.len() - 1);
    let (train, val) = images.split_at(images.len() - n_val);
    let mut codec = CodecParams::init(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut adam = Adam::<f32>::new(config.lr);
    let mut best = (reconstruction_mse(&codec, val)?, codec.clone(), 0);
    let mut stale = 0;
    for epoch in 0..config.epochs {
        adam.lr = config.lr * config.lr_decay.powf(epoch as f64 / config.epochs.saturating_sub(1).max(1) as f64);
        for _ in 0..config.steps_per_epoch {
            let mut acc: Option<CodecGrads> = None;
            for _ in 0..config.batch {
                let img = &train[rng.random_range(0..train.len())];
                let x0 = rng.random_range(0..=(img.width - config.crop) / 4) * 4;
                let y0 = rng.random_range(0..=(img.height - config.crop) / 4) * 4;
                let t = crop(img, x0, y0, config.crop);
                let (loss, g) = codec.reconstruction_grads(&t, 1.0 / config.batch as f32);
                if !loss.is_finite() {
                    return Err(Error::numerical("non-finite codec reconstruction loss"));
                }
                acc = Some(match acc {
                    None => g,
                    Some(mut a) => {
                        for (dst, src) in a.enc.iter_mut().chain(a.dec.iter_mut()).zip(g.enc.iter().chain(&g.dec)) {
                            dst.0.iter_mut().zip(&src.0).for_each(|(x, y)| *x += y);
                            dst.1.iter_mut().zip(&src.1).for_each(|(x, y)| *x += y);
                        }
                        a
                    }
                });
            }
            let g = acc.unwrap();
            let grads: Vec<&[f32]> = g
                .enc
                .iter()
                .chain(&g.dec)
                .flat_map(|(w, b)| [&w[..], &b[..]])
                .collect();
            adam.update(codec.blocks_mut(), grads);
        }
        let val_mse = reconstruction_mse(&codec, val)?;
        if val_mse < best.0 {
            best = (val_mse, codec.clone(), epoch + 1);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (val_mse, mut codec, epochs_run) = best;
    // Standardise latents over the training set.
    let c = LATENT_CHANNELS;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    let mut count = 0usize;
    for img in train {
        let (z, _) = codec.encode_trace(img.to_tensor());
        for ch in 0..c {
            for &v in z.channel(ch) {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        count += z.plane();
    }
    codec.meta.latent_mean = (0..c).map(|ch| (sum[ch] / count as f64) as f32).collect();
    codec.meta.latent_std = (0..c)
        .map(|ch| {
            let m = sum[ch] / count as f64;
            ((sq[ch] / count as f64 - m * m).max(1e-8).sqrt()) as f32
        })
        .collect();
    codec.meta.epochs = epochs_run;
    codec.meta.val_mse = val_mse;
    Ok(codec)
}

fn codec_check(img: &Image) -> Result<()> {
    if !img.width.is_multiple_of(CODEC_SCALE) || !img.height.is_multiple_of(CODEC_SCALE) {
        return Err(Error::shape(format!(
            "image {}×{} is not divisible by the codec scale",
            img.width, img.height
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = 0.5 + 0.4 * ((x as f32 * 0.4).sin() * (y as f32 * 0.3).cos());
                img.set_pixel(x, y, [v, 1.0 - v, 0.5]);
            }
        }
        img
    }

    #[test]
    fn shapes_and_range() {
        let codec = CodecParams::init(3);
        let img = test_image(32, 16);
        let z = encode(&img, &codec).unwrap();
        assert_eq!(z.shape(), (4, 4, 8));
        let out = decode(&z, &codec).unwrap();
        assert_eq!(out.dims(), (32, 16));
        assert!(out.in_unit_range());
        let zero = LatentImage::new(Tensor::zeros(4, 8, 8));
        assert!(decode(&zero, &codec).unwrap().in_unit_range());
        assert!(encode(&test_image(30, 16), &codec).is_err());
        assert!(decode(&LatentImage::new(Tensor::zeros(3, 8, 8)), &codec).is_err());
        assert!(codec.num_params() > 50_000 && codec.num_params() < 150_000);
    }

    #[test]
    fn reconstruction_gradient_matches_finite_difference() {
        let codec = CodecParams::init(1);
        let img = test_image(8, 8).to_tensor::<f32>();
        let (_, g) = codec.reconstruction_grads(&img, 1.0);
        let loss_with = |c: &CodecParams| -> f64 {
            let (z, _) = c.encode_trace(img.clone());
            let (y, _) = c.decode_trace(z);
            y.data.iter().zip(&img.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / y.len() as f64
        };
        // Check one weight in the first encoder layer and one in the last decoder layer.
        for (block, idx, analytic) in [(0usize, 5usize, g.enc[0].0[5]), (14, 7, g.dec[3].0[7])] {
            let h = 1e-2f32;
            let mut p = codec.clone();
            p.blocks_mut()[block][idx] += h;
            let up = loss_with(&p);
            let mut m = codec.clone();
            m.blocks_mut()[block][idx] -= h;
            let down = loss_with(&m);
            let fd = (up - down) / (2.0 * h as f64);
            let rel = (fd - analytic as f64).abs() / fd.abs().max(1e-4);
            assert!(rel < 2e-2, "block {block}: fd {fd} analytic {analytic}");
        }
    }

    #[test]
    fn container_round_trip_preserves_hash() {
        let codec = CodecParams::init(9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("codec.bin");
        codec.save(&p).unwrap();
        let back = CodecParams::load(&p).unwrap();
        assert_eq!(back.hash(), codec.hash());
        assert_eq!(back, codec);
    }
}
