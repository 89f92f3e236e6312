use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{NoiseSchedule, PromptVocab};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::lora::{effective_weight, lora_grads, Adaptable, AdapterSet};
use crate::nn::{
    add_assign, add_channel_bias, channel_sums, conv2d_backward, conv2d_forward, he_matrix, linear_backward,
    linear_forward, silu, silu_backward, silu_grad, silu_tensor, upconv2x2_backward, Conv, ConvSpec, Linear, UpConv,
};
use crate::tensor::{hash_blocks, Matrix, Real, Tensor};

const DENOISER_KIND: [u8; 4] = *b"DNSR";

const TIME2: &str = "time.lin2";
const MID: &str = "mid.conv";
const PROJ: [&str; 5] = ["proj.1", "proj.2", "proj.3", "proj.4", "proj.5"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub widths: [usize; 3],
    pub time_dim: usize,
    pub emb_dim: usize,
    pub n_prompts: usize,
    pub n_classes: usize,
    pub t_max: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            widths: [32, 64, 128],
            time_dim: 64,
            emb_dim: 128,
            n_prompts: 16,
            n_classes: 8,
            t_max: 1000,
        }
    }
}

/// Timestep, prompt row, class row and the encoded LR image.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning<T> {
    pub t: usize,
    pub prompt_id: usize,
    pub class_id: usize,
    pub lr_latent: Tensor<T>,
}

impl<T: Real> Conditioning<T> {
    pub fn cast<U: Real>(&self) -> Conditioning<U> {
        Conditioning {
            t: self.t,
            prompt_id: self.prompt_id,
            class_id: self.class_id,
            lr_latent: self.lr_latent.cast(),
        }
    }
}

/// Three-level UNet over `concat(x_t, lr_latent)` with a shared embedding of
/// timestep, prompt and class injected as per-channel biases.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<T> {
    pub config: DenoiserConfig,
    conv_in: Conv<T>,
    down1: Conv<T>,
    down2: Conv<T>,
    mid: Conv<T>,
    up2: UpConv<T>,
    conv_u2: Conv<T>,
    up1: UpConv<T>,
    conv_u1: Conv<T>,
    conv_out: Conv<T>,
    time1: Linear<T>,
    time2: Linear<T>,
    proj: Vec<Linear<T>>,
    prompt_emb: Matrix<T>,
    class_emb: Matrix<T>,
}

/// Activations kept for [`DenoiserParams::backward`].
pub struct ForwardTrace<T> {
    hw: (usize, usize),
    prompt_id: usize,
    class_id: usize,
    temb: Vec<T>,
    h1: Vec<T>,
    a1t: Vec<T>,
    e: Vec<T>,
    se: Vec<T>,
    cols0: Vec<T>,
    p0: Tensor<T>,
    cols1: Vec<T>,
    p1: Tensor<T>,
    cols2: Vec<T>,
    p2: Tensor<T>,
    cols_m: Vec<T>,
    m: Tensor<T>,
    a3: Tensor<T>,
    cols4: Vec<T>,
    p4: Tensor<T>,
    a4: Tensor<T>,
    cols5: Vec<T>,
    p5: Tensor<T>,
    cols_out: Vec<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub base: bool,
    pub adapters: bool,
    pub input: bool,
}

pub struct DenoiserGrads<T> {
    /// Same layout as the parameters.
    pub base: Option<DenoiserParams<T>>,
    /// `(dA, dB)` per adapter, in adapter-set order.
    pub adapters: Vec<(Matrix<T>, Matrix<T>)>,
    /// Gradient with respect to `x_t` only.
    pub input: Option<Tensor<T>>,
}

fn timestep_embedding<T: Real>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut v = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        v[i] = T::lit(arg.sin());
        v[half + i] = T::lit(arg.cos());
    }
    v
}

fn split_channels<T: Real>(x: &Tensor<T>, n: usize) -> (Tensor<T>, Tensor<T>) {
    let plane = x.plane();
    let first = Tensor {
        channels: n,
        height: x.height,
        width: x.width,
        data: x.data[..n * plane].to_vec(),
    };
    let second = Tensor {
        channels: x.channels - n,
        height: x.height,
        width: x.width,
        data: x.data[n * plane..].to_vec(),
    };
    (first, second)
}

fn matrix_cast<T: Real, U: Real>(m: &Matrix<T>) -> Matrix<U> {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|v| U::lit(v.as_f64())).collect(),
    }
}

fn vec_cast<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::lit(x.as_f64())).collect()
}

impl<T: Real> DenoiserParams<T> {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let c = config.latent_channels;
        let [w0, w1, w2] = config.widths;
        if c == 0 || w0 == 0 || w1 == 0 || w2 == 0 || config.time_dim < 2 || config.emb_dim == 0 {
            return Err(Error::config("denoiser dimensions must be positive"));
        }
        if config.n_prompts == 0 || config.n_classes == 0 {
            return Err(Error::config("denoiser needs at least one prompt and one class row"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.emb_dim;
        let table = |rows: usize, rng: &mut ChaCha8Rng| he_matrix(rows, e, 1, 0.1, rng);
        Ok(DenoiserParams {
            conv_in: Conv::init(ConvSpec::same(2 * c, w0, 3), 1.0, &mut rng),
            down1: Conv::init(ConvSpec::down(w0, w1), 1.0, &mut rng),
            down2: Conv::init(ConvSpec::down(w1, w2), 1.0, &mut rng),
            mid: Conv::init(ConvSpec::same(w2, w2, 3), 0.5, &mut rng),
            up2: UpConv::init(w2, w1, 1.0, &mut rng),
            conv_u2: Conv::init(ConvSpec::same(2 * w1, w1, 3), 1.0, &mut rng),
            up1: UpConv::init(w1, w0, 1.0, &mut rng),
            conv_u1: Conv::init(ConvSpec::same(2 * w0, w0, 3), 1.0, &mut rng),
            conv_out: Conv::init(ConvSpec::same(w0, c, 3), 0.1, &mut rng),
            time1: Linear::init(config.time_dim, e, 1.0, &mut rng),
            time2: Linear::init(e, e, 1.0, &mut rng),
            proj: [w0, w1, w2, w1, w0]
                .iter()
                .map(|&out| Linear::init(e, out, 0.5, &mut rng))
                .collect(),
            prompt_emb: table(config.n_prompts, &mut rng),
            class_emb: table(config.n_classes, &mut rng),
            config,
        })
    }

    /// Every parameter block with its name and shape, in a fixed order.
    pub fn blocks(&self) -> Vec<(String, Vec<usize>, &[T])> {
        fn push<'a, T>(v: &mut Vec<(String, Vec<usize>, &'a [T])>, name: &str, w: &'a Matrix<T>, b: &'a [T]) {
            v.push((format!("{name}.weight"), vec![w.rows, w.cols], &w.data[..]));
            v.push((format!("{name}.bias"), vec![b.len()], b));
        }
        let mut v: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        push(&mut v, "conv_in", &self.conv_in.weight, &self.conv_in.bias);
        push(&mut v, "down1", &self.down1.weight, &self.down1.bias);
        push(&mut v, "down2", &self.down2.weight, &self.down2.bias);
        push(&mut v, MID, &self.mid.weight, &self.mid.bias);
        push(&mut v, "up2", &self.up2.weight, &self.up2.bias);
        push(&mut v, "conv_u2", &self.conv_u2.weight, &self.conv_u2.bias);
        push(&mut v, "up1", &self.up1.weight, &self.up1.bias);
        push(&mut v, "conv_u1", &self.conv_u1.weight, &self.conv_u1.bias);
        push(&mut v, "conv_out", &self.conv_out.weight, &self.conv_out.bias);
        push(&mut v, "time.lin1", &self.time1.weight, &self.time1.bias);
        push(&mut v, TIME2, &self.time2.weight, &self.time2.bias);
        for (name, l) in PROJ.iter().zip(&self.proj) {
            push(&mut v, name, &l.weight, &l.bias);
        }
        v.push(("prompt_emb".into(), vec![self.prompt_emb.rows, self.prompt_emb.cols], &self.prompt_emb.data));
        v.push(("class_emb".into(), vec![self.class_emb.rows, self.class_emb.cols], &self.class_emb.data));
        v
    }

    /// Mutable view of [`Self::blocks`], same order.
    pub fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        for conv in [
            &mut self.conv_in,
            &mut self.down1,
            &mut self.down2,
            &mut self.mid,
        ] {
            v.push(&mut conv.weight.data);
            v.push(&mut conv.bias);
        }
        v.push(&mut self.up2.weight.data);
        v.push(&mut self.up2.bias);
        v.push(&mut self.conv_u2.weight.data);
        v.push(&mut self.conv_u2.bias);
        v.push(&mut self.up1.weight.data);
        v.push(&mut self.up1.bias);
        v.push(&mut self.conv_u1.weight.data);
        v.push(&mut self.conv_u1.bias);
        v.push(&mut self.conv_out.weight.data);
        v.push(&mut self.conv_out.bias);
        v.push(&mut self.time1.weight.data);
        v.push(&mut self.time1.bias);
        v.push(&mut self.time2.weight.data);
        v.push(&mut self.time2.bias);
        for l in self.proj.iter_mut() {
            v.push(&mut l.weight.data);
            v.push(&mut l.bias);
        }
        v.push(&mut self.prompt_emb.data);
        v.push(&mut self.class_emb.data);
        v
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.fill(T::zero());
        }
        z
    }

    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        let conv = |c: &Conv<T>| Conv {
            spec: c.spec,
            weight: matrix_cast(&c.weight),
            bias: vec_cast(&c.bias),
        };
        let up = |u: &UpConv<T>| UpConv {
            weight: matrix_cast(&u.weight),
            bias: vec_cast(&u.bias),
        };
        let lin = |l: &Linear<T>| Linear {
            weight: matrix_cast(&l.weight),
            bias: vec_cast(&l.bias),
        };
        DenoiserParams {
            config: self.config.clone(),
            conv_in: conv(&self.conv_in),
            down1: conv(&self.down1),
            down2: conv(&self.down2),
            mid: conv(&self.mid),
            up2: up(&self.up2),
            conv_u2: conv(&self.conv_u2),
            up1: up(&self.up1),
            conv_u1: conv(&self.conv_u1),
            conv_out: conv(&self.conv_out),
            time1: lin(&self.time1),
            time2: lin(&self.time2),
            proj: self.proj.iter().map(lin).collect(),
            prompt_emb: matrix_cast(&self.prompt_emb),
            class_emb: matrix_cast(&self.class_emb),
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, _, b)| b.len()).sum()
    }

    pub fn hash(&self) -> String {
        let blocks = self.blocks();
        hash_blocks(blocks.iter().map(|(n, _, b)| (n.as_str(), *b)))
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, _, b)| b.iter().all(|v| v.is_finite()))
    }

    fn eff<'a>(&self, id: &str, base: &'a Matrix<T>, adapters: Option<&AdapterSet<T>>) -> Result<Cow<'a, Matrix<T>>> {
        match adapters.and_then(|s| s.get(id)) {
            Some(a) => Ok(Cow::Owned(effective_weight(base, a)?)),
            None => Ok(Cow::Borrowed(base)),
        }
    }

    fn check_inputs(&self, x_t: &Tensor<T>, cond: &Conditioning<T>) -> Result<()> {
        let cfg = &self.config;
        if x_t.channels != cfg.latent_channels {
            return Err(Error::shape(format!(
                "x_t has {} channels, denoiser expects {}",
                x_t.channels, cfg.latent_channels
            )));
        }
        if x_t.height == 0 || x_t.width == 0 || !x_t.height.is_multiple_of(4) || !x_t.width.is_multiple_of(4) {
            return Err(Error::shape(format!(
                "latent {}×{} must have positive sides divisible by 4",
                x_t.height, x_t.width
            )));
        }
        x_t.ensure_same_shape(&cond.lr_latent, "LR conditioning latent")?;
        if cond.t > cfg.t_max {
            return Err(Error::config(format!("timestep {} exceeds {}", cond.t, cfg.t_max)));
        }
        if cond.prompt_id >= cfg.n_prompts || cond.class_id >= cfg.n_classes {
            return Err(Error::config(format!(
                "prompt {} / class {} outside the embedding tables ({} / {})",
                cond.prompt_id, cond.class_id, cfg.n_prompts, cfg.n_classes
            )));
        }
        Ok(())
    }

    /// Noise prediction. `adapters = None` is the frozen path.
    pub fn forward(
        &self,
        x_t: &Tensor<T>,
        cond: &Conditioning<T>,
        adapters: Option<&AdapterSet<T>>,
    ) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        self.check_inputs(x_t, cond)?;
        let cfg = &self.config;
        let temb = timestep_embedding::<T>(cond.t, cfg.time_dim);
        let h1 = self.time1.forward(&temb);
        let a1t: Vec<T> = h1.iter().map(|&v| silu(v)).collect();
        let w2 = self.eff(TIME2, &self.time2.weight, adapters)?;
        let h2 = linear_forward(&a1t, &w2, &self.time2.bias);
        let e: Vec<T> = (0..cfg.emb_dim)
            .map(|i| h2[i] + self.prompt_emb.get(cond.prompt_id, i) + self.class_emb.get(cond.class_id, i))
            .collect();
        let se: Vec<T> = e.iter().map(|&v| silu(v)).collect();
        let mut pb = Vec::with_capacity(5);
        for (id, l) in PROJ.iter().zip(&self.proj) {
            let w = self.eff(id, &l.weight, adapters)?;
            pb.push(linear_forward(&se, &w, &l.bias));
        }

        let x = x_t.concat_channels(&cond.lr_latent)?;
        let (mut p0, cols0) = self.conv_in.forward(&x);
        add_channel_bias(&mut p0, &pb[0]);
        let a0 = silu_tensor(&p0);
        let (mut p1, cols1) = self.down1.forward(&a0);
        add_channel_bias(&mut p1, &pb[1]);
        let a1 = silu_tensor(&p1);
        let (mut p2, cols2) = self.down2.forward(&a1);
        add_channel_bias(&mut p2, &pb[2]);
        let a2 = silu_tensor(&p2);
        let wm = self.eff(MID, &self.mid.weight, adapters)?;
        let (m, cols_m) = conv2d_forward(&a2, &wm, &self.mid.bias, &self.mid.spec);
        let a3 = a2.zip_map(&m, |a, v| a + silu(v));
        let u2 = self.up2.forward(&a3);
        let (mut p4, cols4) = self.conv_u2.forward(&u2.concat_channels(&a1)?);
        add_channel_bias(&mut p4, &pb[3]);
        let a4 = silu_tensor(&p4);
        let u1 = self.up1.forward(&a4);
        let (mut p5, cols5) = self.conv_u1.forward(&u1.concat_channels(&a0)?);
        add_channel_bias(&mut p5, &pb[4]);
        let a5 = silu_tensor(&p5);
        let (out, cols_out) = self.conv_out.forward(&a5);
        let trace = ForwardTrace {
            hw: (x_t.height, x_t.width),
            prompt_id: cond.prompt_id,
            class_id: cond.class_id,
            temb,
            h1,
            a1t,
            e,
            se,
            cols0,
            p0,
            cols1,
            p1,
            cols2,
            p2,
            cols_m,
            m,
            a3,
            cols4,
            p4,
            a4,
            cols5,
            p5,
            cols_out,
        };
        Ok((out, trace))
    }

    pub fn predict(&self, x_t: &Tensor<T>, cond: &Conditioning<T>, adapters: Option<&AdapterSet<T>>) -> Result<Tensor<T>> {
        Ok(self.forward(x_t, cond, adapters)?.0)
    }

    /// Reverse pass of [`Self::forward`] for upstream gradient `dout`.
    /// `adapters` must be the set used in the forward pass.
    pub fn backward(
        &self,
        dout: &Tensor<T>,
        tr: &ForwardTrace<T>,
        adapters: Option<&AdapterSet<T>>,
        req: GradRequest,
    ) -> Result<DenoiserGrads<T>> {
        let cfg = &self.config;
        let adapted = |id: &str| req.adapters && adapters.is_some_and(|a| a.get(id).is_some());
        let base = req.base;
        let (h, w) = tr.hw;
        let [w0, w1, _] = cfg.widths;
        let mut g = base.then(|| self.zeros_like());
        let mut dwp: BTreeMap<&str, Matrix<T>> = BTreeMap::new();
        let mut d_pb: Vec<Vec<T>> = vec![Vec::new(); 5];

        let mut go = conv2d_backward(dout, &tr.cols_out, &self.conv_out.weight, &self.conv_out.spec, (h, w), base, true);
        let d_p5 = silu_backward(&go.input.take().expect("requested"), &tr.p5);
        d_pb[4] = channel_sums(&d_p5);
        let mut g5 = conv2d_backward(&d_p5, &tr.cols5, &self.conv_u1.weight, &self.conv_u1.spec, (h, w), base, true);
        let (d_u1, mut d_a0) = split_channels(&g5.input.take().expect("requested"), w0);
        let gu1 = upconv2x2_backward(&d_u1, &tr.a4, &self.up1.weight, base, true);
        let d_p4 = silu_backward(&gu1.input.expect("requested"), &tr.p4);
        d_pb[3] = channel_sums(&d_p4);
        let mut g4 = conv2d_backward(&d_p4, &tr.cols4, &self.conv_u2.weight, &self.conv_u2.spec, (h / 2, w / 2), base, true);
        let (d_u2, mut d_a1) = split_channels(&g4.input.take().expect("requested"), w1);
        let gu2 = upconv2x2_backward(&d_u2, &tr.a3, &self.up2.weight, base, true);
        let mut d_a2 = gu2.input.expect("requested");
        let d_m = silu_backward(&d_a2, &tr.m);
        let wm = self.eff(MID, &self.mid.weight, adapters)?;
        let mut gm = conv2d_backward(&d_m, &tr.cols_m, &wm, &self.mid.spec, (h / 4, w / 4), base || adapted(MID), true);
        add_assign(&mut d_a2.data, &gm.input.take().expect("requested").data);
        let d_p2 = silu_backward(&d_a2, &tr.p2);
        d_pb[2] = channel_sums(&d_p2);
        let mut g2 = conv2d_backward(&d_p2, &tr.cols2, &self.down2.weight, &self.down2.spec, (h / 2, w / 2), base, true);
        add_assign(&mut d_a1.data, &g2.input.take().expect("requested").data);
        let d_p1 = silu_backward(&d_a1, &tr.p1);
        d_pb[1] = channel_sums(&d_p1);
        let mut g1 = conv2d_backward(&d_p1, &tr.cols1, &self.down1.weight, &self.down1.spec, (h, w), base, true);
        add_assign(&mut d_a0.data, &g1.input.take().expect("requested").data);
        let d_p0 = silu_backward(&d_a0, &tr.p0);
        d_pb[0] = channel_sums(&d_p0);
        let mut g0 = conv2d_backward(&d_p0, &tr.cols0, &self.conv_in.weight, &self.conv_in.spec, (h, w), base, req.input);
        let input = g0.input.take().map(|t| t.take_channels(cfg.latent_channels));

        if adapted(MID) {
            dwp.insert(MID, gm.weight.clone().expect("requested"));
        }
        if let Some(g) = g.as_mut() {
            let set = |dst: &mut Conv<T>, src: crate::nn::ConvGrads<T>| {
                dst.weight = src.weight.expect("requested");
                dst.bias = src.bias;
            };
            set(&mut g.conv_out, go);
            set(&mut g.conv_u1, g5);
            set(&mut g.conv_u2, g4);
            set(&mut g.mid, gm);
            set(&mut g.down2, g2);
            set(&mut g.down1, g1);
            set(&mut g.conv_in, g0);
            g.up1.weight = gu1.weight.expect("requested");
            g.up1.bias = gu1.bias;
            g.up2.weight = gu2.weight.expect("requested");
            g.up2.bias = gu2.bias;
        }

        let embedding_needed = base || adapted(TIME2) || PROJ.iter().any(|id| adapted(id));
        if embedding_needed {
            let mut d_se = vec![T::zero(); cfg.emb_dim];
            for (k, (id, l)) in PROJ.iter().zip(&self.proj).enumerate() {
                let wp = self.eff(id, &l.weight, adapters)?;
                let (dw, db, dx) = linear_backward(&d_pb[k], &tr.se, &wp);
                add_assign(&mut d_se, &dx);
                if adapted(id) {
                    dwp.insert(id, dw.clone());
                }
                if let Some(g) = g.as_mut() {
                    g.proj[k].weight = dw;
                    g.proj[k].bias = db;
                }
            }
            let d_e: Vec<T> = d_se.iter().zip(&tr.e).map(|(&d, &x)| d * silu_grad(x)).collect();
            let w2 = self.eff(TIME2, &self.time2.weight, adapters)?;
            let (dw2, db2, d_a1t) = linear_backward(&d_e, &tr.a1t, &w2);
            if adapted(TIME2) {
                dwp.insert(TIME2, dw2.clone());
            }
            if let Some(g) = g.as_mut() {
                let e = cfg.emb_dim;
                add_assign(&mut g.prompt_emb.data[tr.prompt_id * e..(tr.prompt_id + 1) * e], &d_e);
                add_assign(&mut g.class_emb.data[tr.class_id * e..(tr.class_id + 1) * e], &d_e);
                g.time2.weight = dw2;
                g.time2.bias = db2;
                let d_h1: Vec<T> = d_a1t.iter().zip(&tr.h1).map(|(&d, &x)| d * silu_grad(x)).collect();
                let (dw1, db1, _) = linear_backward(&d_h1, &tr.temb, &self.time1.weight);
                g.time1.weight = dw1;
                g.time1.bias = db1;
            }
        }

        let mut lora = Vec::new();
        if req.adapters {
            if let Some(set) = adapters {
                for a in set.iter() {
                    let d = dwp.get(a.layer_id.as_str()).ok_or_else(|| {
                        Error::config(format!("adapter on '{}' has no gradient path", a.layer_id))
                    })?;
                    lora.push(lora_grads(d, a)?);
                }
            }
        }
        Ok(DenoiserGrads {
            base: g,
            adapters: lora,
            input,
        })
    }
}

impl<T: Real> Adaptable for DenoiserParams<T> {
    fn adaptable_layers(&self) -> Vec<(String, (usize, usize))> {
        let mut v = vec![(TIME2.to_string(), self.time2.weight.shape())];
        for (id, l) in PROJ.iter().zip(&self.proj) {
            v.push((id.to_string(), l.weight.shape()));
        }
        v.push((MID.to_string(), self.mid.weight.shape()));
        v
    }

    fn num_base_params(&self) -> usize {
        self.num_params()
    }
}

/// `ε_φ`: the frozen network.
pub fn predict_noise_frozen<T: Real>(params: &DenoiserParams<T>, x_t: &Tensor<T>, cond: &Conditioning<T>) -> Result<Tensor<T>> {
    params.predict(x_t, cond, None)
}

/// `ε_ϕ`: the same network with low-rank adapters applied.
pub fn predict_noise_finetuned<T: Real>(
    params: &DenoiserParams<T>,
    adapters: &AdapterSet<T>,
    x_t: &Tensor<T>,
    cond: &Conditioning<T>,
) -> Result<Tensor<T>> {
    params.predict(x_t, cond, Some(adapters))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMeta {
    pub steps: usize,
    pub seed: u64,
    pub val_mse: f32,
}

/// Frozen denoiser together with the schedule and prompt vocabulary it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub params: DenoiserParams<f32>,
    pub schedule: NoiseSchedule,
    pub vocab: PromptVocab,
    pub meta: DenoiserMeta,
}

impl Denoiser {
    pub fn hash(&self) -> String {
        self.params.hash()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            DENOISER_KIND,
            json!({
                "config": self.params.config,
                "schedule": self.schedule,
                "vocab": self.vocab,
                "meta": self.meta,
                "hash": self.hash(),
            }),
        );
        for (name, dims, data) in self.params.blocks() {
            c.push(name, dims, data.to_vec());
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, DENOISER_KIND)?;
        let field = |key: &str| {
            c.meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::ingestion(path, format!("denoiser metadata lacks '{key}'")))
        };
        let parse = |e: serde_json::Error| Error::ingestion(path, format!("denoiser metadata: {e}"));
        let config: DenoiserConfig = serde_json::from_value(field("config")?).map_err(parse)?;
        let schedule: NoiseSchedule = serde_json::from_value(field("schedule")?).map_err(parse)?;
        let schedule = NoiseSchedule::from_alpha_bar(schedule.table().to_vec())
            .map_err(|e| Error::ingestion(path, e.to_string()))?;
        let vocab: PromptVocab = serde_json::from_value(field("vocab")?).map_err(parse)?;
        let meta: DenoiserMeta = serde_json::from_value(field("meta")?).map_err(parse)?;
        let mut params = DenoiserParams::<f32>::init(config, 0)?;
        let names: Vec<(String, usize)> = params.blocks().iter().map(|(n, _, b)| (n.clone(), b.len())).collect();
        for ((name, len), block) in names.iter().zip(params.blocks_mut()) {
            block.copy_from_slice(c.require(name, *len, path)?);
        }
        if c.meta["hash"].as_str() != Some(params.hash().as_str()) {
            return Err(Error::ingestion(path, "denoiser hash does not match its weights"));
        }
        Ok(Denoiser {
            params,
            schedule,
            vocab,
            meta,
        })
    }
}

/// Random conditioning for tests and probes.
pub fn random_conditioning<T: Real, R: Rng + ?Sized>(
    config: &DenoiserConfig,
    hw: (usize, usize),
    rng: &mut R,
) -> Conditioning<T> {
    Conditioning {
        t: rng.random_range(1..config.t_max),
        prompt_id: rng.random_range(0..config.n_prompts),
        class_id: rng.random_range(0..config.n_classes),
        lr_latent: super::gaussian_like((config.latent_channels, hw.0, hw.1), rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoRAAdapter;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 2,
            widths: [6, 8, 10],
            time_dim: 8,
            emb_dim: 12,
            n_prompts: 3,
            n_classes: 4,
            t_max: 100,
        }
    }

    fn setup(seed: u64) -> (DenoiserParams<f64>, Tensor<f64>, Conditioning<f64>) {
        let p = DenoiserParams::<f64>::init(tiny_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = super::super::gaussian_like((2, 4, 8), &mut rng);
        let cond = random_conditioning(&p.config, (4, 8), &mut rng);
        (p, x, cond)
    }

    fn perturbed_adapters(p: &DenoiserParams<f64>, seed: u64) -> AdapterSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = AdapterSet::for_model(p, 2, &mut rng).unwrap();
        for a in set.iter_mut() {
            for v in a.a.data.iter_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
            for v in a.b.data.iter_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        set
    }

    /// L = Σ r ⊙ out for a fixed random r.
    fn weighted(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
        out.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn default_sizes_and_adapter_budget() {
        let p = DenoiserParams::<f32>::init(DenoiserConfig::default(), 0).unwrap();
        let n = p.num_params();
        assert!((400_000..500_000).contains(&n), "{n}");
        assert_eq!(p.blocks().len(), p.clone().blocks_mut().len());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = AdapterSet::<f32>::for_model(&p, 4, &mut rng).unwrap();
        assert_eq!(set.len(), 7);
        assert!((set.num_params() as f64) < 0.1 * n as f64);
    }

    #[test]
    fn zero_adapters_are_bit_identical_to_frozen() {
        let (p, x, cond) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut set = AdapterSet::for_model(&p, 2, &mut rng).unwrap();
        let frozen = predict_noise_frozen(&p, &x, &cond).unwrap();
        assert_eq!(predict_noise_finetuned(&p, &set, &x, &cond).unwrap(), frozen);
        let other = perturbed_adapters(&p, 3);
        assert!(predict_noise_finetuned(&p, &other, &x, &cond).unwrap().max_abs_diff(&frozen) > 0.0);
        set.detach(MID).unwrap();
        assert_eq!(predict_noise_finetuned(&p, &set, &x, &cond).unwrap(), frozen);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (p, x, mut cond) = setup(4);
        let bad = Tensor::<f64>::zeros(3, 4, 8);
        assert!(p.predict(&bad, &cond, None).is_err());
        cond.class_id = 4;
        assert!(p.predict(&x, &cond, None).is_err());
        cond.class_id = 0;
        cond.lr_latent = Tensor::zeros(2, 4, 4);
        assert!(p.predict(&x, &cond, None).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let (p, x, cond) = setup(5);
        let set = perturbed_adapters(&p, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r: Tensor<f64> = super::super::gaussian_like(x.shape(), &mut rng);
        let (_, tr) = p.forward(&x, &cond, Some(&set)).unwrap();
        let req = GradRequest { input: true, ..Default::default() };
        let g = p.backward(&r, &tr, Some(&set), req).unwrap().input.unwrap();
        let h = 1e-6;
        for i in [0, 5, 17, 40, 63] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (weighted(&p.predict(&xp, &cond, Some(&set)).unwrap(), &r)
                - weighted(&p.predict(&xm, &cond, Some(&set)).unwrap(), &r))
                / (2.0 * h);
            assert!((fd - g.data[i]).abs() <= 1e-6 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g.data[i]);
        }
    }

    #[test]
    fn adapter_gradients_match_finite_difference() {
        let (p, x, cond) = setup(8);
        let set = perturbed_adapters(&p, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let r: Tensor<f64> = super::super::gaussian_like(x.shape(), &mut rng);
        let (_, tr) = p.forward(&x, &cond, Some(&set)).unwrap();
        let req = GradRequest { adapters: true, ..Default::default() };
        let grads = p.backward(&r, &tr, Some(&set), req).unwrap().adapters;
        let h = 1e-6;
        let ids: Vec<String> = set.iter().map(|a| a.layer_id.clone()).collect();
        for (k, id) in ids.iter().enumerate() {
            for (which, idx) in [(0usize, 1usize), (1, 3)] {
                let eval = |delta: f64| {
                    let mut s = set.clone();
                    let mut a: LoRAAdapter<f64> = s.detach(id).unwrap();
                    if which == 0 {
                        a.a.data[idx] += delta;
                    } else {
                        a.b.data[idx] += delta;
                    }
                    s.attach(a, &p).unwrap();
                    weighted(&p.predict(&x, &cond, Some(&s)).unwrap(), &r)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = if which == 0 { grads[k].0.data[idx] } else { grads[k].1.data[idx] };
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-4), "{id} {which}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn base_gradients_match_finite_difference() {
        let (p, x, cond) = setup(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r: Tensor<f64> = super::super::gaussian_like(x.shape(), &mut rng);
        let (_, tr) = p.forward(&x, &cond, None).unwrap();
        let req = GradRequest { base: true, ..Default::default() };
        let g = p.backward(&r, &tr, None, req).unwrap().base.unwrap();
        let gb: Vec<Vec<f64>> = g.blocks().iter().map(|(_, _, b)| b.to_vec()).collect();
        let n_blocks = gb.len();
        let h = 1e-6;
        for bi in 0..n_blocks {
            let len = gb[bi].len();
            for idx in [0, len / 2, len - 1] {
                let eval = |delta: f64| {
                    let mut q = p.clone();
                    q.blocks_mut()[bi][idx] += delta;
                    weighted(&q.predict(&x, &cond, None).unwrap(), &r)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = gb[bi][idx];
                assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1e-3), "block {bi} idx {idx}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = DenoiserParams::<f32>::init(tiny_config(), 3).unwrap();
        let mut vocab = PromptVocab::default();
        vocab.insert("a scene with 3 blobs");
        let d = Denoiser {
            params,
            schedule: NoiseSchedule::cosine(100),
            vocab,
            meta: DenoiserMeta { steps: 5, seed: 3, val_mse: 0.5 },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        d.save(&path).unwrap();
        let back = Denoiser::load(&path).unwrap();
        assert_eq!(back.params, d.params);
        assert_eq!(back.vocab, d.vocab);
        assert_eq!(back.meta, d.meta);
        for (a, b) in back.schedule.table().iter().zip(d.schedule.table()) {
            assert_eq!(a, b, "schedule");
        }
    }
}
