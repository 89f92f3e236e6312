//! Per-view latent refinement: the L1 score-distillation loss between the
//! frozen denoiser and its adapted twin, the interleaved adapter training, and
//! the plain score-distillation baseline.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{add_noise, gaussian_like, Conditioning, DenoiserParams, GradRequest, NoiseSchedule, Weighting};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::nn::Adam;
use crate::tensor::{Matrix, Real, Tensor};

/// What the residual update differentiates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Network outputs held constant: `ω·√ᾱ·sign(ε_φ − ε_ϕ)`.
    #[default]
    ScoreShortcut,
    /// Gradient of the mean-L1 loss through the frozen network's input Jacobian.
    LiteralL1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VsdConfig {
    /// Iterations per view.
    pub steps: usize,
    pub eta_residual: f64,
    pub eta_lora: f64,
    /// Adapters are trained after every `lora_interval`-th residual step.
    pub lora_interval: usize,
    pub lora_rank: usize,
    /// Multiplier on the adapter product `A·B`.
    pub lora_scale: f64,
    pub weighting: Weighting,
    pub t_min: usize,
    pub t_max: usize,
    pub loss_mode: LossMode,
}

impl Default for VsdConfig {
    fn default() -> Self {
        VsdConfig {
            steps: 200,
            eta_residual: 0.1,
            eta_lora: 1e-3,
            lora_interval: 3,
            lora_rank: 4,
            lora_scale: 1.0,
            weighting: Weighting::Constant,
            t_min: 20,
            t_max: 980,
            loss_mode: LossMode::ScoreShortcut,
        }
    }
}

impl VsdConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.eta_residual >= 0.0 && self.eta_lora >= 0.0) {
            return Err(Error::config("learning rates must be non-negative"));
        }
        if self.lora_interval == 0 {
            return Err(Error::config("lora_interval must be at least 1"));
        }
        if self.lora_rank == 0 {
            return Err(Error::config("lora_rank must be at least 1"));
        }
        if !self.lora_scale.is_finite() {
            return Err(Error::config("lora_scale must be finite"));
        }
        if self.t_min >= self.t_max || self.t_max > sched.t_max() {
            return Err(Error::config(format!(
                "timestep range [{}, {}] must satisfy t_min < t_max ≤ {}",
                self.t_min,
                self.t_max,
                sched.t_max()
            )));
        }
        Ok(())
    }
}

/// `h_θ`, the trainable correction of one view's latent.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualLatent<T> {
    pub h: Tensor<T>,
    pub view_id: usize,
    pub step: usize,
}

impl<T: Real> ResidualLatent<T> {
    pub fn zeros(shape: (usize, usize, usize), view_id: usize) -> Self {
        ResidualLatent {
            h: Tensor::zeros(shape.0, shape.1, shape.2),
            view_id,
            step: 0,
        }
    }
}

/// A noise predictor with an optional adapted twin. The toy UNet implements it;
/// tests plug in closed-form models.
pub trait NoisePredictor<T: Real> {
    fn predict(&self, x_t: &Tensor<T>, cond: &Conditioning<T>, adapters: Option<&AdapterSet<T>>) -> Result<Tensor<T>>;

    /// `Jᵀ·v` of the prediction with respect to `x_t`.
    fn input_vjp(
        &self,
        x_t: &Tensor<T>,
        cond: &Conditioning<T>,
        adapters: Option<&AdapterSet<T>>,
        v: &Tensor<T>,
    ) -> Result<Tensor<T>>;

    /// Adapted prediction and the adapter gradients of `Σ dout(pred) ⊙ pred`.
    #[allow(clippy::type_complexity)]
    fn adapter_grads(
        &self,
        x_t: &Tensor<T>,
        cond: &Conditioning<T>,
        adapters: &AdapterSet<T>,
        dout: &dyn Fn(&Tensor<T>) -> Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<(Matrix<T>, Matrix<T>)>)>;
}

impl<T: Real> NoisePredictor<T> for DenoiserParams<T> {
    fn predict(&self, x_t: &Tensor<T>, cond: &Conditioning<T>, adapters: Option<&AdapterSet<T>>) -> Result<Tensor<T>> {
        DenoiserParams::predict(self, x_t, cond, adapters)
    }

    fn input_vjp(
        &self,
        x_t: &Tensor<T>,
        cond: &Conditioning<T>,
        adapters: Option<&AdapterSet<T>>,
        v: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (_, tr) = self.forward(x_t, cond, adapters)?;
        let req = GradRequest { input: true, ..Default::default() };
        Ok(self.backward(v, &tr, adapters, req)?.input.expect("requested"))
    }

    fn adapter_grads(
        &self,
        x_t: &Tensor<T>,
        cond: &Conditioning<T>,
        adapters: &AdapterSet<T>,
        dout: &dyn Fn(&Tensor<T>) -> Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<(Matrix<T>, Matrix<T>)>)> {
        let (out, tr) = self.forward(x_t, cond, Some(adapters))?;
        let req = GradRequest { adapters: true, ..Default::default() };
        let g = self.backward(&dout(&out), &tr, Some(adapters), req)?;
        Ok((out, g.adapters))
    }
}

/// The adapter set together with the optimizer that owns it.
#[derive(Clone, Debug)]
pub struct LoraTrainer<T> {
    pub adapters: AdapterSet<T>,
    pub adam: Adam<T>,
}

impl<T: Real> LoraTrainer<T> {
    pub fn new(adapters: AdapterSet<T>, eta: f64) -> Self {
        LoraTrainer {
            adapters,
            adam: Adam::new(eta),
        }
    }
}

impl LoraTrainer<f32> {
    /// Adapters plus the optimizer moments, so a resumed run continues exactly.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let extra = serde_json::json!({ "adam_step": self.adam.step, "adam_lr": self.adam.lr, "meta": meta });
        let mut c = self.adapters.to_container(extra);
        let (m, v) = self.adam.moments();
        for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
            c.push(format!("adam.m.{i}"), vec![mi.len()], mi.clone());
            c.push(format!("adam.v.{i}"), vec![vi.len()], vi.clone());
        }
        c.write(path)
    }

    pub fn load(path: &Path, model: &DenoiserParams<f32>) -> Result<(Self, serde_json::Value)> {
        let (mut adapters, extra) = AdapterSet::load(path, model)?;
        let c = crate::checkpoint::Container::read(path, *b"LORA")?;
        let mut adam = Adam::new(extra["adam_lr"].as_f64().unwrap_or(0.0));
        let step = extra["adam_step"].as_u64().unwrap_or(0);
        if step > 0 {
            let lens: Vec<usize> = adapters.param_blocks_mut().iter().map(|b| b.len()).collect();
            let mut m = Vec::with_capacity(lens.len());
            let mut v = Vec::with_capacity(lens.len());
            for (i, &n) in lens.iter().enumerate() {
                m.push(c.require(&format!("adam.m.{i}"), n, path)?.to_vec());
                v.push(c.require(&format!("adam.v.{i}"), n, path)?.to_vec());
            }
            adam.restore(step, m, v);
        }
        Ok((LoraTrainer { adapters, adam }, extra["meta"].clone()))
    }
}

/// `x0 + h`.
pub fn combined_latent<T: Real>(x0: &Tensor<T>, h: &ResidualLatent<T>) -> Result<Tensor<T>> {
    x0.ensure_same_shape(&h.h, "residual latent")?;
    Ok(x0.zip_map(&h.h, |a, b| a + b))
}

/// `ω·mean|ε_φ − ε_ϕ|` for a given weight ω.
pub fn vsd_loss<T: Real>(eps_frozen: &Tensor<T>, eps_finetuned: &Tensor<T>, omega: f64) -> Result<f64> {
    eps_frozen.ensure_same_shape(eps_finetuned, "noise predictions")?;
    let n = eps_frozen.len().max(1) as f64;
    let sum: f64 = eps_frozen
        .data
        .iter()
        .zip(&eps_finetuned.data)
        .map(|(a, b)| (*a - *b).abs().as_f64())
        .sum();
    Ok(omega * sum / n)
}

/// Sign with `sign(0) = 0`.
fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Gradient of one distillation step with respect to the residual, before the learning rate.
pub fn shortcut_gradient<T: Real>(eps_frozen: &Tensor<T>, eps_finetuned: &Tensor<T>, omega: f64, alpha_bar: f64) -> Tensor<T> {
    let c = T::lit(omega * alpha_bar.sqrt());
    eps_frozen.zip_map(eps_finetuned, |a, b| c * sign(a - b))
}

/// `ω·√ᾱ·(ε_φ − ε)`.
pub fn sds_gradient<T: Real>(eps_frozen: &Tensor<T>, eps: &Tensor<T>, omega: f64, alpha_bar: f64) -> Tensor<T> {
    let c = T::lit(omega * alpha_bar.sqrt());
    eps_frozen.zip_map(eps, |a, b| c * (a - b))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub t: usize,
    pub loss: f64,
}

fn draw_noise<T: Real, R: Rng + ?Sized>(
    x0p: &Tensor<T>,
    sched: &NoiseSchedule,
    config: &VsdConfig,
    rng: &mut R,
) -> Result<(usize, Tensor<T>, Tensor<T>)> {
    let t = rng.random_range(config.t_min..=config.t_max);
    let eps = gaussian_like::<T, R>(x0p.shape(), rng);
    let x_t = add_noise(x0p, t, &eps, sched)?;
    Ok((t, eps, x_t))
}

fn apply_update<T: Real>(h: &mut ResidualLatent<T>, grad: &Tensor<T>, eta: f64, t: usize) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite residual gradient for view {} at step {} (t = {t})",
            h.view_id, h.step
        )));
    }
    if eta != 0.0 {
        let eta = T::lit(eta);
        for (v, g) in h.h.data.iter_mut().zip(&grad.data) {
            *v -= eta * *g;
        }
    }
    h.step += 1;
    Ok(())
}

/// One descent step of `h` on the L1 distillation loss. `cond.t` is replaced by the sampled timestep.
#[allow(clippy::too_many_arguments)]
pub fn residual_step<T: Real, D: NoisePredictor<T>, R: Rng + ?Sized>(
    h: &mut ResidualLatent<T>,
    x0: &Tensor<T>,
    cond: &Conditioning<T>,
    denoiser: &D,
    adapters: &AdapterSet<T>,
    sched: &NoiseSchedule,
    config: &VsdConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    let x0p = combined_latent(x0, h)?;
    let (t, _eps, x_t) = draw_noise(&x0p, sched, config, rng)?;
    let cond = Conditioning { t, ..cond.clone() };
    let eps_frozen = denoiser.predict(&x_t, &cond, None)?;
    let eps_tuned = denoiser.predict(&x_t, &cond, Some(adapters))?;
    let omega = config.weighting.weight(sched, t)?;
    let alpha_bar = sched.alpha_bar(t)?;
    let loss = vsd_loss(&eps_frozen, &eps_tuned, omega)?;
    if !loss.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite distillation loss for view {} at step {} (t = {t})",
            h.view_id, h.step
        )));
    }
    let grad = match config.loss_mode {
        LossMode::ScoreShortcut => shortcut_gradient(&eps_frozen, &eps_tuned, omega, alpha_bar),
        LossMode::LiteralL1 => {
            let n = T::lit(x_t.len() as f64);
            let c = T::lit(omega * alpha_bar.sqrt());
            let v = eps_frozen.zip_map(&eps_tuned, |a, b| c * sign(a - b) / n);
            denoiser.input_vjp(&x_t, &cond, None, &v)?
        }
    };
    apply_update(h, &grad, config.eta_residual, t)?;
    Ok(StepOutcome { t, loss })
}

/// One adapter update on the noise-prediction objective at `x0'` (held constant).
pub fn lora_step<T: Real, D: NoisePredictor<T>, R: Rng + ?Sized>(
    trainer: &mut LoraTrainer<T>,
    x0_prime: &Tensor<T>,
    cond: &Conditioning<T>,
    denoiser: &D,
    sched: &NoiseSchedule,
    config: &VsdConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    let (t, eps, x_t) = draw_noise(x0_prime, sched, config, rng)?;
    let cond = Conditioning { t, ..cond.clone() };
    lora_update(trainer, &x_t, &eps, &cond, denoiser)
        .map(|loss| StepOutcome { t, loss })
}

/// Mean squared error of the adapted prediction against `eps`, followed by one
/// optimizer step on the adapters. Returns the pre-step loss.
pub fn lora_update<T: Real, D: NoisePredictor<T>>(
    trainer: &mut LoraTrainer<T>,
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    cond: &Conditioning<T>,
    denoiser: &D,
) -> Result<f64> {
    let n = T::lit(eps.len() as f64);
    let dout = |pred: &Tensor<T>| pred.zip_map(eps, |p, e| T::lit(2.0) * (p - e) / n);
    let (pred, grads) = denoiser.adapter_grads(x_t, cond, &trainer.adapters, &dout)?;
    let loss = pred
        .data
        .iter()
        .zip(&eps.data)
        .map(|(p, e)| (*p - *e).as_f64().powi(2))
        .sum::<f64>()
        / eps.len().max(1) as f64;
    if !loss.is_finite() {
        return Err(Error::numerical(format!("non-finite adapter loss at t = {}", cond.t)));
    }
    let flat: Vec<&[T]> = grads.iter().flat_map(|(a, b)| [&a.data[..], &b.data[..]]).collect();
    if flat.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::numerical(format!("non-finite adapter gradient at t = {}", cond.t)));
    }
    if trainer.adam.lr != 0.0 && !flat.is_empty() {
        trainer.adam.update(trainer.adapters.param_blocks_mut(), flat);
    }
    Ok(loss)
}

/// Score-distillation baseline: frozen model only, `ω√ᾱ(ε_φ − ε)`.
#[allow(clippy::too_many_arguments)]
pub fn sds_step<T: Real, D: NoisePredictor<T>, R: Rng + ?Sized>(
    h: &mut ResidualLatent<T>,
    x0: &Tensor<T>,
    cond: &Conditioning<T>,
    denoiser: &D,
    sched: &NoiseSchedule,
    config: &VsdConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    let x0p = combined_latent(x0, h)?;
    let (t, eps, x_t) = draw_noise(&x0p, sched, config, rng)?;
    let cond = Conditioning { t, ..cond.clone() };
    let eps_frozen = denoiser.predict(&x_t, &cond, None)?;
    let omega = config.weighting.weight(sched, t)?;
    let loss = omega
        * eps_frozen
            .data
            .iter()
            .zip(&eps.data)
            .map(|(a, b)| (*a - *b).as_f64().powi(2))
            .sum::<f64>()
        / eps.len().max(1) as f64;
    let grad = sds_gradient(&eps_frozen, &eps, omega, sched.alpha_bar(t)?);
    apply_update(h, &grad, config.eta_residual, t)?;
    Ok(StepOutcome { t, loss })
}

/// One row of the per-view loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub t: usize,
    pub l_vsd: f64,
    pub l_diff: Option<f64>,
}

pub fn loss_trace_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("step,t,l_vsd,l_diff\n");
    for r in records {
        let diff = r.l_diff.map(|v| format!("{v:.9e}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:.9e},{}", r.step, r.t, r.l_vsd, diff);
    }
    s
}

pub fn write_loss_trace(path: &Path, records: &[LossRecord]) -> Result<()> {
    std::fs::write(path, loss_trace_csv(records)).map_err(|e| Error::io(path, e))
}

/// Runs `config.steps` residual steps from `h = 0`, training the adapters after
/// every `lora_interval`-th step, and returns `x0 + h`.
#[allow(clippy::too_many_arguments)]
pub fn vsd_upscale<T: Real, D: NoisePredictor<T>, R: Rng + ?Sized>(
    x0: &Tensor<T>,
    cond: &Conditioning<T>,
    view_id: usize,
    denoiser: &D,
    trainer: &mut LoraTrainer<T>,
    sched: &NoiseSchedule,
    config: &VsdConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<LossRecord>)> {
    config.validate(sched)?;
    trainer.adam.lr = config.eta_lora;
    let mut h = ResidualLatent::zeros(x0.shape(), view_id);
    let mut records = Vec::with_capacity(config.steps);
    for i in 0..config.steps {
        let out = residual_step(&mut h, x0, cond, denoiser, &trainer.adapters, sched, config, rng)?;
        let l_diff = if (i + 1) % config.lora_interval == 0 {
            let x0p = combined_latent(x0, &h)?;
            Some(lora_step(trainer, &x0p, cond, denoiser, sched, config, rng)?.loss)
        } else {
            None
        };
        records.push(LossRecord {
            step: i,
            t: out.t,
            l_vsd: out.loss,
            l_diff,
        });
    }
    Ok((combined_latent(x0, &h)?, records))
}

/// Score-distillation counterpart of [`vsd_upscale`].
#[allow(clippy::too_many_arguments)]
pub fn sds_upscale<T: Real, D: NoisePredictor<T>, R: Rng + ?Sized>(
    x0: &Tensor<T>,
    cond: &Conditioning<T>,
    view_id: usize,
    denoiser: &D,
    sched: &NoiseSchedule,
    config: &VsdConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<LossRecord>)> {
    config.validate(sched)?;
    let mut h = ResidualLatent::zeros(x0.shape(), view_id);
    let mut records = Vec::with_capacity(config.steps);
    for i in 0..config.steps {
        let out = sds_step(&mut h, x0, cond, denoiser, sched, config, rng)?;
        records.push(LossRecord {
            step: i,
            t: out.t,
            l_vsd: out.loss,
            l_diff: None,
        });
    }
    Ok((combined_latent(x0, &h)?, records))
}

/// `mean|ε_φ − ε_ϕ|` over seeded probes; zero when the adapters still match the frozen model.
pub fn adapter_drift<T: Real, D: NoisePredictor<T>, R: Rng + ?Sized>(
    x0: &Tensor<T>,
    cond: &Conditioning<T>,
    denoiser: &D,
    adapters: &AdapterSet<T>,
    sched: &NoiseSchedule,
    config: &VsdConfig,
    probes: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..probes {
        let (t, _, x_t) = draw_noise(x0, sched, config, rng)?;
        let cond = Conditioning { t, ..cond.clone() };
        let a = denoiser.predict(&x_t, &cond, None)?;
        let b = denoiser.predict(&x_t, &cond, Some(adapters))?;
        total += vsd_loss(&a, &b, 1.0)?;
    }
    Ok(total / probes.max(1) as f64)
}

/// Fresh adapters on every adaptable layer.
pub fn fresh_adapters<T: Real, R: Rng + ?Sized>(
    denoiser: &DenoiserParams<T>,
    rank: usize,
    rng: &mut R,
) -> Result<AdapterSet<T>> {
    AdapterSet::for_model(denoiser, rank, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{random_conditioning, DenoiserConfig};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `f_φ(x) = P·x`, adapted twin `f_ϕ(x) = Q·x`, elementwise.
    struct Linear {
        p: f64,
        q: f64,
    }

    impl NoisePredictor<f64> for Linear {
        fn predict(&self, x: &Tensor<f64>, _: &Conditioning<f64>, a: Option<&AdapterSet<f64>>) -> Result<Tensor<f64>> {
            let k = if a.is_some() { self.q } else { self.p };
            Ok(x.map(|v| k * v))
        }

        fn input_vjp(
            &self,
            _: &Tensor<f64>,
            _: &Conditioning<f64>,
            a: Option<&AdapterSet<f64>>,
            v: &Tensor<f64>,
        ) -> Result<Tensor<f64>> {
            let k = if a.is_some() { self.q } else { self.p };
            Ok(v.map(|g| k * g))
        }

        fn adapter_grads(
            &self,
            x: &Tensor<f64>,
            _: &Conditioning<f64>,
            _: &AdapterSet<f64>,
            _: &dyn Fn(&Tensor<f64>) -> Tensor<f64>,
        ) -> Result<(Tensor<f64>, Vec<(Matrix<f64>, Matrix<f64>)>)> {
            Ok((x.map(|v| self.q * v), Vec::new()))
        }
    }

    fn scalar_cond() -> Conditioning<f64> {
        Conditioning {
            t: 0,
            prompt_id: 0,
            class_id: 0,
            lr_latent: Tensor::zeros(1, 1, 1),
        }
    }

    #[test]
    fn combined_latent_and_loss_examples() {
        let x0 = Tensor::from_vec(1, 1, 2, vec![1.0f64, -1.0]).unwrap();
        let h = ResidualLatent {
            h: Tensor::from_vec(1, 1, 2, vec![0.5, 0.5]).unwrap(),
            view_id: 0,
            step: 0,
        };
        assert_eq!(combined_latent(&x0, &h).unwrap().data, vec![1.5, -0.5]);
        let a = Tensor::from_vec(1, 1, 2, vec![1.0f64, -1.0]).unwrap();
        let z = Tensor::zeros(1, 1, 2);
        assert_eq!(vsd_loss(&a, &z, 1.0).unwrap(), 1.0);
        assert_eq!(vsd_loss(&a, &z, 2.0).unwrap(), 2.0);
        assert_eq!(vsd_loss(&a, &a, 1.0).unwrap(), 0.0);
        assert!(combined_latent(&x0, &ResidualLatent::zeros((1, 1, 3), 0)).is_err());
    }

    #[test]
    fn linear_shortcut_and_sds_match_closed_form() {
        let sched = NoiseSchedule::cosine(1000);
        let config = VsdConfig {
            eta_residual: 1.0,
            weighting: Weighting::OneMinusAlphaBar,
            ..Default::default()
        };
        let model = Linear { p: 0.7, q: -0.4 };
        let x0 = Tensor::from_vec(1, 1, 1, vec![0.3f64]).unwrap();
        let adapters = AdapterSet::new();
        for seed in 0..10 {
            // Replay the sampler to recover t and ε.
            let mut probe = ChaCha8Rng::seed_from_u64(seed);
            let t = probe.random_range(config.t_min..=config.t_max);
            let eps: Tensor<f64> = gaussian_like((1, 1, 1), &mut probe);
            let ab = sched.alpha_bar(t).unwrap();
            let omega = 1.0 - ab;
            let x_t = ab.sqrt() * 0.3 + (1.0 - ab).sqrt() * eps.data[0];

            let mut h = ResidualLatent::zeros((1, 1, 1), 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            residual_step(&mut h, &x0, &scalar_cond(), &model, &adapters, &sched, &config, &mut rng).unwrap();
            let expected = omega * ab.sqrt() * ((0.7 - (-0.4)) * x_t).signum();
            assert!((-h.h.data[0] - expected).abs() <= 1e-10 * expected.abs());

            let literal = VsdConfig { loss_mode: LossMode::LiteralL1, ..config.clone() };
            let mut h = ResidualLatent::zeros((1, 1, 1), 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            residual_step(&mut h, &x0, &scalar_cond(), &model, &adapters, &sched, &literal, &mut rng).unwrap();
            assert!((-h.h.data[0] - 0.7 * expected).abs() <= 1e-10 * expected.abs());

            let mut h = ResidualLatent::zeros((1, 1, 1), 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sds_step(&mut h, &x0, &scalar_cond(), &model, &sched, &config, &mut rng).unwrap();
            let expected = omega * ab.sqrt() * (0.7 * x_t - eps.data[0]);
            assert!((-h.h.data[0] - expected).abs() <= 1e-10 * expected.abs());
        }
    }

    #[test]
    fn zero_learning_rate_and_exact_noise_leave_h_unchanged() {
        let sched = NoiseSchedule::cosine(1000);
        let model = Linear { p: 0.7, q: -0.4 };
        let x0 = Tensor::from_vec(1, 1, 1, vec![0.3f64]).unwrap();
        let config = VsdConfig { eta_residual: 0.0, ..Default::default() };
        let mut h = ResidualLatent {
            h: Tensor::from_vec(1, 1, 1, vec![0.25]).unwrap(),
            view_id: 0,
            step: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        residual_step(&mut h, &x0, &scalar_cond(), &model, &AdapterSet::new(), &sched, &config, &mut rng).unwrap();
        sds_step(&mut h, &x0, &scalar_cond(), &model, &sched, &config, &mut rng).unwrap();
        assert_eq!(h.h.data, vec![0.25]);
        let eps = Tensor::from_vec(1, 1, 3, vec![0.3f64, -1.2, 2.0]).unwrap();
        assert!(sds_gradient(&eps, &eps, 1.0, 0.5).data.iter().all(|g| *g == 0.0));
    }

    fn tiny() -> (DenoiserParams<f64>, Tensor<f64>, Conditioning<f64>, NoiseSchedule) {
        let cfg = DenoiserConfig {
            latent_channels: 2,
            widths: [6, 8, 10],
            time_dim: 8,
            emb_dim: 12,
            n_prompts: 2,
            n_classes: 2,
            t_max: 100,
        };
        let p = DenoiserParams::<f64>::init(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = gaussian_like((2, 8, 8), &mut rng);
        let cond = random_conditioning(&p.config, (8, 8), &mut rng);
        (p, x0, cond, NoiseSchedule::cosine(100))
    }

    fn tiny_config() -> VsdConfig {
        VsdConfig {
            steps: 12,
            t_min: 2,
            t_max: 98,
            lora_rank: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_adapters_are_a_fixed_point() {
        let (p, x0, cond, sched) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let adapters = fresh_adapters(&p, 2, &mut rng).unwrap();
        let mut h = ResidualLatent::zeros(x0.shape(), 0);
        for _ in 0..20 {
            let out = residual_step(&mut h, &x0, &cond, &p, &adapters, &sched, &tiny_config(), &mut rng).unwrap();
            assert_eq!(out.loss, 0.0);
        }
        assert!(h.h.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lora_step_descends_on_a_fixed_batch_and_keeps_base_frozen() {
        let (p, x0, cond, sched) = tiny();
        let base_hash = p.hash();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut trainer = LoraTrainer::new(fresh_adapters(&p, 2, &mut rng).unwrap(), 1e-3);
        let eps: Tensor<f64> = gaussian_like(x0.shape(), &mut rng);
        let cond = Conditioning { t: 40, ..cond };
        let x_t = add_noise(&x0, 40, &eps, &sched).unwrap();
        let before = lora_update(&mut trainer, &x_t, &eps, &cond, &p).unwrap();
        let mut probe = trainer.clone();
        probe.adam.lr = 0.0;
        let after = lora_update(&mut probe, &x_t, &eps, &cond, &p).unwrap();
        assert!(after < before, "{before} -> {after}");
        let frozen = trainer.adapters.clone();
        let mut still = LoraTrainer::new(frozen.clone(), 0.0);
        lora_update(&mut still, &x_t, &eps, &cond, &p).unwrap();
        assert_eq!(still.adapters, frozen);
        assert_eq!(p.hash(), base_hash);
    }

    #[test]
    fn spacing_changes_the_result_and_runs_are_seeded() {
        let (p, x0, cond, sched) = tiny();
        let run = |k: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut trainer = LoraTrainer::new(fresh_adapters(&p, 2, &mut rng).unwrap(), 1e-2);
            let config = VsdConfig { lora_interval: k, eta_residual: 0.01, eta_lora: 1e-2, ..tiny_config() };
            let (x, rec) = vsd_upscale(&x0, &cond, 0, &p, &mut trainer, &sched, &config, &mut rng).unwrap();
            (x, rec, trainer)
        };
        let (a, rec, trainer) = run(3);
        let (b, _, _) = run(1);
        assert_eq!(run(3).0, a);
        assert!(a.max_abs_diff(&b) > 0.0);
        assert_eq!(rec.len(), 12);
        assert_eq!(rec.iter().filter(|r| r.l_diff.is_some()).count(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let drift = adapter_drift(&x0, &cond, &p, &trainer.adapters, &sched, &tiny_config(), 3, &mut rng).unwrap();
        assert!(drift > 0.0);
        let csv = loss_trace_csv(&rec);
        assert!(csv.starts_with("step,t,l_vsd,l_diff\n"));
        assert_eq!(csv.lines().count(), 13);
    }

    #[test]
    fn zero_steps_return_the_input() {
        let (p, x0, cond, sched) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut trainer = LoraTrainer::new(fresh_adapters(&p, 2, &mut rng).unwrap(), 1e-3);
        let config = VsdConfig { steps: 0, ..tiny_config() };
        let (x, rec) = vsd_upscale(&x0, &cond, 0, &p, &mut trainer, &sched, &config, &mut rng).unwrap();
        assert_eq!(x, x0);
        assert!(rec.is_empty());
    }
}
