//! Noise schedule, forward noising and the conditional noise-prediction network.

mod denoiser;
mod pretrain;

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use denoiser::{
    predict_noise_finetuned, predict_noise_frozen, random_conditioning, Conditioning, Denoiser, DenoiserConfig,
    DenoiserGrads, DenoiserMeta, DenoiserParams, ForwardTrace, GradRequest,
};
pub use pretrain::{
    build_denoiser_corpus, pretrain_denoiser, validation_mse, DenoiserSample, PretrainConfig, PretrainStats,
    VIEW_CLASSES,
};

/// Cumulative signal retention `ᾱ_t` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

impl NoiseSchedule {
    /// Validates a table: `ᾱ₀ = 1`, strictly decreasing, positive before `T`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::config("schedule needs at least two entries"));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::config(format!("ᾱ₀ must be 1, got {}", alpha_bar[0])));
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::config("ᾱ must be strictly decreasing"));
            }
        }
        let last = alpha_bar.len() - 1;
        if alpha_bar[..last].iter().any(|a| !(*a > 0.0)) || alpha_bar[last] < 0.0 {
            return Err(Error::config("ᾱ_t must lie in (0, 1] for t < T and be non-negative at T"));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// Cosine schedule with offset 0.008 and per-step β clipped at 0.999.
    pub fn cosine(t_max: usize) -> Self {
        let s = 0.008;
        let f = |t: usize| {
            let x = (t as f64 / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar = vec![1.0];
        for t in 1..=t_max {
            let target = f(t) / f0;
            let beta = (1.0 - target / (f(t - 1) / f0)).clamp(1e-8, 0.999);
            let prev = alpha_bar[t - 1];
            alpha_bar.push(prev * (1.0 - beta));
        }
        NoiseSchedule { alpha_bar }
    }

    /// Linear β from `beta_start` to `beta_end`.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut alpha_bar = vec![1.0];
        for t in 1..=t_max {
            let frac = if t_max > 1 { (t - 1) as f64 / (t_max - 1) as f64 } else { 0.0 };
            let beta = beta_start + (beta_end - beta_start) * frac;
            let prev = alpha_bar[t - 1];
            alpha_bar.push(prev * (1.0 - beta));
        }
        NoiseSchedule { alpha_bar }
    }

    pub fn new(kind: ScheduleKind, t_max: usize) -> Self {
        match kind {
            ScheduleKind::Cosine => Self::cosine(t_max),
            ScheduleKind::Linear => Self::linear(t_max, 1e-4, 0.02),
        }
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::config(format!("timestep {t} outside [0, {}]", self.t_max())))
    }

    pub fn table(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `t,alpha_bar` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,alpha_bar\n");
        for (t, a) in self.alpha_bar.iter().enumerate() {
            let _ = writeln!(s, "{t},{a:.17e}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn add_noise<T: Real>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    x0.ensure_same_shape(eps, "noise")?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

pub fn gaussian_like<T: Real, R: Rng + ?Sized>(shape: (usize, usize, usize), rng: &mut R) -> Tensor<T> {
    let (c, h, w) = shape;
    let data = (0..c * h * w)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
        .collect();
    Tensor { channels: c, height: h, width: w, data }
}

/// Per-timestep loss weight ω(t).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Constant,
    OneMinusAlphaBar,
    Snr,
}

impl Weighting {
    pub fn weight(self, sched: &NoiseSchedule, t: usize) -> Result<f64> {
        let ab = sched.alpha_bar(t)?;
        Ok(match self {
            Weighting::Constant => 1.0,
            Weighting::OneMinusAlphaBar => 1.0 - ab,
            Weighting::Snr => ab / (1.0 - ab).max(1e-12),
        })
    }
}

/// Prompt strings mapped to embedding rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptVocab {
    pub prompts: Vec<String>,
}

impl PromptVocab {
    pub fn id(&self, prompt: &str) -> Option<usize> {
        self.prompts.iter().position(|p| p == prompt)
    }

    pub fn require(&self, prompt: &str) -> Result<usize> {
        self.id(prompt)
            .ok_or_else(|| Error::config(format!("prompt '{prompt}' is not in the vocabulary")))
    }

    pub fn insert(&mut self, prompt: &str) -> usize {
        match self.id(prompt) {
            Some(i) => i,
            None => {
                self.prompts.push(prompt.to_string());
                self.prompts.len() - 1
            }
        }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::ingestion(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_is_valid() {
        let s = NoiseSchedule::cosine(1000);
        assert_eq!(s.t_max(), 1000);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        NoiseSchedule::from_alpha_bar(s.table().to_vec()).unwrap();
        assert!(s.alpha_bar(1000).unwrap() < 1e-3);
        assert!(s.alpha_bar(1001).is_err());
        NoiseSchedule::from_alpha_bar(NoiseSchedule::linear(1000, 1e-4, 0.02).table().to_vec()).unwrap();
    }

    #[test]
    fn table_validation() {
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.5]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.5]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.0, 0.0]).is_err());
        NoiseSchedule::from_alpha_bar(vec![1.0, 0.25, 0.0]).unwrap();
    }

    #[test]
    fn add_noise_endpoints_and_hand_value() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25, 0.0]).unwrap();
        let x0 = Tensor::from_vec(1, 1, 3, vec![2.0f64, -1.5, 0.3]).unwrap();
        let eps = Tensor::from_vec(1, 1, 3, vec![4.0f64, 0.7, -2.2]).unwrap();
        assert_eq!(add_noise(&x0, 0, &eps, &s).unwrap(), x0);
        assert_eq!(add_noise(&x0, 2, &eps, &s).unwrap(), eps);
        let mid = add_noise(&x0, 1, &eps, &s).unwrap();
        assert!((mid.data[0] - 4.464_101_615_137_754).abs() < 1e-12);
        assert!(add_noise(&x0, 3, &eps, &s).is_err());
        let wrong = Tensor::<f64>::zeros(1, 1, 2);
        assert!(add_noise(&x0, 1, &wrong, &s).is_err());
    }

    #[test]
    fn weighting_options() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.75, 0.2]).unwrap();
        assert_eq!(Weighting::Constant.weight(&s, 1).unwrap(), 1.0);
        assert!((Weighting::OneMinusAlphaBar.weight(&s, 1).unwrap() - 0.25).abs() < 1e-15);
        assert!((Weighting::Snr.weight(&s, 1).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn vocab_round_trip() {
        let mut v = PromptVocab::default();
        assert_eq!(v.insert("a"), 0);
        assert_eq!(v.insert("b"), 1);
        assert_eq!(v.insert("a"), 0);
        assert!(v.require("c").is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        assert_eq!(PromptVocab::load(&p).unwrap(), v);
    }
}
