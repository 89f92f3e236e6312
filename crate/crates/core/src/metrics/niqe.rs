//! No-reference naturalness score from MSCN statistics.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

pub const NIQE_MIN_SIDE: usize = 96;
/// Patch side at the finest scale; halved at the second scale.
pub const NIQE_PATCH: usize = 32;
const FEATURES_PER_SCALE: usize = 18;
pub const NIQE_FEATURES: usize = 2 * FEATURES_PER_SCALE;
/// Patches sharper than this fraction of the sharpest one enter the pristine fit.
const SHARPNESS_FRACTION: f64 = 0.75;
const MODEL_VERSION: u32 = 1;

static SHIPPED: &str = include_str!("../../data/niqe_pristine.json");

/// Multivariate Gaussian over patch features of pristine images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiqeModel {
    pub version: u32,
    pub patch: usize,
    pub n_patches: usize,
    pub mean: Vec<f64>,
    /// Row-major `NIQE_FEATURES²`.
    pub cov: Vec<f64>,
    pub source: String,
}

impl NiqeModel {
    /// The model fitted on the synthetic HR corpus and shipped with the crate.
    pub fn shipped() -> &'static NiqeModel {
        static MODEL: OnceLock<NiqeModel> = OnceLock::new();
        MODEL.get_or_init(|| {
            let m: NiqeModel = serde_json::from_str(SHIPPED).expect("shipped NIQE model parses");
            m.validate().expect("shipped NIQE model is consistent");
            m
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION || self.patch != NIQE_PATCH {
            return Err(Error::config(format!(
                "NIQE model version {} / patch {} does not match {MODEL_VERSION} / {NIQE_PATCH}",
                self.version, self.patch
            )));
        }
        if self.mean.len() != NIQE_FEATURES || self.cov.len() != NIQE_FEATURES * NIQE_FEATURES {
            return Err(Error::shape("NIQE model has the wrong feature dimension"));
        }
        if !self.mean.iter().chain(&self.cov).all(|v| v.is_finite()) {
            return Err(Error::numerical("NIQE model has non-finite entries"));
        }
        Ok(())
    }

    /// Fits the pristine model on the sharpest patches of `images`.
    pub fn fit(images: &[Image], source: &str) -> Result<NiqeModel> {
        let mut feats = Vec::new();
        for img in images {
            let patches = patch_features(img)?;
            let sharpest = patches.iter().map(|p| p.sharpness).fold(0.0, f64::max);
            feats.extend(
                patches
                    .into_iter()
                    .filter(|p| p.sharpness > SHARPNESS_FRACTION * sharpest)
                    .filter_map(|p| p.features),
            );
        }
        if feats.len() < 2 {
            return Err(Error::numerical("too few textured patches to fit a NIQE model"));
        }
        let (mean, cov) = mean_cov(&feats);
        let model = NiqeModel {
            version: MODEL_VERSION,
            patch: NIQE_PATCH,
            n_patches: feats.len(),
            mean,
            cov,
            source: source.to_string(),
        };
        model.validate()?;
        Ok(model)
    }
}

/// Score against the shipped pristine model; lower is more natural.
pub fn niqe(img: &Image) -> Result<f64> {
    niqe_with(img, NiqeModel::shipped())
}

pub fn niqe_with(img: &Image, model: &NiqeModel) -> Result<f64> {
    let feats: Vec<Vec<f64>> = patch_features(img)?.into_iter().filter_map(|p| p.features).collect();
    if feats.is_empty() {
        return Err(Error::numerical("image has no textured patch to score"));
    }
    let (mu, cov) = mean_cov(&feats);
    let d = NIQE_FEATURES;
    let diff = DVector::from_iterator(d, mu.iter().zip(&model.mean).map(|(a, b)| a - b));
    let pooled = DMatrix::from_row_slice(d, d, &cov)
        .zip_map(&DMatrix::from_row_slice(d, d, &model.cov), |a, b| 0.5 * (a + b));
    let inv = pooled
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::numerical(format!("NIQE covariance inversion failed: {e}")))?;
    let q = diff.dot(&(inv * &diff));
    let score = q.max(0.0).sqrt();
    if !score.is_finite() {
        return Err(Error::numerical("NIQE score is non-finite"));
    }
    Ok(score)
}

struct PatchFeatures {
    sharpness: f64,
    /// `None` for flat patches, whose statistics are undefined.
    features: Option<Vec<f64>>,
}

/// Luminance on the 0–255 scale as a row-major plane.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    fn half(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (x2, y2) = (2 * x as isize, 2 * y as isize);
                v.push(0.25 * (self.at(x2, y2) + self.at(x2 + 1, y2) + self.at(x2, y2 + 1) + self.at(x2 + 1, y2 + 1)));
            }
        }
        Plane { w, h, v }
    }
}

fn gaussian_window() -> [f64; 7] {
    let sigma = 7.0 / 6.0;
    let mut k = [0.0; 7];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 3.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable 7-tap Gaussian blur with replicated borders.
fn blur(p: &Plane) -> Plane {
    let k = gaussian_window();
    let mut tmp = vec![0.0; p.v.len()];
    for y in 0..p.h {
        for x in 0..p.w {
            tmp[y * p.w + x] = (0..7).map(|i| k[i] * p.at(x as isize + i as isize - 3, y as isize)).sum();
        }
    }
    let t = Plane { w: p.w, h: p.h, v: tmp };
    let mut out = vec![0.0; p.v.len()];
    for y in 0..p.h {
        for x in 0..p.w {
            out[y * p.w + x] = (0..7).map(|i| k[i] * t.at(x as isize, y as isize + i as isize - 3)).sum();
        }
    }
    Plane { w: p.w, h: p.h, v: out }
}

/// Mean-subtracted contrast-normalised coefficients and the local deviation map.
fn mscn(p: &Plane) -> (Plane, Plane) {
    let mu = blur(p);
    let sq = Plane { w: p.w, h: p.h, v: p.v.iter().map(|v| v * v).collect() };
    let mu2 = blur(&sq);
    let sigma: Vec<f64> = mu2.v.iter().zip(&mu.v).map(|(a, m)| (a - m * m).abs().sqrt()).collect();
    let coef = p.v.iter().zip(&mu.v).zip(&sigma).map(|((v, m), s)| (v - m) / (s + 1.0)).collect();
    (Plane { w: p.w, h: p.h, v: coef }, Plane { w: p.w, h: p.h, v: sigma })
}

fn gamma(x: f64) -> f64 {
    libm::tgamma(x)
}

/// Shape grid shared by the symmetric and asymmetric fits.
fn shape_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=9800)
            .map(|i| {
                let a = 0.2 + 0.001 * i as f64;
                (a, gamma(2.0 / a).powi(2) / (gamma(1.0 / a) * gamma(3.0 / a)))
            })
            .collect()
    })
}

fn shape_for_ratio(r: f64) -> f64 {
    shape_table()
        .iter()
        .min_by(|a, b| (a.1 - r).abs().total_cmp(&(b.1 - r).abs()))
        .map(|p| p.0)
        .expect("table is non-empty")
}

/// Generalised Gaussian fit: `(shape, variance)`.
fn ggd_fit(x: &[f64]) -> Option<[f64; 2]> {
    let n = x.len() as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if !(var > 1e-12) {
        return None;
    }
    Some([shape_for_ratio(mean_abs * mean_abs / var), var])
}

/// Asymmetric generalised Gaussian fit: `(shape, mean, left var, right var)`.
fn aggd_fit(x: &[f64]) -> Option<[f64; 4]> {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    for &v in x {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
    }
    if ln == 0 || rn == 0 {
        return None;
    }
    let (left, right) = ((ls / ln as f64).sqrt(), (rs / rn as f64).sqrt());
    let g = left / right;
    let n = x.len() as f64;
    let mean_abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    let r = mean_abs * mean_abs / mean_sq;
    let rr = r * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let a = shape_for_ratio(rr);
    let k = (gamma(1.0 / a) / gamma(3.0 / a)).sqrt();
    let (bl, br) = (left * k, right * k);
    let mean = (br - bl) * gamma(2.0 / a) / gamma(1.0 / a);
    Some([a, mean, bl * bl, br * br])
}

/// 18 features of one MSCN patch, or `None` if any fit is degenerate.
fn features_of(c: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(FEATURES_PER_SCALE);
    out.extend(ggd_fit(c)?);
    for (dx, dy) in [(1isize, 0isize), (0, 1), (1, 1), (-1, 1)] {
        let mut prod = Vec::with_capacity(c.len());
        for y in 0..p {
            for x in 0..p {
                let xs = (x as isize + dx).rem_euclid(p as isize) as usize;
                let ys = (y as isize + dy).rem_euclid(p as isize) as usize;
                prod.push(c[y * p + x] * c[ys * p + xs]);
            }
        }
        out.extend(aggd_fit(&prod)?);
    }
    Some(out)
}

fn extract(p: &Plane, x0: usize, y0: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        out.extend_from_slice(&p.v[y * p.w + x0..y * p.w + x0 + size]);
    }
    out
}

fn patch_features(img: &Image) -> Result<Vec<PatchFeatures>> {
    if img.width.min(img.height) < NIQE_MIN_SIDE {
        return Err(Error::config(format!(
            "NIQE needs images of at least {NIQE_MIN_SIDE}px per side, got {}x{}",
            img.width, img.height
        )));
    }
    let fine = Plane {
        w: img.width,
        h: img.height,
        v: img.luminance().into_iter().map(|v| v as f64 * 255.0).collect(),
    };
    let coarse = fine.half();
    let (c1, s1) = mscn(&fine);
    let (c2, _) = mscn(&coarse);
    let (px, py) = (img.width / NIQE_PATCH, img.height / NIQE_PATCH);
    let half = NIQE_PATCH / 2;
    let mut out = Vec::with_capacity(px * py);
    for j in 0..py {
        for i in 0..px {
            let (x0, y0) = (i * NIQE_PATCH, j * NIQE_PATCH);
            let sharp = extract(&s1, x0, y0, NIQE_PATCH);
            let sharpness = sharp.iter().sum::<f64>() / sharp.len() as f64;
            let features = features_of(&extract(&c1, x0, y0, NIQE_PATCH), NIQE_PATCH).and_then(|mut f| {
                f.extend(features_of(&extract(&c2, i * half, j * half, half), half)?);
                Some(f)
            });
            out.push(PatchFeatures { sharpness, features });
        }
    }
    Ok(out)
}

/// Sample mean and unbiased covariance (zero for a single sample).
fn mean_cov(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    if rows.len() > 1 {
        for r in rows {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += (r[a] - mean[a]) * (r[b] - mean[b]) / (n - 1.0);
                }
            }
        }
    }
    (mean, cov)
}
