//! The single run configuration: every module's settings plus paths, with
//! `key.path=value` overrides applied on top of the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use vsdnerf::diffusion::{NoiseSchedule, PretrainConfig};
use vsdnerf::i3ds::{I3dsConfig, Method};
use vsdnerf::latent_codec::CodecTrainConfig;
use vsdnerf::radiance_field::FitConfig;
use vsdnerf::{Error, Result};

/// Default data root when neither the config nor `--data-root` sets one.
pub const DATA_ROOT_ENV: &str = "VSDNERF_DATA";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneSource {
    #[default]
    Synthetic,
    Llff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub source: SceneSource,
    pub synthetic_seed: u64,
    pub gt_res: usize,
    pub n_views: usize,
    /// HR image side; LR views are a quarter of it.
    pub hr_size: usize,
    pub llff_path: Option<PathBuf>,
    /// Every `holdout_every`-th view is held out for evaluation (0 keeps all for training).
    pub holdout_every: usize,
    /// Replaces the dataset's own prompt.
    pub prompt: Option<String>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            source: SceneSource::Synthetic,
            synthetic_seed: 7,
            gt_res: 64,
            n_views: 20,
            hr_size: 128,
            llff_path: None,
            holdout_every: 5,
            prompt: None,
        }
    }
}

/// Synthetic scenes the codec and denoiser are pretrained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seeds: Vec<u64>,
    pub n_views: usize,
    pub gt_res: usize,
    pub hr_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seeds: (1000..1008).collect(),
            n_views: 16,
            gt_res: 64,
            hr_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub psnr_max_val: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { psnr_max_val: 1.0 }
    }
}

/// Unset entries are derived from the data root.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_root: Option<PathBuf>,
    pub scene_dir: Option<PathBuf>,
    pub corpus_dir: Option<PathBuf>,
    pub models_dir: Option<PathBuf>,
    pub lr_field: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every module's own `seed`.
    pub seed: u64,
    /// Copied into `i3ds.method`.
    pub method: Method,
    pub paths: PathsConfig,
    pub scene: SceneConfig,
    pub corpus: CorpusConfig,
    pub codec: CodecTrainConfig,
    pub pretrain: PretrainConfig,
    pub fit: FitConfig,
    pub i3ds: I3dsConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            method: Method::VsdLoraSpaced,
            paths: PathsConfig::default(),
            scene: SceneConfig::default(),
            corpus: CorpusConfig::default(),
            codec: CodecTrainConfig::default(),
            pretrain: PretrainConfig::default(),
            fit: FitConfig {
                steps: 3000,
                ..FitConfig::default()
            },
            i3ds: I3dsConfig::default(),
            metrics: MetricsConfig::default(),
        }
        .resolved()
    }
}

/// Resolved filesystem locations.
#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub data_root: PathBuf,
    pub scene_dir: PathBuf,
    pub corpus_dir: PathBuf,
    pub models_dir: PathBuf,
    pub lr_field: PathBuf,
    pub output_dir: PathBuf,
}

impl Paths {
    pub fn codec(&self) -> PathBuf {
        self.models_dir.join("codec.bin")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.models_dir.join("denoiser.bin")
    }

    pub fn hashes(&self) -> PathBuf {
        self.models_dir.join("hashes.json")
    }

    pub fn corpus_scene(&self, seed: u64) -> PathBuf {
        self.corpus_dir.join(format!("synthetic_{seed}"))
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::config(format!("malformed override key '{key}'")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("'{key}': '{}' is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Result<Value> {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key present")).map_err(Error::from),
        Err(_) => Ok(Value::String(raw.to_string())),
    }
}

impl RunConfig {
    /// Reads a `.toml` or `.json` file and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match path {
            None => Value::Object(Default::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let is_json = p.extension().is_some_and(|e| e == "json");
                if is_json {
                    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
                } else {
                    let t: toml::Table = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                    serde_json::to_value(t)?
                }
            }
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override '{o}' is not key=value")))?;
            set_path(&mut tree, k.trim(), parse_value(v.trim())?)?;
        }
        let config: RunConfig = serde_json::from_value(tree).map_err(|e| Error::config(e.to_string()))?;
        let config = config.resolved();
        config.validate()?;
        Ok(config)
    }

    /// Pushes the global seed and method into the module configs.
    pub fn resolved(mut self) -> Self {
        self.codec.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.fit.seed = self.seed;
        self.i3ds.seed = self.seed;
        self.i3ds.method = self.method;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        if s.hr_size == 0 || !s.hr_size.is_multiple_of(16) {
            return Err(Error::config("scene.hr_size must be a positive multiple of 16"));
        }
        if s.n_views < 2 || s.gt_res < 2 {
            return Err(Error::config("scene needs at least two views and gt_res ≥ 2"));
        }
        if s.source == SceneSource::Llff && s.llff_path.is_none() {
            return Err(Error::config("scene.source = \"llff\" needs scene.llff_path"));
        }
        if self.corpus.seeds.is_empty() || self.corpus.n_views == 0 || !self.corpus.hr_size.is_multiple_of(16) {
            return Err(Error::config("corpus needs seeds, views and an hr_size that is a multiple of 16"));
        }
        if self.fit.grid_res < 2 || self.fit.batch_rays == 0 || self.fit.n_samples < 2 || !(self.fit.lr > 0.0) {
            return Err(Error::config("fit needs grid_res ≥ 2, batch_rays > 0, n_samples ≥ 2 and lr > 0"));
        }
        if self.pretrain.network.t_max < 2 {
            return Err(Error::config("pretrain.network.t_max must be at least 2"));
        }
        if !(self.metrics.psnr_max_val > 0.0) {
            return Err(Error::config("metrics.psnr_max_val must be positive"));
        }
        self.i3ds.validate()?;
        self.i3ds.vsd.validate(&self.schedule())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(self.pretrain.schedule, self.pretrain.network.t_max)
    }

    /// SHA-256 of the canonical JSON of everything except `paths`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("paths");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    fn data_root(&self) -> PathBuf {
        self.paths
            .data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    fn scene_tag(&self) -> String {
        match self.scene.source {
            SceneSource::Synthetic => format!("synthetic_{}", self.scene.synthetic_seed),
            SceneSource::Llff => self
                .scene
                .llff_path
                .as_ref()
                .and_then(|p| p.file_name())
                .map(|n| format!("llff_{}", n.to_string_lossy()))
                .unwrap_or_else(|| "llff".into()),
        }
    }

    pub fn paths(&self) -> Paths {
        let root = self.data_root();
        let p = &self.paths;
        let scene_dir = p.scene_dir.clone().unwrap_or_else(|| match self.scene.source {
            SceneSource::Synthetic => root.join("scenes").join(self.scene_tag()),
            SceneSource::Llff => self.scene.llff_path.clone().unwrap_or_default(),
        });
        let fit_key = {
            let v = serde_json::json!({ "scene": self.scene, "fit": self.fit });
            hex::encode(&Sha256::digest(v.to_string().as_bytes())[..6])
        };
        Paths {
            scene_dir,
            corpus_dir: p.corpus_dir.clone().unwrap_or_else(|| root.join("corpus")),
            models_dir: p.models_dir.clone().unwrap_or_else(|| root.join("models")),
            lr_field: p
                .lr_field
                .clone()
                .unwrap_or_else(|| root.join("fields").join(format!("{}_{fit_key}.bin", self.scene_tag()))),
            output_dir: p
                .output_dir
                .clone()
                .unwrap_or_else(|| root.join("runs").join(self.method.name())),
            data_root: root,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }
}
