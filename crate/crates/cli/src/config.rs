use std::path::{Path, PathBuf};

use covae::data::RotatedDigitsConfig;
use covae::elbo::Family;
use covae::models::{EvalConfig, Method, ModelConfig, TrainConfig};
use covae::Error;
use serde::{Deserialize, Serialize};

/// Top-level experiment document. Nested `seed` fields are overwritten by
/// the top-level `seed` when the config is resolved.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_model() -> ModelConfig {
    ModelConfig::new(Family::Cvae)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Synthetic rotated-digits generator.
    #[serde(default)]
    pub generator: Option<RotatedDigitsConfig>,
    /// Existing CSV splits; takes precedence over `generator`.
    #[serde(default)]
    pub files: Option<DataFiles>,
    /// MCAR rates applied on top of the source data.
    #[serde(default)]
    pub missing_rate_x: f64,
    #[serde(default)]
    pub missing_rate_y: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub manifest: PathBuf,
    pub train: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub train_truth: Option<PathBuf>,
    #[serde(default)]
    pub validation_truth: Option<PathBuf>,
    #[serde(default)]
    pub test_truth: Option<PathBuf>,
}

impl DataFiles {
    fn paths_mut(&mut self) -> Vec<(&'static str, &mut PathBuf)> {
        let mut v = vec![
            ("data.files.manifest", &mut self.manifest),
            ("data.files.train", &mut self.train),
            ("data.files.validation", &mut self.validation),
            ("data.files.test", &mut self.test),
        ];
        for (k, p) in [
            ("data.files.train_truth", &mut self.train_truth),
            ("data.files.validation_truth", &mut self.validation_truth),
            ("data.files.test_truth", &mut self.test_truth),
        ] {
            if let Some(p) = p {
                v.push((k, p));
            }
        }
        v
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_latent_draws")]
    pub latent_draws: usize,
    #[serde(default = "default_covariate_samples")]
    pub covariate_samples: usize,
    /// How covariates reach the model in train, evaluate and impute.
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    /// Suite grid.
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_latent_draws() -> usize {
    EvalConfig::default().latent_draws
}
fn default_covariate_samples() -> usize {
    EvalConfig::default().covariate_samples
}
fn default_method() -> Method {
    Method::Ours
}
fn default_knn_k() -> usize {
    covae::data::DEFAULT_K
}
fn default_rates() -> Vec<f64> {
    vec![0.05, 0.1, 0.2, 0.3, 0.4]
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            latent_draws: default_latent_draws(),
            covariate_samples: default_covariate_samples(),
            method: default_method(),
            knn_k: default_knn_k(),
            rates: default_rates(),
            methods: default_methods(),
            seeds: default_seeds(),
        }
    }
}

impl EvalSection {
    pub fn eval_config(&self, seed: u64) -> EvalConfig {
        EvalConfig {
            latent_draws: self.latent_draws,
            covariate_samples: self.covariate_samples,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    /// Model archive; `<dir>/model.json` when absent.
    #[serde(default)]
    pub model: Option<PathBuf>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_out(),
            model: None,
        }
    }
}

impl OutputSection {
    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.dir.join("model.json"))
    }
}

/// Reads and resolves a config. Relative paths are taken from the config
/// file's directory; `--seed` and `--out` override the document.
pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::config(if key == "." { "<root>".into() } else { key }, e.into_inner().to_string())
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let rebase = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    if let Some(files) = &mut cfg.data.files {
        for (_, p) in files.paths_mut() {
            rebase(p);
        }
    }
    if let Some(g) = &mut cfg.data.generator {
        if let Some(p) = &mut g.glyph {
            rebase(p);
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    match out {
        Some(o) => cfg.output.dir = o.to_path_buf(),
        None => rebase(&mut cfg.output.dir),
    }
    if let Some(m) = &mut cfg.output.model {
        rebase(m);
    }
    cfg.train.seed = cfg.seed;
    if let Some(g) = &mut cfg.data.generator {
        g.seed = cfg.seed;
    }
    validate(&mut cfg)?;
    Ok(cfg)
}

fn validate(cfg: &mut ExperimentConfig) -> Result<(), Error> {
    if let Some(files) = &mut cfg.data.files {
        for (key, p) in files.paths_mut() {
            if !p.exists() {
                return Err(Error::config(key, format!("{} does not exist", p.display())));
            }
        }
    }
    if let Some(g) = &cfg.data.generator {
        g.validate()?;
    }
    for (k, r) in [("data.missing_rate_x", cfg.data.missing_rate_x), ("data.missing_rate_y", cfg.data.missing_rate_y)] {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::config(k, "must lie in [0, 1)"));
        }
    }
    if cfg.eval.rates.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(Error::config("eval.rates", "rates must lie in [0, 1)"));
    }
    if cfg.eval.latent_draws == 0 || cfg.eval.covariate_samples == 0 {
        return Err(Error::config("eval", "draw counts must be >= 1"));
    }
    if cfg.eval.knn_k == 0 {
        return Err(Error::config("eval.knn_k", "must be >= 1"));
    }
    cfg.train.validate()?;
    Ok(())
}
