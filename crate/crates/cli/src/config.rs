use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use discovery_core::autointerp::{BackendMode, LlmBackendConfig, DEFAULT_EXEMPLARS};
use discovery_core::bootstrap::BootstrapConfig;
use discovery_core::inference::InferenceConfig;
use discovery_core::scoring::CiMethod;
use discovery_core::transform::{PiSource, TransformKind, TransformSpec};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub corpus: PathBuf,
    pub activations: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    #[serde(default)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    pub kind: TransformKind,
    pub pi: f64,
    pub pi_source: PiSource,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            kind: TransformKind::HtDiffInMeans,
            pi: 0.5,
            pi_source: PiSource::Fixed,
        }
    }
}

impl TransformConfig {
    pub fn spec(&self) -> TransformSpec {
        TransformSpec {
            kind: self.kind,
            pi: self.pi,
            pi_source: self.pi_source,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub eval_fraction: f64,
    /// Rows on which a feature must vary to be kept.
    pub degenerate_scope: DegenerateScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegenerateScope {
    Estimation,
    Full,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            eval_fraction: 0.10,
            degenerate_scope: DegenerateScope::Estimation,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutointerpConfig {
    pub exemplars: usize,
    pub alpha_ci: f64,
    pub ci_method: CiMethod,
    pub backend: LlmBackendConfig,
}

impl Default for AutointerpConfig {
    fn default() -> Self {
        Self {
            exemplars: DEFAULT_EXEMPLARS,
            alpha_ci: 0.05,
            ci_method: CiMethod::Jeffreys,
            backend: LlmBackendConfig::default(),
        }
    }
}

/// One `analyze` run. Relative paths resolve against the config file's
/// directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub input: InputConfig,
    #[serde(default)]
    pub transform: TransformConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    /// Omit to stop after inference.
    pub autointerp: Option<AutointerpConfig>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub bootstrap_draws: Option<usize>,
    pub eval_fraction: Option<f64>,
    pub mock_llm: bool,
    pub out: Option<PathBuf>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: &Path, ov: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.input.corpus = resolve(base, &cfg.input.corpus);
        cfg.input.activations = cfg.input.activations.as_deref().map(|p| resolve(base, p));
        cfg.input.dictionary = cfg.input.dictionary.as_deref().map(|p| resolve(base, p));
        cfg.output_dir = resolve(base, &cfg.output_dir);
        if let Some(a) = cfg.autointerp.as_mut() {
            a.backend.cache_dir = a.backend.cache_dir.as_deref().map(|p| resolve(base, p));
        }
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(a) = ov.alpha {
            self.inference.alpha = a;
        }
        if let Some(k) = ov.k {
            self.inference.k = k;
        }
        if let Some(b) = ov.bootstrap_draws {
            self.bootstrap.n_draws = b;
        }
        if let Some(f) = ov.eval_fraction {
            self.split.eval_fraction = f;
        }
        if let Some(o) = &ov.out {
            self.output_dir = o.clone();
        }
        if ov.mock_llm {
            if let Some(a) = self.autointerp.as_mut() {
                a.backend.mode = BackendMode::Mock;
            }
        }
        // sidedness is an inference choice; the bootstrap follows it
        self.bootstrap.side = self.inference.side;
    }

    fn validate(&self) -> Result<()> {
        match (&self.input.activations, &self.input.dictionary) {
            (Some(_), Some(_)) => bail!("give either input.activations or input.dictionary, not both"),
            (None, None) => bail!("input needs activations or a dictionary"),
            _ => {}
        }
        for p in [Some(&self.input.corpus), self.input.activations.as_ref(), self.input.dictionary.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                bail!("input file {} does not exist", p.display());
            }
        }
        if self.autointerp.is_some() && self.input.activations.is_none() {
            bail!("autointerp needs token activations to build exemplars");
        }
        self.bootstrap.validate()?;
        self.inference.validate()?;
        if let Some(a) = &self.autointerp {
            a.backend.validate()?;
        }
        Ok(())
    }
}
