//! Run configuration: TOML file, then `AQMM_SECTION__KEY` environment
//! overrides, then validation.

use std::path::{Path, PathBuf};

use figment::providers::{Env, Format, Serialized, Toml};
use figment::Figment;
use serde::{Deserialize, Serialize};
use so3mix::grid::GridConfig;
use so3mix::scorer::{HeadKind, ScorerConfig};
use so3mix::train::TrainConfig;
use so3mix::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Aquamam,
    AquamamMog,
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: Kind,
    pub bins: usize,
    pub frequencies: usize,
    pub context_dim: usize,
    pub hidden: [usize; 2],
    pub components: usize,
    /// Frequencies per rotation-matrix entry for the grid model.
    pub grid_frequencies: usize,
    /// Grid size `M` used to normalize the grid model at evaluation.
    pub grid_size: usize,
    pub grid_seed: u64,
    /// True rotation plus negatives scored per training example.
    pub train_candidates: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = ScorerConfig::default();
        let g = GridConfig::default();
        Self {
            kind: Kind::Aquamam,
            bins: s.bins,
            frequencies: s.frequencies,
            context_dim: s.context_dim,
            hidden: s.hidden,
            components: 512,
            grid_frequencies: g.frequencies,
            grid_size: 32_768,
            grid_seed: 1,
            train_candidates: g.train_candidates,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_samples: 40_000,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Mode-set file to train on; generated from `dataset.seed` when absent.
    pub modes: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Defaults, then the file (if any), then `AQMM_` variables.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut fig = Figment::from(Serialized::defaults(RunConfig::default()));
        if let Some(p) = path {
            if !p.exists() {
                return Err(Error::InvalidInput(format!("config file {} not found", p.display())));
            }
            fig = fig.merge(Toml::file(p));
        }
        let config: RunConfig = fig
            .merge(Env::prefixed("AQMM_").split("__"))
            .extract()
            .map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Format(format!("embedded config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        match self.model.kind {
            Kind::Grid => {
                self.grid_config().validate()?;
                if self.model.grid_size < 2 {
                    return Err(Error::InvalidInput("model.grid_size must be at least 2".into()));
                }
            }
            _ => self.scorer_config().validate()?,
        }
        if self.eval.n_samples == 0 {
            return Err(Error::InvalidInput("eval.n_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        let m = &self.model;
        ScorerConfig {
            bins: m.bins,
            frequencies: m.frequencies,
            context_dim: m.context_dim,
            hidden: m.hidden,
            head: match m.kind {
                Kind::AquamamMog => HeadKind::Mog {
                    components: m.components,
                },
                _ => HeadKind::Binned,
            },
            viewpoints: so3mix::toy::VIEWPOINTS,
        }
    }

    pub fn grid_config(&self) -> GridConfig {
        let m = &self.model;
        GridConfig {
            frequencies: m.grid_frequencies,
            context_dim: m.context_dim,
            hidden: m.hidden,
            viewpoints: so3mix::toy::VIEWPOINTS,
            train_candidates: m.train_candidates,
        }
    }
}
