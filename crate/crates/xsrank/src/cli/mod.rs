//! Operator surface: configuration, pipeline orchestration, and artifact
//! emission.
//!
//! `run` executes ingest -> features -> walk-forward training -> backtest ->
//! report for every configured model and writes `manifest.json`,
//! `decisions.csv`, `returns.csv`, `report.json`, `ndcg.csv` plus tidy plot
//! series into the output directory. Runs are idempotent: identical config
//! and seeds produce byte-identical artifacts. Input files are never
//! touched.

mod artifacts;
mod pipeline;
pub mod synth;

pub use pipeline::{print_report, run, RunOutcome};
pub use synth::{make_synthetic_panel, SynthSpec};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::LabelTarget;
use crate::rankers::{LossKind, ScorerKind};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] crate::marketdata::DataError),
    #[error("data error: {0}")]
    BadData(String),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error("model error: {0}")]
    Model(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// Exit codes: 2 config, 3 data, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::BadData(_) | CliError::Io { .. } => 3,
            CliError::Train(e) => match e {
                crate::training::TrainError::Config(_) => 2,
                _ => 4,
            },
            CliError::Model(_) => 4,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One entry of the model list: a base ranker, optionally re-ranked by a
/// context model trained with the pairwise (`+P`) or ListNet (`+L`) loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelId {
    pub base: ScorerKind,
    pub context: Option<LossKind>,
}

impl ModelId {
    /// Parse shorthand like `PW`, `LN+L`. Context variants exist only for
    /// the neural LTR bases.
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let (base_str, ctx) = match s.split_once('+') {
            None => (s, None),
            Some((b, "P")) => (b, Some(LossKind::PairwiseLogistic)),
            Some((b, "L")) => (b, Some(LossKind::ListNet)),
            Some((_, suffix)) => {
                return Err(CliError::Config(format!(
                    "unknown context suffix '+{suffix}' in model '{s}'"
                )))
            }
        };
        let base = ScorerKind::from_shorthand(base_str)
            .ok_or_else(|| CliError::Config(format!("unknown model '{s}'")))?;
        if ctx.is_some()
            && !matches!(
                base,
                ScorerKind::PairwiseNet | ScorerKind::ListMleNet | ScorerKind::ListNetNet
            )
        {
            return Err(CliError::Config(format!(
                "context variants exist only for PW/ML/LN, not '{s}'"
            )));
        }
        Ok(ModelId {
            base,
            context: ctx,
        })
    }

    pub fn name(&self) -> String {
        match self.context {
            None => self.base.shorthand().to_string(),
            Some(LossKind::PairwiseLogistic) => format!("{}+P", self.base.shorthand()),
            Some(LossKind::ListNet) => format!("{}+L", self.base.shorthand()),
            Some(other) => format!("{}+{other:?}", self.base.shorthand()),
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

fn default_models() -> Vec<String> {
    ["Rand", "Baz", "MLP", "PW", "ML", "LN", "PW+P", "PW+L", "ML+P", "ML+L", "LN+P", "LN+L"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub prices: PathBuf,
    pub vix: Option<PathBuf>,
    /// Symbols to keep; empty keeps the whole universe.
    pub universe: Vec<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            prices: PathBuf::from("prices.csv"),
            vix: None,
            universe: vec![],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub out_dir: PathBuf,
    pub models: Vec<String>,
    pub seed: u64,
    /// Worker threads for model-level parallelism; 0 picks the default.
    pub workers: usize,
    pub export_features: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            out_dir: PathBuf::from("out"),
            models: default_models(),
            seed: 42,
            workers: 0,
            export_features: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PortfolioSection {
    /// Sublist length handed to the context re-ranker.
    pub m: usize,
    /// NDCG truncation.
    pub k: usize,
    pub sigma_target: f64,
}

impl Default for PortfolioSection {
    fn default() -> Self {
        PortfolioSection {
            m: crate::strategy::SUBLIST_LEN,
            k: crate::metrics::NDCG_K,
            sigma_target: crate::strategy::SIGMA_TARGET,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub max_epochs: usize,
    pub patience: usize,
    pub train_fraction: f64,
    pub search_trials: usize,
    pub label_target: String,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            max_epochs: 100,
            patience: 25,
            train_fraction: 0.90,
            search_trials: 50,
            label_target: "vol_scaled".into(),
        }
    }
}

/// Fixed hyperparameters for one base kind; bypasses the random search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedBaseHyper {
    pub hidden_width: usize,
    pub dropout: f64,
    pub learning_rate: f64,
}

/// Fixed encoder hyperparameters; bypasses the context search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedContextHyper {
    pub d_fc: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperSection {
    pub base: BTreeMap<String, FixedBaseHyper>,
    /// Keyed by context-loss suffix (`P` or `L`); the two losses have very
    /// different gradient scales, so their step sizes differ.
    pub context: BTreeMap<String, FixedContextHyper>,
}

/// The whole run configuration; a single human-readable TOML file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub run: RunSection,
    pub portfolio: PortfolioSection,
    pub training: TrainingSection,
    pub hyper: HyperSection,
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn label_target(&self) -> Result<LabelTarget, CliError> {
        match self.training.label_target.as_str() {
            "vol_scaled" => Ok(LabelTarget::VolScaled),
            "raw" => Ok(LabelTarget::Raw),
            other => Err(CliError::Config(format!(
                "label_target must be 'vol_scaled' or 'raw', got '{other}'"
            ))),
        }
    }

    /// Validate everything checkable before touching data files.
    pub fn validate(&self) -> Result<Vec<ModelId>, CliError> {
        if self.run.models.is_empty() {
            return Err(CliError::Config("model list is empty".into()));
        }
        let mut models = Vec::new();
        for name in &self.run.models {
            models.push(ModelId::parse(name)?);
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &models {
            if !seen.insert(m.name()) {
                return Err(CliError::Config(format!("duplicate model '{m}'")));
            }
        }
        if self.portfolio.k == 0 || self.portfolio.k > self.portfolio.m {
            return Err(CliError::Config(format!(
                "need 0 < k <= m, got k={} m={}",
                self.portfolio.k, self.portfolio.m
            )));
        }
        if self.portfolio.sigma_target <= 0.0 {
            return Err(CliError::Config("sigma_target must be positive".into()));
        }
        if self.training.patience >= self.training.max_epochs {
            return Err(CliError::Config(format!(
                "patience {} must be below max_epochs {}",
                self.training.patience, self.training.max_epochs
            )));
        }
        if !(0.0 < self.training.train_fraction && self.training.train_fraction < 1.0) {
            return Err(CliError::Config("train_fraction outside (0, 1)".into()));
        }
        if self.training.search_trials == 0 {
            return Err(CliError::Config("search_trials must be positive".into()));
        }
        self.label_target()?;
        for key in self.hyper.base.keys() {
            let kind = ScorerKind::from_shorthand(key).ok_or_else(|| {
                CliError::Config(format!("hyper.base key '{key}' is not a model shorthand"))
            })?;
            if !kind.is_neural() {
                return Err(CliError::Config(format!(
                    "hyper.base.{key}: {key} takes no hyperparameters"
                )));
            }
        }
        for key in self.hyper.context.keys() {
            if key != "P" && key != "L" {
                return Err(CliError::Config(format!(
                    "hyper.context key '{key}' must be 'P' or 'L'"
                )));
            }
        }
        if !self.data.prices.exists() {
            return Err(CliError::Config(format!(
                "prices file {} does not exist",
                self.data.prices.display()
            )));
        }
        if let Some(vix) = &self.data.vix {
            if !vix.exists() {
                return Err(CliError::Config(format!(
                    "vix file {} does not exist",
                    vix.display()
                )));
            }
        }
        Ok(models)
    }
}
