//! Experiment configuration: one JSON file drives every stage.

use std::fmt;
use std::path::{Path, PathBuf};

use ltx_core::concepts::{PredictorConfig, SvmConfig};
use ltx_core::gradcam::{ChannelPooling, GradCamOptions};
use ltx_core::network::{CONV1, CONV2, MIN_INPUT_EXTENT};
use ltx_core::pcbm::PcbmConfig;
use ltx_core::pruning::{PruneSchedule, PruneScope};
use ltx_core::synth::GeneratorConfig;
use serde::{Deserialize, Serialize};

/// A schema or validation failure; the CLI maps it to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    /// Seeds data generation, initialization, data order and every solver.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pruning: PruningConfig,
    pub concepts: ConceptConfig,
    pub pcbm: PcbmSection,
    pub gradcam: GradcamSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            pruning: PruningConfig::default(),
            concepts: ConceptConfig::default(),
            pcbm: PcbmSection::default(),
            gradcam: GradcamSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    EmbeddingCsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub height: usize,
    pub width: usize,
    pub num_concepts: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub class_rules: Option<Vec<Vec<usize>>>,
    /// Embedding CSVs, used when `kind` is `embedding_csv`. Relative paths
    /// resolve against the config file's directory.
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            kind: DatasetKind::Synthetic,
            height: g.height,
            width: g.width,
            num_concepts: g.num_concepts,
            num_classes: g.num_classes,
            samples_per_class: g.samples_per_class,
            noise_std: g.noise_std,
            class_rules: None,
            train_csv: None,
            test_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruningConfig {
    /// Fraction of surviving weights removed per round.
    pub fraction: f64,
    /// Rounds including the dense first one.
    pub rounds: usize,
    /// SGD steps per round.
    pub train_iters: usize,
    pub rewind: bool,
    pub scope: PruneScope,
    pub include_head: bool,
}

impl Default for PruningConfig {
    fn default() -> Self {
        let s = PruneSchedule::default();
        Self {
            fraction: s.per_round_fraction,
            rounds: s.rounds,
            train_iters: s.train_iters,
            rewind: s.rewind,
            scope: s.scope,
            include_head: s.include_head,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptMethod {
    #[default]
    Cav,
    Annotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmSection {
    pub reg: f64,
    pub epochs: usize,
}

impl Default for SvmSection {
    fn default() -> Self {
        let s = SvmConfig::default();
        Self {
            reg: s.reg,
            epochs: s.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSection {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let p = PredictorConfig::default();
        Self {
            epochs: p.epochs,
            lr: p.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptConfig {
    pub method: ConceptMethod,
    pub svm: SvmSection,
    /// Positive and negative examples drawn per concept.
    pub examples_per_concept: usize,
    pub predictor: PredictorSection,
    /// Z-score embeddings with train-set statistics before probing.
    pub standardize: bool,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        Self {
            method: ConceptMethod::Cav,
            svm: SvmSection::default(),
            examples_per_concept: 50,
            predictor: PredictorSection::default(),
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcbmSection {
    pub lambda: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub lr: f64,
    pub k: usize,
}

impl Default for PcbmSection {
    fn default() -> Self {
        let p = PcbmConfig::default();
        Self {
            lambda: p.lambda,
            alpha: p.alpha,
            epochs: p.epochs,
            lr: p.lr,
            k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcamSection {
    pub layer: String,
    pub pooling: ChannelPooling,
    /// Test-set sample ids to explain; when absent the first `num_samples`.
    pub sample_ids: Option<Vec<String>>,
    pub num_samples: usize,
    /// Target classes; when absent each sample's true label.
    pub classes: Option<Vec<usize>>,
}

impl Default for GradcamSection {
    fn default() -> Self {
        Self {
            layer: CONV2.into(),
            pooling: ChannelPooling::Mean,
            sample_ids: None,
            num_samples: 4,
            classes: None,
        }
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

impl ExperimentConfig {
    /// Parses and validates a config file. Relative CSV paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset.train_csv, &mut cfg.dataset.test_csv]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.run_id.starts_with('.')
        {
            return Err(invalid(format!(
                "run_id `{}` must be non-empty and use only [A-Za-z0-9._-]",
                self.run_id
            )));
        }
        match self.dataset.kind {
            DatasetKind::Synthetic => {
                self.generator()
                    .validate()
                    .map_err(|e| invalid(format!("dataset: {e}")))?;
                if self.dataset.height < MIN_INPUT_EXTENT || self.dataset.width < MIN_INPUT_EXTENT {
                    return Err(invalid(format!(
                        "dataset: images must be at least {MIN_INPUT_EXTENT}×{MIN_INPUT_EXTENT}"
                    )));
                }
            }
            DatasetKind::EmbeddingCsv => {
                if self.dataset.train_csv.is_none() || self.dataset.test_csv.is_none() {
                    return Err(invalid(
                        "dataset: embedding_csv needs train_csv and test_csv",
                    ));
                }
                if self.concepts.method == ConceptMethod::Cav && self.dataset.num_concepts == 0 {
                    return Err(invalid("dataset: num_concepts must be ≥ 1"));
                }
            }
        }
        self.schedule()
            .validate()
            .map_err(|e| invalid(format!("pruning: {e}")))?;
        if self.concepts.examples_per_concept < 2 {
            return Err(invalid("concepts: examples_per_concept must be ≥ 2"));
        }
        let svm = &self.concepts.svm;
        if !(svm.reg > 0.0 && svm.reg.is_finite()) || svm.epochs == 0 {
            return Err(invalid("concepts.svm: reg must be > 0 and epochs ≥ 1"));
        }
        let pred = &self.concepts.predictor;
        if !(pred.lr > 0.0 && pred.lr.is_finite()) || pred.epochs == 0 {
            return Err(invalid("concepts.predictor: lr must be > 0 and epochs ≥ 1"));
        }
        self.pcbm_config()
            .validate()
            .map_err(|e| invalid(format!("pcbm: {e}")))?;
        if self.pcbm.epochs == 0 {
            return Err(invalid("pcbm: epochs must be ≥ 1"));
        }
        let nc = self.dataset.num_concepts;
        if self.pcbm.k == 0 || (self.dataset.kind == DatasetKind::Synthetic && self.pcbm.k > nc) {
            return Err(invalid(format!("pcbm: k must lie in 1..={nc}")));
        }
        let g = &self.gradcam;
        if g.layer != CONV1 && g.layer != CONV2 {
            return Err(invalid(format!(
                "gradcam: unknown layer `{}` (expected {CONV1} or {CONV2})",
                g.layer
            )));
        }
        if let Some(classes) = &g.classes {
            let k = self.dataset.num_classes;
            if let Some(c) = classes.iter().find(|&&c| c >= k) {
                return Err(invalid(format!(
                    "gradcam: class {c} out of range for {k} classes"
                )));
            }
        }
        if let Some(ids) = &g.sample_ids {
            if ids.is_empty() {
                return Err(invalid("gradcam: sample_ids is empty"));
            }
        }
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        let d = &self.dataset;
        GeneratorConfig {
            height: d.height,
            width: d.width,
            num_concepts: d.num_concepts,
            num_classes: d.num_classes,
            samples_per_class: d.samples_per_class,
            noise_std: d.noise_std,
            seed: self.seed,
            class_rules: d.class_rules.clone(),
        }
    }

    pub fn schedule(&self) -> PruneSchedule {
        let p = &self.pruning;
        PruneSchedule {
            per_round_fraction: p.fraction,
            rounds: p.rounds,
            train_iters: p.train_iters,
            batch_size: self.model.batch_size,
            lr: self.model.lr,
            rewind: p.rewind,
            scope: p.scope,
            include_head: p.include_head,
            seed: self.seed,
        }
    }

    pub fn svm_config(&self) -> SvmConfig {
        SvmConfig {
            reg: self.concepts.svm.reg,
            epochs: self.concepts.svm.epochs,
            seed: self.seed,
        }
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        PredictorConfig {
            epochs: self.concepts.predictor.epochs,
            lr: self.concepts.predictor.lr,
            seed: self.seed,
        }
    }

    pub fn pcbm_config(&self) -> PcbmConfig {
        PcbmConfig {
            lambda: self.pcbm.lambda,
            alpha: self.pcbm.alpha,
            epochs: self.pcbm.epochs,
            lr: self.pcbm.lr,
            seed: self.seed,
        }
    }

    pub fn gradcam_options(&self) -> GradCamOptions {
        GradCamOptions {
            layer: self.gradcam.layer.clone(),
            pooling: self.gradcam.pooling,
            target_scale: 1.0,
        }
    }

    /// Rounds that produce artifacts: the schedule for image data, a single
    /// round for precomputed embeddings.
    pub fn rounds(&self) -> usize {
        match self.dataset.kind {
            DatasetKind::Synthetic => self.pruning.rounds,
            DatasetKind::EmbeddingCsv => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(json).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn defaults_validate() {
        let cfg = parse("{}").unwrap();
        assert_eq!(cfg.pruning.rounds, 15);
        assert_eq!(cfg.pcbm.k, 3);
        assert_eq!(cfg.concepts.examples_per_concept, 50);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(parse(r#"{"pruning": {"fraction": 1.0}}"#).is_err());
        assert!(parse(r#"{"pruning": {"fraction": 0.0}}"#).is_err());
        assert!(parse(r#"{"bogus": 1}"#).is_err());
        assert!(parse(r#"{"gradcam": {"layer": "fc"}}"#).is_err());
        assert!(parse(r#"{"gradcam": {"classes": [4]}}"#).is_err());
        assert!(parse(r#"{"pcbm": {"k": 9}}"#).is_err());
        assert!(parse(r#"{"run_id": "../x"}"#).is_err());
        assert!(parse(r#"{"dataset": {"kind": "embedding_csv"}}"#).is_err());
        assert!(parse(r#"{"dataset": {"height": 4, "width": 4}}"#).is_err());
    }
}
