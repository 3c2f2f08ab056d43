//! Experiment configuration. Every field has a default, so an empty
//! document is a complete configuration.

use serde::{Deserialize, Serialize};

use numkit::Adadelta;

use crate::autoencoder::AeDims;
use crate::code2vec::Code2VecConfig;
use crate::cohort::{CohortConfig, GeneratorConfig};
use crate::ehr::FeatureLayout;
use crate::error::{CoreError, Result};
use crate::models::Variant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds model initialisation, shuffling and dropout.
    pub seed: u64,
    pub output_dir: String,
    pub variant: Variant,
    /// Population and pre-training corpus; seeded by `generator.seed`.
    pub generator: GeneratorConfig,
    pub pretrain_corpus: PretrainCorpusConfig,
    pub cohort: CohortConfig,
    pub vocab: VocabConfig,
    pub code2vec: Code2VecConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub autoencoder: AutoencoderTrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs".into(),
            variant: Variant::Trace,
            generator: GeneratorConfig::default(),
            pretrain_corpus: PretrainCorpusConfig::default(),
            cohort: CohortConfig::default(),
            vocab: VocabConfig::default(),
            code2vec: Code2VecConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
            autoencoder: AutoencoderTrainingConfig::default(),
        }
    }
}

/// Overrides applied to the generator config for the code pre-training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainCorpusConfig {
    pub population: usize,
    pub n_codes: usize,
    pub excluded_codes: Vec<String>,
    /// Mixed into `generator.seed` for the corpus.
    pub seed_stream: u64,
}

impl Default for PretrainCorpusConfig {
    fn default() -> Self {
        Self {
            population: 1500,
            n_codes: 160,
            excluded_codes: (0..6).map(|i| format!("dx-{:03}", 10 + 8 * i)).collect(),
            seed_stream: 101,
        }
    }
}

impl PretrainCorpusConfig {
    pub fn generator(&self, base: &GeneratorConfig) -> GeneratorConfig {
        GeneratorConfig {
            seed: numkit::derive_seed(base.seed, self.seed_stream),
            population: self.population,
            n_codes: self.n_codes,
            excluded_codes: self.excluded_codes.clone(),
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_count: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { min_count: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Downsized feature count ñ.
    pub n_reduced: usize,
    /// Shared width of d_z, d_emb and d_h.
    pub dim: usize,
    /// Feed-forward width; 4·dim when absent.
    pub d_ff: Option<usize>,
    /// Attention width; `dim` when absent.
    pub d_att: Option<usize>,
    /// Hidden width of the MLP and recurrent baselines.
    pub baseline_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_reduced: 100,
            dim: 128,
            d_ff: None,
            d_att: None,
            baseline_hidden: 128,
            dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn ae_dims(&self, layout: FeatureLayout) -> AeDims {
        AeDims {
            layout,
            n_reduced: self.n_reduced,
            d_z: self.dim,
            d_emb: self.dim,
            d_ff: self.d_ff.unwrap_or(4 * self.dim),
            d_h: self.dim,
            dropout: self.dropout,
        }
    }

    pub fn d_att(&self) -> usize {
        self.d_att.unwrap_or(self.dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = Adadelta::default();
        Self {
            lr: a.lr,
            rho: a.rho,
            eps: a.eps,
        }
    }
}

impl OptimizerConfig {
    pub fn build(&self) -> Result<Adadelta> {
        Ok(Adadelta::new(self.rho, self.eps, self.lr)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_visits: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 100,
            max_visits: 30,
        }
    }
}

/// Autoencoder pre-training schedule; unset fields follow `training`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderTrainingConfig {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
}

fn range_error(path: &str, msg: impl std::fmt::Display) -> CoreError {
    CoreError::Config(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    /// Range checks; errors name the offending field path.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(range_error("model.dropout", format!("{} is outside [0, 1)", m.dropout)));
        }
        for (path, v) in [
            ("model.n_reduced", m.n_reduced),
            ("model.baseline_hidden", m.baseline_hidden),
            ("model.d_ff", m.d_ff.unwrap_or(1)),
            ("model.d_att", m.d_att.unwrap_or(1)),
            ("training.epochs", self.training.epochs),
            ("training.batch_size", self.training.batch_size),
            ("training.max_visits", self.training.max_visits),
            ("autoencoder.epochs", self.autoencoder.epochs.unwrap_or(1)),
            ("autoencoder.batch_size", self.autoencoder.batch_size.unwrap_or(1)),
            ("code2vec.dim", self.code2vec.dim),
            ("code2vec.epochs", self.code2vec.epochs),
            ("code2vec.batch_size", self.code2vec.batch_size),
            ("code2vec.window", self.code2vec.window),
            ("vocab.min_count", self.vocab.min_count),
            ("pretrain_corpus.population", self.pretrain_corpus.population),
        ] {
            if v == 0 {
                return Err(range_error(path, "must be at least 1"));
            }
        }
        if m.dim < 2 {
            return Err(range_error("model.dim", "must be at least 2"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(range_error("optimizer.lr", "must be positive"));
        }
        if !(o.rho > 0.0 && o.rho < 1.0) {
            return Err(range_error("optimizer.rho", "must lie in (0, 1)"));
        }
        if !(o.eps > 0.0 && o.eps.is_finite()) {
            return Err(range_error("optimizer.eps", "must be positive"));
        }
        self.cohort
            .validate()
            .map_err(|e| range_error("cohort", e))?;
        self.generator
            .validate()
            .map_err(|e| range_error("generator", e))?;
        self.pretrain_corpus
            .generator(&self.generator)
            .validate()
            .map_err(|e| range_error("pretrain_corpus", e))?;
        Ok(())
    }

    pub fn autoencoder_epochs(&self) -> usize {
        self.autoencoder.epochs.unwrap_or(self.training.epochs)
    }

    pub fn autoencoder_batch_size(&self) -> usize {
        self.autoencoder.batch_size.unwrap_or(self.training.batch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = ExperimentConfig::default();
        assert_eq!(c.model.n_reduced, 100);
        assert_eq!(c.model.dim, 128);
        assert_eq!(c.training.batch_size, 100);
        assert_eq!(c.training.epochs, 50);
        assert_eq!(c.training.max_visits, 30);
        assert_eq!(c.cohort.controls_per_case, 6);
        assert_eq!(c.optimizer.lr, 1.0);
        assert_eq!(c.model.dropout, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn out_of_range_dropout_names_field() {
        let mut c = ExperimentConfig::default();
        c.model.dropout = 1.5;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("model.dropout"), "{err}");
    }
}
