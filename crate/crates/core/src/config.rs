//! TOML run configuration for the `kgntm` binary.
//!
//! Every section is a flat table and unknown keys are rejected. Missing
//! keys take the documented defaults, so an empty file is valid.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::FeatureDims;
use crate::elbo::Ablation;
use crate::error::{Error, Result};
use crate::evalkit::{ExperimentConfig, CUTOFFS};
use crate::generative::HyperParams;
use crate::predictor::DEFAULT_THRESHOLD;
use crate::pretrain::PretrainConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;
use crate::verify::VerifyBudget;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub ontology: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Output directory; created if missing.
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Expected feature widths. Inferred from the first document when unset.
    pub dims: Option<FeatureDims>,
}

/// TrainConfig minus the parts that live in their own sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub min_epochs: usize,
    pub convergence_threshold: f64,
    pub transcript_tilde_params: bool,
    pub inference_hidden: Vec<usize>,
    pub generative_hidden: Vec<usize>,
    pub distill_epochs: usize,
    pub distill_learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            min_epochs: t.min_epochs,
            convergence_threshold: t.convergence_threshold,
            transcript_tilde_params: t.transcript_tilde_params,
            inference_hidden: t.inference_hidden,
            generative_hidden: t.generative_hidden,
            distill_epochs: t.distill_epochs,
            distill_learning_rate: t.distill_learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub threshold: f64,
    pub topics_top_n: usize,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            topics_top_n: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub cutoffs: Vec<f64>,
    pub split_seed: u64,
    pub target_mean_cosine: f64,
    pub target_f1: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            cutoffs: CUTOFFS.to_vec(),
            split_seed: e.split_seed,
            target_mean_cosine: e.target_mean_cosine,
            target_f1: e.target_f1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// One seed for training, simulation and verification.
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub paths: Paths,
    pub data: DataSection,
    pub hyper: HyperParams,
    pub train: TrainSection,
    pub pretrain: PretrainConfig,
    pub ablation: Ablation,
    pub synth: SynthConfig,
    pub predict: PredictSection,
    pub eval: EvalSection,
    pub verify: VerifyBudget,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            hp: self.hyper.clone(),
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            min_epochs: t.min_epochs,
            convergence_threshold: t.convergence_threshold,
            seed: self.seed,
            ablation: self.ablation,
            transcript_tilde_params: t.transcript_tilde_params,
            inference_hidden: t.inference_hidden.clone(),
            generative_hidden: t.generative_hidden.clone(),
            pretrain: self.pretrain.clone(),
            distill_epochs: t.distill_epochs,
            distill_learning_rate: t.distill_learning_rate,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    /// The synthetic experiment takes its topic count from the generator.
    pub fn experiment_config(&self) -> ExperimentConfig {
        let mut train = self.train_config();
        train.hp.k = self.synth.k;
        ExperimentConfig {
            synth: self.synth_config(),
            train,
            threshold: self.predict.threshold,
            split_seed: self.eval.split_seed,
            target_mean_cosine: self.eval.target_mean_cosine,
            target_f1: self.eval.target_f1,
        }
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate(2, 2)?;
        self.train_config().validate()?;
        self.synth.validate()?;
        if !(0.0..=1.0).contains(&self.predict.threshold) {
            return Err(Error::Config("predict.threshold must be in [0, 1]".into()));
        }
        if self.predict.topics_top_n == 0 {
            return Err(Error::Config("predict.topics_top_n must be at least 1".into()));
        }
        if self.eval.cutoffs.is_empty() || self.eval.cutoffs.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
            return Err(Error::Config("eval.cutoffs must be non-empty fractions in (0, 1)".into()));
        }
        if self.pretrain.iterations == 0 || self.pretrain.chains == 0 {
            return Err(Error::Config("pretrain needs at least one iteration and one chain".into()));
        }
        Ok(())
    }
}
