//! Experiment configuration: one declarative document validated fully before
//! any compute runs. Unknown keys are rejected.

use crate::data::{SyntheticTaskSpec, TaskKind};
use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::pipeline::{LossKind, StageConfig};
use crate::supernet::{candidates_k4, candidates_k6, CandidateOpSpec, SuperNetSpec, TopologyItem};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub task: SyntheticTaskSpec,
    pub net: SuperNetSpec,
    pub estimator: EstimatorConfig,
    pub warmup: StageConfig,
    pub search: StageConfig,
    pub retrain: StageConfig,
    /// Validation share of the original training pool during retraining.
    #[serde(default = "default_retrain_val_fraction")]
    pub retrain_val_fraction: f64,
}

fn default_retrain_val_fraction() -> f64 {
    0.05
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {})",
                self.version, CONFIG_VERSION
            )));
        }
        self.task.validate()?;
        self.net.validate()?;
        self.estimator.validate()?;
        self.warmup.validate()?;
        self.search.validate()?;
        self.retrain.validate()?;
        if !(0.0..1.0).contains(&self.retrain_val_fraction) {
            return Err(Error::Config(format!(
                "retrain_val_fraction {} not in (0, 1)",
                self.retrain_val_fraction
            )));
        }
        if self.net.input_dim != self.task.feat_dim {
            return Err(Error::Config(format!(
                "net input_dim {} != task feat_dim {}",
                self.net.input_dim, self.task.feat_dim
            )));
        }
        if self.net.num_classes != self.task.vocab {
            return Err(Error::Config(format!(
                "net num_classes {} != task vocab {}",
                self.net.num_classes, self.task.vocab
            )));
        }
        match self.loss_kind() {
            LossKind::FrameCrossEntropy => {
                if self.net.total_stride() != 1 {
                    return Err(Error::Config(
                        "frame-level tasks need a stride-1 topology".into(),
                    ));
                }
            }
            LossKind::Ctc => {
                if self.task.subsample_factor != self.net.total_stride() {
                    return Err(Error::Config(format!(
                        "task subsample_factor {} != topology stride {}",
                        self.task.subsample_factor,
                        self.net.total_stride()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.task.kind {
            TaskKind::CtcSequence => LossKind::Ctc,
            TaskKind::FrameClassification | TaskKind::PlantedContext => LossKind::FrameCrossEntropy,
        }
    }

    /// Planted-context search on a single searching block: the task needs
    /// receptive half-width 2 and the candidate set covers {1, 2, 2, 4}.
    pub fn desk_planted(seed: u64) -> Self {
        let task = SyntheticTaskSpec {
            kind: TaskKind::PlantedContext,
            vocab: 3,
            feat_dim: 8,
            time_range: (32, 32),
            num_sequences: 800,
            num_test: 80,
            required_half_width: 2,
            noise: 0.0,
            val_fraction: 0.1,
            subsample_factor: 1,
            seed,
        };
        let net = SuperNetSpec {
            input_dim: 8,
            width: 24,
            num_classes: 3,
            dropout_p: 0.0,
            topology: vec![TopologyItem::Block {
                candidates: candidates_k4(),
            }],
        };
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed,
            task,
            net,
            estimator: EstimatorConfig::st(),
            warmup: StageConfig {
                minibatch: 16,
                max_epochs: 40,
                ..StageConfig::warmup_default()
            },
            search: StageConfig {
                minibatch: 16,
                max_epochs: 30,
                ..StageConfig::search_default()
            },
            retrain: StageConfig {
                minibatch: 16,
                max_epochs: 150,
                ..StageConfig::retrain_default()
            },
            retrain_val_fraction: 0.05,
        }
    }

    fn desk_ctc(seed: u64, candidates: Vec<CandidateOpSpec>) -> Self {
        let task = SyntheticTaskSpec {
            kind: TaskKind::CtcSequence,
            vocab: 5,
            feat_dim: 8,
            time_range: (18, 30),
            num_sequences: 240,
            num_test: 30,
            required_half_width: 0,
            noise: 0.05,
            val_fraction: 0.1,
            subsample_factor: 3,
            seed,
        };
        let net = SuperNetSpec::serial(8, 24, 5, 0.1, candidates);
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed,
            task,
            net,
            estimator: EstimatorConfig::st(),
            warmup: StageConfig {
                minibatch: 16,
                max_epochs: 25,
                ..StageConfig::warmup_default()
            },
            search: StageConfig {
                minibatch: 16,
                max_epochs: 15,
                ..StageConfig::search_default()
            },
            retrain: StageConfig {
                minibatch: 16,
                max_epochs: 60,
                ..StageConfig::retrain_default()
            },
            retrain_val_fraction: 0.05,
        }
    }

    /// The 6-block, K=4 preset (search space of 4096 sub-graphs).
    pub fn desk_ctc_k4(seed: u64) -> Self {
        Self::desk_ctc(seed, candidates_k4())
    }

    /// The 6-block, K=6 preset (search space of 46656 sub-graphs).
    pub fn desk_ctc_k6(seed: u64) -> Self {
        Self::desk_ctc(seed, candidates_k6())
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "planted" => Some(Self::desk_planted(seed)),
            "ctc-k4" => Some(Self::desk_ctc_k4(seed)),
            "ctc-k6" => Some(Self::desk_ctc_k6(seed)),
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["planted", "ctc-k4", "ctc-k6"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ExperimentConfig::preset_names() {
            let cfg = ExperimentConfig::preset(name, 7).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("preset {} invalid: {}", name, e));
        }
        assert!(ExperimentConfig::preset("nope", 0).is_none());
    }

    #[test]
    fn preset_search_space_sizes() {
        assert_eq!(ExperimentConfig::desk_ctc_k4(0).net.count_subgraphs(), 4096);
        assert_eq!(ExperimentConfig::desk_ctc_k6(0).net.count_subgraphs(), 46656);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::desk_planted(1)).unwrap();
        v.as_object_mut().unwrap().insert("bogus".into(), serde_json::json!(1));
        let parsed: std::result::Result<ExperimentConfig, _> = serde_json::from_value(v);
        assert!(parsed.is_err());
    }

    #[test]
    fn cross_field_mismatches_are_rejected() {
        let mut cfg = ExperimentConfig::desk_planted(1);
        cfg.net.input_dim = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_ctc_k4(1);
        cfg.task.subsample_factor = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_planted(1);
        cfg.version = 9;
        assert!(cfg.validate().is_err());
    }
}
