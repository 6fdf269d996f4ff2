//! Experiment configuration: defaults, the flat key/value config file, and
//! validation against the dataset and episodic protocol.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::HeadKind;
use crate::data::{Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::openset::{LossWeights, Technique};

/// Where the embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    Synthetic {
        num_classes: usize,
        items_per_class: usize,
        d_in: usize,
        inter_class_scale: f64,
        intra_class_sigma: f64,
    },
    File(String),
}

/// Everything a run needs. The snapshot stored in a run record is exactly
/// this struct, which is sufficient to reproduce the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Seed for synthetic generation; defaults to `seed`.
    pub data_seed: Option<u64>,
    pub split_fraction: f64,
    /// Seed for the label split; defaults to `seed`.
    pub split_seed: Option<u64>,
    pub k_way: usize,
    pub n_shot: usize,
    pub head_kind: HeadKind,
    pub technique: Technique,
    pub weights: LossWeights,
    pub tau: f64,
    pub d_feat: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_iterations: u64,
    /// Hard cap on training iterations when set (mirrors capped-training
    /// runs); effective iterations = min(train_iterations, iteration_cap).
    pub iteration_cap: Option<u64>,
    pub eval_pairs: usize,
    pub seed: u64,
    pub out_dir: Option<String>,
    /// Whether discriminator gradients flow back into the projection.
    pub disc_backprop_phi: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic {
                num_classes: 40,
                items_per_class: 30,
                d_in: 64,
                inter_class_scale: 3.0,
                intra_class_sigma: 1.0,
            },
            data_seed: None,
            split_fraction: 0.7,
            split_seed: None,
            k_way: 5,
            n_shot: 1,
            head_kind: HeadKind::Cosine,
            technique: Technique::SoftmaxMls,
            weights: LossWeights::default(),
            tau: 0.5,
            d_feat: 64,
            learning_rate: 1e-3,
            batch_size: 16,
            train_iterations: 10_000,
            iteration_cap: None,
            eval_pairs: 1000,
            seed: 0,
            out_dir: None,
            disc_backprop_phi: true,
        }
    }
}

impl ExperimentConfig {
    pub fn effective_iterations(&self) -> u64 {
        match self.iteration_cap {
            Some(cap) => self.train_iterations.min(cap),
            None => self.train_iterations,
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }

    /// Build the synthetic generation config, when the source is synthetic.
    pub fn synthetic_config(&self) -> Option<SyntheticConfig> {
        match &self.dataset {
            DatasetSource::Synthetic {
                num_classes,
                items_per_class,
                d_in,
                inter_class_scale,
                intra_class_sigma,
            } => Some(SyntheticConfig {
                num_classes: *num_classes,
                items_per_class: *items_per_class,
                dim: *d_in,
                inter_class_scale: *inter_class_scale,
                intra_class_sigma: *intra_class_sigma,
                seed: self.data_seed(),
            }),
            DatasetSource::File(_) => None,
        }
    }

    /// Static validation (no dataset needed).
    pub fn validate(&self) -> Result<()> {
        if self.k_way < 2 {
            return Err(Error::Config(format!("k_way must be >= 2, got {}", self.k_way)));
        }
        if self.n_shot < 1 {
            return Err(Error::Config(format!("n_shot must be >= 1, got {}", self.n_shot)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        if self.d_feat < 1 {
            return Err(Error::Config("d_feat must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even and >= 2 (half known, half unknown), got {}",
                self.batch_size
            )));
        }
        if self.eval_pairs < 1 {
            return Err(Error::Config("eval_pairs must be >= 1".into()));
        }
        if !self.split_fraction.is_finite()
            || self.split_fraction <= 0.0
            || self.split_fraction >= 1.0
        {
            return Err(Error::Config(format!(
                "split_fraction must be in (0, 1), got {}",
                self.split_fraction
            )));
        }
        self.weights.validate()?;
        if self.technique == Technique::SoftmaxMls && self.head_kind != HeadKind::Cosine {
            return Err(Error::Config(
                "technique softmax-mls requires the cosine head: maximum-logit scoring needs bounded logits".into(),
            ));
        }
        if let Some(sc) = self.synthetic_config() {
            sc.validate()?;
            if sc.num_classes < 2 * self.k_way {
                return Err(Error::Config(format!(
                    "synthetic num_classes ({}) must be >= 2 * k_way ({}) so unknown sampling is possible on both splits",
                    sc.num_classes,
                    2 * self.k_way
                )));
            }
        }
        Ok(())
    }

    /// Validation that needs the loaded dataset: both split sides must
    /// support K-way sampling with an unknown pool, and classes must hold
    /// enough items for N shots plus a query.
    pub fn validate_against_dataset(&self, ds: &Dataset) -> Result<()> {
        let total = ds.label_set().len();
        let n_train = (self.split_fraction * total as f64).floor() as usize;
        let n_test = total - n_train;
        let needed = self.k_way + 1;
        if n_train < needed {
            return Err(Error::Config(format!(
                "train split would have {n_train} classes but {}-way episodes with unknown queries need at least {needed}",
                self.k_way
            )));
        }
        if n_test < needed {
            return Err(Error::Config(format!(
                "test split would have {n_test} classes but {}-way episodes with unknown queries need at least {needed}",
                self.k_way
            )));
        }
        let min_items = ds.min_items_per_class();
        if min_items < self.n_shot + 1 {
            return Err(Error::Config(format!(
                "every class needs at least n_shot + 1 = {} items (shots plus a query); smallest class has {min_items}",
                self.n_shot + 1
            )));
        }
        if ds.dim() < 1 {
            return Err(Error::Config("dataset has zero-dimensional vectors".into()));
        }
        Ok(())
    }
}

/// Parse the flat key/value config file: one `key = value` pair per line,
/// `#` comments, blank lines ignored. Unknown keys are errors.
pub fn parse_config_file(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut pairs = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
            "{}:{}: expected `key = value`, got {line:?}",
            path.display(),
            i + 1
        )))?;
        pairs.insert(key.trim().to_string(), value.trim().to_string());
    }
    apply_pairs(ExperimentConfig::default(), &pairs)
}

/// Apply key/value overrides on top of a base config (file values first,
/// then CLI flags, in that order).
pub fn apply_pairs(
    mut cfg: ExperimentConfig,
    pairs: &BTreeMap<String, String>,
) -> Result<ExperimentConfig> {
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
    }

    for (key, value) in pairs {
        match key.as_str() {
            "dataset" => {
                cfg.dataset = if value == "synthetic" {
                    match cfg.dataset {
                        DatasetSource::Synthetic { .. } => cfg.dataset,
                        DatasetSource::File(_) => ExperimentConfig::default().dataset,
                    }
                } else {
                    DatasetSource::File(value.clone())
                };
            }
            "num_classes" | "items_per_class" | "d_in" | "inter_class_scale"
            | "intra_class_sigma" => {
                let DatasetSource::Synthetic {
                    mut num_classes,
                    mut items_per_class,
                    mut d_in,
                    mut inter_class_scale,
                    mut intra_class_sigma,
                } = cfg.dataset.clone()
                else {
                    return Err(Error::Config(format!(
                        "{key} only applies to the synthetic dataset source"
                    )));
                };
                match key.as_str() {
                    "num_classes" => num_classes = num(key, value)?,
                    "items_per_class" => items_per_class = num(key, value)?,
                    "d_in" => d_in = num(key, value)?,
                    "inter_class_scale" => inter_class_scale = num(key, value)?,
                    _ => intra_class_sigma = num(key, value)?,
                }
                cfg.dataset = DatasetSource::Synthetic {
                    num_classes,
                    items_per_class,
                    d_in,
                    inter_class_scale,
                    intra_class_sigma,
                };
            }
            "data_seed" => cfg.data_seed = Some(num(key, value)?),
            "split_fraction" => cfg.split_fraction = num(key, value)?,
            "split_seed" => cfg.split_seed = Some(num(key, value)?),
            "k_way" => cfg.k_way = num(key, value)?,
            "n_shot" => cfg.n_shot = num(key, value)?,
            "head_kind" => cfg.head_kind = value.parse()?,
            "technique" => cfg.technique = value.parse()?,
            "alpha_eos" => cfg.weights.alpha_eos = num(key, value)?,
            "alpha_disc" => cfg.weights.alpha_disc = num(key, value)?,
            "tau" => cfg.tau = num(key, value)?,
            "d_feat" => cfg.d_feat = num(key, value)?,
            "learning_rate" => cfg.learning_rate = num(key, value)?,
            "batch_size" => cfg.batch_size = num(key, value)?,
            "train_iterations" => cfg.train_iterations = num(key, value)?,
            "iteration_cap" => cfg.iteration_cap = Some(num(key, value)?),
            "eval_pairs" => cfg.eval_pairs = num(key, value)?,
            "seed" => cfg.seed = num(key, value)?,
            "out_dir" => cfg.out_dir = Some(value.clone()),
            "disc_backprop_phi" => cfg.disc_backprop_phi = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn mls_with_neg_distance_head_is_rejected() {
        let cfg = ExperimentConfig {
            head_kind: HeadKind::NegDistance,
            technique: Technique::SoftmaxMls,
            ..Default::default()
        };
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\n\
             technique = eos\n\
             k_way = 4\n\
             n_shot = 5\n\
             alpha_eos = 0.25\n\
             seed = 9\n\
             num_classes = 24\n\
             iteration_cap = 1000\n",
        )
        .unwrap();
        let cfg = parse_config_file(&path).unwrap();
        assert_eq!(cfg.technique, Technique::Eos);
        assert_eq!(cfg.k_way, 4);
        assert_eq!(cfg.n_shot, 5);
        assert!((cfg.weights.alpha_eos - 0.25).abs() < 1e-12);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.iteration_cap, Some(1000));
        match cfg.dataset {
            DatasetSource::Synthetic { num_classes, .. } => assert_eq!(num_classes, 24),
            _ => panic!("expected synthetic"),
        }
        assert_eq!(cfg.effective_iterations(), 1000);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "learning_rte = 0.1\n").unwrap();
        let err = parse_config_file(&path).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn synthetic_needs_twice_k_way_classes() {
        let cfg = ExperimentConfig {
            dataset: DatasetSource::Synthetic {
                num_classes: 9,
                items_per_class: 10,
                d_in: 8,
                inter_class_scale: 3.0,
                intra_class_sigma: 1.0,
            },
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seeds_default_to_run_seed() {
        let cfg = ExperimentConfig {
            seed: 77,
            ..Default::default()
        };
        assert_eq!(cfg.data_seed(), 77);
        assert_eq!(cfg.split_seed(), 77);
        let cfg = ExperimentConfig {
            seed: 77,
            data_seed: Some(3),
            split_seed: Some(4),
            ..Default::default()
        };
        assert_eq!(cfg.data_seed(), 3);
        assert_eq!(cfg.split_seed(), 4);
    }
}
