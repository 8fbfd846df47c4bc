//! Experiment configuration: strict JSON in, resolved JSON back out.
//!
//! Parsing rejects unknown keys so a typo fails loudly instead of silently
//! falling back to a default. Defaults are applied at parse time; the
//! resolved configuration (with every default made explicit) is echoed into
//! the output directory, and re-running from that file reproduces the run
//! byte for byte.

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use dynamicfl::comms::{BudgetMode, IntervalLevel};
use dynamicfl::datastats::{self, ClientDataset, Dataset, PartitionMode, PartitionSpec};
use dynamicfl::engine::{
    compute_l, BudgetSpec, Participation, RoundLength, SelectionMethod, TrainingConfig,
};
use dynamicfl::models::{Objective, OptimizerConfig, Schedule};
use dynamicfl::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stream in the run derives from it.
    pub seed: u64,
    pub dataset: DatasetBlock,
    pub partition: PartitionBlock,
    pub training: TrainingBlock,
    pub model: ModelBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DatasetBlock {
    Synthetic {
        num_classes: usize,
        dims: usize,
        per_class: usize,
        spread: f64,
        /// Held-out test samples per class.
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
    Csv {
        train_path: PathBuf,
        test_path: PathBuf,
    },
}

fn default_test_per_class() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionBlock {
    pub num_clients: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced_k: Option<BalancedKBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dirichlet: Option<DirichletBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancedKBlock {
    pub classes_per_client: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletBlock {
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingBlock {
    pub rounds: u32,
    #[serde(default = "default_active_fraction")]
    pub active_fraction: f64,
    /// Exactly one of `local_epochs` / `updates_per_round` must be set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updates_per_round: Option<u32>,
    pub high_level: IntervalLevel,
    pub low_level: IntervalLevel,
    pub budget: BudgetBlock,
    #[serde(default = "default_selection")]
    pub selection_method: SelectionMethod,
    #[serde(default = "default_participation")]
    pub participation: Participation,
    #[serde(default = "default_ens_times")]
    pub ens_times: u32,
    /// Subset-size fraction for the random selector; defaults to beta.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_fraction: Option<f64>,
    #[serde(default = "default_eval_every")]
    pub eval_every: u32,
}

fn default_active_fraction() -> f64 {
    0.1
}

fn default_selection() -> SelectionMethod {
    SelectionMethod::Dynacomm
}

fn default_participation() -> Participation {
    Participation::All
}

fn default_ens_times() -> u32 {
    4
}

fn default_eval_every() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetBlock {
    pub mode: BudgetMode,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub objective: ObjectiveBlock,
    #[serde(default)]
    pub optimizer: OptimizerBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum ObjectiveBlock {
    QuadraticMean,
    Softmax,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerBlock {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleChoice,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        OptimizerBlock {
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            schedule: default_schedule(),
            batch_size: default_batch_size(),
        }
    }
}

fn default_learning_rate() -> f64 {
    0.01
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_schedule() -> ScheduleChoice {
    ScheduleChoice::Cosine
}

fn default_batch_size() -> usize {
    10
}

/// Schedule choice before the step horizon is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleChoice {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: default_out_dir() }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Parse and validate a config file, applying defaults.
pub fn parse_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config_str(&text)
}

/// Parse a config from JSON text.
pub fn parse_config_str(text: &str) -> anyhow::Result<ExperimentConfig> {
    let mut config: ExperimentConfig =
        serde_json::from_str(text).context("parsing experiment config")?;
    config.validate()?;
    // Make the remaining defaults explicit so the echoed config is complete.
    if config.training.random_fraction.is_none() {
        config.training.random_fraction = Some(config.training.budget.beta);
    }
    Ok(config)
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        match (&self.training.local_epochs, &self.training.updates_per_round) {
            (Some(_), Some(_)) => {
                bail!("training: set exactly one of local_epochs / updates_per_round, not both")
            }
            (None, None) => {
                bail!("training: set exactly one of local_epochs / updates_per_round")
            }
            _ => {}
        }
        match (&self.partition.balanced_k, &self.partition.dirichlet) {
            (Some(_), Some(_)) => {
                bail!("partition: set exactly one of balanced_k / dirichlet, not both")
            }
            (None, None) => bail!("partition: set exactly one of balanced_k / dirichlet"),
            _ => {}
        }
        if let DatasetBlock::Synthetic { num_classes, dims, per_class, spread, test_per_class } =
            &self.dataset
        {
            if *num_classes == 0 || *dims == 0 || *per_class == 0 || *test_per_class == 0 {
                bail!("dataset.synthetic: sizes must be positive");
            }
            if !(*spread >= 0.0) {
                bail!("dataset.synthetic: spread must be nonnegative");
            }
        }
        Ok(())
    }

    /// Both datasets of the experiment, seeded from the master seed.
    pub fn build_datasets(&self) -> anyhow::Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetBlock::Synthetic { num_classes, dims, per_class, spread, test_per_class } => {
                let train = datastats::synth_blobs(
                    *num_classes,
                    *dims,
                    *per_class,
                    *spread,
                    seeding::stream_seed(self.seed, "data-train", &[]),
                )?;
                let test = datastats::synth_blobs(
                    *num_classes,
                    *dims,
                    *test_per_class,
                    *spread,
                    seeding::stream_seed(self.seed, "data-test", &[]),
                )?;
                Ok((train, test))
            }
            DatasetBlock::Csv { train_path, test_path } => {
                let train = datastats::load_csv(train_path)
                    .with_context(|| format!("loading {}", train_path.display()))?;
                let test = datastats::load_csv(test_path)
                    .with_context(|| format!("loading {}", test_path.display()))?;
                if train.feature_dim() != test.feature_dim() {
                    bail!(
                        "train/test feature dims differ: {} vs {}",
                        train.feature_dim(),
                        test.feature_dim()
                    );
                }
                // Unify the class space across the two files.
                let classes = train.num_classes().max(test.num_classes());
                let train = rebuild_with_classes(&train, classes)?;
                let test = rebuild_with_classes(&test, classes)?;
                Ok((train, test))
            }
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let mode = if let Some(b) = &self.partition.balanced_k {
            PartitionMode::BalancedK { classes_per_client: b.classes_per_client }
        } else {
            let d = self.partition.dirichlet.as_ref().expect("validated");
            PartitionMode::Dirichlet { alpha: d.alpha }
        };
        PartitionSpec {
            mode,
            num_clients: self.partition.num_clients,
            seed: seeding::stream_seed(self.seed, "partition", &[]),
        }
    }

    pub fn build_clients(&self, train: &Dataset) -> anyhow::Result<Vec<ClientDataset>> {
        Ok(datastats::partition(train, &self.partition_spec())?)
    }

    pub fn objective(&self, data: &Dataset) -> Objective {
        match self.model.objective {
            ObjectiveBlock::QuadraticMean => Objective::QuadraticMean,
            ObjectiveBlock::Softmax => Objective::Softmax {
                num_classes: data.num_classes(),
                feature_dim: data.feature_dim(),
            },
            ObjectiveBlock::Mlp { hidden } => Objective::Mlp {
                num_classes: data.num_classes(),
                feature_dim: data.feature_dim(),
                hidden,
            },
        }
    }

    /// Updates per round implied by the training block.
    pub fn updates_per_round(&self, clients: &[ClientDataset]) -> u32 {
        match (self.training.updates_per_round, self.training.local_epochs) {
            (Some(l), _) => l,
            (None, Some(e)) => {
                let sizes: Vec<usize> = clients.iter().map(ClientDataset::len).collect();
                compute_l(&sizes, e, self.model.optimizer.batch_size, clients.len())
            }
            (None, None) => unreachable!("validated"),
        }
    }

    pub fn optimizer_config(&self, updates_per_round: u32) -> OptimizerConfig {
        let o = &self.model.optimizer;
        let schedule = match o.schedule {
            ScheduleChoice::Constant => Schedule::Constant,
            ScheduleChoice::Cosine => Schedule::Cosine {
                total_steps: u64::from(self.training.rounds).max(1)
                    * u64::from(updates_per_round),
            },
        };
        OptimizerConfig {
            learning_rate: o.learning_rate,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            schedule,
            batch_size: o.batch_size,
        }
    }

    pub fn training_config(&self, updates_per_round: u32, threads: usize) -> TrainingConfig {
        let t = &self.training;
        TrainingConfig {
            rounds: t.rounds,
            active_fraction: t.active_fraction,
            round_length: RoundLength::ExplicitUpdates(updates_per_round),
            high_level: t.high_level,
            low_level: t.low_level,
            budget: BudgetSpec { mode: t.budget.mode, beta: t.budget.beta },
            selection: t.selection_method,
            random_fraction: t.random_fraction.unwrap_or(t.budget.beta),
            participation: t.participation,
            ens_times: t.ens_times,
            seed: self.seed,
            threads,
            eval_every: t.eval_every,
            forced_high_subset: None,
        }
    }
}

fn rebuild_with_classes(data: &Dataset, num_classes: usize) -> anyhow::Result<Dataset> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let rows = data.select(&indices);
    let mut features = Vec::with_capacity(data.len() * data.feature_dim());
    for i in 0..rows.len() {
        features.extend_from_slice(rows.row(i));
    }
    Ok(Dataset::new(features, data.labels().to_vec(), data.feature_dim(), num_classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> &'static str {
        r#"{
            "seed": 7,
            "dataset": {"synthetic": {"num_classes": 4, "dims": 3, "per_class": 30, "spread": 0.8}},
            "partition": {"num_clients": 4, "balanced_k": {"classes_per_client": 1}},
            "training": {
                "rounds": 2,
                "updates_per_round": 6,
                "high_level": "a",
                "low_level": "g",
                "budget": {"mode": "dynamic", "beta": 0.6}
            },
            "model": {"objective": "softmax"}
        }"#
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let config = parse_config_str(minimal_json()).unwrap();
        assert_eq!(config.training.ens_times, 4);
        assert_eq!(config.model.optimizer.momentum, 0.9);
        assert_eq!(config.model.optimizer.schedule, ScheduleChoice::Cosine);
        assert_eq!(config.training.active_fraction, 0.1);
        assert_eq!(config.training.random_fraction, Some(0.6));
        assert_eq!(config.output.dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let bad = minimal_json().replace("\"rounds\"", "\"freqency\"");
        let err = parse_config_str(&bad).unwrap_err();
        assert!(format!("{err:#}").contains("freqency"), "{err:#}");
    }

    #[test]
    fn roundtrip_is_stable() {
        let config = parse_config_str(minimal_json()).unwrap();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let reparsed = parse_config_str(&text).unwrap();
        assert_eq!(config, reparsed);
        let again = serde_json::to_string_pretty(&reparsed).unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn both_round_lengths_rejected() {
        let bad = minimal_json()
            .replace("\"updates_per_round\": 6", "\"updates_per_round\": 6, \"local_epochs\": 5");
        assert!(parse_config_str(&bad).is_err());
    }

    #[test]
    fn partition_mode_required() {
        let bad = minimal_json().replace("\"balanced_k\": {\"classes_per_client\": 1}", "");
        let bad = bad.replace("{\"num_clients\": 4, }", "{\"num_clients\": 4}");
        assert!(parse_config_str(&bad).is_err());
    }

    #[test]
    fn builds_datasets_and_clients() {
        let config = parse_config_str(minimal_json()).unwrap();
        let (train, test) = config.build_datasets().unwrap();
        assert_eq!(train.len(), 120);
        assert_eq!(test.len(), 200);
        let clients = config.build_clients(&train).unwrap();
        assert_eq!(clients.len(), 4);
        let l = config.updates_per_round(&clients);
        assert_eq!(l, 6);
        let opt = config.optimizer_config(l);
        assert_eq!(opt.schedule, Schedule::Cosine { total_steps: 12 });
    }
}
