//! Experiment configuration: JSON schema, validation, and dataset
//! generation. Unknown keys are rejected everywhere (fail-closed).

use std::path::Path;

use serde::{Deserialize, Serialize};

use aff_core::data::{
    gen_graphs, gen_multisource, gen_shapes, gen_token_sentiment, MultiSourceSpec,
};
use aff_core::models::{ArchSpec, FusionMode, ModelConfig, TaskData};
use aff_core::optim::{LossConfig, TrainConfig};

use crate::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultisourceTask {
    #[serde(default = "d_2000")]
    pub n_train: usize,
    #[serde(default = "d_500")]
    pub n_test: usize,
    #[serde(default = "d_3")]
    pub k: usize,
    #[serde(default = "d_8")]
    pub d: usize,
    #[serde(default = "d_2")]
    pub classes: usize,
    #[serde(default = "d_half")]
    pub sigma: f64,
    #[serde(default = "d_half")]
    pub p_corrupt: f64,
    #[serde(default = "d_3f")]
    pub sigma_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagesTask {
    #[serde(default = "d_600")]
    pub n_train: usize,
    #[serde(default = "d_200")]
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentimentTask {
    #[serde(default = "d_600")]
    pub n_train: usize,
    #[serde(default = "d_200")]
    pub n_test: usize,
    #[serde(default = "d_12")]
    pub seq_len: usize,
    #[serde(default = "d_24")]
    pub vocab: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphsTask {
    #[serde(default = "d_600")]
    pub n_train: usize,
    #[serde(default = "d_200")]
    pub n_test: usize,
    #[serde(default = "d_4")]
    pub min_nodes: usize,
    #[serde(default = "d_8")]
    pub max_nodes: usize,
}

fn d_2000() -> usize {
    2000
}
fn d_600() -> usize {
    600
}
fn d_500() -> usize {
    500
}
fn d_200() -> usize {
    200
}
fn d_24() -> usize {
    24
}
fn d_12() -> usize {
    12
}
fn d_8() -> usize {
    8
}
fn d_4() -> usize {
    4
}
fn d_3() -> usize {
    3
}
fn d_2() -> usize {
    2
}
fn d_half() -> f64 {
    0.5
}
fn d_3f() -> f64 {
    3.0
}

impl Default for MultisourceTask {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}
impl Default for ImagesTask {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}
impl Default for SentimentTask {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}
impl Default for GraphsTask {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// Which synthetic task the experiment runs on, with its generation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskConfig {
    Multisource(MultisourceTask),
    Images(ImagesTask),
    Sentiment(SentimentTask),
    Graphs(GraphsTask),
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Multisource(_) => "multisource",
            TaskConfig::Images(_) => "images",
            TaskConfig::Sentiment(_) => "sentiment",
            TaskConfig::Graphs(_) => "graphs",
        }
    }

    fn sizes(&self) -> (usize, usize) {
        match self {
            TaskConfig::Multisource(t) => (t.n_train, t.n_test),
            TaskConfig::Images(t) => (t.n_train, t.n_test),
            TaskConfig::Sentiment(t) => (t.n_train, t.n_test),
            TaskConfig::Graphs(t) => (t.n_train, t.n_test),
        }
    }

    /// Generate the seed's full dataset and split it contiguously:
    /// first n_train samples train, last n_test test. Samples are drawn
    /// independently, so the contiguous split is unbiased and every arm
    /// sees bit-identical data for a given seed.
    pub fn generate(&self, seed: u64) -> Result<(TaskData, TaskData)> {
        let (n_train, n_test) = self.sizes();
        let n = n_train + n_test;
        fn cut<S: Clone>(mut samples: Vec<S>, n_train: usize) -> (Vec<S>, Vec<S>) {
            let test = samples.split_off(n_train);
            (samples, test)
        }
        match self {
            TaskConfig::Multisource(t) => {
                let spec = MultiSourceSpec {
                    n,
                    k: t.k,
                    d: t.d,
                    classes: t.classes,
                    sigma: t.sigma,
                    p_corrupt: t.p_corrupt,
                    sigma_noise: t.sigma_noise,
                };
                let full = gen_multisource(&spec, seed).map_err(HarnessError::Numerical)?;
                let (a, b) = cut(full.samples.clone(), n_train);
                let mut train = full.clone();
                train.samples = a;
                let mut test = full;
                test.samples = b;
                Ok((TaskData::MultiSource(train), TaskData::MultiSource(test)))
            }
            TaskConfig::Images(_) => {
                let full = gen_shapes(n, seed).map_err(HarnessError::Numerical)?;
                let (a, b) = cut(full.samples.clone(), n_train);
                let mut train = full.clone();
                train.samples = a;
                let mut test = full;
                test.samples = b;
                Ok((TaskData::Images(train), TaskData::Images(test)))
            }
            TaskConfig::Sentiment(t) => {
                let full = gen_token_sentiment(n, t.seq_len, t.vocab, seed)
                    .map_err(HarnessError::Numerical)?;
                let (a, b) = cut(full.samples.clone(), n_train);
                let mut train = full.clone();
                train.samples = a;
                let mut test = full;
                test.samples = b;
                Ok((TaskData::Tokens(train), TaskData::Tokens(test)))
            }
            TaskConfig::Graphs(t) => {
                let full = gen_graphs(n, t.min_nodes, t.max_nodes, seed)
                    .map_err(HarnessError::Numerical)?;
                let (a, b) = cut(full.samples.clone(), n_train);
                let mut train = full.clone();
                train.samples = a;
                let mut test = full;
                test.samples = b;
                Ok((TaskData::Graphs(train), TaskData::Graphs(test)))
            }
        }
    }

    /// The architecture kind and extents the task's data requires.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        match (self, &model.arch) {
            (TaskConfig::Multisource(t), ArchSpec::Direct(a)) => {
                let want: Vec<usize> = vec![t.d + 1; t.k];
                if a.dims != want {
                    return fail(format!(
                        "multisource task emits {} sources of extent {} (features plus \
                         corruption flag); model.arch.direct.dims is {:?}",
                        t.k,
                        t.d + 1,
                        a.dims
                    ));
                }
                if model.classes != t.classes {
                    return fail(format!(
                        "task has {} classes, model declares {}",
                        t.classes, model.classes
                    ));
                }
            }
            (TaskConfig::Images(_), ArchSpec::Cnn(_)) => {
                if model.classes != 3 {
                    return fail(format!(
                        "the shapes task has 3 classes, model declares {}",
                        model.classes
                    ));
                }
            }
            (TaskConfig::Sentiment(t), ArchSpec::Rnn(a)) => {
                if a.vocab != t.vocab {
                    return fail(format!(
                        "task vocab {} != model vocab {}",
                        t.vocab, a.vocab
                    ));
                }
                if model.classes != 2 {
                    return fail(format!(
                        "the sentiment task has 2 classes, model declares {}",
                        model.classes
                    ));
                }
            }
            (TaskConfig::Graphs(t), ArchSpec::Gcn(a)) => {
                if a.feat_dim != t.max_nodes {
                    return fail(format!(
                        "graph features are one-hot degrees of extent max_nodes = {}, \
                         model feat_dim is {}",
                        t.max_nodes, a.feat_dim
                    ));
                }
                if model.classes != 2 {
                    return fail(format!(
                        "the graphs task has 2 classes, model declares {}",
                        model.classes
                    ));
                }
            }
            (task, arch) => {
                return fail(format!(
                    "task {} does not match architecture {:?}",
                    task.name(),
                    arch
                ))
            }
        }
        Ok(())
    }
}

/// Loss weights as written in JSON. `aux_weight` defaults to the fusion
/// block's own `aux_weight` so the head and its loss term stay in step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_weight: Option<f64>,
    #[serde(default)]
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    #[serde(default = "default_arms")]
    pub arms: Vec<FusionMode>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

fn default_arms() -> Vec<FusionMode> {
    vec![
        FusionMode::Aff,
        FusionMode::Concat,
        FusionMode::Add,
        FusionMode::Mul,
    ]
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let config_err = |e: aff_core::Error| HarnessError::Config(e.to_string());
        if self.arms.is_empty() {
            return Err(HarnessError::Config("arms must be nonempty".into()));
        }
        for (i, arm) in self.arms.iter().enumerate() {
            if self.arms[..i].contains(arm) {
                return Err(HarnessError::Config(format!(
                    "arm {} listed twice",
                    arm.name()
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must be nonempty".into()));
        }
        for (i, seed) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(seed) {
                return Err(HarnessError::Config(format!("seed {seed} listed twice")));
            }
        }
        let (n_train, n_test) = self.task.sizes();
        if n_train == 0 || n_test == 0 {
            return Err(HarnessError::Config(
                "n_train and n_test must be at least 1".into(),
            ));
        }
        self.model.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.task.check_model(&self.model)?;
        for arm in &self.arms {
            self.loss_for(*arm).validate().map_err(config_err)?;
        }
        Ok(())
    }

    /// The model config for one experiment arm: fusion mode set, train-time
    /// dropout override applied.
    pub fn model_for(&self, arm: FusionMode) -> ModelConfig {
        let mut model = self.model.clone();
        model.fusion_mode = arm;
        if let Some(p) = self.train.dropout_p {
            model.fusion.dropout_p = p;
        }
        model
    }

    /// The loss weights for one arm. Only the adaptive arm carries the
    /// auxiliary head, so the static arms train without the auxiliary term.
    pub fn loss_for(&self, arm: FusionMode) -> LossConfig {
        let aux = if arm == FusionMode::Aff {
            self.loss.aux_weight.unwrap_or(self.model.fusion.aux_weight)
        } else {
            0.0
        };
        LossConfig {
            aux_weight: aux,
            weight_decay: self.loss.weight_decay,
        }
    }
}

/// Read and fully validate a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        HarnessError::Config(format!("cannot read {}: {e}", path.display()))
    })?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}
