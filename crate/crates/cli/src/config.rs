//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lnprune::data::{load_idx, synth_generate, Dataset, Split, SynthSpec};
use lnprune::graph::zoo::{self, Head};
use lnprune::graph::{load_model, ModelGraph};
use lnprune::pipeline::geometric_rounds;
use lnprune::prune::{Criterion, Targets, VGG16_KEEP_ROUNDS};
use lnprune::stats::NormSchedule;
use lnprune::train::TrainConfig;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DataSource,
    #[serde(default)]
    pub model: Option<ModelSource>,
    #[serde(default)]
    pub rounds: Option<RoundsSpec>,
    #[serde(default = "default_criterion")]
    pub criterion: String,
    /// Norm orders per layer for feature-map criteria, overriding the named policy.
    #[serde(default)]
    pub norm_overrides: std::collections::BTreeMap<String, lnprune::stats::NormOrder>,
    /// Criteria for comparison runs; empty means a single run of `criterion`.
    #[serde(default)]
    pub compare: Vec<String>,
    #[serde(default = "default_stats_samples")]
    pub stats_samples: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_criterion() -> String {
    "fm-layerwise".into()
}

fn default_stats_samples() -> usize {
    100
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthSpec),
    Idx(IdxPaths),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub val_images: PathBuf,
    pub val_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default)]
    pub class_count: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Path(PathBuf),
    Vgg(VggSpec),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VggSpec {
    pub blocks: Vec<Vec<usize>>,
    /// Hidden dense widths of an fc head; absent means a GAP head.
    #[serde(default)]
    pub fc: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
    /// Train all layers from scratch before pruning.
    #[serde(default)]
    pub pretrain: Option<Pretrain>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pretrain {
    pub lr: f32,
    #[serde(default = "default_pretrain_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_pretrain_epochs() -> usize {
    20
}

fn default_patience() -> usize {
    3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RoundsSpec {
    /// Keep counts per round, keyed by layer id.
    Explicit(Vec<Targets>),
    /// Every unit shrinks geometrically to `final_fraction` over `count` rounds.
    Geometric { count: usize, final_fraction: f64 },
    /// The VGG16 schedule divided by `divisor` (rounded up), for VGG16-shaped nets.
    Vgg16Table {
        divisor: usize,
        #[serde(default = "default_table_rounds")]
        count: usize,
    },
}

fn default_table_rounds() -> usize {
    9
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.criterion()?;
        self.compare_criteria()?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        match &self.rounds {
            Some(RoundsSpec::Geometric { final_fraction, .. })
                if !(*final_fraction > 0.0 && *final_fraction <= 1.0) =>
            {
                return Err(CliError::Config("final_fraction must be in (0, 1]".into()))
            }
            Some(RoundsSpec::Vgg16Table { divisor: 0, .. }) => {
                return Err(CliError::Config("divisor must be positive".into()))
            }
            Some(RoundsSpec::Vgg16Table { count, .. }) if *count > 9 => {
                return Err(CliError::Config("the VGG16 table has 9 rounds".into()))
            }
            _ => {}
        }
        Ok(())
    }

    fn parse_criterion(&self, name: &str) -> Result<Criterion, CliError> {
        let mut c: Criterion = name
            .parse()
            .map_err(|e: lnprune::prune::PruneError| CliError::Config(e.to_string()))?;
        if let Criterion::FeatureMapNorm { schedule } = &mut c {
            schedule.overrides = self.norm_overrides.clone();
        }
        Ok(c)
    }

    pub fn criterion(&self) -> Result<Criterion, CliError> {
        self.parse_criterion(&self.criterion)
    }

    pub fn compare_criteria(&self) -> Result<Vec<Criterion>, CliError> {
        self.compare.iter().map(|n| self.parse_criterion(n)).collect()
    }

    pub fn schedule(&self) -> NormSchedule {
        match self.criterion() {
            Ok(Criterion::FeatureMapNorm { schedule }) => schedule,
            _ => NormSchedule {
                overrides: self.norm_overrides.clone(),
                ..NormSchedule::layer_wise()
            },
        }
    }

    pub fn datasets(&self, base: &Path) -> Result<Splits, CliError> {
        match &self.data {
            DataSource::Synth(spec) => {
                let s = synth_generate(spec)?;
                Ok(Splits {
                    train: s.train,
                    val: s.val,
                    test: s.test,
                })
            }
            DataSource::Idx(p) => {
                let load = |img: &Path, lab: &Path, split| {
                    load_idx(&base.join(img), &base.join(lab), p.class_count, split)
                };
                Ok(Splits {
                    train: load(&p.train_images, &p.train_labels, Split::Train)?,
                    val: load(&p.val_images, &p.val_labels, Split::Val)?,
                    test: load(&p.test_images, &p.test_labels, Split::Test)?,
                })
            }
        }
    }

    /// Untrained or loaded model as described by the config, and whether it asks for pretraining.
    pub fn initial_model(
        &self,
        base: &Path,
        input: [usize; 3],
        classes: usize,
    ) -> Result<(ModelGraph, Option<Pretrain>), CliError> {
        match &self.model {
            None => Err(CliError::Config("config has no `model` section".into())),
            Some(ModelSource::Path(p)) => Ok((load_model(&base.join(p))?, None)),
            Some(ModelSource::Vgg(v)) => {
                let head = match &v.fc {
                    None => Head::Gap,
                    Some(h) => Head::Fc(h.clone()),
                };
                let g = zoo::vgg(input, &v.blocks, head, classes, v.seed)
                    .map_err(|e| CliError::Config(format!("model: {e}")))?;
                Ok((g, v.pretrain.clone()))
            }
        }
    }

    pub fn rounds(&self, graph: &ModelGraph) -> Result<Vec<Targets>, CliError> {
        match &self.rounds {
            None => Err(CliError::Config("config has no `rounds` section".into())),
            Some(RoundsSpec::Explicit(r)) => Ok(r.clone()),
            Some(RoundsSpec::Geometric {
                count,
                final_fraction,
            }) => Ok(geometric_rounds(graph, *count, *final_fraction)),
            Some(RoundsSpec::Vgg16Table { divisor, count }) => {
                let convs = graph.conv_layers();
                let ids: Vec<String> = convs.iter().map(|&i| graph.layer(i).id.clone()).collect();
                if ids.len() != 13 {
                    return Err(CliError::Config(format!(
                        "vgg16_table needs 13 conv layers, model has {}",
                        ids.len()
                    )));
                }
                Ok((1..=*count)
                    .map(|r| {
                        let per_layer = VGG16_KEEP_ROUNDS
                            .iter()
                            .zip(zoo::VGG16_BLOCKS)
                            .flat_map(|(row, block)| std::iter::repeat_n(row[r], block.len()));
                        ids.iter()
                            .cloned()
                            .zip(per_layer.map(|k| k.div_ceil(*divisor)))
                            .collect()
                    })
                    .collect())
            }
        }
    }
}
