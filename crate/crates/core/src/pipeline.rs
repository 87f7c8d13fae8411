//! Recursive prune and retrain driver.
//!
//! Each round collects importance scores on the current graph, removes kernels
//! down to the round's keep counts, fine-tunes in two stages and records
//! validation and test accuracy. The weights left by one round initialize the
//! next. With an output directory every round is persisted as
//!
//! ```text
//! round_<i>/model.lnpm  stats.csv  plan.json  record.json
//! results.csv  accuracy.dat
//! ```
//!
//! and `record.json` is written last, so its presence marks a completed round.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::graph::{load_model, save_model, write_atomic, GraphError, ModelGraph, ModelIoError};
use crate::prune::{apply_plan, build_plan, Criterion, KernelScores, PruneError, Targets};
use crate::seed::derive_seed;
use crate::stats::{collect_stats, StatsError};
use crate::train::{evaluate, finetune_two_stage, FinetuneHistory, TrainConfig, TrainError};

pub const RESULTS_HEADER: &str = "round,criterion,val_acc,test_acc,params,bytes";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("round {round}: {source}")]
    Train {
        round: usize,
        #[source]
        source: TrainError,
    },
    #[error("round {round}: {source}")]
    Prune {
        round: usize,
        #[source]
        source: PruneError,
    },
    #[error("round {round}: {source}")]
    Stats {
        round: usize,
        #[source]
        source: StatsError,
    },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    ModelIo(#[from] ModelIoError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// True when the failure is numeric divergence during training.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            PipelineError::Train {
                source: TrainError::Diverged { .. },
                ..
            }
        )
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Keep counts per round; round `i` (1-based) uses `rounds[i - 1]`.
    pub rounds: Vec<Targets>,
    pub criterion: Criterion,
    /// Samples drawn from the training split for feature-map stats.
    #[serde(default = "default_stats_samples")]
    pub stats_samples: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_stats_samples() -> usize {
    100
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.criterion.needs_stats() && self.stats_samples == 0 {
            return Err(PipelineError::Config("stats_samples must be positive".into()));
        }
        for (r, pair) in self.rounds.windows(2).enumerate() {
            for (layer, &next) in &pair[1] {
                if let Some(&prev) = pair[0].get(layer) {
                    if next > prev {
                        return Err(PipelineError::Config(format!(
                            "round {} raises `{layer}` from {prev} to {next}",
                            r + 2
                        )));
                    }
                }
            }
        }
        if let Some((layer, _)) = self.rounds.iter().flatten().find(|(_, &k)| k == 0) {
            return Err(PipelineError::Config(format!("`{layer}` target is 0")));
        }
        Ok(())
    }
}

/// Keep counts that shrink every unit geometrically to `final_fraction` over `rounds` rounds.
///
/// Round `r` keeps `ceil(c * final_fraction^(r / rounds))` of a unit's `c` kernels.
pub fn geometric_rounds(graph: &ModelGraph, rounds: usize, final_fraction: f64) -> Vec<Targets> {
    let units = graph.channel_units();
    (1..=rounds)
        .map(|r| {
            let f = final_fraction.powf(r as f64 / rounds as f64);
            units
                .iter()
                .map(|u| {
                    let keep = ((u.channels as f64 * f - 1e-9).ceil() as usize).clamp(1, u.channels);
                    (u.id.clone(), keep)
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub criterion: String,
    pub val_acc: f64,
    pub test_acc: f64,
    pub params: usize,
    /// Size of the serialized model file.
    pub bytes: u64,
    /// Kernel count of every unit after the round.
    pub kernels: BTreeMap<String, usize>,
    /// Stats file of the round, relative to the run directory.
    pub stats_ref: Option<String>,
    pub finetune: Option<FinetuneHistory>,
}

impl RoundRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.round, self.criterion, self.val_acc, self.test_acc, self.params, self.bytes
        )
    }
}

pub fn results_csv(records: &[RoundRecord]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions<'a> {
    pub out_dir: Option<&'a Path>,
    /// Continue from the last completed round found in `out_dir`.
    pub resume: bool,
    /// Stop after completing this round, as if interrupted.
    pub stop_after: Option<usize>,
}

pub struct PipelineOutcome {
    pub graph: ModelGraph,
    pub records: Vec<RoundRecord>,
}

fn kernel_counts(graph: &ModelGraph) -> BTreeMap<String, usize> {
    graph
        .channel_units()
        .into_iter()
        .map(|u| (u.id, u.channels))
        .collect()
}

fn scores_csv(scores: &KernelScores, graph: &ModelGraph) -> String {
    let mut out = String::from("layer_id,kernel_index,norm_order,value,sample_count\n");
    for unit in graph.channel_units() {
        for (k, v) in scores.layers[&unit.id].iter().enumerate() {
            out.push_str(&format!("{},{k},kernel-l1,{v:e},0\n", unit.id));
        }
    }
    out
}

struct Store<'a> {
    dir: Option<&'a Path>,
}

impl Store<'_> {
    fn round_dir(&self, round: usize) -> Option<PathBuf> {
        self.dir.map(|d| d.join(format!("round_{round}")))
    }

    fn write(&self, round: usize, name: &str, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = self.round_dir(round) {
            let path = dir.join(name);
            write_atomic(&path, bytes).map_err(io_err(&path))?;
        }
        Ok(())
    }

    fn finish_round(&self, graph: &ModelGraph, record: &RoundRecord, records: &[RoundRecord]) -> Result<()> {
        let Some(dir) = self.round_dir(record.round) else {
            return Ok(());
        };
        save_model(graph, &dir.join("model.lnpm"))?;
        let json = serde_json::to_vec_pretty(record).expect("record serializes");
        self.write(record.round, "record.json", &json)?;
        let path = self.dir.expect("dir set").join("results.csv");
        write_atomic(&path, results_csv(records).as_bytes()).map_err(io_err(&path))?;
        let path = self.dir.expect("dir set").join("accuracy.dat");
        write_atomic(&path, plot_data(records).as_bytes()).map_err(io_err(&path))
    }

    fn write_config(&self, cfg: &PipelineConfig, resume: bool) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        let path = dir.join("pipeline.json");
        let json = serde_json::to_vec_pretty(cfg).expect("config serializes");
        if resume {
            let existing = std::fs::read(&path).map_err(io_err(&path))?;
            if existing != json {
                return Err(PipelineError::Resume(
                    "pipeline config differs from the interrupted run".into(),
                ));
            }
            return Ok(());
        }
        write_atomic(&path, &json).map_err(io_err(&path))
    }

    /// Completed rounds on disk and the model of the last one.
    fn load_progress(&self) -> Result<Option<(ModelGraph, Vec<RoundRecord>)>> {
        let Some(_) = self.dir else { return Ok(None) };
        let mut records = Vec::new();
        let mut round = 0;
        while let Some(dir) = self.round_dir(round) {
            let path = dir.join("record.json");
            if !path.exists() {
                break;
            }
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            let record: RoundRecord = serde_json::from_slice(&bytes)
                .map_err(|e| PipelineError::Resume(format!("{}: {e}", path.display())))?;
            records.push(record);
            round += 1;
        }
        if records.is_empty() {
            return Ok(None);
        }
        let model = self.round_dir(round - 1).expect("dir set").join("model.lnpm");
        Ok(Some((load_model(&model)?, records)))
    }
}

/// Run rounds `1..=cfg.rounds.len()` on `graph`. Round 0 records the starting graph.
pub fn run_pipeline(
    graph: &ModelGraph,
    data: Splits<'_>,
    cfg: &PipelineConfig,
    opts: &RunOptions<'_>,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let store = Store { dir: opts.out_dir };
    let criterion = cfg.criterion.to_string();
    let resumed = if opts.resume {
        if opts.out_dir.is_none() {
            return Err(PipelineError::Resume("no output directory".into()));
        }
        store.load_progress()?
    } else {
        None
    };
    store.write_config(cfg, resumed.is_some())?;

    let (mut current, mut records) = match resumed {
        Some(progress) => progress,
        None => {
            let record = RoundRecord {
                round: 0,
                criterion: criterion.clone(),
                val_acc: evaluate(graph, data.val).map_err(|source| PipelineError::Train { round: 0, source })?,
                test_acc: evaluate(graph, data.test).map_err(|source| PipelineError::Train { round: 0, source })?,
                params: graph.param_count(),
                bytes: graph.to_bytes().len() as u64,
                kernels: kernel_counts(graph),
                stats_ref: None,
                finetune: None,
            };
            let records = vec![record];
            store.finish_round(graph, &records[0], &records)?;
            (graph.clone(), records)
        }
    };
    if records.len() > cfg.rounds.len() + 1 {
        return Err(PipelineError::Resume(format!(
            "output holds {} rounds but the config has {}",
            records.len() - 1,
            cfg.rounds.len()
        )));
    }

    for round in records.len()..=cfg.rounds.len() {
        if opts.stop_after.is_some_and(|s| round > s) {
            break;
        }
        let round_seed = derive_seed(cfg.seed, round as u64);
        let targets = &cfg.rounds[round - 1];
        let (scores, csv) = match cfg.criterion.schedule() {
            Some(schedule) => {
                let stats = collect_stats(
                    &current,
                    data.train,
                    cfg.stats_samples.min(data.train.len()),
                    schedule,
                    derive_seed(round_seed, 1),
                )
                .map_err(|source| PipelineError::Stats { round, source })?;
                (KernelScores::from_stats(&stats), stats.to_csv())
            }
            None => {
                let scores = KernelScores::kernel_l1(&current);
                let csv = scores_csv(&scores, &current);
                (scores, csv)
            }
        };
        store.write(round, "stats.csv", csv.as_bytes())?;
        let plan = build_plan(&current, &scores, targets).map_err(|source| PipelineError::Prune { round, source })?;
        store.write(
            round,
            "plan.json",
            &serde_json::to_vec_pretty(&plan).expect("plan serializes"),
        )?;
        let pruned = apply_plan(&current, &plan).map_err(|source| PipelineError::Prune { round, source })?;
        let train_cfg = TrainConfig {
            seed: derive_seed(round_seed, 2),
            ..cfg.train.clone()
        };
        let wrap = |source| PipelineError::Train { round, source };
        let (tuned, history) = finetune_two_stage(&pruned, data.train, data.val, &train_cfg).map_err(wrap)?;
        let record = RoundRecord {
            round,
            criterion: criterion.clone(),
            val_acc: evaluate(&tuned, data.val).map_err(wrap)?,
            test_acc: evaluate(&tuned, data.test).map_err(wrap)?,
            params: tuned.param_count(),
            bytes: tuned.to_bytes().len() as u64,
            kernels: kernel_counts(&tuned),
            stats_ref: Some(format!("round_{round}/stats.csv")),
            finetune: Some(history),
        };
        records.push(record);
        store.finish_round(&tuned, records.last().expect("pushed"), &records)?;
        current = tuned;
    }
    Ok(PipelineOutcome {
        graph: current,
        records,
    })
}

/// One pipeline per criterion with otherwise identical config, in
/// `<out_dir>/<criterion>/`, plus `comparison.csv` and per-criterion
/// `<criterion>.dat` (round, test accuracy) files.
pub fn compare_criteria(
    graph: &ModelGraph,
    data: Splits<'_>,
    base: &PipelineConfig,
    criteria: &[Criterion],
    opts: &RunOptions<'_>,
) -> Result<Vec<PipelineOutcome>> {
    let out_dir = opts.out_dir;
    let mut outcomes = Vec::with_capacity(criteria.len());
    for criterion in criteria {
        let cfg = PipelineConfig {
            criterion: criterion.clone(),
            ..base.clone()
        };
        let sub = out_dir.map(|d| d.join(criterion.to_string()));
        let sub_opts = RunOptions {
            out_dir: sub.as_deref(),
            ..opts.clone()
        };
        outcomes.push(run_pipeline(graph, data, &cfg, &sub_opts)?);
    }
    if let Some(dir) = out_dir {
        let all: Vec<RoundRecord> = outcomes.iter().flat_map(|o| o.records.clone()).collect();
        let path = dir.join("comparison.csv");
        write_atomic(&path, results_csv(&all).as_bytes()).map_err(io_err(&path))?;
        for (criterion, outcome) in criteria.iter().zip(&outcomes) {
            let path = dir.join(format!("{criterion}.dat"));
            write_atomic(&path, plot_data(&outcome.records).as_bytes()).map_err(io_err(&path))?;
        }
    }
    Ok(outcomes)
}

/// Two whitespace-separated columns: round and test accuracy.
pub fn plot_data(records: &[RoundRecord]) -> String {
    let mut out = String::from("# round test_acc\n");
    for r in records {
        out.push_str(&format!("{} {}\n", r.round, r.test_acc));
    }
    out
}
