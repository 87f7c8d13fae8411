//! `lnprune`: feature-map-norm kernel pruning from the command line.
//!
//! Exit codes: 0 success, 1 other failure, 2 config error, 3 data error,
//! 4 numeric failure (divergence or a failed surgery check).

mod config;

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use lnprune::data::{encode_idx, load_idx, synth_generate, DataError, Dataset, Split, SynthSpec};
use lnprune::graph::{load_model, save_model, write_atomic, ModelGraph, ModelIoError};
use lnprune::pipeline::{
    compare_criteria, results_csv, run_pipeline, PipelineConfig, PipelineError, RunOptions, Splits,
};
use lnprune::prune::{apply_plan, build_plan, plan_report, verify_plan, KernelScores, PruneError};
use lnprune::seed::derive_seed;
use lnprune::stats::{collect_stats, correlation_report, StatsError};
use lnprune::tensor::Tensor;
use lnprune::train::{evaluate, train_stage, Scope, TrainConfig, TrainError};

use config::RunConfig;

/// Largest logit difference accepted by `prune --verify`.
const VERIFY_TOLERANCE: f32 = 1e-5;
/// Samples in the `prune --verify` probe batch.
const PROBE_SAMPLES: usize = 16;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelIoError> for CliError {
    fn from(e: ModelIoError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            TrainError::Data(_) | TrainError::EmptyDataset => CliError::Data(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::Data(_) | StatsError::EmptyDataset | StatsError::SampleCount { .. } => {
                CliError::Data(e.to_string())
            }
            StatsError::UnknownLayer(_) | StatsError::InvalidOrder(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<PruneError> for CliError {
    fn from(e: PruneError) -> Self {
        match e {
            PruneError::ZeroTarget(_)
            | PruneError::TargetTooLarge { .. }
            | PruneError::ConflictingTargets { .. }
            | PruneError::UnknownLayer(_)
            | PruneError::UnknownCriterion(_) => CliError::Config(e.to_string()),
            PruneError::Stats(s) => s.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_divergence() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            PipelineError::Config(_) => CliError::Config(e.to_string()),
            PipelineError::Data(_) => CliError::Data(e.to_string()),
            PipelineError::Prune { source, .. } => source.into(),
            PipelineError::Stats { source, .. } => source.into(),
            PipelineError::Train { source, .. } => source.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

fn io_other(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Other(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "lnprune", version, about = "Kernel pruning ranked by feature-map norms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-kernel feature-map norms and their rank correlation with kernel-L1.
    Stats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output CSV; a `correlation.csv` is written next to it.
        #[arg(long, default_value = "stats.csv")]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one round of surgery (no training).
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// 1-based round whose keep counts are applied.
        #[arg(long, default_value_t = 1)]
        round: usize,
        #[arg(long)]
        out: PathBuf,
        /// Plan JSON path; defaults to `plan.json` next to `--out`.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Compare the pruned logits with the masked-unpruned oracle on a probe batch.
        #[arg(long)]
        verify: bool,
    },
    /// Recursive prune and fine-tune.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Run only the first N rounds.
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the last completed round.
        #[arg(long)]
        resume: bool,
        /// Stop after this round, leaving a resumable run.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Print top-1 accuracy as `accuracy=<float>`.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with_all = ["images", "labels"])]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Generate the synthetic dataset as IDX files.
    Synth {
        /// Take the synthetic-data settings from a config's `data.synth` section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f32,
        #[arg(long, default_value_t = 60)]
        train: usize,
        #[arg(long, default_value_t = 25)]
        val: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn cmd_stats(
    config: &Path,
    model: &Path,
    out: &Path,
    samples: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let graph = load_model(model)?;
    let data = cfg.datasets(&config_dir(config))?;
    let n = samples.unwrap_or(cfg.stats_samples).min(data.train.len());
    let stats = collect_stats(&graph, &data.train, n, &cfg.schedule(), seed.unwrap_or(cfg.seed))?;
    let report = correlation_report(&stats, &graph)?;
    stats.write_csv(out)?;
    let mut csv = String::from("layer_id,kernels,norm_order,spearman\n");
    for row in &report {
        let rho = row.rho.map(|r| r.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{rho}\n", row.layer_id, row.kernels, row.order));
    }
    let corr = out.with_file_name("correlation.csv");
    write_atomic(&corr, csv.as_bytes()).map_err(io_other(&corr))?;
    print!("{csv}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_prune(
    config: &Path,
    model: &Path,
    round: usize,
    out: &Path,
    plan_path: Option<&Path>,
    seed: Option<u64>,
    verify: bool,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let graph = load_model(model)?;
    let rounds = cfg.rounds(&graph)?;
    if round == 0 || round > rounds.len() {
        return Err(CliError::Config(format!(
            "round {round} is outside 1..={}",
            rounds.len()
        )));
    }
    let criterion = cfg.criterion()?;
    let data = cfg.datasets(&config_dir(config))?;
    // same seed derivation as the pipeline, so a round can be replayed
    let round_seed = derive_seed(seed.unwrap_or(cfg.seed), round as u64);
    let scores = match criterion.schedule() {
        Some(schedule) => {
            let n = cfg.stats_samples.min(data.train.len());
            let stats = collect_stats(&graph, &data.train, n, schedule, derive_seed(round_seed, 1))?;
            KernelScores::from_stats(&stats)
        }
        None => KernelScores::kernel_l1(&graph),
    };
    let plan = build_plan(&graph, &scores, &rounds[round - 1])?;
    let pruned = apply_plan(&graph, &plan)?;
    if verify {
        let probe = probe_batch(&graph, &data.val)?;
        let diff = verify_plan(&graph, &pruned, &plan, &probe)?;
        println!("verify max_abs_diff={diff:e}");
        if !(diff <= VERIFY_TOLERANCE) {
            return Err(CliError::Numeric(format!(
                "pruned logits differ from the masked oracle by {diff:e}"
            )));
        }
    }
    let plan_path = plan_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_file_name("plan.json"));
    let json = serde_json::to_vec_pretty(&plan).expect("plan serializes");
    write_atomic(&plan_path, &json).map_err(io_other(&plan_path))?;
    let bytes = save_model(&pruned, out)?;
    let report = plan_report(&plan, &graph, &pruned);
    println!(
        "removed={} params_before={} params_after={} ratio={} bytes={bytes}",
        plan.removed_kernels(),
        report.params_before,
        report.params_after,
        report.ratio
    );
    Ok(())
}

fn probe_batch(graph: &ModelGraph, data: &Dataset) -> Result<Tensor, CliError> {
    let n = PROBE_SAMPLES.min(data.len());
    let (x, _) = data.batch(&(0..n).collect::<Vec<_>>());
    let [_, h, _] = graph.input_shape();
    if x.shape()[2] == h {
        Ok(x)
    } else {
        Ok(lnprune::data::center_crop(&x, h)?)
    }
}

/// Exclusive ownership of an output directory for one invocation.
fn lock_dir(dir: &Path) -> Result<File, CliError> {
    std::fs::create_dir_all(dir).map_err(io_other(dir))?;
    let path = dir.join(".lnprune.lock");
    let file = File::create(&path).map_err(io_other(&path))?;
    file.try_lock().map_err(|_| {
        CliError::Other(format!("{} is in use by another lnprune process", dir.display()))
    })?;
    Ok(file)
}

fn pretrained(
    cfg: &RunConfig,
    base: &Path,
    data: &config::Splits,
    out_dir: &Path,
    resume: bool,
) -> Result<ModelGraph, CliError> {
    let path = out_dir.join("baseline.lnpm");
    if resume && path.exists() {
        return Ok(load_model(&path)?);
    }
    let (graph, pretrain) =
        cfg.initial_model(base, data.train.sample_shape(), data.train.class_count())?;
    let graph = match pretrain {
        None => graph,
        Some(p) => {
            let tc = TrainConfig {
                max_epochs: p.max_epochs,
                patience: p.patience,
                ..cfg.train.clone()
            };
            let seed = derive_seed(cfg.seed, u64::MAX);
            let (g, result) = train_stage(&graph, &data.train, &data.val, Scope::All, p.lr, 0, &tc, seed)?;
            eprintln!(
                "pretrained {} epochs, val accuracy {}",
                result.epochs.len(),
                result.best_val
            );
            g
        }
    };
    save_model(&graph, &path)?;
    Ok(graph)
}

fn cmd_pipeline(
    config: &Path,
    rounds: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let base = config_dir(config);
    let out_dir = out
        .or_else(|| cfg.output_dir.as_ref().map(|d| base.join(d)))
        .ok_or_else(|| CliError::Config("no output directory (`output_dir` or --out)".into()))?;
    let data = cfg.datasets(&base)?;
    let _lock = lock_dir(&out_dir)?;
    let graph = pretrained(&cfg, &base, &data, &out_dir, resume)?;
    let mut schedule = cfg.rounds(&graph)?;
    if let Some(r) = rounds {
        schedule.truncate(r);
    }
    let pc = PipelineConfig {
        rounds: schedule,
        criterion: cfg.criterion()?,
        stats_samples: cfg.stats_samples,
        train: cfg.train.clone(),
        seed: cfg.seed,
    };
    let splits = Splits {
        train: &data.train,
        val: &data.val,
        test: &data.test,
    };
    let opts = RunOptions {
        out_dir: Some(&out_dir),
        resume,
        stop_after,
    };
    let criteria = cfg.compare_criteria()?;
    let records = if criteria.is_empty() {
        run_pipeline(&graph, splits, &pc, &opts)?.records
    } else {
        compare_criteria(&graph, splits, &pc, &criteria, &opts)?
            .into_iter()
            .flat_map(|o| o.records)
            .collect()
    };
    print!("{}", results_csv(&records));
    Ok(())
}

fn cmd_eval(
    model: &Path,
    config: Option<&Path>,
    split: SplitArg,
    images: Option<&Path>,
    labels: Option<&Path>,
    classes: Option<usize>,
) -> Result<(), CliError> {
    let graph = load_model(model)?;
    let data = match (config, images, labels) {
        (Some(c), _, _) => {
            let cfg = RunConfig::load(c)?;
            let d = cfg.datasets(&config_dir(c))?;
            match split {
                SplitArg::Train => d.train,
                SplitArg::Val => d.val,
                SplitArg::Test => d.test,
            }
        }
        (None, Some(i), Some(l)) => load_idx(i, l, classes.or(Some(graph.class_count())), Split::Test)?,
        _ => {
            return Err(CliError::Config(
                "eval needs --config or --images with --labels".into(),
            ))
        }
    };
    let acc = evaluate(&graph, &data)?;
    println!("accuracy={acc}");
    Ok(())
}

fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<(), CliError> {
    let splits = synth_generate(spec)?;
    std::fs::create_dir_all(out).map_err(io_other(out))?;
    for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let (img, lab) = encode_idx(ds);
        let ip = out.join(format!("{name}-images.idx"));
        let lp = out.join(format!("{name}-labels.idx"));
        write_atomic(&ip, &img).map_err(io_other(&ip))?;
        write_atomic(&lp, &lab).map_err(io_other(&lp))?;
        println!("{name}: {} samples", ds.len());
    }
    Ok(())
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("LNPRUNE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("LNPRUNE_THREADS={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Other(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Stats {
            config,
            model,
            out,
            samples,
            seed,
        } => cmd_stats(&config, &model, &out, samples, seed),
        Command::Prune {
            config,
            model,
            round,
            out,
            plan,
            seed,
            verify,
        } => cmd_prune(&config, &model, round, &out, plan.as_deref(), seed, verify),
        Command::Pipeline {
            config,
            rounds,
            seed,
            out,
            resume,
            stop_after,
        } => cmd_pipeline(&config, rounds, seed, out, resume, stop_after),
        Command::Eval {
            model,
            config,
            split,
            images,
            labels,
            classes,
        } => cmd_eval(
            &model,
            config.as_deref(),
            split,
            images.as_deref(),
            labels.as_deref(),
            classes,
        ),
        Command::Synth {
            config,
            out,
            classes,
            size,
            channels,
            noise,
            train,
            val,
            test,
            seed,
        } => {
            let spec = match config {
                Some(c) => match RunConfig::load(&c)?.data {
                    config::DataSource::Synth(s) => s,
                    config::DataSource::Idx(_) => {
                        return Err(CliError::Config("config data is not synthetic".into()))
                    }
                },
                None => SynthSpec {
                    class_count: classes,
                    size,
                    channels,
                    train_per_class: train,
                    val_per_class: val,
                    test_per_class: test,
                    noise,
                    seed,
                },
            };
            cmd_synth(&spec, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lnprune: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
