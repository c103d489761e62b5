//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when arguments, configuration or input
//! paths are invalid, 2 when a run fails after validation.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, kfold_split, load_dataset, GeneratorConfig, TimeSeriesDataset};
use crate::error::Error;
use crate::eval::{importance_property_analysis, AnalysisConfig, ExperimentReport, RunRecord};
use crate::model::{Checkpoint, ModelConfig};
use crate::training::{run_strategy, RunOutput, Strategy, TrainConfig};

/// Experiment configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Training seeds; every strategy runs every fold once per seed.
    pub seeds: Vec<u64>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Seed of the synthetic data `compare` generates when no data
    /// directories are given.
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
}

fn default_folds() -> usize {
    5
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| Failure::Validation(format!("invalid config {}: {e}", path.display())))?;
        config.validate().map_err(|e| Failure::Validation(e.to_string()))?;
        Ok(config)
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds must list at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::invalid("seeds must be distinct"));
        }
        if self.folds < 2 {
            return Err(Error::invalid(format!("folds must be at least 2, got {}", self.folds)));
        }
        self.train.validate()?;
        self.model.validate()?;
        self.generator
            .validate()
            .map_err(|e| Error::invalid(format!("generator: {e}")))?;
        Ok(())
    }
}

/// Why a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => m,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Classifies library errors raised while loading inputs.
fn input_error(e: Error) -> Failure {
    match e {
        Error::Io { .. } | Error::Data { .. } | Error::InvalidArgument(_) | Error::Json(_) => {
            Failure::Validation(e.to_string())
        }
        other => Failure::Runtime(other.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "metsk", version, about = "Knowledge-transfer strategies for spatio-temporal GCNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic source/target dataset pair to OUT/source and OUT/target.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        separability: Option<f64>,
        /// Config file whose `generator` section overrides the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Cross-validate one strategy.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        data_source: Option<PathBuf>,
        #[arg(long)]
        data_target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also save the model of the first seed's first fold.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Relate a checkpoint's node importance to nodal graph properties.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config file whose `analysis` section overrides the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render a results file as a CSV table or a JSON summary.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: ReportFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate several strategies and write the comparison table.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "baseline,ft,mtl,mel,metsk")]
        strategies: String,
        #[arg(long)]
        out: PathBuf,
        /// Full results file; defaults to results.json next to OUT.
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        data_source: Option<PathBuf>,
        #[arg(long)]
        data_target: Option<PathBuf>,
        /// Worker threads for independent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Run the importance analysis on the first MeTSK model.
        #[arg(long)]
        analyze: bool,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData {
            out,
            seed,
            separability,
            config,
        } => gen_data(&out, seed, separability, config.as_deref()),
        Command::Train {
            config,
            strategy,
            data_source,
            data_target,
            out,
            checkpoint,
        } => train(
            &config,
            &strategy,
            data_source.as_deref(),
            &data_target,
            &out,
            checkpoint.as_deref(),
        ),
        Command::Analyze {
            checkpoint,
            data,
            out,
            config,
        } => analyze(&checkpoint, &data, &out, config.as_deref()),
        Command::Report { input, format, out } => report(&input, format, &out),
        Command::Compare {
            config,
            strategies,
            out,
            results,
            data_source,
            data_target,
            jobs,
            analyze,
        } => compare(CompareArgs {
            config,
            strategies,
            out,
            results,
            data_source,
            data_target,
            jobs,
            analyze,
        }),
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("{what} directory {} does not exist", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("{what} file {} does not exist", path.display())))
    }
}

fn require_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Failure::Validation(format!(
            "output directory {} does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn gen_data(out: &Path, seed: u64, separability: Option<f64>, config: Option<&Path>) -> Result<(), Failure> {
    let mut generator = match config {
        Some(path) => {
            require_file(path, "config")?;
            ExperimentConfig::load(path)?.generator
        }
        None => GeneratorConfig::default(),
    };
    if let Some(s) = separability {
        generator.separability = s;
    }
    generator
        .validate()
        .map_err(|e| Failure::Validation(format!("generator: {e}")))?;
    let (source, target) = generate_synthetic(&generator, seed).map_err(runtime)?;
    source.save(&out.join("source")).map_err(runtime)?;
    target.save(&out.join("target")).map_err(runtime)?;
    eprintln!(
        "wrote {} source and {} target subjects to {}",
        source.len(),
        target.len(),
        out.display()
    );
    Ok(())
}

fn parse_strategy(s: &str) -> Result<Strategy, Failure> {
    s.trim().parse().map_err(|e: Error| Failure::Validation(e.to_string()))
}

fn load_inputs(
    strategies: &[Strategy],
    config: &ExperimentConfig,
    data_source: Option<&Path>,
    data_target: Option<&Path>,
) -> Result<(Option<TimeSeriesDataset>, TimeSeriesDataset), Failure> {
    let needs_source = strategies.iter().any(|s| s.needs_source());
    match (data_source, data_target) {
        (_, Some(target_dir)) => {
            require_dir(target_dir, "target data")?;
            let source = match data_source {
                Some(dir) => {
                    require_dir(dir, "source data")?;
                    Some(dir)
                }
                None if needs_source => {
                    return Err(Failure::Validation(
                        "--data-source is required for ft, mtl and metsk".to_string(),
                    ))
                }
                None => None,
            };
            let target = load_dataset(target_dir).map_err(input_error)?;
            let source = source.map(load_dataset).transpose().map_err(input_error)?;
            Ok((source, target))
        }
        (Some(_), None) => Err(Failure::Validation(
            "--data-target is required when --data-source is given".to_string(),
        )),
        (None, None) => {
            let seed = config.data_seed.ok_or_else(|| {
                Failure::Validation(
                    "data_seed must be set in the config when no data directories are given".to_string(),
                )
            })?;
            let (source, target) = generate_synthetic(&config.generator, seed).map_err(runtime)?;
            Ok((Some(source), target))
        }
    }
}

fn train(
    config_path: &Path,
    strategy: &str,
    data_source: Option<&Path>,
    data_target: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<(), Failure> {
    require_file(config_path, "config")?;
    let config = ExperimentConfig::load(config_path)?;
    let strategy = parse_strategy(strategy)?;
    if strategy.needs_source() {
        match data_source {
            None => {
                return Err(Failure::Validation(format!(
                    "strategy {strategy} needs --data-source"
                )))
            }
            Some(dir) => require_dir(dir, "source data")?,
        }
    }
    require_dir(data_target, "target data")?;
    require_parent(out)?;
    if let Some(c) = checkpoint {
        require_parent(c)?;
    }
    let (source, target) = load_inputs(&[strategy], &config, data_source, Some(data_target))?;
    let jobs = plan(&[strategy], &config);
    let mut runs = Vec::with_capacity(jobs.len());
    for (i, job) in jobs.iter().enumerate() {
        let output = execute(job, &config, source.as_ref(), &target)?;
        if i == 0 {
            if let Some(path) = checkpoint {
                Checkpoint::new(output.params.clone(), job.seed)
                    .save(path)
                    .map_err(runtime)?;
            }
        }
        runs.push(record(job, output));
    }
    let report = ExperimentReport::from_runs(effective_config(&config)?, config.folds, runs).map_err(runtime)?;
    write(out, &report.to_json().map_err(runtime)?)
}

fn analyze(checkpoint: &Path, data: &Path, out: &Path, config: Option<&Path>) -> Result<(), Failure> {
    require_file(checkpoint, "checkpoint")?;
    require_dir(data, "data")?;
    require_parent(out)?;
    let analysis = match config {
        Some(path) => {
            require_file(path, "config")?;
            ExperimentConfig::load(path)?.analysis
        }
        None => AnalysisConfig::default(),
    };
    let ck = Checkpoint::load(checkpoint).map_err(input_error)?;
    let dataset = load_dataset(data).map_err(input_error)?;
    if dataset.num_nodes != ck.parameters.num_nodes {
        return Err(Failure::Validation(format!(
            "checkpoint has {} nodes but {} has {}",
            ck.parameters.num_nodes,
            data.display(),
            dataset.num_nodes
        )));
    }
    let result = importance_property_analysis(&ck.parameters, &dataset, &analysis).map_err(runtime)?;
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "analysis_config": analysis,
        "analysis": result,
    }))
    .map_err(runtime)?;
    write(out, &(text + "\n"))
}

fn report(input: &Path, format: ReportFormat, out: &Path) -> Result<(), Failure> {
    require_file(input, "results")?;
    require_parent(out)?;
    let text = fs::read_to_string(input).map_err(|e| Failure::Validation(format!("{}: {e}", input.display())))?;
    let report = ExperimentReport::from_json(&text)
        .map_err(|e| Failure::Validation(format!("{}: {e}", input.display())))?;
    let rendered = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Json => report.summary_json().map_err(runtime)?,
    };
    write(out, &rendered)
}

struct CompareArgs {
    config: PathBuf,
    strategies: String,
    out: PathBuf,
    results: Option<PathBuf>,
    data_source: Option<PathBuf>,
    data_target: Option<PathBuf>,
    jobs: usize,
    analyze: bool,
}

fn compare(args: CompareArgs) -> Result<(), Failure> {
    require_file(&args.config, "config")?;
    let config = ExperimentConfig::load(&args.config)?;
    let strategies = args
        .strategies
        .split(',')
        .map(parse_strategy)
        .collect::<Result<Vec<_>, _>>()?;
    let mut unique = strategies.clone();
    unique.sort();
    unique.dedup();
    if unique.len() != strategies.len() {
        return Err(Failure::Validation("--strategies lists a strategy twice".to_string()));
    }
    if args.jobs == 0 {
        return Err(Failure::Validation("--jobs must be at least 1".to_string()));
    }
    require_parent(&args.out)?;
    let results_path = args.results.clone().unwrap_or_else(|| {
        args.out
            .parent()
            .map(|p| p.join("results.json"))
            .unwrap_or_else(|| PathBuf::from("results.json"))
    });
    require_parent(&results_path)?;
    let (source, target) = load_inputs(
        &strategies,
        &config,
        args.data_source.as_deref(),
        args.data_target.as_deref(),
    )?;

    let jobs = plan(&strategies, &config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(runtime)?;
    let outputs: Vec<RunOutput> = pool.install(|| {
        jobs.par_iter()
            .map(|job| execute(job, &config, source.as_ref(), &target))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let analysis = if args.analyze {
        let first = jobs
            .iter()
            .zip(&outputs)
            .find(|(j, _)| j.strategy == Strategy::Metsk)
            .ok_or_else(|| Failure::Validation("--analyze needs metsk among --strategies".to_string()))?;
        Some(importance_property_analysis(&first.1.params, &target, &config.analysis).map_err(runtime)?)
    } else {
        None
    };

    let runs = jobs.iter().zip(outputs).map(|(j, o)| record(j, o)).collect();
    let mut report = ExperimentReport::from_runs(effective_config(&config)?, config.folds, runs).map_err(runtime)?;
    report.analysis = analysis;
    write(&results_path, &report.to_json().map_err(runtime)?)?;
    write(&args.out, &report.to_csv())?;
    for s in &report.strategies {
        eprintln!("{:<8} {:.4} ± {:.4}", s.strategy.name(), s.mean, s.std);
    }
    Ok(())
}

fn effective_config(config: &ExperimentConfig) -> Result<serde_json::Value, Failure> {
    serde_json::to_value(config).map_err(runtime)
}

struct Job {
    strategy: Strategy,
    seed: u64,
    fold: usize,
}

fn plan(strategies: &[Strategy], config: &ExperimentConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &strategy in strategies {
        for &seed in &config.seeds {
            for fold in 0..config.folds {
                jobs.push(Job { strategy, seed, fold });
            }
        }
    }
    jobs
}

fn execute(
    job: &Job,
    config: &ExperimentConfig,
    source: Option<&TimeSeriesDataset>,
    target: &TimeSeriesDataset,
) -> Result<RunOutput, Failure> {
    let labels = target.labels().map_err(input_error)?;
    let folds = kfold_split(&labels, config.folds, job.seed).map_err(input_error)?;
    let output = run_strategy(
        job.strategy,
        &config.train,
        &config.model,
        source,
        target,
        &folds[job.fold],
        job.seed,
        job.fold,
    )
    .map_err(|e| match e {
        Error::InvalidArgument(m) => Failure::Validation(m),
        other => runtime(other),
    })?;
    eprintln!(
        "{} seed {} fold {}: auc {:.4}",
        job.strategy,
        job.seed,
        job.fold + 1,
        output.auc
    );
    Ok(output)
}

fn record(job: &Job, output: RunOutput) -> RunRecord {
    RunRecord {
        strategy: job.strategy,
        seed: job.seed,
        fold: job.fold,
        auc: output.auc,
        history: output.history,
    }
}
