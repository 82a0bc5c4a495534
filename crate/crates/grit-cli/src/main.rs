//! Command-line front end tying the pipeline together: dataset preparation,
//! training, evaluation, hyperparameter sweeps and post-hoc analyses.
//!
//! Exit codes: 0 success (including --help/--version), 1 usage error,
//! 2 bad input data, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use grit_core::analyze::{group_similarity, membership_timeline};
use grit_core::config::{ModelConfig, TrainConfig};
use grit_core::data::{
    five_core_filter, leave_one_out_split, load_dataset, load_log, save_dataset, Dataset,
    EvalPhase, LogFormat, SplitDataset,
};
use grit_core::metrics::{evaluate, EvalReport};
use grit_core::model::GritModel;
use grit_core::train::fit;
use grit_core::GritError;

#[derive(Parser)]
#[command(name = "grit", version, about = "Group-informed sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an interaction log, apply five-core filtering and cache the result
    Prepare {
        /// Raw interaction log
        #[arg(long)]
        input: PathBuf,
        /// Input layout
        #[arg(long, value_enum, default_value_t = InputFormat::Ml100k)]
        format: InputFormat,
        /// Where the dataset cache is written
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model on a prepared dataset
    Train {
        /// Dataset cache from `prepare`
        #[arg(long)]
        data: PathBuf,
        /// TOML run config; defaults apply to any key left out
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted key override, e.g. --set model.groups=128 (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Output directory for config, log and checkpoint
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank held-out items under a trained checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset cache from `prepare`
        #[arg(long)]
        data: PathBuf,
        /// Which held-out item to rank
        #[arg(long, value_enum, default_value_t = PhaseArg::Test)]
        phase: PhaseArg,
        /// Additionally remove the user's own context items from the candidates
        #[arg(long)]
        exclude_history: bool,
        /// Write the full report as JSON
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write per-user ranks as CSV
        #[arg(long)]
        ranks_csv: Option<PathBuf>,
    },
    /// Grid-search groups, fusion weight and dropout; select by validation score
    Sweep {
        /// Dataset cache from `prepare`
        #[arg(long)]
        data: PathBuf,
        /// Base TOML run config the grid is applied on top of
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted key override applied to the base config (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Output directory; one subdirectory per grid point
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated group counts
        #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256])]
        groups: Vec<usize>,
        /// Comma-separated fusion weights
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.5, 0.7, 0.9])]
        betas: Vec<f64>,
        /// Comma-separated dropout rates
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5])]
        dropouts: Vec<f64>,
        /// Parallel training workers
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Export the cosine-similarity matrix between a block's group vectors
    AnalyzeGroups {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Block index; defaults to the last block
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        out_csv: PathBuf,
        /// Also write a headerless matrix for gnuplot's `matrix` format
        #[arg(long)]
        gnuplot: Option<PathBuf>,
    },
    /// Export one user's per-timestep group memberships
    AnalyzeTimeline {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset cache from `prepare`
        #[arg(long)]
        data: PathBuf,
        /// Raw user id as it appeared in the interaction log
        #[arg(long)]
        user: String,
        #[arg(long)]
        out_csv: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    Ml100k,
    Csv,
}

impl From<InputFormat> for LogFormat {
    fn from(f: InputFormat) -> LogFormat {
        match f {
            InputFormat::Ml100k => LogFormat::Ml100k,
            InputFormat::Csv => LogFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Valid,
    Test,
}

impl From<PhaseArg> for EvalPhase {
    fn from(p: PhaseArg) -> EvalPhase {
        match p {
            PhaseArg::Valid => EvalPhase::Validation,
            PhaseArg::Test => EvalPhase::Test,
        }
    }
}

/// Everything one run needs. Both sections fall back to their defaults, so a
/// config file (or none at all) only names what it changes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Debug)]
enum CliError {
    /// Malformed flags or overrides; exits 1.
    Usage(String),
    /// Pipeline failure; exits 2 for input-data problems, 3 otherwise.
    Core(GritError),
}

impl From<GritError> for CliError {
    fn from(e: GritError) -> CliError {
        CliError::Core(e)
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_data_error() { 2 } else { 3 });
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Prepare { input, format, output } => cmd_prepare(&input, format.into(), &output),
        Command::Train { data, config, sets, out } => cmd_train(&data, config.as_deref(), &sets, &out),
        Command::Eval { checkpoint, data, phase, exclude_history, report, ranks_csv } => cmd_eval(
            &checkpoint,
            &data,
            phase.into(),
            exclude_history,
            report.as_deref(),
            ranks_csv.as_deref(),
        ),
        Command::Sweep { data, config, sets, out, groups, betas, dropouts, jobs } => {
            cmd_sweep(&data, config.as_deref(), &sets, &out, &groups, &betas, &dropouts, jobs)
        }
        Command::AnalyzeGroups { checkpoint, block, out_csv, gnuplot } => {
            cmd_analyze_groups(&checkpoint, block, &out_csv, gnuplot.as_deref())
        }
        Command::AnalyzeTimeline { checkpoint, data, user, out_csv } => {
            cmd_analyze_timeline(&checkpoint, &data, &user, &out_csv)
        }
    }
}

fn print_stats(dataset: &Dataset) {
    println!("users: {}", dataset.user_count());
    println!("items: {}", dataset.item_count());
    println!("interactions: {}", dataset.interaction_count());
    println!("sparsity: {}", dataset.sparsity_display());
}

fn cmd_prepare(input: &Path, format: LogFormat, output: &Path) -> Result<(), CliError> {
    if output.exists() {
        if let Ok(cached) = load_dataset(output) {
            println!("dataset cache {} already exists; nothing to do", output.display());
            print_stats(&cached);
            return Ok(());
        }
    }
    let log = load_log(input, format)?;
    if log.skipped > 0 {
        eprintln!("warning: skipped {} malformed rows", log.skipped);
    }
    let dataset = five_core_filter(&log)?;
    save_dataset(&dataset, output)?;
    println!("wrote dataset cache {}", output.display());
    print_stats(&dataset);
    Ok(())
}

/// Loads the base config file, then applies dotted `--set key=value` overrides
/// and the GRIT_SEED environment variable. File problems surface as data
/// errors; malformed overrides surface as usage errors.
fn resolve_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
    let table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| GritError::io(p, e))?;
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
                GritError::Parse { path: p.to_path_buf(), message: e.to_string() }
            })?;
            // Deserialize the file alone first, so a broken file is reported
            // as a data problem rather than blamed on the overrides.
            toml::Value::Table(table.clone()).try_into::<RunConfig>().map_err(|e| {
                GritError::Parse { path: p.to_path_buf(), message: e.to_string() }
            })?;
            table
        }
        None => toml::Table::new(),
    };
    let table = apply_overrides(table, sets)?;
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Usage(format!("--set override does not fit the config: {e}")))?;
    if let Ok(seed) = std::env::var("GRIT_SEED") {
        cfg.train.seed = seed
            .parse()
            .map_err(|_| CliError::Usage(format!("GRIT_SEED must be an integer, got {seed:?}")))?;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn apply_overrides(mut table: toml::Table, sets: &[String]) -> Result<toml::Table, CliError> {
    for spec in sets {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {spec:?}")))?;
        let value = parse_toml_value(raw);
        let mut node = &mut table;
        let segments: Vec<&str> = key.split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(CliError::Usage(format!("--set key {key:?} has an empty segment")));
        }
        for segment in &segments[..segments.len() - 1] {
            node = node
                .entry(segment.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| {
                    CliError::Usage(format!("--set key {key:?} descends into a non-table value"))
                })?;
        }
        node.insert(segments[segments.len() - 1].to_string(), value);
    }
    Ok(table)
}

/// Interprets an override's right-hand side with TOML literal rules, falling
/// back to a plain string (so `--set model.positional=fully_learnable` works
/// without inner quotes).
fn parse_toml_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed doc defines v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn load_split(path: &Path) -> Result<SplitDataset, GritError> {
    let dataset = load_dataset(path)?;
    leave_one_out_split(dataset)
}

/// Guards against pairing a checkpoint with a cache it was not trained on.
fn check_catalog(model: &GritModel, split: &SplitDataset) -> Result<(), GritError> {
    if model.item_count() != split.dataset.item_count() {
        return Err(GritError::Data(format!(
            "checkpoint was trained over {} items but the dataset holds {}",
            model.item_count(),
            split.dataset.item_count()
        )));
    }
    Ok(())
}

fn write_run_config(cfg: &RunConfig, path: &Path) -> Result<(), GritError> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| GritError::Config(format!("serializing config: {e}")))?;
    std::fs::write(path, text).map_err(|e| GritError::io(path, e))
}

fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    sets: &[String],
    out: &Path,
) -> Result<(), CliError> {
    let cfg = resolve_config(config, sets)?;
    let split = load_split(data)?;
    std::fs::create_dir_all(out).map_err(|e| GritError::io(out, e))?;
    write_run_config(&cfg, &out.join("config.toml"))?;

    let mut model = GritModel::new(cfg.model.clone(), split.dataset.item_count(), cfg.train.seed)?;
    let log_path = out.join("train_log.jsonl");
    println!("training on {} users; per-epoch log: {}", split.train.len(), log_path.display());
    let outcome = fit(&mut model, &split, &cfg.train, Some(&log_path))?;

    let ckpt = out.join("model.ckpt");
    model.save(&ckpt)?;
    println!(
        "stopped after {} epochs ({})",
        outcome.log.len(),
        if outcome.stopped_early { "no validation improvement" } else { "epoch budget exhausted" }
    );
    println!(
        "best epoch {}: valid recall@10 {:.4}",
        outcome.best_epoch, outcome.best_recall_at_10
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!(
        "phase: {}  users: {}  candidates: {}",
        report.phase,
        report.users,
        if report.exclude_history { "full catalog minus context" } else { "full catalog" }
    );
    for k in [5usize, 10, 20] {
        println!(
            "recall@{k}: {:.4}  ndcg@{k}: {:.4}  mrr@{k}: {:.4}",
            report.recall(k),
            report.ndcg(k),
            report.mrr(k)
        );
    }
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    phase: EvalPhase,
    exclude_history: bool,
    report_path: Option<&Path>,
    ranks_csv: Option<&Path>,
) -> Result<(), CliError> {
    let model = GritModel::load(checkpoint)?;
    let split = load_split(data)?;
    check_catalog(&model, &split)?;
    let report = evaluate(&model, &split, phase, exclude_history, 256)?;
    print_report(&report);
    if let Some(path) = report_path {
        report.write_json(path)?;
        println!("report: {}", path.display());
    }
    if let Some(path) = ranks_csv {
        report.write_ranks_csv(path)?;
        println!("ranks: {}", path.display());
    }
    Ok(())
}

struct SweepRow {
    name: String,
    groups: usize,
    beta: f64,
    dropout: f64,
    best_epoch: usize,
    recall_at_10: f64,
    mrr_at_10: f64,
}

impl SweepRow {
    fn selection_score(&self) -> f64 {
        (self.recall_at_10 + self.mrr_at_10) / 2.0
    }
}

/// Trains one grid point in its own subdirectory and reports the validation
/// metrics the sweep selects on.
fn run_sweep_point(
    base: &RunConfig,
    split: &SplitDataset,
    out: &Path,
    groups: usize,
    beta: f64,
    dropout: f64,
) -> Result<SweepRow, GritError> {
    let mut cfg = base.clone();
    cfg.model.groups = groups;
    cfg.model.beta = beta;
    cfg.model.dropout = dropout;
    cfg.model.validate()?;

    let name = format!("k{groups}_b{beta}_p{dropout}");
    let dir = out.join(&name);
    std::fs::create_dir_all(&dir).map_err(|e| GritError::io(&dir, e))?;
    write_run_config(&cfg, &dir.join("config.toml"))?;

    let mut model = GritModel::new(cfg.model.clone(), split.dataset.item_count(), cfg.train.seed)?;
    let outcome = fit(&mut model, split, &cfg.train, Some(&dir.join("train_log.jsonl")))?;
    model.save(&dir.join("model.ckpt"))?;

    let report = evaluate(&model, split, EvalPhase::Validation, false, cfg.train.batch_size)?;
    report.write_json(&dir.join("eval_valid.json"))?;
    Ok(SweepRow {
        name,
        groups,
        beta,
        dropout,
        best_epoch: outcome.best_epoch,
        recall_at_10: report.recall(10),
        mrr_at_10: report.mrr(10),
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    data: &Path,
    config: Option<&Path>,
    sets: &[String],
    out: &Path,
    groups: &[usize],
    betas: &[f64],
    dropouts: &[f64],
    jobs: usize,
) -> Result<(), CliError> {
    if groups.is_empty() || betas.is_empty() || dropouts.is_empty() {
        return Err(CliError::Usage("sweep grids must not be empty".into()));
    }
    let base = resolve_config(config, sets)?;
    let split = load_split(data)?;
    std::fs::create_dir_all(out).map_err(|e| GritError::io(out, e))?;

    let mut grid = Vec::new();
    for &g in groups {
        for &b in betas {
            for &p in dropouts {
                grid.push((g, b, p));
            }
        }
    }
    println!("sweeping {} configurations with {} worker(s)", grid.len(), jobs.max(1));

    let rows: Vec<Mutex<Option<SweepRow>>> = grid.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let first_error: Mutex<Option<GritError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= grid.len() || failed.load(Ordering::SeqCst) {
                    break;
                }
                let (g, b, p) = grid[i];
                match run_sweep_point(&base, &split, out, g, b, p) {
                    Ok(row) => {
                        println!(
                            "[{}/{}] {} recall@10 {:.4} mrr@10 {:.4}",
                            i + 1,
                            grid.len(),
                            row.name,
                            row.recall_at_10,
                            row.mrr_at_10
                        );
                        *rows[i].lock().unwrap() = Some(row);
                    }
                    Err(e) => {
                        failed.store(true, Ordering::SeqCst);
                        let mut slot = first_error.lock().unwrap();
                        if slot.is_none() {
                            *slot = Some(e);
                        }
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e.into());
    }
    let rows: Vec<SweepRow> =
        rows.into_iter().map(|m| m.into_inner().unwrap().expect("all points ran")).collect();

    let mut summary = String::from("groups,beta,dropout,best_epoch,recall_at_10,mrr_at_10,selection_score\n");
    for row in &rows {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.groups,
            row.beta,
            row.dropout,
            row.best_epoch,
            row.recall_at_10,
            row.mrr_at_10,
            row.selection_score()
        ));
    }
    let summary_path = out.join("summary.csv");
    std::fs::write(&summary_path, summary).map_err(|e| GritError::io(&summary_path, e))?;

    // Strict > keeps the earliest grid point on ties, matching grid order.
    let mut best = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.selection_score() > rows[best].selection_score() {
            best = i;
        }
    }
    let winner = &rows[best];
    std::fs::copy(out.join(&winner.name).join("model.ckpt"), out.join("best.ckpt"))
        .map_err(|e| GritError::io(out.join("best.ckpt"), e))?;
    std::fs::copy(out.join(&winner.name).join("config.toml"), out.join("best_config.toml"))
        .map_err(|e| GritError::io(out.join("best_config.toml"), e))?;
    println!("summary: {}", summary_path.display());
    println!("best: {} (selection score {:.4})", winner.name, winner.selection_score());
    Ok(())
}

fn cmd_analyze_groups(
    checkpoint: &Path,
    block: Option<usize>,
    out_csv: &Path,
    gnuplot: Option<&Path>,
) -> Result<(), CliError> {
    let model = GritModel::load(checkpoint)?;
    let block = block.unwrap_or(model.layer_count() - 1);
    let sim = group_similarity(&model, block)?;
    if !sim.zero_norm_columns.is_empty() {
        eprintln!(
            "warning: block {block} has zero-norm group columns {:?}; their similarities are reported as 0",
            sim.zero_norm_columns
        );
    }
    sim.write_csv(out_csv)?;
    println!("similarity matrix ({0}x{0}) for block {block}: {1}", sim.groups, out_csv.display());
    if let Some(path) = gnuplot {
        sim.write_gnuplot_matrix(path)?;
        println!("gnuplot matrix: {}", path.display());
    }
    Ok(())
}

fn cmd_analyze_timeline(
    checkpoint: &Path,
    data: &Path,
    user: &str,
    out_csv: &Path,
) -> Result<(), CliError> {
    let model = GritModel::load(checkpoint)?;
    let split = load_split(data)?;
    check_catalog(&model, &split)?;
    let index = split
        .dataset
        .user_index(user)
        .ok_or_else(|| GritError::Data(format!("user {user:?} is not in the dataset")))?;
    let timeline = membership_timeline(&model, &split, index)?;
    timeline.write_csv(out_csv)?;
    println!(
        "timeline for user {user:?}: {} timesteps x {} groups: {}",
        timeline.rows.len(),
        timeline.groups,
        out_csv.display()
    );
    Ok(())
}
