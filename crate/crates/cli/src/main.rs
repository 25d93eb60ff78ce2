mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mfcl::config::ExperimentConfig;
use mfcl::datasets::{build_superimagenet, load_dataset, write_manifest, ManifestHeader, Split, SuperClassMapping, SuperVersion};
use mfcl::fed_orchestrator::{build_report, run_all, write_summary, LogRecord, Report, RunOptions, RunStatus, Summary};
use mfcl::metrics::{read_log, AccuracyMatrix};

use crate::svg::{Chart, Series};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] mfcl::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser)]
#[command(name = "mfcl", version, about = "Federated class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment config.
    Run(RunArgs),
    /// Draw accuracy curves or generator loss traces as SVG.
    Plot(PlotArgs),
    /// Write SuperImageNet manifests from an ImageNet tree and a mapping file.
    BuildDataset(BuildArgs),
    /// Regenerate reports from run directories and print them.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Continue from existing checkpoints.
    #[arg(long)]
    resume: bool,
    /// Number of seeds to run.
    #[arg(long)]
    seeds: Option<usize>,
    /// Output directory; one `seed-<i>` subdirectory per seed.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override a config key, e.g. `--set client.lr=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset root, overriding the config's `data_root`.
    #[arg(long, env = "MFCL_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// Stop each seed after this many rounds (resume later with --resume).
    #[arg(long, hide = true)]
    stop_after_rounds: Option<usize>,
    /// Only print task-level results.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlotKind {
    AccVsTask,
    LossTrace,
}

#[derive(clap::Args)]
struct PlotArgs {
    /// Output directories of `mfcl run`, or single seed directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "acc-vs-task")]
    kind: PlotKind,
    /// SVG file to write.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BuildArgs {
    /// Dataset to build; only `superimagenet` is supported.
    #[arg(default_value = "superimagenet")]
    name: String,
    /// ImageNet root with `train/` and `val/` class folders.
    #[arg(long, env = "MFCL_DATA_ROOT")]
    root: PathBuf,
    /// Superclass mapping (TOML).
    #[arg(long)]
    mapping: PathBuf,
    /// S, M or L; defaults to the mapping's own version.
    #[arg(long)]
    version: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the manifests; defaults to `--root`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Output directories of `mfcl run`, or single seed directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

fn pct_pm(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut overrides = args.set.clone();
    if let Some(n) = args.seeds {
        overrides.push(format!("num_seeds={n}"));
    }
    let mut config = ExperimentConfig::load(&args.config, &overrides)?;
    if let Some(root) = args.data_root {
        config.data_root = root;
    }
    config.validate()?;
    let options = RunOptions {
        resume: args.resume,
        stop_after_rounds: args.stop_after_rounds,
    };
    let quiet = args.quiet;
    let rounds = config.rounds;
    let manifest = run_all(&config, &args.out, options, &mut |seed, record| match record {
        LogRecord::TaskEval { task, seen, per_task } => {
            let row: Vec<String> = per_task.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
            eprintln!("seed {seed} task {}: seen {:.2}% [{}]", task + 1, 100.0 * seen, row.join(" "));
        }
        LogRecord::Round(r) if !quiet => {
            eprintln!(
                "seed {seed} task {} round {}/{rounds}: lr {:.4} loss {:.4} samples {}",
                r.task + 1,
                r.round + 1,
                r.lr,
                r.mean_loss,
                r.samples
            );
        }
        _ => {}
    })?;
    match manifest.status {
        RunStatus::Completed => {
            let summary: Summary = read_json(&args.out.join("summary.json"))?;
            print_summary(&summary);
            Ok(())
        }
        RunStatus::Stopped => {
            println!("{}: stopped, resume with --resume", manifest.run_id);
            Ok(())
        }
        other => Err(CliError::Usage(format!("run ended with status {other:?}"))),
    }
}

fn print_summary(s: &Summary) {
    println!("{} / {} over {} seed(s)", s.dataset, s.strategy, s.seeds);
    println!("  average accuracy   {}", pct_pm(s.average_accuracy.mean, s.average_accuracy.std));
    if let Some(f) = &s.average_forgetting {
        println!("  average forgetting {}", pct_pm(f.mean, f.std));
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))
}

/// Seed directories under `path`, or `path` itself if it is one.
fn seed_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join("config.toml").is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("config.toml").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Usage(format!("{} holds no run directories", path.display())));
    }
    Ok(dirs)
}

fn display_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

/// Mean seen-class accuracy per task in percent, and a label.
fn accuracy_curve(path: &Path) -> Result<(String, Vec<f64>)> {
    let summary_path = path.join("summary.json");
    if summary_path.is_file() {
        let s: Summary = read_json(&summary_path)?;
        return Ok((s.strategy.to_string(), s.seen_accuracy.iter().map(|m| m.mean).collect()));
    }
    let matrix_path = path.join("accuracy_matrix.json");
    if !matrix_path.is_file() {
        return Err(CliError::Usage(format!("{} has no summary.json or accuracy_matrix.json", path.display())));
    }
    let matrix = AccuracyMatrix::load(&matrix_path)?;
    let config = ExperimentConfig::load(&path.join("config.toml"), &[])?;
    Ok((config.strategy.to_string(), matrix.seen.iter().map(|a| 100.0 * a).collect()))
}

fn unique_labels(mut labels: Vec<(String, PathBuf)>) -> Vec<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (l, _) in &labels {
        *counts.entry(l.clone()).or_default() += 1;
    }
    labels
        .iter_mut()
        .map(|(l, p)| if counts[l.as_str()] > 1 { format!("{l} ({})", display_name(p)) } else { l.clone() })
        .collect()
}

fn plot_accuracy(runs: &[PathBuf]) -> Result<String> {
    let mut curves = Vec::new();
    let mut labels = Vec::new();
    for run in runs {
        let (label, curve) = accuracy_curve(run)?;
        labels.push((label, run.clone()));
        curves.push(curve);
    }
    let series: Vec<Series> = unique_labels(labels)
        .into_iter()
        .zip(curves)
        .map(|(label, c)| Series {
            label,
            points: c.iter().enumerate().map(|(t, &a)| ((t + 1) as f64, a)).collect(),
        })
        .collect();
    Ok(svg::render(&Chart {
        title: "Test accuracy vs. observed tasks",
        x_label: "# observed tasks",
        y_label: "accuracy on seen classes (%)",
        series: &series,
        y_range: Some((0.0, 100.0)),
        markers: true,
    }))
}

fn loss_trace(dir: &Path) -> Result<Vec<[f64; 5]>> {
    let records: Vec<LogRecord> = read_log(&dir.join("metrics.jsonl"))?;
    let trace: Vec<[f64; 5]> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::GeneratorIter { losses: l, .. } => Some([l.ce, l.div, l.bn, l.prior, l.total]),
            _ => None,
        })
        .collect();
    if trace.is_empty() {
        return Err(CliError::Usage(format!("{} has no generator loss records", dir.display())));
    }
    Ok(trace)
}

fn plot_losses(runs: &[PathBuf]) -> Result<String> {
    let mut traces = Vec::new();
    let mut labels = Vec::new();
    for run in runs {
        let dir = seed_dirs(run)?.remove(0);
        let config = ExperimentConfig::load(&dir.join("config.toml"), &[])?;
        labels.push((config.strategy.to_string(), dir.clone()));
        traces.push(loss_trace(&dir)?);
    }
    let labels = unique_labels(labels);
    let terms = ["cross-entropy", "diversity", "batch statistics", "image prior", "total"];
    let panels: Vec<String> = terms
        .iter()
        .enumerate()
        .map(|(k, term)| {
            let series: Vec<Series> = labels
                .iter()
                .zip(&traces)
                .map(|(label, trace)| Series {
                    label: label.clone(),
                    points: trace.iter().enumerate().map(|(i, v)| (i as f64, v[k])).collect(),
                })
                .collect();
            svg::render(&Chart {
                title: term,
                x_label: "generator iteration (all tasks)",
                y_label: "loss",
                series: &series,
                y_range: None,
                markers: false,
            })
        })
        .collect();
    Ok(svg::stack(&panels))
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let (svg, default) = match args.kind {
        PlotKind::AccVsTask => (plot_accuracy(&args.runs)?, "acc_vs_task.svg"),
        PlotKind::LossTrace => (plot_losses(&args.runs)?, "loss_trace.svg"),
    };
    let out = args.out.unwrap_or_else(|| PathBuf::from(default));
    fs::write(&out, svg).map_err(io_err(&out))?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_build_dataset(args: BuildArgs) -> Result<()> {
    if args.name != "superimagenet" {
        return Err(CliError::Usage(format!("cannot build `{}`; only superimagenet is supported", args.name)));
    }
    let mut mapping = SuperClassMapping::load(&args.mapping)?;
    if let Some(v) = &args.version {
        let version: SuperVersion = v.parse()?;
        if version != mapping.version {
            mapping.version = version;
            mapping.cap = None;
        }
        mapping.validate()?;
    }
    let header = ManifestHeader {
        version: mapping.version,
        cap: mapping.per_class_cap(),
        seed: args.seed,
    };
    let out = args.out.unwrap_or_else(|| args.root.clone());
    for split in [Split::Train, Split::Test] {
        let source = load_dataset("imagenet", &args.root, split)?;
        let built = build_superimagenet(&source, &mapping, args.seed)?;
        let path = out.join(format!("superimagenet-{split}.tsv"));
        write_manifest(&path, &built, &header)?;
        println!("{} ({} samples, {} superclasses)", path.display(), built.len(), built.classes.len());
    }
    Ok(())
}

fn print_report(r: &Report) {
    println!("{} / {} seed {} ({})", r.dataset, r.strategy, r.seed_index, r.seed);
    println!("  average accuracy   {:.2}", r.average_accuracy);
    if let Some(f) = r.average_forgetting {
        println!("  average forgetting {f:.2}");
    }
    let seen: Vec<String> = r.seen_accuracy.iter().map(|a| format!("{a:.1}")).collect();
    println!("  seen-class accuracy per task: {}", seen.join(" "));
    for t in &r.timing {
        let fmt = |v: Option<f64>| v.map(|s| format!("{s:.3}s")).unwrap_or_else(|| "-".into());
        println!(
            "  {:?}: first task {}, later tasks {}",
            t.phase,
            fmt(t.first_task),
            fmt(t.later_tasks)
        );
    }
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    for run in &args.runs {
        let dirs = seed_dirs(run)?;
        let mut reports = Vec::new();
        for dir in &dirs {
            let report = build_report(dir)?;
            let path = dir.join("report.json");
            let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Core(e.into()))? + "\n";
            fs::write(&path, text).map_err(io_err(&path))?;
            print_report(&report);
            reports.push(report);
        }
        if dirs.len() > 1 || dirs[0] != *run {
            let summary = write_summary(run, &reports)?;
            print_summary(&summary);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Plot(a) => cmd_plot(a),
        Command::BuildDataset(a) => cmd_build_dataset(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
