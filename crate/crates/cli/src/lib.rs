//! Config-driven experiment runner: `run`, `sweep` and `diagnose`.
//!
//! Every command writes its files atomically (temp file + rename) into one
//! output directory, with file names derived from the config name and seed,
//! so reruns overwrite rather than accumulate.

pub mod config;
mod error;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use adadamp::analysis::{comparison_report, format_report_table, write_report_csv};
use adadamp::diagnostics::{diagnose_trace, quadratic_constants, write_diagnostics_csv, ProblemConstants};
use adadamp::engine::{self, RunTrace, TraceSummary};
use adadamp::problems::{Problem, ProblemKind};
use rayon::prelude::*;
use serde::Serialize;

pub use config::{ExperimentConfig, Seeds};
pub use error::{CliError, Result};

/// Default output root when neither `--out` nor `output_dir` is given.
pub const OUTPUT_ROOT_ENV: &str = "ADADAMP_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TraceFormat {
    #[default]
    Csv,
    Json,
}

impl TraceFormat {
    fn ext(self) -> &'static str {
        match self {
            TraceFormat::Csv => "csv",
            TraceFormat::Json => "json",
        }
    }
}

/// Options shared by all subcommands.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub out: Option<PathBuf>,
    /// Replaces the config's seed list.
    pub seeds: Option<Vec<u64>>,
    /// Worker threads; `None` lets rayon decide.
    pub jobs: Option<usize>,
    pub format: TraceFormat,
}

/// `--out`, then the config's `output_dir`, then `$ADADAMP_OUTPUT_ROOT/<name>`,
/// then `./runs/<name>`.
pub fn output_dir(cfg: &ExperimentConfig, opts: &Options) -> PathBuf {
    if let Some(p) = &opts.out {
        return p.clone();
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(&cfg.name),
        _ => PathBuf::from("runs").join(&cfg.name),
    }
}

/// Writes `bytes` to `path` via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_err = |source| CliError::File {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(file_err)?;
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let res = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.map_err(file_err)
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn with_thread_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        Some(0) => Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| CliError::Usage(format!("--jobs: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// JSON written next to each trace.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub name: String,
    #[serde(flatten)]
    pub trace: TraceSummary,
    pub lr_gamma0: f64,
    pub f_star: Option<f64>,
    pub m_upper_sq: Option<f64>,
    pub m_upper_sq_source: Option<&'static str>,
    /// Error message for a diverged run.
    pub error: Option<String>,
}

/// Outcome of one seed: the (possibly partial) trace and the failure, if any.
struct SeedOutcome {
    seed: u64,
    trace: Option<RunTrace>,
    error: Option<String>,
}

fn run_seeds(cfg: &ExperimentConfig, problem: &Problem, seeds: &[u64]) -> Result<(config::Resolved, Vec<SeedOutcome>)> {
    let resolved = config::resolve(cfg, problem)?;
    let outcomes = seeds
        .par_iter()
        .map(|&seed| {
            let rc = config::run_config(cfg, &resolved, seed);
            match engine::run(problem, &rc) {
                Ok(t) => SeedOutcome {
                    seed,
                    trace: Some(t),
                    error: None,
                },
                Err(adadamp::Error::Diverged { k, loss, partial }) => SeedOutcome {
                    seed,
                    trace: Some(*partial),
                    error: Some(format!("seed {seed}: diverged at update {k} (train loss {loss})")),
                },
                Err(e) => SeedOutcome {
                    seed,
                    trace: None,
                    error: Some(format!("seed {seed}: {e}")),
                },
            }
        })
        .collect();
    Ok((resolved, outcomes))
}

fn write_seed_files(
    dir: &Path,
    name: &str,
    resolved: &config::Resolved,
    o: &SeedOutcome,
    format: TraceFormat,
) -> Result<()> {
    let Some(trace) = &o.trace else { return Ok(()) };
    let stem = format!("{name}__seed{}", o.seed);
    let body = match format {
        TraceFormat::Csv => trace.to_csv_string()?.into_bytes(),
        TraceFormat::Json => json_bytes(trace)?,
    };
    write_atomic(&dir.join(format!("{stem}.{}", format.ext())), &body)?;
    let summary = RunSummary {
        name: name.to_string(),
        trace: trace.summary(),
        lr_gamma0: resolved.lr.gamma0,
        f_star: resolved.f_star,
        m_upper_sq: resolved.m_upper_sq,
        m_upper_sq_source: resolved.m_upper_sq_source,
        error: o.error.clone(),
    };
    write_atomic(&dir.join(format!("{stem}.summary.json")), &json_bytes(&summary)?)
}

/// Per-update means across seeds, for plotting. Loss and metric means only
/// cover the seeds that evaluated at that update (`evaluated` column).
pub fn aggregate_csv(traces: &[&RunTrace]) -> Result<String> {
    #[derive(Default)]
    struct Acc {
        runs: usize,
        epoch: f64,
        batch: f64,
        lr: f64,
        evaluated: usize,
        loss: f64,
        metric: f64,
        metric_runs: usize,
    }
    let mut rows: BTreeMap<u64, Acc> = BTreeMap::new();
    for t in traces {
        for r in &t.records {
            let a = rows.entry(r.k).or_default();
            a.runs += 1;
            a.epoch += r.epoch;
            a.batch += r.batch_size as f64;
            a.lr += r.lr;
            if let Some(l) = r.train_loss {
                a.evaluated += 1;
                a.loss += l;
            }
            if let Some(m) = r.test_metric {
                a.metric_runs += 1;
                a.metric += m;
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "k",
        "runs",
        "mean_epoch",
        "mean_batch_size",
        "mean_lr",
        "evaluated",
        "mean_train_loss",
        "mean_test_metric",
    ])?;
    let mean = |s: f64, n: usize| if n == 0 { String::new() } else { format!("{:?}", s / n as f64) };
    for (k, a) in &rows {
        w.write_record([
            k.to_string(),
            a.runs.to_string(),
            mean(a.epoch, a.runs),
            mean(a.batch, a.runs),
            mean(a.lr, a.runs),
            a.evaluated.to_string(),
            mean(a.loss, a.evaluated),
            mean(a.metric, a.metric_runs),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn failures(outcomes: &[SeedOutcome]) -> Result<()> {
    let failed: Vec<&String> = outcomes.iter().filter_map(|o| o.error.as_ref()).collect();
    match failed.first() {
        None => Ok(()),
        Some(first) => Err(CliError::RunsFailed {
            failed: failed.len(),
            total: outcomes.len(),
            first: (*first).clone(),
        }),
    }
}

/// Paths written by a command.
#[derive(Clone, Debug, Default)]
pub struct Written {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

fn list_written(dir: &Path, prefix: &str) -> Written {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s.starts_with(prefix) && !s.starts_with('.'))
        })
        .collect();
    files.sort();
    Written {
        dir: dir.to_path_buf(),
        files,
    }
}

/// One trace and summary per seed plus `<name>__aggregate.csv`. Diverged
/// seeds keep their partial trace and make the command fail afterwards.
pub fn cmd_run(cfg: &ExperimentConfig, opts: &Options) -> Result<Written> {
    if cfg.sweep.is_some() {
        return Err(CliError::Usage("config has a [sweep] table; use the sweep command".into()));
    }
    let seeds = opts.seeds.clone().unwrap_or_else(|| cfg.seeds.to_vec());
    let dir = output_dir(cfg, opts);
    let problem = config::build_problem(&cfg.problem)?;
    let (resolved, outcomes) = with_thread_pool(opts.jobs, || run_seeds(cfg, &problem, &seeds))??;
    for o in &outcomes {
        write_seed_files(&dir, &cfg.name, &resolved, o, opts.format)?;
    }
    let traces: Vec<&RunTrace> = outcomes.iter().filter_map(|o| o.trace.as_ref()).collect();
    write_atomic(
        &dir.join(format!("{}__aggregate.csv", cfg.name)),
        aggregate_csv(&traces)?.as_bytes(),
    )?;
    failures(&outcomes)?;
    Ok(list_written(&dir, &format!("{}__", cfg.name)))
}

/// Runs every grid combination for every seed, then writes
/// `<name>__report.csv` and `<name>__report.txt`.
pub fn cmd_sweep(cfg: &ExperimentConfig, opts: &Options) -> Result<Written> {
    let mut cfg = cfg.clone();
    if let Some(s) = &opts.seeds {
        cfg.seeds = Seeds::List(s.clone());
    }
    if cfg.sweep.is_none() {
        return Err(CliError::Usage("config has no [sweep] table; use the run command".into()));
    }
    let combos = cfg.combinations()?;
    let seeds = cfg.seeds.to_vec();
    let dir = output_dir(&cfg, opts);

    // Combinations usually share a problem; build each distinct one once.
    let mut problems: Vec<(config::ProblemSpec, Problem)> = Vec::new();
    let mut problem_of = Vec::with_capacity(combos.len());
    for c in &combos {
        let idx = match problems.iter().position(|(s, _)| *s == c.config.problem) {
            Some(i) => i,
            None => {
                problems.push((c.config.problem.clone(), config::build_problem(&c.config.problem)?));
                problems.len() - 1
            }
        };
        problem_of.push(idx);
    }

    let base_stop = config::resolve(&cfg, &problems[problem_of[0]].1)?.stop;
    let target = cfg
        .target(&base_stop)
        .ok_or_else(|| CliError::Config("sweep.target: required to build the comparison report".into()))?;

    let results = with_thread_pool(opts.jobs, || {
        combos
            .par_iter()
            .zip(problem_of.par_iter())
            .map(|(c, &pi)| run_seeds(&c.config, &problems[pi].1, &seeds))
            .collect::<Vec<_>>()
    })?;

    let mut groups = Vec::with_capacity(combos.len());
    let mut all = Vec::new();
    for (c, res) in combos.iter().zip(results) {
        let (resolved, outcomes) = res?;
        for o in &outcomes {
            write_seed_files(&dir, &c.name, &resolved, o, opts.format)?;
        }
        let prefix = format!("{}__", cfg.name);
        groups.push((
            c.name.strip_prefix(&prefix).unwrap_or(&c.name).to_string(),
            outcomes.iter().filter(|o| o.error.is_none()).filter_map(|o| o.trace.clone()).collect::<Vec<_>>(),
        ));
        all.extend(outcomes);
    }
    if groups.iter().all(|(_, t)| !t.is_empty()) {
        let rows = comparison_report(&groups, target)?;
        let mut csv = Vec::new();
        write_report_csv(&rows, &mut csv)?;
        write_atomic(&dir.join(format!("{}__report.csv", cfg.name)), &csv)?;
        write_atomic(
            &dir.join(format!("{}__report.txt", cfg.name)),
            format_report_table(&rows).as_bytes(),
        )?;
    }
    failures(&all)?;
    Ok(list_written(&dir, &format!("{}__", cfg.name)))
}

/// Where `diagnose` gets its weights from.
#[derive(Clone, Debug)]
pub enum DiagnoseSource {
    /// Replay the config's runs with a snapshot after every update.
    Replay,
    /// A JSON trace written by `run --format json` with snapshots.
    Trace(PathBuf),
}

fn diagnostics_for(problem: &Problem, trace: &RunTrace, f_star: Option<f64>) -> Result<String> {
    let w0 = trace.snapshots.first().map(|s| s.weights.clone()).unwrap_or_default();
    let base = match problem.kind() {
        ProblemKind::LeastSquares => quadratic_constants(problem)?.with_start(&w0),
        _ => ProblemConstants::without_curvature(f_star.unwrap_or(0.0)),
    };
    let iterates: Vec<&[f64]> = trace.snapshots.iter().map(|s| s.weights.as_slice()).collect();
    let constants = base.with_moments(problem, &iterates)?;
    let rows = diagnose_trace(problem, trace, &constants)?;
    let mut buf = Vec::new();
    write_diagnostics_csv(&rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

/// Writes `<name>__seed<k>__diagnostics.csv` for each diagnosed trace.
pub fn cmd_diagnose(cfg: &ExperimentConfig, source: &DiagnoseSource, opts: &Options) -> Result<Written> {
    let dir = output_dir(cfg, opts);
    let problem = config::build_problem(&cfg.problem)?;
    let resolved = config::resolve(cfg, &problem)?;
    let traces: Vec<(u64, RunTrace)> = match source {
        DiagnoseSource::Trace(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::File {
                path: path.clone(),
                source,
            })?;
            let trace: RunTrace = serde_json::from_str(&text)?;
            vec![(trace.seed, trace)]
        }
        DiagnoseSource::Replay => {
            let mut cfg = cfg.clone();
            cfg.snapshot_every = Some(1);
            let seeds = opts.seeds.clone().unwrap_or_else(|| cfg.seeds.to_vec());
            let (_, outcomes) = with_thread_pool(opts.jobs, || run_seeds(&cfg, &problem, &seeds))??;
            failures(&outcomes)?;
            outcomes.into_iter().filter_map(|o| o.trace.map(|t| (o.seed, t))).collect()
        }
    };
    let csvs = with_thread_pool(opts.jobs, || {
        traces
            .par_iter()
            .map(|(_, t)| diagnostics_for(&problem, t, resolved.f_star))
            .collect::<Vec<_>>()
    })?;
    for ((seed, _), csv) in traces.iter().zip(csvs) {
        write_atomic(
            &dir.join(format!("{}__seed{seed}__diagnostics.csv", cfg.name)),
            csv?.as_bytes(),
        )?;
    }
    Ok(list_written(&dir, &format!("{}__", cfg.name)))
}
