use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use adadamp::engine::StoppingRule;
use adadamp_cli::config::{ExperimentConfig, Seeds};
use adadamp_cli::{cmd_diagnose, cmd_run, cmd_sweep, CliError, DiagnoseSource, Options, TraceFormat};

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn opts(dir: &Path) -> Options {
    Options {
        out: Some(dir.to_path_buf()),
        ..Options::default()
    }
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adadamp"))
}

const SMALL: &str = r#"
name = "small"
seeds = [1, 2]
f_star_source = "zero"

[problem]
kind = "least_squares"
n = 120
d = 4
seed = 9

[schedule]
kind = "pada_linear"
b0 = 2
m = 0.5

[lr]
kind = "constant"
gamma0 = 0.02

[stop]
max_updates = 40
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn bundled_configs_parse_and_run_briefly() {
    let mut seen = 0;
    for entry in fs::read_dir(bundled("")).unwrap() {
        let path = entry.unwrap().path();
        let mut cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
        cfg.seeds = Seeds::List(vec![1]);
        let shrink = |s: &mut StoppingRule| s.max_updates = Some(s.max_updates.unwrap_or(20).min(20));
        shrink(&mut cfg.stop);
        let tmp = tempfile::tempdir().unwrap();
        if let Some(sweep) = cfg.sweep.as_mut() {
            for v in &mut sweep.variants {
                if let Some(toml::Value::Table(stop)) = v.get_mut("stop") {
                    stop.insert("max_updates".into(), toml::Value::Integer(20));
                }
            }
            cmd_sweep(&cfg, &opts(tmp.path())).unwrap();
            assert!(tmp.path().join(format!("{}__report.csv", cfg.name)).exists());
        } else {
            let w = cmd_run(&cfg, &opts(tmp.path())).unwrap();
            assert!(w.files.iter().any(|f| f.ends_with(format!("{}__seed1.csv", cfg.name))));
            assert!(w.files.iter().any(|f| f.ends_with(format!("{}__aggregate.csv", cfg.name))));
        }
    }
    assert!(seen >= 5);
}

#[test]
fn run_writes_trace_summary_and_aggregate_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(SMALL).unwrap();
    cmd_run(&cfg, &opts(tmp.path())).unwrap();
    let files = read_dir(tmp.path());
    let names: Vec<&str> = files.keys().map(String::as_str).collect();
    assert_eq!(
        names,
        [
            "small__aggregate.csv",
            "small__seed1.csv",
            "small__seed1.summary.json",
            "small__seed2.csv",
            "small__seed2.summary.json"
        ]
    );
    let trace = String::from_utf8(files["small__seed1.csv"].clone()).unwrap();
    // header plus one row per update
    assert_eq!(trace.lines().count(), 41);
    let summary: serde_json::Value = serde_json::from_slice(&files["small__seed2.summary.json"]).unwrap();
    assert_eq!(summary["seed"], 2);
    assert_eq!(summary["updates"], 40);
    let agg = String::from_utf8(files["small__aggregate.csv"].clone()).unwrap();
    assert!(agg.lines().nth(1).unwrap().starts_with("1,2,"));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(&bundled("pl_quadratic.toml")).unwrap();
    cfg.seeds = Seeds::List(vec![1, 2, 3]);
    cmd_run(&cfg, &opts(a.path())).unwrap();
    let mut o = opts(b.path());
    o.jobs = Some(1);
    cmd_run(&cfg, &o).unwrap();
    assert_eq!(read_dir(a.path()), read_dir(b.path()));
}

#[test]
fn cap_below_b0_fails_naming_both_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("m = 0.5", "m = 0.5\nb_max = 1"));
    let out = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("b0") && err.contains("b_max"), "{err}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn grid_over_m_and_two_seeds_gives_four_runs_and_one_report() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        "{SMALL}\n[sweep]\ntarget = {{ metric = \"train_loss_at_most\", value = 1e9 }}\n\
         [sweep.grid]\n\"schedule.m\" = [0.01, 0.1]\n"
    );
    let cfg = ExperimentConfig::parse(&text).unwrap();
    cmd_sweep(&cfg, &opts(tmp.path())).unwrap();
    let files = read_dir(tmp.path());
    let traces: Vec<_> = files.keys().filter(|k| k.ends_with(".csv") && k.contains("__seed")).collect();
    assert_eq!(traces.len(), 4, "{traces:?}");
    assert!(files.contains_key("small__report.csv"));
    assert!(files.contains_key("small__report.txt"));
    let report = String::from_utf8(files["small__report.csv"].clone()).unwrap();
    // header + three aggregations for each of the two grid points
    assert_eq!(report.lines().count(), 7);
    assert!(report.contains("m=0.01") && report.contains("m=0.1"));
}

#[test]
fn empty_grid_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}\n[sweep]\nmax_runs = 10\n"));
    let out = bin().args(["sweep", "--config"]).arg(&cfg).arg("--out").arg(tmp.path()).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty grid"));
}

#[test]
fn oversized_grid_is_refused_with_count() {
    let cfg = ExperimentConfig::parse(&format!(
        "{SMALL}\n[sweep]\nmax_runs = 5\n[sweep.grid]\n\"schedule.m\" = [1.0, 2.0, 3.0]\n"
    ))
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    match cmd_sweep(&cfg, &opts(tmp.path())) {
        Err(CliError::Config(msg)) => assert!(msg.contains("6 runs"), "{msg}"),
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn divergence_exits_nonzero_and_keeps_partial_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("gamma0 = 0.02", "gamma0 = 50.0"));
    let out = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    let trace = fs::read_to_string(tmp.path().join("o/small__seed1.csv")).unwrap();
    assert!(trace.lines().count() > 1);
    let summary = fs::read_to_string(tmp.path().join("o/small__seed1.summary.json")).unwrap();
    assert!(summary.contains("\"diverged\""));
}

#[test]
fn seeds_flag_and_output_root_env() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = bin()
        .args(["run", "--seeds", "3-4", "--jobs", "2", "--config"])
        .arg(&cfg)
        .env("ADADAMP_OUTPUT_ROOT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("root/small");
    assert!(dir.join("small__seed3.csv").exists());
    assert!(dir.join("small__seed4.csv").exists());
    assert!(!dir.join("small__seed1.csv").exists());
}

#[test]
fn diagnose_quadratic_replay_has_no_violations_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&bundled("pl_quadratic.toml")).unwrap();
    let mut o = opts(a.path());
    o.seeds = Some(vec![1, 2]);
    cmd_diagnose(&cfg, &DiagnoseSource::Replay, &o).unwrap();
    o.out = Some(b.path().to_path_buf());
    cmd_diagnose(&cfg, &DiagnoseSource::Replay, &o).unwrap();
    let files = read_dir(a.path());
    assert_eq!(files, read_dir(b.path()));
    assert_eq!(files.len(), 2);
    for (name, body) in &files {
        let mut rdr = csv::Reader::from_reader(body.as_slice());
        let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 31, "{name}");
        for r in &rows {
            assert_eq!(&r[10], "0", "{name} row {}", &r[0]);
            assert!(!r[5].is_empty() && !r[6].is_empty());
        }
    }
}

#[test]
fn diagnose_reads_json_trace_and_flags_stationary_end() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"
name = "stat"
f_star_source = "zero"
theorem_step = "convex"
snapshot_every = 1

[problem]
kind = "least_squares"
n = 50
d = 2
noise = "zero"
test_fraction = 0.0
seed = 4

[schedule]
kind = "constant"
b0 = 50

[stop]
max_updates = 600
"#;
    let cfg = ExperimentConfig::parse(text).unwrap();
    let mut o = opts(tmp.path());
    o.format = TraceFormat::Json;
    cmd_run(&cfg, &o).unwrap();
    let trace = tmp.path().join("stat__seed1.json");
    cmd_diagnose(&cfg, &DiagnoseSource::Trace(trace), &opts(tmp.path())).unwrap();
    let diag = fs::read_to_string(tmp.path().join("stat__seed1__diagnostics.csv")).unwrap();
    let last = diag.lines().last().unwrap();
    assert!(last.starts_with("600,"), "{last}");
    assert!(last.contains(",stationary,"), "{last}");
    assert!(!diag.lines().nth(1).unwrap().contains("stationary"));
}

#[test]
fn diagnose_rejects_trace_from_another_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::parse(SMALL).unwrap();
    cfg.snapshot_every = Some(1);
    cfg.seeds = Seeds::List(vec![1]);
    let mut o = opts(tmp.path());
    o.format = TraceFormat::Json;
    cmd_run(&cfg, &o).unwrap();
    cfg.problem.n = 200;
    let err = cmd_diagnose(&cfg, &DiagnoseSource::Trace(tmp.path().join("small__seed1.json")), &opts(tmp.path()))
        .unwrap_err()
        .to_string();
    assert!(err.contains("examples"), "{err}");
}
