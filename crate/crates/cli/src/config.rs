//! Experiment configuration: a TOML document with one table per concern.
//!
//! ```toml
//! name = "quadratic_pl"
//! seeds = 50                 # 1..=50, or an explicit list
//! f_star_source = "erm"
//! theorem_step = "pl"        # or an [lr] table
//!
//! [problem]
//! kind = "least_squares"
//! n = 625
//! d = 20
//!
//! [schedule]
//! kind = "ada_loss"
//! b0 = 1
//!
//! [stop]
//! max_updates = 30
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use adadamp::analysis::Threshold;
use adadamp::diagnostics::m_squared;
use adadamp::engine::{OptimizerConfig, RunConfig, Sampling, StoppingRule};
use adadamp::problems::{
    erm_reference, gen_linear_data, gen_multiclass_data, grade_column_scales, load_labelled_csv,
    with_interactions, Dataset, NoiseRule, Problem, ProblemKind,
};
use adadamp::schedules::{theorem_step_size, FunctionClass, LrRule, ScheduleKind, SchedulePolicy, StepConstants};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Refuse sweeps that expand to more runs than this unless raised.
pub const DEFAULT_MAX_RUNS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    /// Seeds `1..=count`.
    Count(u64),
    List(Vec<u64>),
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::Count(1)
    }
}

impl Seeds {
    pub fn to_vec(&self) -> Vec<u64> {
        match self {
            Seeds::Count(c) => (1..=*c).collect(),
            Seeds::List(v) => v.clone(),
        }
    }
}

/// Where the optimal loss used by the loss-adaptive schedule comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FStarSource {
    /// `schedule.f_star` as written.
    Explicit,
    Zero,
    /// Train loss of the exact least-squares solution.
    Erm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    /// Total examples before the train/test split.
    #[serde(default)]
    pub n: usize,
    #[serde(default)]
    pub d: usize,
    #[serde(default = "seven")]
    pub classes: usize,
    #[serde(default = "one")]
    pub separation: f64,
    #[serde(default = "unit_noise")]
    pub noise: NoiseRule,
    #[serde(default = "fifth")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Append pairwise products of the raw features.
    #[serde(default)]
    pub interactions: bool,
    /// Spread raw column scales over this many decades.
    #[serde(default)]
    pub column_decades: f64,
    /// Labelled CSV to use instead of synthetic data (classification only).
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

fn seven() -> usize {
    7
}

fn one() -> f64 {
    1.0
}

fn fifth() -> f64 {
    0.2
}

fn unit_noise() -> NoiseRule {
    NoiseRule::Unit
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Dotted config keys mapped to the values to try, e.g.
    /// `"schedule.m" = [0.01, 0.1]`.
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<toml::Value>>,
    /// Named alternatives; each table given replaces that section of the
    /// base config.
    #[serde(default)]
    pub variants: Vec<toml::Table>,
    #[serde(default)]
    pub target: Option<Threshold>,
    #[serde(default = "max_runs")]
    pub max_runs: usize,
}

fn max_runs() -> usize {
    DEFAULT_MAX_RUNS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default = "one_u")]
    pub eval_every: u64,
    #[serde(default)]
    pub snapshot_every: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub f_star_source: Option<FStarSource>,
    /// Use the step size prescribed for this function class (least squares
    /// only) instead of an `[lr]` table.
    #[serde(default)]
    pub theorem_step: Option<FunctionClass>,
    /// `M_U²` for the prescribed step; estimated at the starting point when
    /// absent.
    #[serde(default)]
    pub m_upper_sq: Option<f64>,
    /// Stop once the test loss is at most this multiple of the linear ERM
    /// test loss (regression problems); also the sweep report target.
    #[serde(default)]
    pub erm_test_target_factor: Option<f64>,
    pub problem: ProblemSpec,
    pub schedule: SchedulePolicy,
    #[serde(default)]
    pub lr: Option<LrRule>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub stop: StoppingRule,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn one_u() -> u64 {
    1
}

/// One concrete configuration of a sweep.
#[derive(Clone, Debug)]
pub struct Combination {
    pub name: String,
    pub config: ExperimentConfig,
}

fn parse_error(path: Option<&Path>, e: impl std::fmt::Display) -> CliError {
    match path {
        Some(p) => CliError::Config(format!("{}: {e}", p.display())),
        None => CliError::Config(e.to_string()),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| parse_error(Some(path), e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| parse_error(None, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that don't need the data.
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, e: adadamp::Error| CliError::Config(format!("{f}: {e}"));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(CliError::Config(format!("name: {:?} is not a valid file stem", self.name)));
        }
        self.schedule.validate().map_err(|e| field("schedule", e))?;
        if self.seeds.to_vec().is_empty() {
            return Err(CliError::Config("seeds: no seeds given".into()));
        }
        if self.eval_every == 0 {
            return Err(CliError::Config("eval_every: must be at least 1".into()));
        }
        match (&self.lr, self.theorem_step) {
            (Some(lr), None) => lr.validate().map_err(|e| field("lr", e))?,
            (None, Some(_)) => {
                if self.problem.kind != ProblemKind::LeastSquares {
                    return Err(CliError::Config(
                        "theorem_step: needs a least_squares problem for its curvature constants".into(),
                    ));
                }
            }
            (Some(_), Some(_)) => {
                return Err(CliError::Config("lr and theorem_step are mutually exclusive".into()))
            }
            (None, None) => return Err(CliError::Config("lr: missing (or set theorem_step)".into())),
        }
        if self.schedule.kind == ScheduleKind::AdaLoss && self.f_star_source.is_none() {
            return Err(CliError::Config(
                "f_star_source: required for the ada_loss schedule (explicit, zero or erm)".into(),
            ));
        }
        if self.f_star_source == Some(FStarSource::Erm)
            && self.problem.kind == ProblemKind::MulticlassLogistic
        {
            return Err(CliError::Config(
                "f_star_source: erm is only available for least_squares and linear_net".into(),
            ));
        }
        if let Some(f) = self.erm_test_target_factor {
            if self.problem.kind == ProblemKind::MulticlassLogistic || !(f > 0.0 && f.is_finite()) {
                return Err(CliError::Config(
                    "erm_test_target_factor: needs a positive factor and a regression problem".into(),
                ));
            }
        }
        if self.problem.csv.is_none() && (self.problem.n == 0 || self.problem.d == 0) {
            return Err(CliError::Config("problem: n and d must be positive".into()));
        }
        if self.problem.csv.is_some() && self.problem.kind != ProblemKind::MulticlassLogistic {
            return Err(CliError::Config("problem.csv: only supported for multiclass_logistic".into()));
        }
        Ok(())
    }

    /// Expands variants and grid into concrete configurations. Without a
    /// `[sweep]` table the config itself is the only combination.
    pub fn combinations(&self) -> Result<Vec<Combination>> {
        let Some(sweep) = &self.sweep else {
            return Ok(vec![Combination {
                name: self.name.clone(),
                config: self.clone(),
            }]);
        };
        if sweep.grid.is_empty() && sweep.variants.is_empty() {
            return Err(CliError::Config("sweep: empty grid (no grid keys and no variants)".into()));
        }
        if let Some((k, _)) = sweep.grid.iter().find(|(_, v)| v.is_empty()) {
            return Err(CliError::Config(format!("sweep.grid.{k}: empty list of values")));
        }
        let grid_size: usize = sweep.grid.values().map(Vec::len).product();
        let combos = grid_size * sweep.variants.len().max(1);
        let runs = combos * self.seeds.to_vec().len();
        if runs > sweep.max_runs {
            return Err(CliError::Config(format!(
                "sweep expands to {runs} runs ({combos} combinations x {} seeds), more than max_runs = {}",
                self.seeds.to_vec().len(),
                sweep.max_runs
            )));
        }

        let mut base = toml::Table::try_from(self).map_err(|e| parse_error(None, e))?;
        base.remove("sweep");
        let variants: Vec<(Option<String>, toml::Table)> = if sweep.variants.is_empty() {
            vec![(None, toml::Table::new())]
        } else {
            sweep
                .variants
                .iter()
                .map(|v| {
                    let mut v = v.clone();
                    match v.remove("name") {
                        Some(toml::Value::String(s)) => Ok((Some(s), v)),
                        _ => Err(CliError::Config("sweep.variants: every variant needs a string name".into())),
                    }
                })
                .collect::<Result<_>>()?
        };

        let keys: Vec<&String> = sweep.grid.keys().collect();
        let mut out = Vec::with_capacity(combos);
        for (vname, overrides) in &variants {
            for idx in 0..grid_size {
                let mut doc = base.clone();
                for (k, v) in overrides {
                    doc.insert(k.clone(), v.clone());
                }
                let mut name = self.name.clone();
                if let Some(v) = vname {
                    name.push_str("__");
                    name.push_str(v);
                }
                let mut rem = idx;
                for key in &keys {
                    let vals = &sweep.grid[*key];
                    let val = &vals[rem % vals.len()];
                    rem /= vals.len();
                    set_dotted(&mut doc, key, val.clone())?;
                    let short = key.rsplit('.').next().unwrap_or(key);
                    name.push_str(&format!("__{short}={}", value_label(val)));
                }
                let mut config: ExperimentConfig = toml::Value::Table(doc)
                    .try_into()
                    .map_err(|e| CliError::Config(format!("sweep combination {name}: {e}")))?;
                config.validate().map_err(|e| CliError::Config(format!("sweep combination {name}: {e}")))?;
                config.sweep = None;
                out.push(Combination { name, config });
            }
        }
        Ok(out)
    }

    /// Report target: the sweep's, else the (resolved) stopping target.
    pub fn target(&self, stop: &StoppingRule) -> Option<Threshold> {
        if let Some(t) = self.sweep.as_ref().and_then(|s| s.target) {
            return Some(t);
        }
        if let Some(t) = stop.target_test_metric {
            return Some(match self.problem.kind {
                ProblemKind::MulticlassLogistic => Threshold::TestMetricAtLeast(t),
                _ => Threshold::TestMetricAtMost(t),
            });
        }
        stop.target_train_loss.map(Threshold::TrainLossAtMost)
    }
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_dotted(doc: &mut toml::Table, key: &str, val: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Config(format!("sweep.grid: bad key {key:?}")))?;
    let mut table = doc;
    for p in parts {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("sweep.grid.{key}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), val);
    Ok(())
}

/// Dataset and objective described by `spec`.
pub fn build_problem(spec: &ProblemSpec) -> Result<Problem> {
    let mut ds: Dataset = match (&spec.csv, spec.kind) {
        (Some(path), _) => load_labelled_csv(path, spec.test_fraction, spec.seed)?,
        (None, ProblemKind::MulticlassLogistic) => gen_multiclass_data(
            spec.n,
            spec.d,
            spec.classes,
            spec.separation,
            spec.test_fraction,
            spec.seed,
        )?,
        (None, _) => gen_linear_data(spec.n, spec.d, spec.noise, spec.test_fraction, spec.seed)?,
    };
    if spec.column_decades > 0.0 {
        ds = grade_column_scales(ds, spec.column_decades)?;
    }
    if spec.interactions {
        ds = with_interactions(ds)?;
    }
    Ok(Problem::new(ds, spec.kind, spec.weight_decay)?)
}

/// Everything resolved from a config against its problem.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub policy: SchedulePolicy,
    pub lr: LrRule,
    pub f_star: Option<f64>,
    /// How `M_U²` for the prescribed step was obtained.
    pub m_upper_sq_source: Option<&'static str>,
    pub m_upper_sq: Option<f64>,
    pub stop: StoppingRule,
}

pub fn resolve(cfg: &ExperimentConfig, problem: &Problem) -> Result<Resolved> {
    let mut policy = cfg.schedule.clone();
    let f_star = match cfg.f_star_source {
        Some(FStarSource::Explicit) => Some(policy.f_star),
        Some(FStarSource::Zero) => Some(0.0),
        Some(FStarSource::Erm) => Some(erm_reference(problem)?.train_loss),
        None => None,
    };
    if let Some(f) = f_star {
        policy.f_star = f;
    }
    let (lr, source, m_upper) = match (&cfg.lr, cfg.theorem_step) {
        (Some(lr), _) => (lr.clone(), None, None),
        (None, Some(class)) => {
            let k = adadamp::diagnostics::quadratic_constants(problem)?;
            let w0 = vec![0.0; problem.num_weights()];
            let f0 = problem.loss_full(&w0)?;
            let f_ref = f_star.unwrap_or(k.f_star);
            let c = policy.c.unwrap_or(policy.b0 as f64 * (f0 - f_ref));
            let m0 = m_squared(problem, &w0)?;
            let (mu, source) = match cfg.m_upper_sq {
                Some(v) => (v, "config"),
                None => (m0, "starting_point"),
            };
            let gamma = theorem_step_size(
                class,
                StepConstants {
                    alpha: Some(k.alpha),
                    beta: k.beta,
                    c,
                    m_upper_sq: Some(mu),
                    m_lower_sq: Some(m0),
                },
            )?;
            (LrRule::prescribed(gamma), Some(source), Some(mu))
        }
        (None, None) => return Err(CliError::Config("lr: missing (or set theorem_step)".into())),
    };
    let mut stop = cfg.stop.clone();
    if let Some(factor) = cfg.erm_test_target_factor {
        let test = erm_reference(problem)?
            .test_loss
            .ok_or_else(|| CliError::Config("erm_test_target_factor: the problem has no test split".into()))?;
        stop.target_test_metric = Some(factor * test);
    }
    Ok(Resolved {
        stop,
        policy,
        lr,
        f_star,
        m_upper_sq_source: source,
        m_upper_sq: m_upper,
    })
}

pub fn run_config(cfg: &ExperimentConfig, resolved: &Resolved, seed: u64) -> RunConfig {
    let mut rc = RunConfig::new(resolved.policy.clone(), resolved.lr.clone(), resolved.stop.clone(), seed);
    rc.optimizer = cfg.optimizer.clone();
    rc.sampling = cfg.sampling;
    rc.eval_every = cfg.eval_every;
    rc.snapshot_every = cfg.snapshot_every;
    rc
}

/// Parses `1,2,5-8` into a seed list.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let bad = || CliError::Usage(format!("--seeds: cannot parse {s:?}; use e.g. 1,2,5-8"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                if b < a {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "t"
seeds = [1, 2]
f_star_source = "zero"

[problem]
kind = "least_squares"
n = 50
d = 3

[schedule]
kind = "pada_linear"
b0 = 2
m = 0.5

[lr]
kind = "constant"
gamma0 = 0.01

[stop]
max_updates = 5
"#;

    #[test]
    fn parses_and_defaults() {
        let c = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(c.seeds.to_vec(), vec![1, 2]);
        assert_eq!(c.problem.test_fraction, 0.2);
        assert_eq!(c.combinations().unwrap().len(), 1);
    }

    #[test]
    fn cap_below_b0_names_both_fields() {
        let text = BASE.replace("m = 0.5", "m = 0.5\nb_max = 1");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("b0") && err.contains("b_max"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let err = ExperimentConfig::parse(&BASE.replace("m = 0.5", "mm = 0.5")).unwrap_err().to_string();
        assert!(err.contains("mm"), "{err}");
    }

    #[test]
    fn adaptive_needs_optimum_source() {
        let text = BASE.replace("f_star_source = \"zero\"\n", "").replace("pada_linear", "ada_loss");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("f_star_source"), "{err}");
    }

    #[test]
    fn grid_product() {
        let text = format!("{BASE}\n[sweep.grid]\n\"schedule.m\" = [0.01, 0.1]\n");
        let c = ExperimentConfig::parse(&text).unwrap();
        let combos = c.combinations().unwrap();
        assert_eq!(combos.len(), 2);
        assert_eq!(combos[0].config.schedule.m, 0.01);
        assert_eq!(combos[1].config.schedule.m, 0.1);
        assert_eq!(combos[1].name, "t__m=0.1");
        assert_eq!(combos.len() * c.seeds.to_vec().len(), 4);
    }

    #[test]
    fn empty_and_oversized_grids() {
        let text = format!("{BASE}\n[sweep]\n");
        assert!(ExperimentConfig::parse(&text).unwrap().combinations().is_err());
        let text = format!("{BASE}\n[sweep]\nmax_runs = 3\n[sweep.grid]\n\"schedule.m\" = [0.01, 0.1]\n");
        let err = ExperimentConfig::parse(&text).unwrap().combinations().unwrap_err().to_string();
        assert!(err.contains("4 runs"), "{err}");
    }

    #[test]
    fn variants_replace_sections() {
        let text = format!(
            "{BASE}\n[[sweep.variants]]\nname = \"gd\"\nschedule = {{ kind = \"constant\", b0 = 40 }}\n\
             [[sweep.variants]]\nname = \"pada\"\n"
        );
        let combos = ExperimentConfig::parse(&text).unwrap().combinations().unwrap();
        assert_eq!(combos[0].name, "t__gd");
        assert_eq!(combos[0].config.schedule.kind, ScheduleKind::Constant);
        assert_eq!(combos[0].config.schedule.m, 0.0);
        assert_eq!(combos[1].config.schedule.m, 0.5);
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seed_list("1,2,5-7").unwrap(), vec![1, 2, 5, 6, 7]);
        assert!(parse_seed_list("3-1").is_err());
        assert!(parse_seed_list("").is_err());
    }
}
