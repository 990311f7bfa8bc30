//! Post-hoc fits and comparisons over recorded traces.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{fmt_f64, RunTrace};
use crate::error::{config_err, Error, Result};

/// Least-squares line through a window of a trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination, clamped to `[0, 1]`. An exactly flat
    /// series is fitted perfectly and reports 1.
    pub r_squared: f64,
    /// First and last update index used, inclusive.
    pub window: (u64, u64),
}

impl FitResult {
    /// Per-update contraction `1 − e^slope` of a log-gap fit.
    pub fn contraction_rate(&self) -> f64 {
        -self.slope.exp_m1()
    }
}

/// Ordinary least squares of `y` on `x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::CannotFit(format!("need at least two points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sxx == 0.0 {
        return Err(Error::CannotFit("all x values coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
    Ok((slope, intercept, r2))
}

/// Fits `ln(F_k − F*)` against `k` over `(k, loss)` points.
pub fn fit_log_gap(points: &[(u64, f64)], f_star: f64) -> Result<FitResult> {
    let mut x = Vec::with_capacity(points.len());
    let mut y = Vec::with_capacity(points.len());
    for &(k, loss) in points {
        let gap = loss - f_star;
        if !(gap > 0.0) {
            return Err(Error::CannotFit(format!(
                "loss {loss} at update {k} is not above F* = {f_star}"
            )));
        }
        x.push(k as f64);
        y.push(gap.ln());
    }
    let (slope, intercept, r_squared) = fit_line(&x, &y)?;
    Ok(FitResult {
        slope,
        intercept,
        r_squared,
        window: (points[0].0, points[points.len() - 1].0),
    })
}

/// Linear-convergence fit of a trace's evaluated train losses, including the
/// starting loss at `k = 0`. The implied rate is
/// [`FitResult::contraction_rate`].
pub fn fit_linear_rate(trace: &RunTrace, f_star: f64, window: Option<(u64, u64)>) -> Result<FitResult> {
    let points: Vec<(u64, f64)> = std::iter::once((0, trace.initial_train_loss))
        .chain(trace.records.iter().filter_map(|r| r.train_loss.map(|l| (r.k, l))))
        .filter(|(k, _)| window.is_none_or(|(a, b)| *k >= a && *k <= b))
        .collect();
    fit_log_gap(&points, f_star)
}

/// Which updates a batch-growth fit uses. Every rule stops before the first
/// update whose batch reaches the cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthWindow {
    /// The longest suffix (before the cap) whose batch increments are all
    /// strictly positive; when that suffix is a single update, the longest
    /// suffix with non-negative increments instead.
    Auto,
    /// Every update before the cap.
    BeforeCap,
    /// Updates `a..=b` before the cap.
    Fixed(u64, u64),
}

/// `(k, B_k)` pairs selected by `window`.
pub fn growth_window(trace: &RunTrace, cap: Option<u64>, window: GrowthWindow) -> Vec<(u64, u64)> {
    let pre: Vec<(u64, u64)> = trace
        .records
        .iter()
        .take_while(|r| cap.is_none_or(|c| r.batch_size < c))
        .map(|r| (r.k, r.batch_size))
        .collect();
    match window {
        GrowthWindow::BeforeCap => pre,
        GrowthWindow::Fixed(a, b) => pre.into_iter().filter(|p| p.0 >= a && p.0 <= b).collect(),
        GrowthWindow::Auto => {
            let suffix = |ok: fn(u64, u64) -> bool| {
                let mut start = pre.len().saturating_sub(1);
                while start > 0 && ok(pre[start - 1].1, pre[start].1) {
                    start -= 1;
                }
                start
            };
            let mut start = suffix(|a, b| b > a);
            if pre.len() - start < 2 {
                start = suffix(|a, b| b >= a);
            }
            pre[start..].to_vec()
        }
    }
}

/// Fits `ln B_k` against `k` over the growth window.
pub fn fit_exponential_batch(trace: &RunTrace, cap: Option<u64>, window: GrowthWindow) -> Result<FitResult> {
    fit_exponential_points(&growth_window(trace, cap, window))
}

pub fn fit_exponential_points(points: &[(u64, u64)]) -> Result<FitResult> {
    if points.len() < 2 {
        return Err(Error::CannotFit("growth window has fewer than two updates".into()));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| (p.1 as f64).ln()).collect();
    let (slope, intercept, r_squared) = fit_line(&x, &y)?;
    Ok(FitResult {
        slope,
        intercept,
        r_squared,
        window: (points[0].0, points[points.len() - 1].0),
    })
}

/// Power-law fit of the batch growth above its floor: `ln(B_k − b0)`
/// against `ln k`, over growth-window updates with `B_k > b0`. For
/// `B_k = b0 + ⌈m k^p⌉` the slope estimates `p`.
pub fn fit_power_batch(trace: &RunTrace, b0: u64, cap: Option<u64>, window: GrowthWindow) -> Result<FitResult> {
    let points: Vec<(u64, u64)> = growth_window(trace, cap, window)
        .into_iter()
        .filter(|&(k, b)| k > 0 && b > b0)
        .collect();
    if points.len() < 2 {
        return Err(Error::CannotFit("no growth above the batch floor".into()));
    }
    let x: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| ((p.1 - b0) as f64).ln()).collect();
    let (slope, intercept, r_squared) = fit_line(&x, &y)?;
    Ok(FitResult {
        slope,
        intercept,
        r_squared,
        window: (points[0].0, points[points.len() - 1].0),
    })
}

/// Predicate a run must satisfy to count as having reached the target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", content = "value", rename_all = "snake_case")]
pub enum Threshold {
    TrainLossAtMost(f64),
    TestMetricAtLeast(f64),
    TestMetricAtMost(f64),
}

impl Threshold {
    fn value(self) -> f64 {
        match self {
            Threshold::TrainLossAtMost(t)
            | Threshold::TestMetricAtLeast(t)
            | Threshold::TestMetricAtMost(t) => t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub optimizer: String,
    pub epochs_to_target: Option<f64>,
    pub updates_to_target: Option<u64>,
    pub reached: bool,
}

/// First evaluated record satisfying `target`.
pub fn threshold_crossing(trace: &RunTrace, optimizer: &str, target: Threshold) -> Result<ComparisonRow> {
    if !target.value().is_finite() {
        return config_err("threshold must be finite");
    }
    let hit = trace.records.iter().find(|r| match target {
        Threshold::TrainLossAtMost(t) => r.train_loss.is_some_and(|v| v <= t),
        Threshold::TestMetricAtLeast(t) => r.test_metric.is_some_and(|v| v >= t),
        Threshold::TestMetricAtMost(t) => r.test_metric.is_some_and(|v| v <= t),
    });
    Ok(ComparisonRow {
        optimizer: optimizer.to_string(),
        epochs_to_target: hit.map(|r| r.epoch),
        updates_to_target: hit.map(|r| r.k),
        reached: hit.is_some(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Median,
    /// Interquartile range.
    Iqr,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Median => "median",
            Aggregation::Iqr => "iqr",
        }
    }

    pub fn apply(self, values: &[f64]) -> f64 {
        match self {
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::Median => quantile(values, 0.5),
            Aggregation::Iqr => quantile(values, 0.75) - quantile(values, 0.25),
        }
    }
}

/// Linear-interpolation quantile (the "type 7" rule).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// One aggregate of one optimizer's seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub optimizer: String,
    pub epochs_to_target: Option<f64>,
    pub updates_to_target: Option<f64>,
    /// Every seed reached the target.
    pub reached: bool,
    pub seed_count: usize,
    pub aggregation: Aggregation,
}

pub const REPORT_HEADER: [&str; 6] = [
    "optimizer",
    "epochs_to_target",
    "updates_to_target",
    "reached",
    "seed_count",
    "aggregation",
];

/// Mean, median and IQR of time-to-target for each optimizer. Optimizers
/// are ordered by median epochs to target (unreached last, then by name).
/// When any seed misses the target the counts are left empty.
pub fn comparison_report(groups: &[(String, Vec<RunTrace>)], target: Threshold) -> Result<Vec<ReportRow>> {
    let first = groups
        .iter()
        .flat_map(|(_, t)| t.first())
        .next()
        .ok_or_else(|| Error::Config("no traces to compare".into()))?;
    for (name, traces) in groups {
        if traces.is_empty() {
            return config_err(format!("optimizer {name} has no traces"));
        }
        for t in traces {
            if t.n_train != first.n_train || t.metric_kind != first.metric_kind {
                return config_err(format!("optimizer {name} was run on a different problem"));
            }
        }
    }

    let mut per_opt = Vec::with_capacity(groups.len());
    for (name, traces) in groups {
        let rows = traces
            .iter()
            .map(|t| threshold_crossing(t, name, target))
            .collect::<Result<Vec<_>>>()?;
        let reached = rows.iter().all(|r| r.reached);
        let epochs: Vec<f64> = rows.iter().filter_map(|r| r.epochs_to_target).collect();
        let updates: Vec<f64> = rows.iter().filter_map(|r| r.updates_to_target.map(|u| u as f64)).collect();
        let key = if reached { Aggregation::Median.apply(&epochs) } else { f64::INFINITY };
        let out: Vec<ReportRow> = [Aggregation::Mean, Aggregation::Median, Aggregation::Iqr]
            .into_iter()
            .map(|agg| ReportRow {
                optimizer: name.clone(),
                epochs_to_target: reached.then(|| agg.apply(&epochs)),
                updates_to_target: reached.then(|| agg.apply(&updates)),
                reached,
                seed_count: traces.len(),
                aggregation: agg,
            })
            .collect();
        per_opt.push((key, name.clone(), out));
    }
    per_opt.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    Ok(per_opt.into_iter().flat_map(|(_, _, rows)| rows).collect())
}

/// The row for `optimizer` with the given aggregation.
pub fn report_value<'a>(rows: &'a [ReportRow], optimizer: &str, agg: Aggregation) -> Option<&'a ReportRow> {
    rows.iter().find(|r| r.optimizer == optimizer && r.aggregation == agg)
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record([
            r.optimizer.clone(),
            r.epochs_to_target.map(fmt_f64).unwrap_or_default(),
            r.updates_to_target.map(fmt_f64).unwrap_or_default(),
            r.reached.to_string(),
            r.seed_count.to_string(),
            r.aggregation.name().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Column-aligned plain-text rendering of a report.
pub fn format_report_table(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 6]> = std::iter::once(REPORT_HEADER.map(String::from))
        .chain(rows.iter().map(|r| {
            [
                r.optimizer.clone(),
                r.epochs_to_target.map_or("-".into(), |v| format!("{v:.3}")),
                r.updates_to_target.map_or("-".into(), |v| format!("{v:.1}")),
                r.reached.to_string(),
                r.seed_count.to_string(),
                r.aggregation.name().to_string(),
            ]
        }))
        .collect();
    let mut widths = [0usize; 6];
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut s = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
    }
    s
}
