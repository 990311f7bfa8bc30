use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::problems::MetricKind;

pub const TRACE_HEADER: [&str; 8] = [
    "k",
    "epoch",
    "batch_size",
    "lr",
    "train_loss",
    "test_metric",
    "grad_comps_opt",
    "grad_comps_eval",
];

/// State after one model update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Updates applied so far, starting at 1.
    pub k: u64,
    /// `grad_comps_opt / n_train`.
    pub epoch: f64,
    /// Batch used by this update (after the cap).
    pub batch_size: u64,
    /// Step used by this update (after the cap).
    pub lr: f64,
    /// `F(w_k)`; only present on evaluation updates.
    pub train_loss: Option<f64>,
    pub test_metric: Option<f64>,
    /// Cumulative per-example gradients spent on model updates.
    pub grad_comps_opt: u64,
    /// Cumulative per-example gradients spent on schedule evaluations.
    pub grad_comps_eval: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    MaxUpdates,
    MaxEpochs,
    TargetReached,
    /// The full gradient vanished.
    Converged,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub k: u64,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<Record>,
    pub status: RunStatus,
    pub sampling: super::Sampling,
    pub n_train: usize,
    pub seed: u64,
    pub metric_kind: MetricKind,
    pub initial_train_loss: f64,
    pub initial_test_metric: Option<f64>,
    /// Adaptive constant actually used, if any.
    pub c: Option<f64>,
    /// First update whose requested batch reached the cap.
    pub crossover_update: Option<u64>,
    /// Weights at `k = 0` and every `snapshot_every` updates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshots: Vec<Snapshot>,
    pub final_weights: Vec<f64>,
    /// Reported iterate when averaging is on.
    pub averaged_weights: Option<Vec<f64>>,
}

impl RunTrace {
    pub fn updates(&self) -> u64 {
        self.records.last().map_or(0, |r| r.k)
    }

    pub fn grad_comps_opt(&self) -> u64 {
        self.records.last().map_or(0, |r| r.grad_comps_opt)
    }

    pub fn final_epoch(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.epoch)
    }

    pub fn batch_sizes(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.batch_size).collect()
    }

    /// Last evaluated train loss.
    pub fn final_train_loss(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.train_loss)
    }

    pub fn final_test_metric(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.test_metric)
    }

    /// Writes the per-update CSV. Missing evaluations are empty fields.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_HEADER)?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.k.to_string(),
                fmt_f64(r.epoch),
                r.batch_size.to_string(),
                fmt_f64(r.lr),
                opt(r.train_loss),
                opt(r.test_metric),
                r.grad_comps_opt.to_string(),
                r.grad_comps_eval.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            status: self.status,
            seed: self.seed,
            sampling: self.sampling,
            updates: self.updates(),
            epochs: self.final_epoch(),
            grad_comps_opt: self.grad_comps_opt(),
            grad_comps_eval: self.records.last().map_or(0, |r| r.grad_comps_eval),
            initial_train_loss: self.initial_train_loss,
            final_train_loss: self.final_train_loss(),
            final_test_metric: self.final_test_metric(),
            metric_kind: self.metric_kind,
            c: self.c,
            crossover_update: self.crossover_update,
        }
    }
}

/// Parses a trace CSV back into records.
pub fn read_trace_csv<R: std::io::Read>(input: R) -> Result<Vec<Record>> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers()?.clone();
    if headers.iter().ne(TRACE_HEADER.iter().copied()) {
        return crate::error::config_err(format!("unexpected trace header: {headers:?}"));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| crate::Error::Config(format!("bad number '{}' in trace", &rec[i])))
        };
        let int = |i: usize| -> Result<u64> {
            rec[i]
                .parse()
                .map_err(|_| crate::Error::Config(format!("bad integer '{}' in trace", &rec[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        out.push(Record {
            k: int(0)?,
            epoch: num(1)?,
            batch_size: int(2)?,
            lr: num(3)?,
            train_loss: opt(4)?,
            test_metric: opt(5)?,
            grad_comps_opt: int(6)?,
            grad_comps_eval: int(7)?,
        });
    }
    Ok(out)
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// JSON summary written next to each trace CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub status: RunStatus,
    pub seed: u64,
    pub sampling: super::Sampling,
    pub updates: u64,
    pub epochs: f64,
    pub grad_comps_opt: u64,
    pub grad_comps_eval: u64,
    pub initial_train_loss: f64,
    pub final_train_loss: Option<f64>,
    pub final_test_metric: Option<f64>,
    pub metric_kind: MetricKind,
    pub c: Option<f64>,
    pub crossover_update: Option<u64>,
}
